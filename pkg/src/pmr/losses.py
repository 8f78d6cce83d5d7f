"""Loss terms for autoencoder, classifier, adversarial and retargeting training.

Every function takes batched tensors (leading batch dims allowed) and returns a
scalar averaged over the batch. Sequences are (..., J, T, 3), embeddings
(..., C, L), probability vectors (..., Y), discriminator scores (...).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import torch

from .errors import InvalidConfig, LabelOutOfRange, MissingChainLength, MissingTerm, ShapeMismatch

SCORE_EPS = 1e-7
PROB_EPS = 1e-12
CE_CLAMP = 20.0


@dataclass
class LossWeights:
    alpha_rec: float = 2.0
    alpha_cross: float = 0.1
    alpha_ee: float = 1.0
    alpha_trip: float = 1.0
    alpha_smooth: float = 3.0
    alpha_latent: float = 10.0
    alpha_emb: float = 10.0
    gamma: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "gamma" and v < 0:
                raise InvalidConfig(f"{k} must be >= 0")
        if not self.gamma > 0:
            raise InvalidConfig("gamma must be > 0")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def _mse(a, b):
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def _safe_sqrt(x):
    # exact zero at x == 0 and no NaN gradient there
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def cross_entropy(probs, label):
    """-log p[label] with the probability clamped away from zero; batch mean."""
    label = torch.as_tensor(label, device=probs.device).long()
    n = probs.shape[-1]
    if label.numel() and (label.min() < 0 or label.max() >= n):
        raise LabelOutOfRange(f"label outside [0, {n})")
    label = label.expand(probs.shape[:-1])
    p = probs.gather(-1, label.unsqueeze(-1)).squeeze(-1)
    return -torch.log(p.clamp_min(PROB_EPS)).mean()


def _clamp_score(q):
    return q.clamp(SCORE_EPS, 1 - SCORE_EPS)


# ---------------------------------------------------------------- autoencoder

def reconstruction_loss(s, s_hat):
    return _mse(s_hat, s)


def smooth_loss(s, s_hat):
    """Mismatch of per-joint inter-frame displacement energy.

    For each joint, sum the squared displacements over the T-1 consecutive
    frame pairs for both sequences; sum the absolute per-joint differences,
    take the square root and divide by J*T.
    """
    _same_shape(s, s_hat)
    J, T = s.shape[-3], s.shape[-2]
    if T < 2:
        raise ShapeMismatch("smooth_loss needs at least two frames")

    def energy(x):
        return ((x[..., 1:, :] - x[..., :-1, :]) ** 2).sum(dim=(-1, -2))

    diff = (energy(s_hat) - energy(s)).abs().sum(-1)
    return (_safe_sqrt(diff) / (J * T)).mean()


def cross_reconstruction_loss(generated, target):
    return _mse(generated, target)


def end_effector_loss(s, s_hat, topology):
    """Squared mismatch of end-effector velocities scaled by chain length.

    Per effector: mean over the T-1 velocity frames of ||(v - v_hat) / h_e||^2,
    summed over effectors.
    """
    _same_shape(s, s_hat)
    total = s.new_zeros(s.shape[:-3])
    for e in topology.end_effectors:
        if e not in topology.chain_length:
            raise MissingChainLength(e)
        h = topology.chain_length[e]
        v = s[..., e, 1:, :] - s[..., e, :-1, :]
        v_hat = s_hat[..., e, 1:, :] - s_hat[..., e, :-1, :]
        total = total + (((v - v_hat) / h) ** 2).sum(-1).mean(-1)
    return total.mean()


# ---------------------------------------------------------------- classifiers

def classifier_losses(probs_from_motion, probs_from_privacy, label, head="M"):
    """L_M (head "M", label = action) or L_P (head "P", label = actor): CE on both embeddings."""
    if head not in ("M", "P"):
        raise ValueError(head)
    return cross_entropy(probs_from_motion, label) + cross_entropy(probs_from_privacy, label)


def quality_controller_loss(score_real, score_fake):
    """log Q(real) + log(1 - Q(fake)); the quality controller maximizes it."""
    return (torch.log(_clamp_score(score_real)) + torch.log(1 - _clamp_score(score_fake))).mean()


def cooperative_loss(m_on_motion, p_on_privacy, action, actor):
    return cross_entropy(m_on_motion, action) + cross_entropy(p_on_privacy, actor)


def adversarial_loss(m_on_privacy, p_on_motion, score_fake, action, actor):
    """-CE(M(E_P s), a) - CE(P(E_M s), p) - log(1 - Q(D(...))), CE terms clamped at CE_CLAMP.

    The caller is responsible for keeping classifier and quality-controller
    parameters out of the optimizer (or detached) when minimizing this.
    """
    ce_m = _clamped_ce(m_on_privacy, action)
    ce_p = _clamped_ce(p_on_motion, actor)
    q = -torch.log(1 - _clamp_score(score_fake)).mean()
    return -ce_m - ce_p + q


def _clamped_ce(probs, label):
    label = torch.as_tensor(label, device=probs.device).long()
    n = probs.shape[-1]
    if label.numel() and (label.min() < 0 or label.max() >= n):
        raise LabelOutOfRange(f"label outside [0, {n})")
    p = probs.gather(-1, label.expand(probs.shape[:-1]).unsqueeze(-1)).squeeze(-1)
    return (-torch.log(p.clamp_min(PROB_EPS))).clamp(max=CE_CLAMP).mean()


# ---------------------------------------------------------------- paired terms

def _sqdist(a, b):
    _same_shape(a, b)
    return ((a - b) ** 2).flatten(-2).sum(-1)


def triplet_loss(motion, privacy, gamma=1.0):
    """Hinge separation of same-action motion codes and same-actor privacy codes.

    ``motion`` and ``privacy`` are 4-tuples of embeddings in quadruple order
    (ap, a'p, ap', a'p'). Motion anchor ap: positive ap' (same action),
    negative a'p. Privacy anchor ap: positive a'p (same actor), negative ap'.
    """
    m_ap, m_a2p, m_ap2, _ = motion
    p_ap, p_a2p, p_ap2, _ = privacy
    hinge_m = torch.relu(_sqdist(m_ap, m_ap2) - _sqdist(m_ap, m_a2p) + gamma)
    hinge_p = torch.relu(_sqdist(p_ap, p_a2p) - _sqdist(p_ap, p_ap2) + gamma)
    return (hinge_m + hinge_p).mean()


def latent_consistency_loss(motion, privacy):
    m_ap, _, m_ap2, _ = motion
    p_ap, p_a2p, _, _ = privacy
    return _mse(m_ap, m_ap2) + _mse(p_ap, p_a2p)


# ---------------------------------------------------------------- totals

STAGE_TERMS = {
    "pretrain_ae": ("rec", "smooth"),
    "unpaired": ("rec", "smooth", "coop", "adv"),
    "paired": ("rec", "smooth", "coop", "adv", "cross", "ee", "trip", "latent"),
    "classifier": ("M", "P", "qc"),
}


@dataclass
class LossReport:
    terms: dict
    total: float

    def to_json(self, **extra):
        return json.dumps({**extra, **{k: float(v) for k, v in self.terms.items()}, "total": float(self.total)})


def weighted_total(terms, weights: LossWeights, stage):
    """Weighted objective for ``stage`` (tensors keep their graph)."""
    need = STAGE_TERMS[stage]
    missing = [k for k in need if k not in terms]
    if missing:
        raise MissingTerm(f"stage {stage} needs {missing}")
    w = weights
    if stage == "classifier":
        return terms["M"] + terms["P"] - terms["qc"]
    total = w.alpha_rec * terms["rec"] + w.alpha_smooth * terms["smooth"]
    if stage in ("unpaired", "paired"):
        total = total + w.alpha_emb * terms["coop"] + w.alpha_emb * terms["adv"]
    if stage == "paired":
        total = (total + w.alpha_cross * terms["cross"] + w.alpha_ee * terms["ee"]
                 + w.alpha_trip * terms["trip"] + w.alpha_latent * terms["latent"])
    return total


def total_losses(report_in, weights: LossWeights, stage) -> LossReport:
    total = weighted_total(report_in, weights, stage)
    terms = {k: float(v) for k, v in report_in.items()}
    return LossReport(terms, float(total))
