"""Utility and re-identification metrics, trade-off sweeps, embedding export and frame rendering."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .anonymizer import AuditRecord
from .dataset import CorpusIndex, SkeletonSequence
from .errors import IndexOutOfRange, InsufficientData, LabelMismatch, ManifestMismatch
from .topology import kinect_v2


def topk_for(num_classes):
    """Rank cutoff reported as "top-5"; with fewer than 5 classes it is ceil(P/2)."""
    return 5 if num_classes >= 5 else math.ceil(num_classes / 2)


# ---------------------------------------------------------------- offline classifiers

class TemporalConvNet(nn.Module):
    """Compact 1-D temporal CNN over flattened joint coordinates."""

    def __init__(self, in_channels, num_classes, width=64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(in_channels, width, 5, padding=2), nn.ReLU(),
            nn.Conv1d(width, width, 5, padding=2, stride=2), nn.ReLU(),
            nn.Conv1d(width, width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool1d(1), nn.Flatten(),
        )
        self.head = nn.Linear(width, num_classes)

    def forward(self, x):
        return self.head(self.body(x))


@dataclass
class AttackModel:
    """A trained sequence classifier plus the label vocabulary and input statistics."""

    net: TemporalConvNet
    labels: list
    target: str              # "actor" or "action"
    mean: torch.Tensor
    std: torch.Tensor
    heldout: dict = field(default_factory=dict)

    def _features(self, joints):
        x = torch.as_tensor(np.asarray(joints), dtype=torch.float32)
        x = (x - self.mean) / self.std                   # (B, J, T, 3)
        return x.permute(0, 1, 3, 2).flatten(1, 2)        # (B, J*3, T)

    @torch.no_grad()
    def scores(self, seqs):
        self.net.eval()
        return torch.softmax(self.net(self._features(np.stack([s.joints for s in seqs]))), 1).numpy()


def _label_of(entry, target):
    return entry.actor if target == "actor" else entry.action


def _yaw(x, angles):
    """Rotate (B, J, T, 3) batches about the vertical axis by per-sample angles."""
    c, s = torch.cos(angles), torch.sin(angles)
    rx = c[:, None, None] * x[..., 0] + s[:, None, None] * x[..., 2]
    rz = -s[:, None, None] * x[..., 0] + c[:, None, None] * x[..., 2]
    return torch.stack([rx, x[..., 1], rz], dim=-1)


def train_classifier(corpus: CorpusIndex, target="actor", epochs=60, batch_size=16, lr=2e-3,
                     rng_seed=0, heldout: CorpusIndex | None = None, max_yaw_deg=15.0,
                     scale_jitter=0.0) -> AttackModel:
    """Fit a TemporalConvNet to predict ``target`` from original recordings.

    Each batch is rotated by a random yaw in [-max_yaw_deg, max_yaw_deg] so the
    classifier does not key on the recording camera. ``scale_jitter`` > 0 also
    rescales each sample by a factor in [1 - j, 1 + j], which removes body size
    as a cue (wanted for action recognition, not for re-identification).
    """
    labels = sorted({_label_of(e, target) for e in corpus.entries})
    if len(labels) < 2:
        raise InsufficientData(f"need at least 2 distinct {target} labels, got {len(labels)}")
    seqs = corpus.sequences()
    x = torch.from_numpy(np.stack([s.joints for s in seqs])).float()
    y = torch.tensor([labels.index(_label_of(e, target)) for e in corpus.entries])
    gen = torch.Generator().manual_seed(rng_seed)
    torch.manual_seed(rng_seed)
    net = TemporalConvNet(x.shape[1] * 3, len(labels))
    model = AttackModel(net, labels, target, x.mean(dim=(0, 2), keepdim=True)[0],
                        x.std(dim=(0, 2), keepdim=True)[0].clamp_min(1e-3))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    max_yaw = math.radians(max_yaw_deg)
    net.train()
    for _ in range(epochs):
        order = torch.randperm(len(y), generator=gen)
        for i in range(0, len(y), batch_size):
            b = order[i:i + batch_size]
            angles = (torch.rand(len(b), generator=gen) * 2 - 1) * max_yaw
            scale = 1 + (torch.rand(len(b), generator=gen) * 2 - 1) * scale_jitter
            xb = _yaw(x[b], angles) * scale[:, None, None, None]
            loss = nn.functional.cross_entropy(net(model._features(xb)), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    if heldout is not None and len(heldout):
        top1, topk = attack(model, heldout)
        model.heldout = {"top1": top1, "topk": topk, "k": topk_for(len(labels))}
    return model


def train_attacker(train_corpus: CorpusIndex, **kw) -> AttackModel:
    return train_classifier(train_corpus, "actor", **kw)


def train_action_classifier(train_corpus: CorpusIndex, **kw) -> AttackModel:
    kw.setdefault("scale_jitter", 0.15)
    return train_classifier(train_corpus, "action", **kw)


@dataclass(frozen=True)
class Prediction:
    source: str
    label: int
    predicted: int
    rank: int                # 1-based rank of the true label


def predict(model: AttackModel, corpus: CorpusIndex) -> list[Prediction]:
    """Per-sequence records from which every accuracy is recomputed."""
    truth = [_label_of(e, model.target) for e in corpus.entries]
    unknown = sorted(set(truth) - set(model.labels))
    if unknown:
        raise LabelMismatch(f"{model.target} labels {unknown} unknown to the classifier")
    if not corpus.entries:
        return []
    probs = model.scores(corpus.sequences())
    out = []
    for e, t, p in zip(corpus.entries, truth, probs):
        order = np.argsort(-p, kind="stable")
        rank = int(np.nonzero(order == model.labels.index(t))[0][0]) + 1
        out.append(Prediction(e.source, t, model.labels[int(order[0])], rank))
    return out


def accuracy(records, k=1):
    if not records:
        return 0.0
    return sum(r.rank <= k for r in records) / len(records)


def per_class_accuracy(records):
    by = {}
    for r in records:
        by.setdefault(r.label, []).append(r.rank == 1)
    return {str(k): sum(v) / len(v) for k, v in sorted(by.items())}


def attack(model: AttackModel, corpus: CorpusIndex):
    """(top-1, top-k) with k from :func:`topk_for`."""
    rec = predict(model, corpus)
    return accuracy(rec, 1), accuracy(rec, topk_for(len(model.labels)))


def shuffled_label_check(model: AttackModel, corpus: CorpusIndex, rng_seed=0, repeats=50):
    """Mean top-1 after permuting the corpus labels; should sit near 1/P."""
    rec = predict(model, corpus)
    pred = np.array([r.predicted for r in rec])
    labels = np.array([r.label for r in rec])
    rng = np.random.default_rng(rng_seed)
    hits = [np.mean(pred == rng.permutation(labels)) for _ in range(repeats)]
    return float(np.mean(hits)), 1.0 / len(model.labels)


# ---------------------------------------------------------------- utility

def utility_mse(originals: CorpusIndex, anonymized: CorpusIndex, audit: list[AuditRecord],
                convention="retarget"):
    """Mean per-sequence MSE of anonymized outputs against their targets.

    ``retarget`` compares each output with the real recording of the dummy actor
    performing the input's action under the same camera, falling back to the
    original where that recording does not exist. ``original`` always compares
    with the input. Returns (mse, per_sequence dict, number of fallbacks).
    """
    if convention not in ("retarget", "original"):
        raise ValueError(f"unknown convention {convention!r}")
    by_output = {r.output: r for r in audit}
    by_source = {e.source: e for e in originals.entries}
    by_cell = {}
    for e in originals.entries:
        by_cell.setdefault((e.actor, e.action, e.camera), e)
    per_seq, fallbacks = {}, 0
    for e in anonymized.entries:
        rec = by_output.get(e.source)
        if rec is None or rec.original not in by_source:
            raise ManifestMismatch(f"{e.source} has no aligned original")
        target = by_source[rec.original]
        if convention == "retarget":
            cell = by_cell.get((rec.dummy_actor, rec.action, rec.camera))
            if cell is None:
                fallbacks += 1
            else:
                target = cell
        a, b = anonymized.load(e).joints, originals.load(target).joints
        if a.shape != b.shape:
            raise ManifestMismatch(f"{e.source}: shape {a.shape} vs {b.shape}")
        per_seq[e.source] = float(np.mean((a - b) ** 2))
    mse = float(np.mean(list(per_seq.values()))) if per_seq else 0.0
    return mse, per_seq, fallbacks


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    utility_mse: float
    utility_mse_original: float
    reid_top1: float
    reid_topk: float
    topk: int
    action_top1: float
    policy: str
    attacker_heldout: dict = field(default_factory=dict)
    action_heldout: dict = field(default_factory=dict)
    reid_per_actor: dict = field(default_factory=dict)
    action_per_class: dict = field(default_factory=dict)
    mse_convention: str = "retarget"
    mse_fallbacks: int = 0
    records: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("reid_top1", "reid_topk", "action_top1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.reid_top1 > self.reid_topk:
            raise ValueError("top-1 exceeds top-k")

    @property
    def reid_top5(self):
        return self.reid_topk

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")
        return Path(path)


def evaluate(originals: CorpusIndex, anonymized: CorpusIndex, audit, attacker: AttackModel,
             action_model: AttackModel, policy_name: str) -> EvalReport:
    """Score an anonymized corpus for utility and re-identification risk."""
    mse, per_seq, fallbacks = utility_mse(originals, anonymized, audit, "retarget")
    mse_orig, per_seq_orig, _ = utility_mse(originals, anonymized, audit, "original")
    reid = predict(attacker, anonymized)
    act = predict(action_model, anonymized)
    k = topk_for(len(attacker.labels))
    # keyed by input id so a report does not depend on where the outputs were written
    to_input = {r.output: r.original for r in audit}
    records = {
        "mse_retarget": {to_input[s]: v for s, v in per_seq.items()},
        "mse_original": {to_input[s]: v for s, v in per_seq_orig.items()},
        "reid": [asdict(replace(r, source=to_input[r.source])) for r in reid],
        "action": [asdict(replace(r, source=to_input[r.source])) for r in act],
    }
    return EvalReport(mse, mse_orig, accuracy(reid, 1), accuracy(reid, k), k, accuracy(act, 1),
                      policy_name, dict(attacker.heldout), dict(action_model.heldout),
                      per_class_accuracy(reid), per_class_accuracy(act), "retarget", fallbacks, records)


def report_from_records(report: EvalReport) -> EvalReport:
    """Rebuild the headline numbers purely from the persisted per-sequence records."""
    reid = [Prediction(**r) for r in report.records["reid"]]
    act = [Prediction(**r) for r in report.records["action"]]
    mse = report.records["mse_retarget"]
    mse_o = report.records["mse_original"]
    return EvalReport(float(np.mean(list(mse.values()))) if mse else 0.0,
                      float(np.mean(list(mse_o.values()))) if mse_o else 0.0,
                      accuracy(reid, 1), accuracy(reid, report.topk), report.topk, accuracy(act, 1),
                      report.policy, report.attacker_heldout, report.action_heldout,
                      per_class_accuracy(reid), per_class_accuracy(act), report.mse_convention,
                      report.mse_fallbacks, report.records)


# ---------------------------------------------------------------- trade-off sweep

SWEEP_COLUMNS = ("alpha_emb", "policy", "mse", "top1", "topk", "k")
PAPER_GRID = (0.0, 1.0, 5.0, 10.0, 20.0, 40.0)


def tradeoff_sweep(alpha_values, run_pipeline):
    """Rows for each alpha; ``run_pipeline(alpha)`` returns {policy name: EvalReport}."""
    rows = []
    for alpha in alpha_values:
        for policy, rep in sorted(run_pipeline(alpha).items()):
            rows.append({"alpha_emb": float(alpha), "policy": policy, "mse": rep.utility_mse,
                         "top1": rep.reid_top1, "topk": rep.reid_topk, "k": rep.topk})
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return Path(path)


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        return [{"alpha_emb": float(r["alpha_emb"]), "policy": r["policy"], "mse": float(r["mse"]),
                 "top1": float(r["top1"]), "topk": float(r["topk"]), "k": int(r["k"])}
                for r in csv.DictReader(fh)]


def sweep_spearman(rows, policy="constant", column="top1"):
    """Spearman rank correlation of ``column`` against alpha for one policy.

    A constant column carries no ordering information and is reported as 0.
    """
    from scipy.stats import spearmanr

    sel = sorted((r["alpha_emb"], r[column]) for r in rows if r["policy"] == policy)
    if len(sel) < 2:
        raise InsufficientData("need at least two sweep points")
    alphas, vals = zip(*sel)
    if len(set(vals)) == 1:
        return 0.0
    return float(spearmanr(alphas, vals).statistic)


# ---------------------------------------------------------------- embeddings

@torch.no_grad()
def embed(net, corpus: CorpusIndex, batch_size=16):
    """Flattened (motion, privacy) embeddings plus action and actor labels."""
    dtype = next(net.parameters()).dtype
    seqs = corpus.sequences()
    m_all, p_all = [], []
    for i in range(0, len(seqs), batch_size):
        x = torch.from_numpy(np.stack([s.joints for s in seqs[i:i + batch_size]])).to(dtype)
        m, p = net.encode(x)
        m_all.append(m.flatten(1).double().numpy())
        p_all.append(p.flatten(1).double().numpy())
    actions = np.array([e.action for e in corpus.entries])
    actors = np.array([e.actor for e in corpus.entries])
    return np.concatenate(m_all), np.concatenate(p_all), actions, actors


def export_embeddings(net, corpus: CorpusIndex, out_path):
    """CSV with columns action, actor, m0..m{D-1}, p0..p{D-1}; one row per sequence."""
    m, p, actions, actors = embed(net, corpus)
    header = ["action", "actor"] + [f"m{i}" for i in range(m.shape[1])] + [f"p{i}" for i in range(p.shape[1])]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(actions)):
            w.writerow([int(actions[i]), int(actors[i])] + [repr(float(v)) for v in m[i]]
                       + [repr(float(v)) for v in p[i]])
    return Path(out_path)


def load_embeddings(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = np.array([[float(v) for v in row] for row in r])
    d = (len(header) - 2) // 2
    return rows[:, 2:2 + d], rows[:, 2 + d:], rows[:, 0].astype(int), rows[:, 1].astype(int)


def silhouettes(motion, privacy, actions, actors):
    """Silhouette scores of both embedding spaces under both groupings."""
    from sklearn.metrics import silhouette_score

    return {
        "motion_by_action": float(silhouette_score(motion, actions)),
        "motion_by_actor": float(silhouette_score(motion, actors)),
        "privacy_by_action": float(silhouette_score(privacy, actions)),
        "privacy_by_actor": float(silhouette_score(privacy, actors)),
    }


# ---------------------------------------------------------------- rendering

def comparison_bounds(seqs, margin=0.1):
    """Shared (xmin, xmax, ymin, ymax) covering every frame of ``seqs``."""
    pts = np.concatenate([np.asarray(getattr(s, "joints", s)).reshape(-1, 3) for s in seqs])
    lo, hi = pts[:, :2].min(0) - margin, pts[:, :2].max(0) + margin
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def render_frames(seq: SkeletonSequence, frame_indices, out_dir, bounds=None, topology=None, prefix=None):
    """Front-view orthographic PNG per requested frame; returns the file paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    topology = topology or kinect_v2()
    T = seq.joints.shape[1]
    for f in frame_indices:
        if not -T <= f < T:
            raise IndexOutOfRange(f"frame {f} outside 0..{T - 1}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bounds = bounds or comparison_bounds([seq])
    prefix = prefix or seq.name
    paths = []
    for f in frame_indices:
        pose = seq.joints[:, f]
        fig, ax = plt.subplots(figsize=(3, 4), dpi=80)
        for j, p in topology.bones():
            ax.plot([pose[j, 0], pose[p, 0]], [pose[j, 1], pose[p, 1]], color="tab:blue", lw=2)
        ax.scatter(pose[:, 0], pose[:, 1], s=8, color="tab:red", zorder=3)
        ax.set_xlim(bounds[0], bounds[1])
        ax.set_ylim(bounds[2], bounds[3])
        ax.set_aspect("equal")
        # the frame index lives in the file name so a static pose renders identically
        ax.set_title(prefix, fontsize=8)
        path = out_dir / f"{prefix}_f{f % T:03d}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
