"""Scalar oracles and gradient cases for every loss term.

Oracles are written with plain Python/numpy loops, independent of the torch
implementations. Constants below were computed by hand and frozen.
"""
import math

import numpy as np
import torch

from pmr import losses as L
from pmr.topology import SkeletonTopology

EPS = L.SCORE_EPS
T64 = torch.float64


def t(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------- independent oracles

def oracle_mse(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def oracle_smooth(s, s_hat):
    J, T = len(s), len(s[0])
    total = 0.0
    for j in range(J):
        e, e_hat = 0.0, 0.0
        for k in range(T - 1):
            e += sum((s[j][k + 1][c] - s[j][k][c]) ** 2 for c in range(3))
            e_hat += sum((s_hat[j][k + 1][c] - s_hat[j][k][c]) ** 2 for c in range(3))
        total += abs(e_hat - e)
    return math.sqrt(total) / (J * T)


def oracle_ce(p, y):
    return -math.log(p[y])


def oracle_ee(s, s_hat, effectors, h):
    total = 0.0
    for e in effectors:
        T = len(s[e])
        acc = 0.0
        for k in range(T - 1):
            for c in range(3):
                v = s[e][k + 1][c] - s[e][k][c]
                vh = s_hat[e][k + 1][c] - s_hat[e][k][c]
                acc += ((v - vh) / h[e]) ** 2
        total += acc / (T - 1)
    return total


def oracle_sqdist(a, b):
    return sum((x - y) ** 2 for x, y in zip(np.ravel(a), np.ravel(b)))


def oracle_triplet(m, p, gamma):
    hm = max(0.0, oracle_sqdist(m[0], m[2]) - oracle_sqdist(m[0], m[1]) + gamma)
    hp = max(0.0, oracle_sqdist(p[0], p[1]) - oracle_sqdist(p[0], p[2]) + gamma)
    return hm + hp


def one_effector_topology(h=2.0):
    # joint 0 root, joint 1 its only child and the only end-effector
    return SkeletonTopology((0, 0), (1,), {1: h})


# ---------------------------------------------------------------- toy data

SMOOTH_S = [[[0, 0, 0], [1, 0, 0], [1, 1, 0]], [[0, 0, 0], [0, 0, 0], [0, 0, 2]]]
SMOOTH_S_HAT = [[[0, 0, 0], [2, 0, 0], [2, 0, 0]], [[1, 1, 1], [1, 1, 1], [1, 1, 1]]]
# energies: s -> (2, 4), s_hat -> (4, 0); |4-2| + |0-4| = 6
SMOOTH_TOY_VALUE = math.sqrt(6) / 6

EE_S = [[[0, 0, 0]] * 3, [[0, 0, 0], [2, 0, 0], [2, 2, 0]]]
EE_S_HAT = [[[0, 0, 0]] * 3, [[0, 0, 0], [1, 0, 0], [1, 4, 0]]]
# velocity residuals / h: (0.5, 0, 0), (0, -1, 0) -> squared 0.25, 1 -> mean 0.625
EE_TOY_VALUE = 0.625

TRIP_M = [[[0.0, 0.0]], [[1.0, 0.0]], [[0.0, 2.0]], [[5.0, 5.0]]]
TRIP_P = [[[1.0, 1.0]], [[1.0, 2.0]], [[3.0, 1.0]], [[7.0, 7.0]]]
# motion: d(ap, ap')=4, d(ap, a'p)=1; privacy: d(ap, a'p)=1, d(ap, ap')=4
TRIP_TOY = {1.0: 4.0 + 0.0, 3.5: 6.5 + 0.5}


def _rng_pair(seed, shape):
    r = np.random.default_rng(seed)
    return r.normal(size=shape), r.normal(size=shape)


def oracle_cases():
    """(id, computed, expected, exact) tuples; exact cases must match bit-for-bit."""
    cases = []
    add = lambda name, got, exp, exact=False: cases.append((name, float(got), float(exp), exact))

    # reconstruction
    s = np.random.default_rng(0).normal(size=(2, 2, 3))
    add("rec identity", L.reconstruction_loss(t(s), t(s)), 0.0, True)
    add("rec unit offset", L.reconstruction_loss(t(np.zeros((2, 2, 3))), t(np.ones((2, 2, 3)))), 1.0, True)
    a, b = _rng_pair(1, (2, 2, 3))
    add("rec toy", L.reconstruction_loss(t(a), t(b)), oracle_mse(a, b))

    # smooth
    add("smooth identity", L.smooth_loss(t(s), t(s)), 0.0, True)
    st = np.repeat(np.random.default_rng(2).normal(size=(2, 1, 3)), 4, axis=1)
    add("smooth static offset", L.smooth_loss(t(st), t(st + 3.0)), 0.0, True)
    add("smooth toy", L.smooth_loss(t(SMOOTH_S), t(SMOOTH_S_HAT)), SMOOTH_TOY_VALUE)
    a, b = _rng_pair(3, (3, 5, 3))
    add("smooth random", L.smooth_loss(t(a), t(b)), oracle_smooth(a.tolist(), b.tolist()))

    # classifiers
    one = t([0.0, 1.0, 0.0])
    add("classifier one-hot", L.classifier_losses(one, one, 1, "M"), 0.0, True)
    for y in (3, 6):
        u = t(np.full(y, 1.0 / y))
        add(f"classifier uniform Y={y}", L.classifier_losses(u, u, 0, "P"), 2 * math.log(y))
    pm, pp = [0.2, 0.5, 0.3], [0.6, 0.3, 0.1]
    add("classifier toy", L.classifier_losses(t(pm), t(pp), 1, "M"), -math.log(0.5) - math.log(0.3))

    # quality controller
    add("qc optimum", L.quality_controller_loss(t(1 - EPS), t(EPS)), 2 * math.log(1 - EPS))
    add("qc chance", L.quality_controller_loss(t(0.5), t(0.5)), 2 * math.log(0.5))
    add("qc toy", L.quality_controller_loss(t(0.9), t(0.2)), math.log(0.9) + math.log(0.8))

    # cooperative
    oa, op = t([1.0, 0, 0, 0, 0, 0]), t([0, 0, 1.0, 0])
    add("coop one-hot", L.cooperative_loss(oa, op, 0, 2), 0.0, True)
    add("coop uniform", L.cooperative_loss(t(np.full(6, 1 / 6)), t(np.full(4, 0.25)), 3, 1),
        math.log(6) + math.log(4))
    add("coop toy", L.cooperative_loss(t([0.7, 0.2, 0.1]), t([0.25, 0.25, 0.5]), 0, 2),
        oracle_ce([0.7, 0.2, 0.1], 0) + oracle_ce([0.25, 0.25, 0.5], 2))

    # adversarial
    add("adv uniform, fooled Q", L.adversarial_loss(t(np.full(6, 1 / 6)), t(np.full(4, 0.25)), t(1 - EPS), 0, 0),
        -math.log(6) - math.log(4) - math.log(EPS))
    add("adv one-hot", L.adversarial_loss(oa, op, t(0.5), 0, 2), -math.log(0.5))
    add("adv toy", L.adversarial_loss(t([0.1, 0.6, 0.3]), t([0.5, 0.4, 0.1]), t(0.25), 2, 0),
        -oracle_ce([0.1, 0.6, 0.3], 2) - oracle_ce([0.5, 0.4, 0.1], 0) - math.log(0.75))

    # cross reconstruction
    add("cross identity", L.cross_reconstruction_loss(t(s), t(s)), 0.0, True)
    add("cross unit offset", L.cross_reconstruction_loss(t(s + 1.0), t(s)), 1.0)
    a, b = _rng_pair(4, (2, 3, 3))
    add("cross toy", L.cross_reconstruction_loss(t(a), t(b)), oracle_mse(a, b))

    # triplet
    e = [[[0.0, 0.0]], [[3.0, 0.0]], [[0.0, 0.0]], [[1.0, 1.0]]]
    add("triplet margin satisfied", L.triplet_loss(tuple(map(t, e)), tuple(t(x) for x in [e[0], e[2], e[1], e[3]]), 1.0),
        0.0, True)
    same = [[[0.5, 1.0]], [[2.0, -1.0]], [[2.0, -1.0]], [[0.0, 0.0]]]
    for g in (1.0, 2.5):
        add(f"triplet pos=neg gamma={g}", L.triplet_loss(tuple(map(t, same)), tuple(map(t, same)), g), 2 * g)
    for g, v in TRIP_TOY.items():
        add(f"triplet toy gamma={g}", L.triplet_loss(tuple(map(t, TRIP_M)), tuple(map(t, TRIP_P)), g), v)
        assert v == oracle_triplet(TRIP_M, TRIP_P, g)
    r = np.random.default_rng(5)
    m4, p4 = r.normal(size=(4, 3, 2)), r.normal(size=(4, 3, 2))
    add("triplet random", L.triplet_loss(tuple(map(t, m4)), tuple(map(t, p4)), 1.3), oracle_triplet(m4, p4, 1.3))

    # latent consistency
    z = [t(np.ones((2, 3)))] * 4
    add("latent identical", L.latent_consistency_loss(z, z), 0.0, True)
    add("latent privacy offset", L.latent_consistency_loss(z, [z[0], z[0] + 1, z[0], z[0]]), 1.0, True)
    lm = [t([[1.0, 2.0]]), t([[9.0, 9.0]]), t([[2.0, 4.0]]), t([[9.0, 9.0]])]
    lp = [t([[0.0, 1.0]]), t([[3.0, 1.0]]), t([[8.0, 8.0]]), t([[8.0, 8.0]])]
    add("latent toy", L.latent_consistency_loss(lm, lp), 2.5 + 4.5)

    # end effectors
    topo = one_effector_topology(2.0)
    add("ee identity", L.end_effector_loss(t(EE_S), t(EE_S), topo), 0.0, True)
    add("ee static", L.end_effector_loss(t(np.ones((2, 3, 3))), t(np.zeros((2, 3, 3))), topo), 0.0, True)
    add("ee toy", L.end_effector_loss(t(EE_S), t(EE_S_HAT), topo), EE_TOY_VALUE)
    add("ee toy oracle", EE_TOY_VALUE, oracle_ee(EE_S, EE_S_HAT, (1,), {1: 2.0}))
    a, b = _rng_pair(6, (2, 4, 3))
    add("ee random", L.end_effector_loss(t(a), t(b), one_effector_topology(0.7)), oracle_ee(a, b, (1,), {1: 0.7}))

    # weighted totals
    w = L.LossWeights()
    ones = {k: 1.0 for k in L.STAGE_TERMS["paired"]}
    add("total paired all ones", L.total_losses(ones, w, "paired").total, 37.1)
    add("total paired all zero", L.total_losses({k: 0.0 for k in ones}, w, "paired").total, 0.0, True)
    terms = {"rec": 0.3, "smooth": 0.7, "coop": 5.0, "adv": -2.0}
    w0 = L.LossWeights(alpha_emb=0.0)
    add("total alpha_emb=0", L.total_losses(terms, w0, "unpaired").total, L.total_losses(terms, w0, "pretrain_ae").total)
    add("total classifier", L.total_losses({"M": 1.5, "P": 0.5, "qc": -1.0}, w, "classifier").total, 3.0)
    return cases


# ---------------------------------------------------------------- gradient cases

def _probs(r, *shape):
    p = r.uniform(0.2, 1.0, size=shape)
    return p / p.sum(-1, keepdims=True)


def gradient_cases():
    """(id, fn, inputs) with float64 leaf inputs; fn(*inputs) is a scalar loss."""
    r = np.random.default_rng(7)
    seq = lambda: r.normal(size=(2, 3, 4, 3))
    emb = lambda: r.normal(size=(2, 3, 4))
    topo = SkeletonTopology((0, 0, 1), (2,), {2: 0.8})
    act, actor = torch.tensor([1, 4]), torch.tensor([2, 0])
    m4, p4 = [emb() for _ in range(4)], [emb() for _ in range(4)]
    return [
        ("L_rec", L.reconstruction_loss, [seq(), seq()]),
        ("L_smooth", L.smooth_loss, [seq(), seq()]),
        ("L_M", lambda a, b: L.classifier_losses(a, b, act, "M"), [_probs(r, 2, 6), _probs(r, 2, 6)]),
        ("L_P", lambda a, b: L.classifier_losses(a, b, actor, "P"), [_probs(r, 2, 4), _probs(r, 2, 4)]),
        ("L_qc", L.quality_controller_loss, [r.uniform(0.2, 0.8, 2), r.uniform(0.2, 0.8, 2)]),
        ("L_coop", lambda a, b: L.cooperative_loss(a, b, act, actor), [_probs(r, 2, 6), _probs(r, 2, 4)]),
        ("L_adv", lambda a, b, q: L.adversarial_loss(a, b, q, act, actor),
         [_probs(r, 2, 6), _probs(r, 2, 4), r.uniform(0.2, 0.8, 2)]),
        ("L_cross", L.cross_reconstruction_loss, [seq(), seq()]),
        ("L_ee", lambda a, b: L.end_effector_loss(a, b, topo), [seq(), seq()]),
        # large margin keeps both hinges active, away from the kink
        ("L_trip", lambda *z: L.triplet_loss(z[:4], z[4:], 200.0), m4 + p4),
        ("L_latent", lambda *z: L.latent_consistency_loss(z[:4], z[4:]), [emb() for _ in range(8)]),
    ]


def finite_difference_error(fn, inputs, h=1e-3):
    """Norm-relative error between autograd and central differences over all inputs."""
    xs = [torch.tensor(x, dtype=T64, requires_grad=True) for x in inputs]
    out = fn(*xs)
    # unused inputs (the a'p' member in the triplet) have a zero gradient
    analytic = [torch.zeros_like(x) if g is None else g
                for x, g in zip(xs, torch.autograd.grad(out, xs, allow_unused=True))]
    num, ana = [], []
    with torch.no_grad():
        for x, g in zip(xs, analytic):
            flat = x.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn(*xs).item()
                flat[i] = orig - h
                down = fn(*xs).item()
                flat[i] = orig
                fd[i] = (up - down) / (2 * h)
            num.append(fd)
            ana.append(g.reshape(-1))
    num, ana = torch.cat(num), torch.cat(ana)
    scale = max(num.norm().item(), ana.norm().item(), 1e-12)
    return (num - ana).norm().item() / scale
