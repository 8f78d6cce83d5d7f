from dataclasses import replace

import numpy as np
import pytest

from pmr.anonymizer import AuditRecord
from pmr.dataset import CorpusEntry, CorpusIndex, SkeletonSequence, generate_synthetic
from pmr.errors import IndexOutOfRange, InsufficientData, LabelMismatch, ManifestMismatch
from pmr.evaluation import (PAPER_GRID, EvalReport, attack, comparison_bounds, evaluate, export_embeddings,
                            load_embeddings, predict, read_sweep_csv, render_frames,
                            shuffled_label_check, silhouettes, sweep_spearman, topk_for, tradeoff_sweep,
                            train_attacker, utility_mse, write_sweep_csv)
from pmr.network import NetworkConfig, init_parameters


class StubModel:
    """Duck-typed classifier with fixed scores."""

    def __init__(self, labels, target="actor", fn=None):
        self.labels, self.target, self.heldout = list(labels), target, {}
        self.fn = fn

    def scores(self, seqs):
        if self.fn is None:
            return np.full((len(seqs), len(self.labels)), 1.0 / len(self.labels))
        return np.stack([self.fn(s) for s in seqs])


def _oracle_model(labels):
    return StubModel(labels, fn=lambda s: np.eye(len(labels))[labels.index(s.actor_id)])


@pytest.mark.parametrize("p,k", [(2, 1), (3, 2), (4, 2), (5, 5), (40, 5)])
def test_topk_rule(p, k):
    assert topk_for(p) == k


def test_uniform_classifier_hits_chance(corpus):
    ev = corpus.subset("eval")
    labels = ev.actors
    top1, topk = attack(StubModel(labels), ev)
    assert top1 == pytest.approx(1 / len(labels))
    assert topk == pytest.approx(topk_for(len(labels)) / len(labels))


def test_perfect_classifier_and_shuffled_labels(corpus):
    ev = corpus.subset("eval")
    model = _oracle_model(ev.actors)
    assert attack(model, ev) == (1.0, 1.0)
    mean, chance = shuffled_label_check(model, ev, rng_seed=0, repeats=200)
    assert chance == 0.25 and abs(mean - chance) < 0.05


def test_label_mismatch(corpus):
    with pytest.raises(LabelMismatch):
        predict(StubModel([1, 2]), corpus.subset("eval"))


def test_one_actor_attacker():
    one = generate_synthetic(2, 2, 2).filter(lambda e: e.actor == 1)
    with pytest.raises(InsufficientData):
        train_attacker(one, epochs=1)


def test_attacker_training_deterministic(corpus):
    tr = corpus.subset("train")
    a = train_attacker(tr, epochs=2)
    b = train_attacker(tr, epochs=2)
    seqs = corpus.subset("eval").sequences()[:4]
    assert np.array_equal(a.scores(seqs), b.scores(seqs))


# ---------------------------------------------------------------- utility

def _toy_corpora(offset):
    z = lambda v: np.full((25, 75, 3), v, dtype=float)
    orig = CorpusIndex([CorpusEntry("o1", 1, 1, 1, "eval"), CorpusEntry("o2", 2, 1, 1, "eval")],
                       cache={"o1": SkeletonSequence(z(0.0)), "o2": SkeletonSequence(z(2.0))})
    anon = CorpusIndex([CorpusEntry("x1", 1, 1, 1, "eval")], cache={"x1": SkeletonSequence(z(2.0 + offset))})
    audit = [AuditRecord("o1", "x1", "o2", 2, 1, 1, 1)]
    return orig, anon, audit


def test_utility_mse_examples():
    orig, anon, audit = _toy_corpora(0.0)
    assert utility_mse(orig, anon, audit)[0] == 0.0          # matches the dummy actor's recording
    assert utility_mse(orig, anon, audit, "original")[0] == 4.0
    orig, anon, audit = _toy_corpora(1.0)
    assert utility_mse(orig, anon, audit)[0] == 1.0


def test_utility_mse_fallback_and_mismatch():
    orig, anon, audit = _toy_corpora(0.0)
    missing = [replace(audit[0], dummy_actor=9)]
    mse, _, fallbacks = utility_mse(orig, anon, missing)
    assert (mse, fallbacks) == (4.0, 1)
    with pytest.raises(ManifestMismatch):
        utility_mse(orig, anon, [replace(audit[0], output="elsewhere")])


def test_report_independent_of_output_location():
    def located(out):
        orig, anon, audit = _toy_corpora(0.5)
        e = anon.entries[0]
        moved = CorpusIndex([replace(e, source=out)], cache={out: anon.load(e)})
        return orig, moved, [replace(audit[0], output=out)]

    model = StubModel([1, 2], fn=lambda s: np.array([0.3, 0.7]))
    action = StubModel([1], target="action", fn=lambda s: np.array([1.0]))
    a = evaluate(*located("/run_a/x1.skeleton"), model, action, "constant")
    b = evaluate(*located("/run_b/x1.skeleton"), model, action, "constant")
    assert a.to_json() == b.to_json()
    assert list(a.records["mse_retarget"]) == ["o1"] and a.records["reid"][0]["source"] == "o1"


def _report(**kw):
    base = dict(utility_mse=0.1, utility_mse_original=0.2, reid_top1=0.25, reid_topk=0.5, topk=2,
                action_top1=0.9, policy="constant")
    base.update(kw)
    return EvalReport(**base)


@pytest.mark.parametrize("kw", [{"reid_top1": 1.5}, {"action_top1": -0.1}, {"reid_top1": 0.6, "reid_topk": 0.5}])
def test_report_validation(kw):
    with pytest.raises(ValueError):
        _report(**kw)


def test_report_json_round_trip(tmp_path):
    r = _report(records={"mse_retarget": {"a": 0.1}})
    assert EvalReport.from_json(r.save(tmp_path / "r.json").read_text()) == r
    assert r.reid_top5 == r.reid_topk


# ---------------------------------------------------------------- sweep

def test_sweep_rows_and_csv(tmp_path):
    def run(alpha):
        return {p: _report(policy=p, reid_top1=0.5 / (1 + alpha), reid_topk=0.6) for p in ("constant", "random")}

    rows = tradeoff_sweep(PAPER_GRID, run)
    assert sum(r["policy"] == "constant" for r in rows) == 6 == sum(r["policy"] == "random" for r in rows)
    assert read_sweep_csv(write_sweep_csv(rows, tmp_path / "s.csv")) == rows
    assert sweep_spearman(rows, "constant") == pytest.approx(-1.0)


def test_spearman_ties_and_constant():
    rows = [{"alpha_emb": a, "policy": "c", "top1": v} for a, v in [(0, 0.5), (1, 0.5), (10, 0.5)]]
    assert sweep_spearman(rows, "c") == 0.0
    with pytest.raises(InsufficientData):
        sweep_spearman(rows[:1], "c")


# ---------------------------------------------------------------- embeddings

def test_embedding_export_shape(corpus, tmp_path):
    net = init_parameters(NetworkConfig(), 0)
    net.eval()
    ev = corpus.subset("eval").filter(lambda e: e.action <= 2)
    path = export_embeddings(net, ev, tmp_path / "emb.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert len(header) == 2 * 256 * 32 + 2
    m, p, actions, actors = load_embeddings(path)
    assert m.shape == p.shape == (len(ev), 256 * 32)
    assert list(actions) == [e.action for e in ev] and list(actors) == [e.actor for e in ev]


def test_silhouettes_orientation():
    r = np.random.default_rng(0)
    actions, actors = np.repeat([0, 1, 2], 8), np.tile(np.repeat([0, 1], 4), 3)
    motion = actions[:, None] * 5.0 + r.normal(size=(24, 4))
    privacy = actors[:, None] * 5.0 + r.normal(size=(24, 4))
    s = silhouettes(motion, privacy, actions, actors)
    assert s["motion_by_action"] > s["motion_by_actor"]
    assert s["privacy_by_actor"] > s["privacy_by_action"]


# ---------------------------------------------------------------- rendering

def test_render_counts_and_determinism(corpus, tmp_path):
    seq = corpus.load(corpus.entries[0])
    a = render_frames(seq, [0, 10, 20, 74], tmp_path / "a")
    b = render_frames(seq, [0, 10, 20, 74], tmp_path / "b")
    assert len(a) == 4 and all(p.exists() for p in a)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert len({p.read_bytes() for p in a}) == 4


def test_render_static_sequence(corpus, tmp_path):
    seq = corpus.load(corpus.entries[0])
    static = replace(seq, joints=np.repeat(seq.joints[:, :1], 75, axis=1))
    paths = render_frames(static, [0, 30, 60], tmp_path)
    assert len({p.read_bytes() for p in paths}) == 1


def test_render_bad_index(corpus, tmp_path):
    with pytest.raises(IndexOutOfRange):
        render_frames(corpus.load(corpus.entries[0]), [75], tmp_path)


def test_comparison_bounds_cover_all():
    a, b = np.zeros((25, 3, 3)), np.ones((25, 3, 3)) * 2
    assert comparison_bounds([a, b], margin=0.0) == (0.0, 2.0, 0.0, 2.0)
