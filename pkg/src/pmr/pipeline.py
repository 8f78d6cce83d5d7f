"""End-to-end helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .anonymizer import anonymize_corpus, constant_policy, random_policy, read_audit
from .dataset import CorpusIndex
from .evaluation import evaluate, train_action_classifier, train_attacker
from .training import Trainer, TrainConfig, load_checkpoint

# stages whose objective does not involve alpha_emb
ALPHA_FREE_STAGES = ("pretrain_ae", "pretrain_cls")


def train(cfg: TrainConfig, index: CorpusIndex, out_dir, topology=None, resume=False, stages=None,
          net_cfg=None):
    """Run the plan on the train split, evaluating on the eval split; returns the Trainer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = None
    if resume and (out_dir / "latest.pt").exists():
        state = load_checkpoint(out_dir / "latest.pt", cfg)
    tr = Trainer(cfg, index.subset("train"), topology=topology, eval_index=index.subset("eval"),
                 state=state, log_path=out_dir / "train_log.jsonl", checkpoint_dir=out_dir,
                 net_cfg=net_cfg)
    tr.run(stages=stages)
    return tr


def alpha_free_prefix(plan):
    """Number of leading plan stages that do not depend on alpha_emb."""
    n = 0
    while n < len(plan) and plan[n].stage_id in ALPHA_FREE_STAGES:
        n += 1
    return n


def train_alpha_branches(cfg: TrainConfig, index: CorpusIndex, alphas, out_dir, topology=None):
    """Train once up to the first alpha-dependent stage, then finish the plan per alpha.

    Checkpoint round trips are bit exact and data order depends only on
    (seed, stage, epoch), so each branch equals a from-scratch run with that alpha.
    Returns {alpha: Trainer}.
    """
    out_dir = Path(out_dir)
    k = alpha_free_prefix(cfg.plan)
    shared = out_dir / "shared"
    base = Trainer(cfg, index.subset("train"), topology=topology, eval_index=index.subset("eval"),
                   log_path=None, checkpoint_dir=None)
    base.run(until=(k, 0))
    base.save(shared / "prefix.pt")
    out = {}
    for alpha in alphas:
        acfg = replace(cfg, weights=replace(cfg.weights, alpha_emb=float(alpha)))
        d = out_dir / f"alpha_{float(alpha):g}"
        d.mkdir(parents=True, exist_ok=True)
        state = load_checkpoint(shared / "prefix.pt", acfg)
        tr = Trainer(acfg, index.subset("train"), topology=topology, eval_index=index.subset("eval"),
                     state=state, log_path=d / "train_log.jsonl", checkpoint_dir=d)
        tr.run()
        out[float(alpha)] = tr
    return out


def offline_models(index: CorpusIndex, epochs=60, seed=0):
    """Attacker and action classifier trained on original train-split data."""
    train_split, eval_split = index.subset("train"), index.subset("eval")
    attacker = train_attacker(train_split, epochs=epochs, rng_seed=seed, heldout=eval_split)
    action = train_action_classifier(train_split, epochs=epochs, rng_seed=seed, heldout=eval_split)
    return attacker, action


def make_policy(name, index: CorpusIndex, attack_actors=(), dummy="", seed=0, pool="train"):
    if name == "constant":
        return constant_policy(index.subset("eval"), attack_actors, ref=dummy or None)
    return random_policy(index.subset(pool), seed)


def anonymize_and_evaluate(net, index: CorpusIndex, attacker, action, out_dir, policies=("constant", "random"),
                           dummy="", seed=0, pool="train"):
    """Anonymize the eval split under each policy and score it; returns {policy: EvalReport}."""
    out_dir = Path(out_dir)
    reports = {}
    for name in policies:
        policy = make_policy(name, index, attacker.labels, dummy, seed, pool)
        d = out_dir / f"anonymized_{name}"
        anon = anonymize_corpus(net, index, policy, d)
        rep = evaluate(index, anon, read_audit(d), attacker, action, name)
        rep.save(out_dir / f"eval_{name}.json")
        reports[name] = rep
    return reports
