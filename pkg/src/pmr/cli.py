"""Command-line entry point: ``pmr {preprocess,train,anonymize,evaluate}``.

Exit codes: 0 success, 1 usage error, 2 missing or inconsistent input,
3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig
from .dataset import (CorpusEntry, CorpusIndex, generate_synthetic, parse_ntu_file, prepare,
                      split_for_camera, write_ntu_file)
from .errors import (CorruptCheckpoint, Divergence, EmptyDummyPool, InsufficientData, InvalidConfig,
                     LabelMismatch, MalformedFile, ManifestMismatch, MultiActorFile, NoValidPairs,
                     Rejected, VersionMismatch)
from .training import DESK_EPOCHS, STAGE_IDS, load_checkpoint, parse_plan, scaled_plan

log = logging.getLogger("pmr")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
CONFIG_NAME = "config.ini"


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _check_device():
    device = os.environ.get("PMR_DEVICE", "cpu")
    if device != "cpu":
        raise UsageError(f"PMR_DEVICE={device!r}: this build runs on cpu only")


def _out_dir(args, cfg, default_name):
    if args.out:
        return Path(args.out)
    root = os.environ.get("PMR_OUTPUT_ROOT") or cfg.output_root
    return Path(root) / default_name


def _embed_config(cfg: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / CONFIG_NAME)


def _load_manifest(path):
    if not path:
        raise UsageError("a corpus manifest is required (--manifest or [corpus] manifest)")
    if not Path(path).is_file():
        raise MissingInput(f"manifest not found: {path}")
    return CorpusIndex.load_manifest(path)


def _load_checkpoint(path):
    if not path or not Path(path).is_file():
        raise MissingInput(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------- subcommands

def cmd_preprocess(args, cfg: RunConfig):
    out = _out_dir(args, cfg, "corpus")
    if args.synthetic:
        c = cfg.corpus
        c.synthetic_actors = args.actors or c.synthetic_actors
        c.synthetic_actions = args.actions or c.synthetic_actions
        c.synthetic_cameras = args.cameras or c.synthetic_cameras
        c.synthetic_seed = args.seed if args.seed is not None else c.synthetic_seed
        index = generate_synthetic(c.synthetic_actors, c.synthetic_actions, c.synthetic_cameras,
                                   c.synthetic_seed, cfg.topology())
        summary = {"source": "synthetic", "kept": len(index), "dropped": {}}
    else:
        raw = Path(args.input or cfg.corpus.raw or "")
        if not raw.is_dir():
            raise MissingInput(f"raw corpus directory not found: {raw}")
        files = sorted(raw.glob("*.skeleton"))
        if not files:
            raise MissingInput(f"no input files in {raw}")
        cfg.corpus.raw = str(raw)
        seq_dir = out / "sequences"
        seq_dir.mkdir(parents=True, exist_ok=True)
        topology = cfg.topology()
        entries, dropped = [], {"multi-actor dropped": [], "malformed dropped": [], "poor quality dropped": []}
        for f in files:
            try:
                seq = prepare(parse_ntu_file(f, topology))
            except MultiActorFile:
                dropped["multi-actor dropped"].append(f.name)
                continue
            except MalformedFile as exc:
                log.warning("%s: %s", f.name, exc)
                dropped["malformed dropped"].append(f.name)
                continue
            except Rejected:
                dropped["poor quality dropped"].append(f.name)
                continue
            path = write_ntu_file(seq, seq_dir / f.name)
            entries.append(CorpusEntry(str(path), seq.actor_id, seq.action_id, seq.camera_id,
                                       split_for_camera(seq.camera_id)))
        index = CorpusIndex(entries)
        summary = {"source": str(raw), "kept": len(entries),
                   "dropped": {k: {"count": len(v), "files": v} for k, v in dropped.items()}}
    out.mkdir(parents=True, exist_ok=True)
    manifest = index.save(out / "manifest.tsv")
    cfg.corpus.manifest = str(manifest)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _embed_config(cfg, out)
    print(f"kept {summary['kept']}")
    for reason, d in summary["dropped"].items():
        print(f"{reason}: {d['count']}")
    print(manifest)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig):
    index = _load_manifest(args.manifest or cfg.corpus.manifest)
    tc = cfg.train
    if args.plan:
        tc = replace(tc, plan=parse_plan(args.plan))
    elif args.desk:
        tc = replace(tc, plan=scaled_plan(DESK_EPOCHS))
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.alpha_emb is not None:
        tc = replace(tc, weights=replace(tc.weights, alpha_emb=args.alpha_emb))
    stages = None
    if args.stages:
        stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
        bad = [s for s in stages if s not in STAGE_IDS]
        if bad:
            raise UsageError(f"unknown stage ids {bad}; choose from {list(STAGE_IDS)}")
    cfg.train = tc
    cfg.corpus.manifest = args.manifest or cfg.corpus.manifest
    out = _out_dir(args, cfg, "train")
    _embed_config(cfg, out)
    net_cfg = None
    if cfg.network:
        from .network import NetworkConfig
        net_cfg = NetworkConfig(y_action=len(index.subset("train").actions),
                                y_actor=len(index.subset("train").actors), **cfg.network)
    try:
        tr = pipeline.train(tc, index, out, topology=cfg.topology(), resume=args.resume, stages=stages,
                            net_cfg=net_cfg)
    except Divergence as exc:
        latest = out / "latest.pt"
        print(f"diverged: {exc}", file=sys.stderr)
        print(f"last checkpoint: {exc.checkpoint_path or (latest if latest.exists() else 'none')}",
              file=sys.stderr)
        return EXIT_DIVERGED
    ev = [r for r in tr.history if r["event"] == "eval"]
    if ev:
        print(json.dumps({k: v for k, v in ev[-1].items() if k != "event"}))
    print(out / "latest.pt")
    return EXIT_OK


def cmd_anonymize(args, cfg: RunConfig):
    state = _load_checkpoint(args.checkpoint)
    index = _load_manifest(args.manifest or cfg.corpus.manifest)
    a = cfg.anonymize
    a.policy = args.policy or a.policy
    a.dummy = args.dummy if args.dummy is not None else a.dummy
    a.seed = args.seed if args.seed is not None else a.seed
    if a.policy not in ("constant", "random"):
        raise UsageError(f"unknown policy {a.policy!r}")
    out = _out_dir(args, cfg, f"anonymized_{a.policy}")
    policy = pipeline.make_policy(a.policy, index, state.actors, a.dummy, a.seed, a.pool)
    from .anonymizer import anonymize_corpus
    state.net.eval()
    anonymize_corpus(state.net, index, policy, out)
    if policy.mode == "constant":
        a.dummy = policy.constant_ref
    _embed_config(cfg, out)
    print(out / "manifest.tsv")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig):
    from . import evaluation as ev

    index = _load_manifest(args.manifest or cfg.corpus.manifest)
    out = _out_dir(args, cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    e = cfg.evaluate
    if args.sweep:
        e.sweep = args.sweep
    attacker, action = pipeline.offline_models(index, e.attacker_epochs, e.attacker_seed)
    print(f"attacker held-out top-1 {attacker.heldout['top1']:.3f}; "
          f"action classifier held-out top-1 {action.heldout['top1']:.3f}")

    if args.chance_test:
        mean, chance = ev.shuffled_label_check(attacker, index.subset("eval"), e.attacker_seed)
        print(f"shuffled-label attacker top-1 {mean:.3f} (chance {chance:.3f})")

    anon = None
    if args.anonymized:
        d = Path(args.anonymized)
        if not (d / "manifest.tsv").is_file():
            raise MissingInput(f"no anonymized corpus in {d}")
        anon = CorpusIndex.load_manifest(d / "manifest.tsv")
        from .anonymizer import read_audit
        audit = read_audit(d)
        policy_name = "unknown"
        if (d / CONFIG_NAME).is_file():
            policy_name = RunConfig.load(d / CONFIG_NAME).anonymize.policy
        report = ev.evaluate(index, anon, audit, attacker, action, policy_name)
        report.save(out / "eval_report.json")
        print(f"utility mse {report.utility_mse:.5f}; re-id top-1 {report.reid_top1:.3f}, "
              f"top-{report.topk} {report.reid_topk:.3f}; action top-1 {report.action_top1:.3f}")

    if args.embeddings or args.render:
        state = _load_checkpoint(args.checkpoint)
        state.net.eval()
        if args.embeddings:
            print(ev.export_embeddings(state.net, index.subset("eval"), out / "embeddings.csv"))
        if args.render:
            _render(args, index, anon, state.net, out / "frames")

    if e.sweep:
        try:
            alphas = [float(v) for v in e.sweep.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"--sweep expects comma separated numbers: {exc}") from exc
        branches = pipeline.train_alpha_branches(cfg.train, index, alphas, out / "sweep", cfg.topology())

        def run(alpha):
            net = branches[float(alpha)].state.net
            net.eval()
            return pipeline.anonymize_and_evaluate(net, index, attacker, action,
                                                   out / "sweep" / f"alpha_{float(alpha):g}")

        rows = ev.tradeoff_sweep(alphas, run)
        print(ev.write_sweep_csv(rows, out / "sweep.csv"))
    _embed_config(cfg, out)
    return EXIT_OK


def _render(args, index, anon, net, out):
    from . import evaluation as ev
    from .anonymizer import anonymize, constant_policy

    match = [e for e in index.entries if args.render in (e.source, Path(e.source).stem)
             or e.source.endswith(args.render)]
    if not match:
        raise MissingInput(f"sequence {args.render!r} not in the corpus")
    seq = index.load(match[0])
    if anon is not None:
        hit = [e for e in anon.entries if Path(e.source).stem == seq.name]
        other = anon.load(hit[0]) if hit else None
    else:
        other = None
    if other is None:
        other = anonymize(net, seq, constant_policy(index.subset("eval"), ()))
    T = seq.num_frames
    frames = sorted({int(round(v)) for v in np.linspace(0, T - 1, args.frames)})
    bounds = ev.comparison_bounds([seq, other])
    paths = ev.render_frames(seq, frames, out, bounds, prefix=f"{seq.name}_original")
    paths += ev.render_frames(other, frames, out, bounds, prefix=f"{seq.name}_anonymized")
    for p in paths:
        print(p)


# ---------------------------------------------------------------- argument parsing

def build_parser():
    p = _Parser(prog="pmr", description="Skeleton motion anonymization by motion retargeting.")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="filter and index a raw corpus, or generate a synthetic one")
    s.add_argument("--input", help="directory of NTU .skeleton files")
    s.add_argument("--synthetic", action="store_true", help="generate the synthetic corpus instead")
    s.add_argument("--actors", type=int)
    s.add_argument("--actions", type=int)
    s.add_argument("--cameras", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = sub.add_parser("train", help="run the training stage plan")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--resume", action="store_true", help="continue from <out>/latest.pt")
    s.add_argument("--stages", help="comma separated stage ids to run, others are skipped")
    s.add_argument("--plan", help='explicit plan, e.g. "pretrain_ae:paired:2,paired:paired:5"')
    s.add_argument("--desk", action="store_true", help="use the scaled-down desk plan")
    s.add_argument("--seed", type=int)
    s.add_argument("--alpha-emb", type=float, dest="alpha_emb")

    s = sub.add_parser("anonymize", help="anonymize the eval split with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--policy", choices=("constant", "random"))
    s.add_argument("--dummy", help="source id of the constant dummy")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = sub.add_parser("evaluate", help="utility and re-identification metrics, sweeps and figures")
    s.add_argument("--manifest")
    s.add_argument("--anonymized", help="directory written by the anonymize command")
    s.add_argument("--checkpoint", help="needed for --embeddings and --render")
    s.add_argument("--sweep", help='alpha_emb grid, e.g. "0,1,5,10,20,40"')
    s.add_argument("--embeddings", action="store_true", help="export eval-split embeddings as CSV")
    s.add_argument("--render", metavar="SEQUENCE", help="render original vs anonymized frames")
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--chance-test", action="store_true", dest="chance_test",
                   help="report attacker accuracy on shuffled labels")
    s.add_argument("--out")
    return p


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "anonymize": cmd_anonymize,
            "evaluate": cmd_evaluate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_device()
        if args.config and not Path(args.config).is_file():
            raise MissingInput(f"config not found: {args.config}")
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.command == "preprocess" and not args.synthetic and not (args.input or cfg.corpus.raw):
            raise UsageError("preprocess needs --input or --synthetic")
        if args.command == "evaluate" and (args.embeddings or args.render) and not args.checkpoint:
            raise UsageError("--embeddings and --render need --checkpoint")
        return COMMANDS[args.command](args, cfg)
    except (UsageError, InvalidConfig) as exc:
        print(f"pmr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInput, FileNotFoundError, CorruptCheckpoint, VersionMismatch, ManifestMismatch,
            EmptyDummyPool, NoValidPairs, InsufficientData, LabelMismatch) as exc:
        print(f"pmr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
