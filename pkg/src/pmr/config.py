"""Key-value run configuration shared by every CLI subcommand.

The on-disk format is INI (``configparser``). Unknown keys are rejected so a
typo never silently falls back to a default. Example::

    [corpus]
    manifest = out/corpus/manifest.tsv

    [train]
    seed = 0
    plan = pretrain_ae:paired:2,pretrain_ae:unpaired:5,...

    [weights]
    alpha_emb = 10
"""
from __future__ import annotations

import configparser
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidConfig
from .losses import LossWeights
from .topology import SkeletonTopology, kinect_v2
from .training import DEFAULT_PLAN, TrainConfig, format_plan, parse_plan


@dataclass
class CorpusSection:
    manifest: str = ""
    raw: str = ""
    topology: str = "kinect_v2"   # or a JSON topology file, see load_topology
    synthetic_actors: int = 4
    synthetic_actions: int = 6
    synthetic_cameras: int = 3
    synthetic_seed: int = 0


@dataclass
class AnonymizeSection:
    policy: str = "constant"
    dummy: str = ""               # source id; empty picks the default
    seed: int = 0
    pool: str = "train"           # split the random policy draws from


@dataclass
class EvaluateSection:
    attacker_epochs: int = 60
    attacker_seed: int = 0
    sweep: str = ""               # comma separated alpha_emb values


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    network: dict = field(default_factory=dict)
    anonymize: AnonymizeSection = field(default_factory=AnonymizeSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    output_root: str = "pmr_out"

    # ------------------------------------------------------------ serialization

    def to_parser(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["corpus"] = {k: str(v) for k, v in asdict(self.corpus).items()}
        t = asdict(self.train)
        t.pop("weights")
        t["plan"] = format_plan(self.train.plan)
        cp["train"] = {k: str(v) for k, v in t.items()}
        cp["weights"] = {k: repr(float(v)) for k, v in asdict(self.train.weights).items()}
        cp["network"] = {k: json.dumps(v) for k, v in sorted(self.network.items())}
        cp["anonymize"] = {k: str(v) for k, v in asdict(self.anonymize).items()}
        cp["evaluate"] = {k: str(v) for k, v in asdict(self.evaluate).items()}
        cp["output"] = {"root": self.output_root}
        return cp

    def to_text(self):
        buf = io.StringIO()
        self.to_parser().write(buf)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_text())
        return Path(path)

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise InvalidConfig(str(exc)) from exc
        known = {"corpus", "train", "weights", "network", "anonymize", "evaluate", "output"}
        extra = set(cp.sections()) - known
        if extra:
            raise InvalidConfig(f"unknown sections {sorted(extra)}")
        cfg = cls()
        cfg.corpus = _fill(CorpusSection, cp, "corpus")
        cfg.anonymize = _fill(AnonymizeSection, cp, "anonymize")
        cfg.evaluate = _fill(EvaluateSection, cp, "evaluate")
        weights = _fill(LossWeights, cp, "weights")
        train = dict(cp["train"]) if cp.has_section("train") else {}
        plan = parse_plan(train.pop("plan")) if "plan" in train else DEFAULT_PLAN
        cfg.train = _fill(TrainConfig, {"train": train}, "train", weights=weights, plan=plan)
        if cp.has_section("network"):
            try:
                cfg.network = {k: json.loads(v) for k, v in cp["network"].items()}
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"[network] values must be JSON: {exc}") from exc
        if cp.has_section("output"):
            cfg.output_root = cp["output"].get("root", cfg.output_root)
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def topology(self) -> SkeletonTopology:
        return load_topology(self.corpus.topology)


def _convert(kind, raw, key):
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError as exc:
        raise InvalidConfig(f"{key}: cannot parse {raw!r}") from exc
    return raw


def _fill(cls, cp, section, **fixed):
    values = dict(cp[section]) if section in cp else {}
    names = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(names) - set(fixed)
    if unknown:
        raise InvalidConfig(f"unknown keys in [{section}]: {sorted(unknown)}")
    kw = {k: _convert(names[k].type, v, f"{section}.{k}") for k, v in values.items()}
    kw.update(fixed)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"[{section}]: {exc}") from exc


def load_topology(spec: str) -> SkeletonTopology:
    """``kinect_v2`` or a JSON file with parent, end_effectors, bone_length and optional names."""
    if spec in ("", "kinect_v2"):
        return kinect_v2()
    try:
        d = json.loads(Path(spec).read_text())
        topo = SkeletonTopology(tuple(d["parent"]), tuple(d["end_effectors"]), names=tuple(d.get("names", ())))
        return topo.with_chain_lengths(d["bone_length"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot load topology {spec!r}: {exc}") from exc
