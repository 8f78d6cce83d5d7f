"""Anonymize recordings by decoding their motion against a dummy actor's privacy embedding."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import CorpusEntry, CorpusIndex, SkeletonSequence, write_ntu_file
from .errors import EmptyDummyPool, InvalidConfig

ANONYMOUS_ACTOR = 0
AUDIT_HEADER = "# pmr-anonymized v1\toriginal\toutput\tdummy\tdummy_actor\tactor\taction\tcamera"
AUDIT_FILE = "audit.tsv"
MANIFEST_FILE = "manifest.tsv"


@dataclass(frozen=True)
class DummyPolicy:
    """How the dummy recording is chosen for each input.

    ``constant`` always uses ``constant_ref`` (a corpus source id). ``random``
    draws uniformly from ``dummy_pool``, seeded by ``rng_seed`` and the input's
    identifier so that reruns and reorderings pick the same dummies.
    """

    mode: str
    dummy_pool: CorpusIndex
    constant_ref: str | None = None
    rng_seed: int | None = None

    def __post_init__(self):
        if self.mode not in ("constant", "random"):
            raise InvalidConfig(f"unknown dummy policy mode {self.mode!r}")
        if self.mode == "constant" and self.constant_ref is None:
            raise InvalidConfig("constant policy needs constant_ref")
        if self.mode == "random" and self.rng_seed is None:
            raise InvalidConfig("random policy needs rng_seed")

    def resolve(self, input_id: str) -> CorpusEntry:
        pool = self.dummy_pool.entries
        if not pool:
            raise EmptyDummyPool("dummy pool is empty")
        if self.mode == "constant":
            for e in pool:
                if e.source == self.constant_ref:
                    return e
            raise EmptyDummyPool(f"constant dummy {self.constant_ref!r} is not in the pool")
        key = zlib.crc32(input_id.encode())
        rng = np.random.default_rng([self.rng_seed, key])
        return pool[int(rng.integers(len(pool)))]

    def load(self, entry: CorpusEntry) -> SkeletonSequence:
        return self.dummy_pool.load(entry)


def default_constant_ref(eval_index: CorpusIndex, attack_actors=()):
    """First eval source (lexicographic) whose actor the attacker never saw.

    Falls back to the first eval source when every actor is known, which is the
    case for the fully crossed synthetic corpus.
    """
    entries = sorted(eval_index.entries, key=lambda e: e.source)
    if not entries:
        raise EmptyDummyPool("eval corpus is empty")
    unseen = [e for e in entries if e.actor not in set(attack_actors)]
    return (unseen or entries)[0].source


def constant_policy(eval_index, attack_actors=(), ref=None):
    return DummyPolicy("constant", eval_index, constant_ref=ref or default_constant_ref(eval_index, attack_actors))


def random_policy(train_index, rng_seed=0):
    return DummyPolicy("random", train_index, rng_seed=rng_seed)


def _as_batch(net, seq):
    dtype = next(net.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(seq.joints)).to(dtype)[None]


@torch.no_grad()
def retarget(net, seq: SkeletonSequence, dummy: SkeletonSequence) -> np.ndarray:
    """D(E_M(seq), E_P(dummy)) as a (J, T, 3) float64 array."""
    motion, _ = net.encode(_as_batch(net, seq))
    _, privacy = net.encode(_as_batch(net, dummy))
    return net.decode(motion, privacy)[0].double().numpy()


def anonymize(net, seq: SkeletonSequence, policy: DummyPolicy) -> SkeletonSequence:
    entry = policy.resolve(seq.name)
    joints = retarget(net, seq, policy.load(entry))
    meta = dict(seq.meta, anonymized=True, original_actor=seq.actor_id,
                dummy=entry.source, dummy_actor=entry.actor)
    out = replace(seq, joints=joints, actor_id=ANONYMOUS_ACTOR, meta=meta)
    out.check(num_joints=seq.joints.shape[0], num_frames=seq.num_frames)
    return out


@dataclass(frozen=True)
class AuditRecord:
    original: str
    output: str
    dummy: str
    dummy_actor: int
    actor: int
    action: int
    camera: int

    def to_line(self):
        return "\t".join(str(v) for v in (self.original, self.output, self.dummy, self.dummy_actor,
                                          self.actor, self.action, self.camera))


def read_audit(path) -> list[AuditRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / AUDIT_FILE
    rows = []
    for ln in path.read_text().splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        o, out, d, da, p, a, c = ln.split("\t")
        rows.append(AuditRecord(o, out, d, int(da), int(p), int(a), int(c)))
    return rows


def anonymize_corpus(net, index: CorpusIndex, policy: DummyPolicy, out_dir) -> CorpusIndex:
    """Anonymize every eval-split entry of ``index`` into ``out_dir``.

    Output files keep the original NTU-style name so that parsing them yields
    the protected actor as the label. The audit file maps originals to outputs
    and dummies; ``manifest.tsv`` reloads the outputs as a corpus.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, records, cache = [], [], {}
    for e in index.entries:
        if e.split != "eval":
            continue
        seq = index.load(e)
        anon = anonymize(net, seq, policy)
        path = out_dir / f"{seq.name}.skeleton"
        write_ntu_file(replace(anon, actor_id=seq.actor_id), path)
        entry = CorpusEntry(str(path), e.actor, e.action, e.camera, "eval")
        entries.append(entry)
        cache[entry.source] = replace(anon, actor_id=seq.actor_id)
        records.append(AuditRecord(e.source, str(path), anon.meta["dummy"], anon.meta["dummy_actor"],
                                   e.actor, e.action, e.camera))
    lines = [AUDIT_HEADER] + [r.to_line() for r in records]
    (out_dir / AUDIT_FILE).write_text("\n".join(lines) + "\n")
    result = CorpusIndex(entries, cache, index.target_T)
    result.save(out_dir / MANIFEST_FILE)
    return result
