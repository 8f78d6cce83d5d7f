"""Skeleton ingestion: NTU text files, synthetic corpora, filtering and pairing."""
from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _accel
from .errors import MalformedFile, MultiActorFile, NoValidPairs, Rejected
from .topology import REST_OFFSETS, SkeletonTopology, kinect_v2

log = logging.getLogger(__name__)

NUM_JOINTS = 25
DEFAULT_T = 75
MAX_JUMP = 0.5          # meters between consecutive good samples of one joint
MAX_BAD_FRAC = 0.20     # reject when more than this fraction of frames needed repair
EVAL_CAMERAS = (1,)

_NAME_RE = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")


@dataclass
class SkeletonSequence:
    joints: np.ndarray          # (J, T, 3), meters
    actor_id: int = 0
    action_id: int = 0
    camera_id: int = 0
    setup_id: int = 1
    replication_id: int = 1
    source_frame_count: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self):
        return self.joints.shape[1]

    @property
    def name(self):
        return format_ntu_name(self.setup_id, self.camera_id, self.actor_id,
                               self.replication_id, self.action_id)

    def check(self, num_joints=NUM_JOINTS, num_frames=DEFAULT_T):
        """Raise ValueError if the normalized-sequence invariants do not hold."""
        if self.joints.shape != (num_joints, num_frames, 3):
            raise ValueError(f"expected ({num_joints}, {num_frames}, 3), got {self.joints.shape}")
        if not np.isfinite(self.joints).all():
            raise ValueError("non-finite coordinates")
        return self


def parse_ntu_name(name):
    """'S001C002P003R001A010' -> dict(setup=1, camera=2, actor=3, replication=1, action=10)."""
    m = _NAME_RE.search(Path(name).name)
    if m is None:
        raise MalformedFile(f"filename does not encode SxxxCxxxPxxxRxxxAxxx: {name}")
    s, c, p, r, a = (int(g) for g in m.groups())
    return dict(setup=s, camera=c, actor=p, replication=r, action=a)


def format_ntu_name(setup, camera, actor, replication, action):
    return f"S{setup:03d}C{camera:03d}P{actor:03d}R{replication:03d}A{action:03d}"


def parse_ntu_file(path, topology: SkeletonTopology | None = None) -> SkeletonSequence:
    """Read an NTU RGB+D ``.skeleton`` text file, keeping XYZ only.

    Frames with no tracked body become NaN (left for :func:`denoise`).
    Raises MultiActorFile as soon as any frame reports more than one body.
    """
    topology = topology or kinect_v2()
    J = topology.num_joints
    path = Path(path)
    meta = parse_ntu_name(path.name)
    try:
        tokens = path.read_text().split("\n")
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    lines = iter(ln.strip() for ln in tokens)
    try:
        n_frames = int(next(lines))
        if n_frames <= 0:
            raise MalformedFile(f"{path}: no frames")
        joints = np.full((J, n_frames, 3), np.nan)
        for t in range(n_frames):
            n_bodies = int(next(lines))
            if n_bodies > 1:
                raise MultiActorFile(f"{path}: frame {t} has {n_bodies} bodies")
            for _ in range(n_bodies):
                next(lines)  # body info
                n_joints = int(next(lines))
                if n_joints != J:
                    raise MalformedFile(f"{path}: expected {J} joints, got {n_joints}")
                for j in range(J):
                    vals = next(lines).split()
                    if len(vals) < 3:
                        raise MalformedFile(f"{path}: short joint record in frame {t}")
                    joints[j, t] = [float(v) for v in vals[:3]]
    except StopIteration as exc:
        raise MalformedFile(f"{path}: truncated") from exc
    except ValueError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return SkeletonSequence(joints, actor_id=meta["actor"], action_id=meta["action"],
                            camera_id=meta["camera"], setup_id=meta["setup"],
                            replication_id=meta["replication"], source_frame_count=n_frames)


_BODY_INFO = "72057594037931101 0 1 1 1 1 0 0.0 0.0 2"


def write_ntu_file(seq: SkeletonSequence, path):
    """Serialize in the NTU text layout (single body; fields beyond XYZ are zero)."""
    J, T, _ = seq.joints.shape
    out = [str(T)]
    pad = " ".join(["0"] * 8) + " 2"
    for t in range(T):
        out += ["1", _BODY_INFO, str(J)]
        for j in range(J):
            x, y, z = (repr(float(v)) for v in seq.joints[j, t])
            out.append(f"{x} {y} {z} {pad}")
    Path(path).write_text("\n".join(out) + "\n")
    return Path(path)


def normalize_length(seq: SkeletonSequence, target_T: int = DEFAULT_T) -> SkeletonSequence:
    """Cut long recordings to the first ``target_T`` frames; pad short ones with the final frame."""
    if target_T < 1 or seq.num_frames < 1:
        raise ValueError("need at least one frame")
    x = seq.joints
    T = x.shape[1]
    if T >= target_T:
        x = x[:, :target_T]
    else:
        tail = np.repeat(x[:, -1:], target_T - T, axis=1)
        x = np.concatenate([x, tail], axis=1)
    return replace(seq, joints=np.ascontiguousarray(x),
                   source_frame_count=seq.source_frame_count or T)


def denoise(seq: SkeletonSequence, max_jump=MAX_JUMP, max_bad_frac=MAX_BAD_FRAC) -> SkeletonSequence:
    """Repair isolated NaN / jumping joints by linear interpolation, or raise Rejected."""
    mask = _accel.flag_outliers(seq.joints, max_jump)
    bad_frames = mask.any(axis=0)
    frac = bad_frames.mean()
    if frac > max_bad_frac:
        raise Rejected(f"{seq.name}: {frac:.0%} of frames corrupt")
    if not bad_frames.any():
        return seq
    fixed = _accel.interpolate_masked(seq.joints, mask)
    if not np.isfinite(fixed).all():
        raise Rejected(f"{seq.name}: joint never observed")
    return replace(seq, joints=fixed)


def root_center(seq: SkeletonSequence, root=0) -> SkeletonSequence:
    """Translate so the root joint of the first frame sits at the origin."""
    return replace(seq, joints=seq.joints - seq.joints[root, 0])


def prepare(seq: SkeletonSequence, target_T=DEFAULT_T) -> SkeletonSequence:
    """denoise -> root-center -> length normalization."""
    return normalize_length(root_center(denoise(seq)), target_T)


# ---------------------------------------------------------------- corpus index

@dataclass(frozen=True)
class CorpusEntry:
    source: str     # file path or "synthetic:..." descriptor
    actor: int
    action: int
    camera: int
    split: str      # "train" | "eval"


def split_for_camera(camera):
    return "eval" if camera in EVAL_CAMERAS else "train"


class CorpusIndex:
    """Ordered corpus entries plus a lazy cache of loaded, normalized sequences."""

    HEADER = "# pmr-manifest v1\tsource\tactor\taction\tcamera\tsplit"

    def __init__(self, entries, cache=None, target_T=DEFAULT_T):
        self.entries = list(entries)
        self._cache = cache if cache is not None else {}
        self.target_T = target_T

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def subset(self, split):
        return CorpusIndex([e for e in self.entries if e.split == split], self._cache, self.target_T)

    def filter(self, pred):
        return CorpusIndex([e for e in self.entries if pred(e)], self._cache, self.target_T)

    @property
    def actors(self):
        return sorted({e.actor for e in self.entries})

    @property
    def actions(self):
        return sorted({e.action for e in self.entries})

    def load(self, entry: CorpusEntry) -> SkeletonSequence:
        seq = self._cache.get(entry.source)
        if seq is None:
            if entry.source.startswith("synthetic:"):
                seq = prepare(synthesize_from_source(entry.source), self.target_T)
            else:
                seq = parse_ntu_file(entry.source)
                if seq.num_frames != self.target_T:
                    seq = prepare(seq, self.target_T)
            self._cache[entry.source] = seq
        return seq

    def sequences(self):
        return [self.load(e) for e in self.entries]

    def save(self, path):
        lines = [self.HEADER]
        for e in self.entries:
            lines.append(f"{e.source}\t{e.actor}\t{e.action}\t{e.camera}\t{e.split}")
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)

    @classmethod
    def load_manifest(cls, path, target_T=DEFAULT_T):
        entries = []
        for ln in Path(path).read_text().splitlines():
            if not ln.strip() or ln.startswith("#"):
                continue
            src, actor, action, camera, split = ln.split("\t")
            entries.append(CorpusEntry(src, int(actor), int(action), int(camera), split))
        return cls(entries, target_T=target_T)


# ---------------------------------------------------------------- pairing

@dataclass(frozen=True)
class PairedQuadruple:
    s_ap: SkeletonSequence
    s_a2p: SkeletonSequence     # action a', actor p
    s_ap2: SkeletonSequence     # action a, actor p'
    s_a2p2: SkeletonSequence    # action a', actor p'

    def swapped(self):
        """Symmetric role swap: (a', p') becomes the anchor."""
        return PairedQuadruple(self.s_a2p2, self.s_ap2, self.s_a2p, self.s_ap)

    def members(self):
        return (self.s_ap, self.s_a2p, self.s_ap2, self.s_a2p2)


def enumerate_quadruple_cells(entries):
    """Canonical 2x2 grids as tuples of CorpusEntry (ap, a'p, ap', a'p'), camera-major order.

    Within a grid a < a' and p < p', so (a, p) is the lexicographically smallest
    (action, actor) cell. Repeated recordings of one cell use the first entry.
    """
    cells = {}
    for e in entries:
        cells.setdefault((e.camera, e.actor, e.action), e)
    out = []
    for cam in sorted({c for c, _, _ in cells}):
        actors = sorted({p for c, p, _ in cells if c == cam})
        actions = sorted({a for c, _, a in cells if c == cam})
        for p, p2 in itertools.combinations(actors, 2):
            for a, a2 in itertools.combinations(actions, 2):
                keys = [(cam, p, a), (cam, p, a2), (cam, p2, a), (cam, p2, a2)]
                if all(k in cells for k in keys):
                    out.append(tuple(cells[k] for k in keys))
    return out


def build_pairs(index: CorpusIndex, rng_seed: int):
    """All valid quadruples of ``index`` in a seed-determined order."""
    grids = enumerate_quadruple_cells(index.entries)
    if not grids:
        raise NoValidPairs("corpus cannot form any 2x2 actor/action grid under one camera")
    order = np.random.default_rng(rng_seed).permutation(len(grids))
    return [PairedQuadruple(*(index.load(e) for e in grids[i])) for i in order]


# ---------------------------------------------------------------- synthetic corpus

def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


ACTION_NAMES = ("raise_arms", "squat", "wave", "kick", "bow", "arm_circle")


def _action_rotations(kind, u, amp):
    """Local joint rotations {joint: 3x3} at phase u for one of the six templates."""
    w = 0.5 * (1 - np.cos(u))          # 0 -> 1 -> 0 envelope
    R = {}
    if kind == 0:    # raise both arms sideways
        R[4] = _rot_z(2.4 * amp * w)
        R[8] = _rot_z(-2.4 * amp * w)
    elif kind == 1:  # squat
        R[12] = _rot_x(-1.3 * amp * w)
        R[16] = _rot_x(-1.3 * amp * w)
        R[13] = _rot_x(2.2 * amp * w)
        R[17] = _rot_x(2.2 * amp * w)
        R[1] = _rot_x(-0.4 * amp * w)
    elif kind == 2:  # right-hand wave
        R[8] = _rot_z(-2.2 * amp * min(1.0, 3 * w))
        R[9] = _rot_z(-0.6 * amp * np.sin(3 * u))
    elif kind == 3:  # right kick
        R[16] = _rot_x(-1.2 * amp * w)
        R[17] = _rot_x(0.6 * amp * w * (1 - w))
    elif kind == 4:  # bow
        R[1] = _rot_x(-1.0 * amp * w)
        R[20] = _rot_x(-0.3 * amp * w)
    else:            # left arm circle
        R[4] = _rot_z(1.3 + 0.7 * amp * np.sin(u)) @ _rot_x(0.8 * amp * np.cos(u))
        R[5] = _rot_z(0.3 * amp * w)
    return R


def _forward_kinematics(offsets, parents, local_rots):
    J = len(parents)
    pos = np.zeros((J, 3))
    glob = [None] * J
    order = sorted(range(J), key=lambda j: len(_chain(parents, j)))
    for j in order:
        Rl = local_rots.get(j, np.eye(3))
        p = parents[j]
        if p == j:
            glob[j] = Rl
            continue
        glob[j] = glob[p] @ Rl
        pos[j] = pos[p] + glob[p] @ offsets[j]
    return pos


def _chain(parents, j):
    n = 0
    while parents[j] != j:
        j = parents[j]
        n += 1
    return list(range(n))


def actor_profile(seed, actor, n_actors):
    """Deterministic per-actor body scale, bone offsets and motion style."""
    rng = np.random.default_rng([seed, actor, 101])
    # geometric spacing keeps mean bone lengths of distinct actors >= 6% apart
    scale = 1.06 ** (actor - 1 - (n_actors - 1) / 2)
    jitter = 1 + 0.03 * rng.uniform(-1, 1, size=len(REST_OFFSETS))
    offsets = REST_OFFSETS * jitter[:, None]
    base = np.linalg.norm(REST_OFFSETS, axis=1)[1:].mean()
    offsets *= scale * base / np.linalg.norm(offsets, axis=1)[1:].mean()
    return dict(
        offsets=offsets,
        scale=scale,
        amp=rng.uniform(0.8, 1.15),
        phase=rng.uniform(-0.6, 0.6),
        speed=rng.uniform(0.85, 1.15),
        sway=rng.uniform(0.0, 0.08),
    )


def camera_yaw(camera):
    """Camera 1 is frontal; further cameras alternate +/- 8 degrees."""
    k = camera - 1
    if k == 0:
        return 0.0
    sign = -1 if k % 2 else 1
    return np.deg2rad(8.0 * ((k + 1) // 2)) * sign


def synthesize_sequence(seed, actor, action, camera, n_actors, topology=None, noise=0.002):
    """One raw (not yet length-normalized) synthetic recording."""
    topology = topology or kinect_v2()
    parents = topology.parent
    prof = actor_profile(seed, actor, n_actors)
    rng = np.random.default_rng([seed, actor, action, camera])
    T = int(rng.integers(55, 100))
    kind = (action - 1) % len(ACTION_NAMES)
    freq = 1.0 + 0.5 * ((action - 1) // len(ACTION_NAMES))
    yaw = _rot_y(camera_yaw(camera) + rng.normal(0, 0.01))
    frames = np.empty((topology.num_joints, T, 3))
    for t in range(T):
        u = 2 * np.pi * freq * prof["speed"] * t / 70.0 + prof["phase"]
        u = float(np.clip(u, 0, None))
        rots = _action_rotations(kind, u, prof["amp"])
        sway = _rot_z(prof["sway"] * np.sin(0.5 * u))
        rots[1] = sway @ rots.get(1, np.eye(3))
        pos = _forward_kinematics(prof["offsets"], parents, rots)
        if kind == 1:  # lower the pelvis so feet stay near the floor
            drop = prof["offsets"][13, 1] * (1 - np.cos(1.3 * prof["amp"] * 0.5 * (1 - np.cos(u))))
            pos[:, 1] += drop
        frames[:, t] = pos @ yaw.T + np.array([0.0, 0.9, 3.0])
    frames += rng.normal(0, noise, size=frames.shape)
    return SkeletonSequence(frames, actor_id=actor, action_id=action, camera_id=camera,
                            setup_id=1, replication_id=1, source_frame_count=T)


def synthetic_source(seed, n_actors, actor, action, camera):
    return f"synthetic:{seed}:{n_actors}:{format_ntu_name(1, camera, actor, 1, action)}"


def synthesize_from_source(source):
    _, seed, n_actors, name = source.split(":")
    meta = parse_ntu_name(name)
    return synthesize_sequence(int(seed), meta["actor"], meta["action"], meta["camera"], int(n_actors))


def generate_synthetic(actors=4, actions=6, cameras=3, rng_seed=0, topology=None, target_T=DEFAULT_T):
    """Fully populated actors x actions x cameras corpus, split by camera."""
    if actors < 2 or actions < 2:
        raise ValueError("need at least 2 actors and 2 actions")
    entries = []
    for c in range(1, cameras + 1):
        for p in range(1, actors + 1):
            for a in range(1, actions + 1):
                entries.append(CorpusEntry(synthetic_source(rng_seed, actors, p, a, c), p, a, c,
                                           split_for_camera(c)))
    index = CorpusIndex(entries, target_T=target_T)
    if topology is not None:
        for e in entries:
            index._cache[e.source] = prepare(
                synthesize_sequence(rng_seed, e.actor, e.action, e.camera, actors, topology), target_T)
    return index


def mean_bone_lengths(seq_or_joints, topology=None):
    """Mean (over frames) length of each bone, shape (J-1,) in bone order."""
    topology = topology or kinect_v2()
    joints = getattr(seq_or_joints, "joints", seq_or_joints)
    lengths = _accel.bone_lengths(joints, np.asarray(topology.parent))
    keep = [j for j, p in enumerate(topology.parent) if p != j]
    return lengths[keep].mean(axis=1)
