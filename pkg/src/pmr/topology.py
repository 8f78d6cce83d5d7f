"""Kinect v2 25-joint kinematic tree."""
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig

JOINT_NAMES = (
    "SpineBase", "SpineMid", "Neck", "Head",
    "ShoulderLeft", "ElbowLeft", "WristLeft", "HandLeft",
    "ShoulderRight", "ElbowRight", "WristRight", "HandRight",
    "HipLeft", "KneeLeft", "AnkleLeft", "FootLeft",
    "HipRight", "KneeRight", "AnkleRight", "FootRight",
    "SpineShoulder", "HandTipLeft", "ThumbLeft", "HandTipRight", "ThumbRight",
)

KINECT_PARENTS = (
    0, 0, 20, 2,
    20, 4, 5, 6,
    20, 8, 9, 10,
    0, 12, 13, 14,
    0, 16, 17, 18,
    1, 7, 7, 11, 11,
)

# head, left/right hand tip, left/right foot
KINECT_END_EFFECTORS = (3, 21, 23, 15, 19)

# Rest-pose offsets from parent (meters, y up, x to the subject's left), for an
# adult of ~1.75 m. Used by the synthetic generator and for default chain lengths.
REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],    # SpineBase (root)
    [0.00, 0.28, 0.00],    # SpineMid
    [0.00, 0.06, 0.00],    # Neck
    [0.00, 0.16, 0.00],    # Head
    [0.17, -0.04, 0.00],   # ShoulderLeft
    [0.27, 0.00, 0.00],    # ElbowLeft
    [0.25, 0.00, 0.00],    # WristLeft
    [0.07, 0.00, 0.00],    # HandLeft
    [-0.17, -0.04, 0.00],  # ShoulderRight
    [-0.27, 0.00, 0.00],   # ElbowRight
    [-0.25, 0.00, 0.00],   # WristRight
    [-0.07, 0.00, 0.00],   # HandRight
    [0.09, -0.05, 0.00],   # HipLeft
    [0.00, -0.42, 0.00],   # KneeLeft
    [0.00, -0.40, 0.00],   # AnkleLeft
    [0.00, -0.06, 0.10],   # FootLeft
    [-0.09, -0.05, 0.00],  # HipRight
    [0.00, -0.42, 0.00],   # KneeRight
    [0.00, -0.40, 0.00],   # AnkleRight
    [0.00, -0.06, 0.10],   # FootRight
    [0.00, 0.20, 0.00],    # SpineShoulder
    [0.06, 0.00, 0.00],    # HandTipLeft
    [0.02, 0.00, 0.04],    # ThumbLeft
    [-0.06, 0.00, 0.00],   # HandTipRight
    [-0.02, 0.00, 0.04],   # ThumbRight
])


@dataclass(frozen=True)
class SkeletonTopology:
    parent: tuple
    end_effectors: tuple
    chain_length: dict = field(default_factory=dict)
    names: tuple = ()

    def __post_init__(self):
        n = len(self.parent)
        roots = [j for j, p in enumerate(self.parent) if p == j]
        if len(roots) != 1:
            raise InvalidConfig(f"expected a single root, found {roots}")
        # every joint must reach the root without cycles
        for j in range(n):
            seen = set()
            k = j
            while self.parent[k] != k:
                if k in seen or not 0 <= self.parent[k] < n:
                    raise InvalidConfig(f"joint {j} does not reach the root")
                seen.add(k)
                k = self.parent[k]
        children = set(p for j, p in enumerate(self.parent) if p != j)
        for e in self.end_effectors:
            if e in children:
                raise InvalidConfig(f"end-effector {e} is not a leaf")
            if e in self.chain_length and not self.chain_length[e] > 0:
                raise InvalidConfig(f"chain length of {e} must be positive")

    @property
    def num_joints(self):
        return len(self.parent)

    @property
    def root(self):
        return next(j for j, p in enumerate(self.parent) if p == j)

    def bones(self):
        """(child, parent) pairs, root excluded."""
        return [(j, p) for j, p in enumerate(self.parent) if p != j]

    def chain(self, joint):
        """Joint indices from ``joint`` up to (excluding) the root."""
        out = []
        while self.parent[joint] != joint:
            out.append(joint)
            joint = self.parent[joint]
        return out

    def chain_lengths_from(self, bone_length):
        """h_e for every end-effector given per-joint bone lengths (length J, root entry ignored)."""
        return {e: float(sum(bone_length[j] for j in self.chain(e))) for e in self.end_effectors}

    def with_chain_lengths(self, bone_length):
        return SkeletonTopology(self.parent, self.end_effectors, self.chain_lengths_from(bone_length), self.names)


def kinect_v2():
    bone = np.linalg.norm(REST_OFFSETS, axis=1)
    topo = SkeletonTopology(KINECT_PARENTS, KINECT_END_EFFECTORS, names=JOINT_NAMES)
    return topo.with_chain_lengths(bone)
