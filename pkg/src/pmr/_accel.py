"""Hot preprocessing kernels.

Each kernel exists twice: a numba ``@njit`` loop and a pure-numpy version.
Set ``PMR_DISABLE_NUMBA=1`` to force the numpy path (also used automatically
when numba cannot be imported). Both paths must agree bit-for-bit; the test
suite and ``benchmarks/bench_kernels.py`` compare them.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("PMR_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------- numpy path

def flag_outliers_numpy(joints, max_jump):
    """Mark joint samples that are non-finite or jump away from the last good position.

    joints: (J, T, 3). Returns a bool mask (J, T), True where the sample is bad.
    The reference position only advances on good samples, so a single-frame
    spike flags one frame rather than two.
    """
    J, T, _ = joints.shape
    mask = np.zeros((J, T), dtype=np.bool_)
    last = np.full((J, 3), np.nan)
    have_last = np.zeros(J, dtype=np.bool_)
    for t in range(T):
        x = joints[:, t, :]
        finite = np.isfinite(x).all(axis=1)
        d = np.sqrt(((x - last) ** 2).sum(axis=1))
        jump = have_last & finite & (d > max_jump)
        bad = ~finite | jump
        mask[:, t] = bad
        good = ~bad
        last[good] = x[good]
        have_last |= good
    return mask


def interpolate_masked_numpy(joints, mask):
    """Linearly interpolate masked samples per joint from the nearest good frames.

    Leading/trailing gaps copy the nearest good sample. Joints with no good
    sample at all are left untouched (callers reject such files).
    """
    out = joints.copy()
    J, T, _ = joints.shape
    t_axis = np.arange(T, dtype=np.float64)
    for j in range(J):
        bad = mask[j]
        if not bad.any():
            continue
        good = ~bad
        if not good.any():
            continue
        for c in range(3):
            out[j, bad, c] = np.interp(t_axis[bad], t_axis[good], joints[j, good, c])
    return out


def bone_lengths_numpy(joints, parent):
    """Per-frame bone lengths, shape (J, T); the root's entry is 0."""
    diff = joints - joints[parent]
    return np.sqrt((diff ** 2).sum(axis=-1))


# ---------------------------------------------------------------- numba path

if numba is not None:

    @numba.njit(cache=True)
    def _flag_outliers_nb(joints, max_jump):
        J, T, _ = joints.shape
        mask = np.zeros((J, T), dtype=np.bool_)
        for j in range(J):
            have_last = False
            lx = 0.0
            ly = 0.0
            lz = 0.0
            for t in range(T):
                x = joints[j, t, 0]
                y = joints[j, t, 1]
                z = joints[j, t, 2]
                finite = np.isfinite(x) and np.isfinite(y) and np.isfinite(z)
                if not finite:
                    mask[j, t] = True
                    continue
                if have_last:
                    d = np.sqrt((x - lx) ** 2 + (y - ly) ** 2 + (z - lz) ** 2)
                    if d > max_jump:
                        mask[j, t] = True
                        continue
                lx = x
                ly = y
                lz = z
                have_last = True
        return mask

    @numba.njit(cache=True)
    def _interpolate_masked_nb(joints, mask):
        out = joints.copy()
        J, T, _ = joints.shape
        for j in range(J):
            prev = -1
            t = 0
            while t < T:
                if not mask[j, t]:
                    prev = t
                    t += 1
                    continue
                nxt = t
                while nxt < T and mask[j, nxt]:
                    nxt += 1
                if prev < 0 and nxt >= T:
                    break  # no good sample in this joint
                for k in range(t, nxt):
                    for c in range(3):
                        if prev < 0:
                            out[j, k, c] = joints[j, nxt, c]
                        elif nxt >= T:
                            out[j, k, c] = joints[j, prev, c]
                        else:
                            # same formula as np.interp
                            slope = (joints[j, nxt, c] - joints[j, prev, c]) / (nxt - prev)
                            out[j, k, c] = slope * (k - prev) + joints[j, prev, c]
                t = nxt
        return out

    @numba.njit(cache=True)
    def _bone_lengths_nb(joints, parent):
        J, T, _ = joints.shape
        out = np.empty((J, T))
        for j in range(J):
            p = parent[j]
            for t in range(T):
                s = 0.0
                for c in range(3):
                    d = joints[j, t, c] - joints[p, t, c]
                    s += d * d
                out[j, t] = np.sqrt(s)
        return out


def flag_outliers(joints, max_jump):
    joints = np.ascontiguousarray(joints, dtype=np.float64)
    if USE_NUMBA:
        return _flag_outliers_nb(joints, float(max_jump))
    return flag_outliers_numpy(joints, max_jump)


def interpolate_masked(joints, mask):
    joints = np.ascontiguousarray(joints, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if USE_NUMBA:
        return _interpolate_masked_nb(joints, mask)
    return interpolate_masked_numpy(joints, mask)


def bone_lengths(joints, parent):
    joints = np.ascontiguousarray(joints, dtype=np.float64)
    parent = np.ascontiguousarray(parent, dtype=np.int64)
    if USE_NUMBA:
        return _bone_lengths_nb(joints, parent)
    return bone_lengths_numpy(joints, parent)
