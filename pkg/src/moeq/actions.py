"""Conversion between 12-dim locomotion commands and per-dimension bins."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

COMMAND_NAMES = ("v_x", "v_y", "omega_z", "theta1", "theta2", "theta3",
                 "freq", "height", "pitch", "foot_width", "foot_height", "terminate")
ACTION_DIM = len(COMMAND_NAMES)
TERMINATE = COMMAND_NAMES.index("terminate")

# count of out-of-bounds values clamped per dimension
CLAMP_COUNTER: Counter = Counter()


def default_bounds() -> np.ndarray:
    bounds = np.tile([-1.0, 1.0], (ACTION_DIM, 1))
    bounds[COMMAND_NAMES.index("freq")] = (0.0, 1.0)
    bounds[COMMAND_NAMES.index("height")] = (0.0, 1.0)
    return bounds


def _check_bounds(bounds) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError(f"bounds must have shape (d, 2), got {bounds.shape}")
    if np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("bounds: every dimension needs lo < hi")
    return bounds


@dataclass
class DiscretizedAction:
    bins: np.ndarray
    command: np.ndarray
    stop: bool = False


def discretize_action(cmd, bounds=None, V: int = 256) -> DiscretizedAction:
    bounds = _check_bounds(default_bounds() if bounds is None else bounds)
    cmd = np.asarray(cmd, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    outside = (cmd < lo) | (cmd > hi)
    if outside.any():
        for dim in np.nonzero(outside.reshape(-1, len(lo)).any(axis=0))[0]:
            CLAMP_COUNTER[COMMAND_NAMES[dim] if len(lo) == ACTION_DIM else int(dim)] += 1
        cmd = np.clip(cmd, lo, hi)
    bins = np.clip(np.floor((cmd - lo) / (hi - lo) * V), 0, V - 1).astype(np.int64)
    return DiscretizedAction(bins, cmd)


def bin_centers(bins, bounds=None, V: int = 256) -> np.ndarray:
    bounds = _check_bounds(default_bounds() if bounds is None else bounds)
    bins = np.asarray(bins)
    if bins.size and (bins.min() < 0 or bins.max() >= V):
        raise ValueError(f"bins must lie in [0, {V})")
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + (bins + 0.5) * (hi - lo) / V


def detokenize(bins, bounds=None, V: int = 256) -> DiscretizedAction:
    """Map bins to bin-center command values."""
    bins = np.asarray(bins, dtype=np.int64)
    command = bin_centers(bins, bounds, V)
    stop = command.shape[-1] == ACTION_DIM and command.ndim == 1 and is_stop(command, bounds)
    return DiscretizedAction(bins, command, stop)


def is_stop(command, bounds=None) -> bool:
    """Termination flag: T above the middle of its range."""
    bounds = _check_bounds(default_bounds() if bounds is None else bounds)
    lo, hi = bounds[TERMINATE]
    return bool(command[TERMINATE] > 0.5 * (lo + hi))
