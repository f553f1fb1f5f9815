"""Action-aware forward noising.

The forward process only touches the action block of a plan matrix:

    x_n[actions] = sqrt(abar_n) * x_0[actions] + sqrt(1 - abar_n) * (eps + M)

where eps is standard normal and M is a noise mask built from normalized
action embeddings (accumulated over positions for MultiAdd, per position for
SingleAdd, zero for NoMask).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .layout import ProblemDims, assemble_batch
from .schedule import NoiseSchedule


class MaskMode(str, Enum):
    MULTI_ADD = "MultiAdd"
    SINGLE_ADD = "SingleAdd"
    NO_MASK = "NoMask"

    @classmethod
    def parse(cls, value) -> "MaskMode":
        if isinstance(value, MaskMode):
            return value
        key = str(value).replace("_", "").replace("-", "").lower()
        for mode in cls:
            if mode.value.lower() == key:
                return mode
        raise ValueError(f"unknown mask mode {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class ActionEmbeddingTable:
    rows: np.ndarray  # (A, D_e)
    g_min: float = float("nan")
    g_max: float = float("nan")
    normalized: bool = False

    @property
    def num_actions(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def normalize_embeddings(raw: ActionEmbeddingTable | np.ndarray) -> ActionEmbeddingTable:
    """Global min-max map of every entry onto [-1, 1]; a constant table maps to 0."""
    rows = raw.rows if isinstance(raw, ActionEmbeddingTable) else np.asarray(raw, dtype=np.float64)
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.size == 0:
        raise ValueError("cannot normalize an empty embedding table")
    if not np.all(np.isfinite(rows)):
        raise ValueError("embedding table contains non-finite entries")
    lo, hi = float(rows.min()), float(rows.max())
    if hi > lo:
        out = 2.0 * (rows - lo) / (hi - lo) - 1.0
        out = np.clip(out, -1.0, 1.0)
    else:
        out = np.zeros_like(rows)
    return ActionEmbeddingTable(rows=out, g_min=lo, g_max=hi, normalized=True)


def align_to_actions(table: ActionEmbeddingTable, num_actions: int, seed: int = 0) -> ActionEmbeddingTable:
    """Map D_e-dim embeddings onto the A action coordinates.

    Identity when D_e == A; otherwise a fixed Gaussian projection drawn from
    ``seed`` followed by renormalization.
    """
    if table.num_actions != num_actions:
        raise ValueError(f"embedding table has {table.num_actions} rows, expected {num_actions}")
    if table.dim == num_actions:
        return table if table.normalized else normalize_embeddings(table)
    proj = np.random.default_rng(seed).standard_normal((table.dim, num_actions)) / np.sqrt(table.dim)
    return normalize_embeddings(table.rows @ proj)


@dataclass(frozen=True)
class NoiseMask:
    mode: MaskMode
    values: np.ndarray  # (T, A), action rows only


def mask_values(actions, table: ActionEmbeddingTable, mode) -> np.ndarray:
    """Mask values for a batch of label sequences: (..., T) -> (..., T, A)."""
    mode = MaskMode.parse(mode)
    actions = np.asarray(actions, dtype=np.int64)
    rows = table.rows
    if actions.size and (actions.min() < 0 or actions.max() >= rows.shape[0]):
        bad = actions[(actions < 0) | (actions >= rows.shape[0])].reshape(-1)[0]
        raise ValueError(f"action label {bad} outside [0, {rows.shape[0]})")
    if mode is MaskMode.NO_MASK:
        return np.zeros(actions.shape + (rows.shape[1],))
    per_step = rows[actions]
    if mode is MaskMode.SINGLE_ADD:
        return per_step
    return np.cumsum(per_step, axis=-2)


def build_mask(actions, table: ActionEmbeddingTable, mode) -> NoiseMask:
    mode = MaskMode.parse(mode)
    actions = np.asarray(actions, dtype=np.int64)
    if actions.ndim != 1:
        raise ValueError(f"build_mask expects one label sequence, got shape {actions.shape}")
    return NoiseMask(mode=mode, values=mask_values(actions, table, mode))


def q_sample(x0, n, schedule: NoiseSchedule, mask, dims: ProblemDims, rng=None, eps=None) -> np.ndarray:
    """Noise the action block of ``x0`` (shape (..., T, W)) to step ``n``.

    ``n`` is a scalar or one step per batch entry; n = 0 returns x0 unchanged.
    ``mask`` is a NoiseMask, an array broadcastable to (..., T, A), or None.
    ``eps`` overrides the Gaussian draw (used for shared-noise comparisons).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-2:] != (dims.T, dims.width):
        raise ValueError(f"plan matrix shape {x0.shape} does not end in ({dims.T}, {dims.width})")
    n = np.asarray(n, dtype=np.int64)
    if n.size and (n.min() < 0 or n.max() > schedule.N):
        raise ValueError(f"step outside [0, {schedule.N}]")
    act = x0[..., dims.action_slice]
    if eps is None:
        if rng is None:
            raise ValueError("q_sample needs an rng or explicit eps")
        eps = rng.standard_normal(act.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != act.shape:
        raise ValueError(f"noise shape {eps.shape} != action block shape {act.shape}")
    m = mask.values if isinstance(mask, NoiseMask) else mask
    if m is not None:
        m = np.asarray(m, dtype=np.float64)
        if m.shape[-2:] != act.shape[-2:]:
            raise ValueError(f"mask shape {m.shape} does not match action block {act.shape}")
        eps = eps + m
    abar = schedule.alpha_bar[n]
    if abar.ndim:
        abar = abar.reshape(abar.shape + (1, 1))
    out = x0.copy()
    out[..., dims.action_slice] = np.sqrt(abar) * act + np.sqrt(1.0 - abar) * eps
    return out


@dataclass
class NoiseStats:
    """Per-position mean/std of fully noised action entries."""

    horizon: int
    mu: np.ndarray
    sigma: np.ndarray
    mode: MaskMode = MaskMode.NO_MASK
    schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.mode = MaskMode.parse(self.mode)
        if self.mu.shape != (self.horizon,) or self.sigma.shape != (self.horizon,):
            raise ValueError(f"mu/sigma must have length {self.horizon}")
        if not np.all(self.sigma > 0):
            raise ValueError("sigma must be positive at every position")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "mode": self.mode.value,
            "schedule": dict(self.schedule),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseStats":
        return cls(horizon=int(d["horizon"]), mu=d["mu"], sigma=d["sigma"], mode=d["mode"],
                   schedule=d.get("schedule", {}))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "NoiseStats":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def simulate_noised_actions(train, schedule: NoiseSchedule, mode, rng, draws: int = 1) -> np.ndarray:
    """Noised action blocks at n = N for every training window, shape (draws*M, T, A)."""
    if len(train) == 0:
        raise ValueError("cannot estimate noise statistics on an empty dataset")
    dims = train.dims
    table = train.mask_table()
    x0 = assemble_batch(train.tasks, train.actions, train.o_s, train.o_g, dims)
    masks = mask_values(train.actions, table, mode)
    out = []
    for _ in range(draws):
        xn = q_sample(x0, schedule.N, schedule, masks, dims, rng=rng)
        out.append(xn[..., dims.action_slice])
    return np.concatenate(out, axis=0)


def estimate_noise_stats(train, schedule: NoiseSchedule, mode, seed: int = 0, draws: int = 1) -> NoiseStats:
    """Pool noised action entries per position over windows and action coordinates."""
    mode = MaskMode.parse(mode)
    noised = simulate_noised_actions(train, schedule, mode, np.random.default_rng(seed), draws)
    mu = noised.mean(axis=(0, 2))
    sigma = noised.std(axis=(0, 2))
    return NoiseStats(horizon=train.dims.T, mu=mu, sigma=sigma, mode=mode, schedule=schedule.to_dict())


def sample_inference_noise(stats: NoiseStats, num_actions: int, use_fitted_mean: bool = False,
                           rng=None, size=None) -> np.ndarray:
    """Starting noise for the action block: N(mean_t, sigma_t^2) per position.

    Returns (T, A), or (size, T, A) when ``size`` is given.
    """
    rng = np.random.default_rng() if rng is None else rng
    shape = (stats.horizon, num_actions) if size is None else (size, stats.horizon, num_actions)
    z = rng.standard_normal(shape)
    out = z * stats.sigma[:, None]
    if use_fitted_mean:
        out = out + stats.mu[:, None]
    return out
