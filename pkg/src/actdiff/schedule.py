"""Cosine noise schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_MAX = 0.999
DEFAULT_TAU = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed cumulative signal fractions and per-step betas.

    ``alpha_bar`` has N+1 entries indexed 0..N; ``beta`` is stored with a
    leading NaN placeholder so that ``beta[n]`` is the value for step n.
    ``alpha_bar_raw`` keeps the unclipped cosine values.
    """

    N: int
    tau: float
    alpha_bar: np.ndarray
    beta: np.ndarray
    alpha_bar_raw: np.ndarray

    def query(self, n: int) -> tuple[float, float]:
        """Return ``(alpha_bar[n], beta[n])`` for 1 <= n <= N."""
        if not 1 <= n <= self.N:
            raise ValueError(f"step {n} outside [1, {self.N}]")
        return float(self.alpha_bar[n]), float(self.beta[n])

    def to_dict(self) -> dict:
        return {"N": self.N, "tau": self.tau}


def cosine_f(n, N: int, tau: float):
    return np.cos(((np.asarray(n, dtype=np.float64) / N + tau) / (1.0 + tau)) * (np.pi / 2)) ** 2


def build_cosine_schedule(N: int, tau: float = DEFAULT_TAU) -> NoiseSchedule:
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau!r}")
    f = cosine_f(np.arange(N + 1), N, tau)
    raw = f / f[0]
    raw[0] = 1.0
    beta = np.empty(N + 1)
    beta[0] = np.nan
    beta[1:] = np.minimum(1.0 - raw[1:] / raw[:-1], BETA_MAX)
    # alpha_bar is rebuilt from the (possibly clipped) betas so the recurrence is exact
    alpha_bar = np.empty(N + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta[1:])
    for arr in (alpha_bar, beta, raw):
        arr.setflags(write=False)
    return NoiseSchedule(N=int(N), tau=float(tau), alpha_bar=alpha_bar, beta=beta, alpha_bar_raw=raw)


def query(s: NoiseSchedule, n: int) -> tuple[float, float]:
    return s.query(n)
