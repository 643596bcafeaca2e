"""Diffusion coefficient tables.

Arrays are stored 1-indexed in spirit: ``beta[t - 1]`` holds beta_t for
t = 1..T. Everything is computed at float64 and cast on use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    variance: str = "reduced"
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    a: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)
    sigma2: np.ndarray = field(init=False, repr=False)
    omega: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta_t must lie strictly inside (0, 1)")
        if self.variance not in ("reduced", "posterior"):
            raise ValueError(f"unknown variance mode {self.variance!r}")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        a = 1.0 / np.sqrt(alpha)
        b = beta / np.sqrt(1.0 - alpha_bar)
        if self.variance == "reduced":
            # well below the posterior variance once alpha_bar is small
            sigma2 = beta**2 / (2.0 * alpha * (1.0 - alpha_bar))
        else:
            # posterior variance of q(f_{t-1} | f_t, f_0), alpha_bar_0 = 1
            prev = np.concatenate([[1.0], alpha_bar[:-1]])
            sigma2 = (1.0 - prev) / (1.0 - alpha_bar) * beta
        for name, val in [
            ("beta", beta),
            ("alpha", alpha),
            ("alpha_bar", alpha_bar),
            ("a", a),
            ("b", b),
            ("sigma2", sigma2),
            ("omega", alpha_bar**2),
        ]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"time step {t} outside 1..{self.T}")

    def reverse_constants(self, t: int) -> tuple[float, float, float]:
        """(a_t, b_t, Sigma_t) for the reverse step from t to t-1."""
        self._check_t(t)
        return float(self.a[t - 1]), float(self.b[t - 1]), float(self.sigma2[t - 1])

    def at(self, name: str, t):
        """Look up table ``name`` at step(s) t (1-based, scalar or integer array)."""
        table = getattr(self, name)
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"time step outside 1..{self.T}")
        return table[t - 1]

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "variance": self.variance}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["beta"], dtype=np.float64), d.get("variance", "reduced"))


def linear_schedule(
    beta_1: float = 0.0015, beta_T: float = 0.05, T: int = 1000, variance: str = "reduced"
) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if T == 1:
        beta = np.array([beta_1], dtype=np.float64)
    else:
        beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    return NoiseSchedule(beta, variance=variance)


def reverse_constants(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    return s.reverse_constants(t)
