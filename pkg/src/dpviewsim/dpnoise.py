"""Laplace noise derived jointly from two server-contributed random words.

Both servers feed one uniform 32-bit word into each draw; the XOR of the two
words seeds a log-transform Laplace sample, so neither server alone can
predict or steer the noise. A conventional inverse-CDF sampler is provided as
a statistical oracle for distribution tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sharing import check_word

_LOW31 = (1 << 31) - 1
_DENOM = (1 << 31) + 1
_MSB = 1 << 31


@dataclass(frozen=True)
class NoiseScale:
    """Sensitivity / epsilon pair; scale of the Laplace distribution."""

    sensitivity: float
    epsilon: float

    def __post_init__(self):
        if self.sensitivity <= 0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def scale(self) -> float:
        return self.sensitivity / self.epsilon


def fixed_point(z: int) -> float:
    """Map a ring word to the open interval (0, 1).

    Only the low 31 bits are used; the most-significant bit is reserved for
    the sign. r = (low31 + 1) / (2**31 + 1) is uniform over 2**31 atoms and
    excludes both endpoints.
    """
    check_word(z, "z")
    return ((z & _LOW31) + 1) / _DENOM


def joint_laplace(z0: int, z1: int, scale: NoiseScale) -> float:
    """One Laplace(0, scale) draw from two fresh server words.

    z = z0 XOR z1; the noise is scale * ln(fixed_point(z)), negated when the
    msb of z is clear. msb set means a negative draw (ln r < 0 kept as is).
    Over uniform z the result is Laplace up to 31-bit discretization.
    """
    check_word(z0, "z0")
    check_word(z1, "z1")
    z = z0 ^ z1
    sign = 1.0 if z & _MSB else -1.0
    return scale.scale * math.log(fixed_point(z)) * sign


def laplace_inverse_cdf(u: float, scale: float) -> float:
    """Inverse CDF of Laplace(0, scale) at u in (0, 1)."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must be in (0,1), got {u}")
    d = u - 0.5
    if d == 0.0:
        return 0.0
    return -scale * math.copysign(1.0, d) * math.log1p(-2.0 * abs(d))


def laplace_oracle(scale: NoiseScale, rng: np.random.Generator | int) -> float:
    """Reference inverse-CDF Laplace sample from a seeded generator."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    u = rng.random()
    while u == 0.0:  # keep u strictly inside (0,1)
        u = rng.random()
    return laplace_inverse_cdf(u, scale.scale)


def laplace_oracle_many(scale: NoiseScale, n: int, rng: np.random.Generator | int) -> np.ndarray:
    """Vectorized oracle draws, same inverse-CDF transform as laplace_oracle."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    u = rng.random(n)
    d = u - 0.5
    return -scale.scale * np.sign(d) * np.log1p(-2.0 * np.abs(d))


def joint_laplace_many(z0: np.ndarray, z1: np.ndarray, scale: NoiseScale) -> np.ndarray:
    """Vectorized joint_laplace over arrays of uint32 words."""
    z = (np.asarray(z0, dtype=np.uint64) ^ np.asarray(z1, dtype=np.uint64)).astype(np.int64)
    r = ((z & _LOW31) + 1) / _DENOM
    sign = np.where(z & _MSB, 1.0, -1.0)
    return scale.scale * np.log(r) * sign
