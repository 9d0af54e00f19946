"""Degree-4 Hermite polynomial activations with per-channel range normalisation.

The activation is ``q * poly(x / q)`` where ``poly`` is a weighted sum of
orthonormal (probabilists') Hermite polynomials and ``q`` is a per-channel
scale tracked from maximum absolute activations.  At inference time ``q`` is
frozen, so the whole thing folds into one fixed quartic per channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

__all__ = [
    "HermiteCoeffs",
    "RELU",
    "SILU",
    "PRESETS",
    "hermite_eval",
    "to_monomial",
    "from_monomial",
    "poly_eval",
    "fuse_inference",
    "PolyActState",
    "polyact_rn_forward",
    "approx_error",
]

_SQRT2 = math.sqrt(2.0)
_SQRT6 = math.sqrt(6.0)


@dataclass(frozen=True)
class HermiteCoeffs:
    f0: float
    f1: float
    f2: float
    f3: float
    f4: float

    def as_array(self) -> np.ndarray:
        return np.array([self.f0, self.f1, self.f2, self.f3, self.f4])

    @classmethod
    def from_array(cls, values) -> "HermiteCoeffs":
        values = [float(v) for v in values]
        if len(values) != 5:
            raise ValueError(f"expected 5 Hermite coefficients, got {len(values)}")
        return cls(*values)


RELU = HermiteCoeffs(0.39894228, 0.5, 0.28209479, 0.0, -0.08143375)
SILU = HermiteCoeffs(0.20662096, 0.5, 0.24808519, 0.0, -0.03780501)
PRESETS = {"relu": RELU, "silu": SILU}


def hermite_eval(i: int, x):
    """Orthonormal Hermite basis function ``h_i`` for ``i`` in 0..4."""
    x = np.asarray(x, dtype=np.float64)
    if i == 0:
        return np.ones_like(x)
    if i == 1:
        return x
    if i == 2:
        return (x * x - 1.0) / _SQRT2
    if i == 3:
        return (x**3 - 3.0 * x) / _SQRT6
    if i == 4:
        return (x**4 - 6.0 * x * x + 3.0) / (2.0 * _SQRT6)
    raise ValueError(f"Hermite index must be in 0..4, got {i}")


def to_monomial(f: HermiteCoeffs) -> np.ndarray:
    """Power-basis coefficients ``a0..a4`` of ``sum_i f_i h_i(x)``."""
    f0, f1, f2, f3, f4 = f.as_array()
    return np.array([
        f0 - f2 / _SQRT2 + 3.0 * f4 / (2.0 * _SQRT6),
        f1 - 3.0 * f3 / _SQRT6,
        f2 / _SQRT2 - 6.0 * f4 / (2.0 * _SQRT6),
        f3 / _SQRT6,
        f4 / (2.0 * _SQRT6),
    ])


def from_monomial(a) -> HermiteCoeffs:
    """Inverse of :func:`to_monomial`."""
    a0, a1, a2, a3, a4 = np.asarray(a, dtype=np.float64)
    f4 = a4 * 2.0 * _SQRT6
    f3 = a3 * _SQRT6
    f2 = (a2 + 6.0 * f4 / (2.0 * _SQRT6)) * _SQRT2
    f1 = a1 + 3.0 * f3 / _SQRT6
    f0 = a0 + f2 / _SQRT2 - 3.0 * f4 / (2.0 * _SQRT6)
    return HermiteCoeffs(f0, f1, f2, f3, f4)


def poly_eval(f: HermiteCoeffs, x):
    """``sum_i f_i h_i(x)`` evaluated directly in the Hermite basis."""
    return sum(c * hermite_eval(i, x) for i, c in enumerate(f.as_array()))


def fuse_inference(f: HermiteCoeffs, q) -> np.ndarray:
    """Fold the scale into monomial coefficients.

    Returns an array of shape ``q.shape + (5,)`` with ``c_j = a_j * q**(1-j)``
    so that ``sum_j c_j x**j == q * poly(x / q)``.
    """
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("scales q must be positive")
    a = to_monomial(f)
    powers = 1 - np.arange(5)
    return a * q[..., None] ** powers


@dataclass
class PolyActState:
    channels: int
    coeffs: HermiteCoeffs = RELU
    gamma: float = 3.0
    momentum: float = 0.9
    eps: float = 1e-5
    mode: Literal["training", "inference"] = "training"
    running_max: np.ndarray = field(default=None)  # type: ignore[assignment]

    degree: int = field(default=4, init=False)

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.running_max is None:
            self.running_max = np.ones(self.channels)
        self.running_max = np.asarray(self.running_max, dtype=np.float64).copy()
        if self.running_max.shape != (self.channels,):
            raise ValueError(f"running_max must have shape ({self.channels},)")

    def scales(self) -> np.ndarray:
        """Per-channel inference scales ``q_c``."""
        return self.running_max / self.gamma + self.eps

    def fused(self) -> np.ndarray:
        """(C, 5) monomial coefficients for packed evaluation."""
        return fuse_inference(self.coeffs, self.scales())


def polyact_rn_forward(X, state: PolyActState) -> np.ndarray:
    """Range-normalised polynomial activation on a ``B x C x H x W`` batch.

    In training mode this updates ``state.running_max`` in place.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        return polyact_rn_forward(X[None], state)[0]
    if X.ndim != 4 or X.shape[1] != state.channels:
        raise ValueError(f"expected (B, {state.channels}, H, W) input, got {X.shape}")
    if X[:, 0].size == 0:
        raise ValueError("empty channel")
    if state.mode == "training":
        batch_max = np.abs(X).max(axis=(0, 2, 3))
        state.running_max = state.momentum * state.running_max + (1 - state.momentum) * batch_max
        q = batch_max / state.gamma + state.eps
    elif state.mode == "inference":
        q = state.scales()
    else:
        raise ValueError(f"unknown mode {state.mode!r}")
    q = q[None, :, None, None]
    return q * poly_eval(state.coeffs, X / q)


def _silu(x):
    return x / (1.0 + np.exp(-x))


_TARGETS = {"relu": lambda x: np.maximum(x, 0.0), "silu": _silu}


def approx_error(f: HermiteCoeffs, target: str = "relu", gamma: float = 3.0,
                 n: int = 100_001) -> tuple[float, float]:
    """(max, mean) absolute error of ``poly`` against ``target`` on ``[-gamma, gamma]``.

    Uses ``n`` uniformly spaced samples including both endpoints.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    x = np.linspace(-gamma, gamma, n) if gamma > 0 else np.zeros(1)
    err = np.abs(poly_eval(f, x) - _TARGETS[target](x))
    return float(err.max()), float(err.mean())
