"""Reaction kinetics for the FitzHugh-Nagumo, Gray-Scott and Lambda-Omega systems."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

DEFAULT_PARAMS = {
    "fn": {"alpha": 0.01, "beta": 0.25},
    "gs": {"feed": 0.025, "kill": 0.055},
    "lo": {"beta": 1.0},
}
DEFAULT_DIFFUSION = 0.01


@dataclass(frozen=True)
class SystemSpec:
    """A two-species reaction-diffusion system.

    ``kind`` is one of ``"fn"``, ``"gs"``, ``"lo"``. Missing kinetics parameters
    are filled from :data:`DEFAULT_PARAMS`.
    """

    kind: str
    d_u: float = DEFAULT_DIFFUSION
    d_v: float = DEFAULT_DIFFUSION
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in DEFAULT_PARAMS:
            raise ValueError(f"unknown system {self.kind!r}; expected one of fn, gs, lo")
        if not (self.d_u > 0 and self.d_v > 0):
            raise ValueError("diffusion coefficients must be positive")
        unknown = set(self.params) - set(DEFAULT_PARAMS[kind])
        if unknown:
            raise ValueError(f"unknown {kind} parameter(s): {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[kind], **{k: float(v) for k, v in self.params.items()}}
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", MappingProxyType(merged))

    def __eq__(self, other):
        if not isinstance(other, SystemSpec):
            return NotImplemented
        return (self.kind, self.d_u, self.d_v, dict(self.params)) == (
            other.kind, other.d_u, other.d_v, dict(other.params))

    def __hash__(self):
        return hash((self.kind, self.d_u, self.d_v, tuple(sorted(self.params.items()))))

    @property
    def diffusion(self) -> np.ndarray:
        """Channel-wise diffusion, broadcastable against ``(b, 2, H, W)``."""
        return np.array([self.d_u, self.d_v]).reshape(1, 2, 1, 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_u": self.d_u, "d_v": self.d_v, "params": dict(self.params)}


def system(kind: str, **overrides) -> SystemSpec:
    """Build a system with paper defaults, e.g. ``system("gs", feed=0.03)``."""
    d_u = overrides.pop("d_u", DEFAULT_DIFFUSION)
    d_v = overrides.pop("d_v", DEFAULT_DIFFUSION)
    return SystemSpec(kind, d_u, d_v, overrides)


def reaction_terms(u, v, sys: SystemSpec):
    """``(R_u, R_v)`` evaluated elementwise."""
    p = sys.params
    if sys.kind == "gs":
        uv2 = u * v * v
        return -uv2 + p["feed"] * (1.0 - u), uv2 - (p["feed"] + p["kill"]) * v
    if sys.kind == "fn":
        return u - u ** 3 - v + p["alpha"], p["beta"] * (u - v)
    r2 = u * u + v * v
    a = 1.0 - r2
    w = p["beta"] * r2
    return a * u + w * v, -w * u + a * v


def reaction(state: np.ndarray, sys: SystemSpec) -> np.ndarray:
    """Reaction term of a ``(..., 2, H, W)`` state, same shape."""
    ru, rv = reaction_terms(state[..., 0, :, :], state[..., 1, :, :], sys)
    return np.stack([ru, rv], axis=-3)


def reaction_jacobian(state: np.ndarray, sys: SystemSpec):
    """Pointwise Jacobian entries ``(dRu/du, dRu/dv, dRv/du, dRv/dv)``."""
    u = state[..., 0, :, :]
    v = state[..., 1, :, :]
    p = sys.params
    if sys.kind == "gs":
        f, k = p["feed"], p["kill"]
        v2 = v * v
        return -v2 - f, -2 * u * v, v2, 2 * u * v - (f + k)
    if sys.kind == "fn":
        beta = p["beta"]
        one = np.ones_like(u)
        return 1 - 3 * u * u, -one, beta * one, -beta * one
    beta = p["beta"]
    r2 = u * u + v * v
    a = 1.0 - r2
    return (a - 2 * u * u + 2 * beta * u * v,
            -2 * u * v + beta * (r2 + 2 * v * v),
            -beta * (r2 + 2 * u * u) - 2 * u * v,
            a - 2 * v * v - 2 * beta * u * v)


def reaction_vjp(state: np.ndarray, grad: np.ndarray, sys: SystemSpec) -> np.ndarray:
    """Vector-Jacobian product ``J_R(state)^T grad`` per cell."""
    a, b, c, d = reaction_jacobian(state, sys)
    gu = grad[..., 0, :, :]
    gv = grad[..., 1, :, :]
    return np.stack([a * gu + c * gv, b * gu + d * gv], axis=-3)


def homogeneous_equilibrium(sys: SystemSpec) -> tuple[float, float]:
    """A spatially homogeneous root of the kinetics.

    For FN, ``beta (u - v) = 0`` forces ``u = v`` and the first equation reduces
    to ``alpha - u^3 = 0``.
    """
    if sys.kind == "gs":
        return 1.0, 0.0
    if sys.kind == "lo":
        return 0.0, 0.0
    u = float(np.cbrt(sys.params["alpha"]))
    return u, u
