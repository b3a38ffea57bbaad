"""Initial-condition samplers: the in-distribution toroidal Gaussian and the OOD families.

Every sampler takes an :class:`~rdflow.fields.Rng` and a grid and returns
``(state, meta)`` where ``state`` has shape ``(1, 2, n, n)`` and ``meta`` is a
JSON-friendly record of the draws. Channels are drawn independently (u first)
unless a family says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .fields import GridSpec, Rng, torus_delta, torus_distance_sq_grid
from .systems import SystemSpec, homogeneous_equilibrium


@dataclass
class IcParams:
    """Parameter ranges for all families. Unspecified ranges use documented defaults."""

    sigma: tuple[float, float] = (0.05, 0.20)
    n_components: tuple[int, int] = (2, 5)
    noise_sigma: float = 0.02
    patch_w: tuple[float, float] = (0.2, 0.4)
    patch_h: tuple[float, float] = (0.2, 0.4)
    turing_sigma: float = 0.02
    annulus_r0: tuple[float, float] = (0.15, 0.30)
    annulus_s: tuple[float, float] = (0.03, 0.08)
    stripes_f: tuple[int, int] = (2, 6)
    stripes_snap: bool = True
    lattice_n: tuple[int, int] = (4, 7)
    lattice_jitter: tuple[float, float] = (0.0, 0.2)
    lattice_width: float = 0.12
    lattice_gamma: float = 0.1
    lattice_anti_phase: str = "auto"

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, (tuple, list)):
                if len(val) != 2 or val[0] > val[1]:
                    raise ValueError(f"{f.name}: range {val} is empty or malformed")
                setattr(self, f.name, tuple(val))
        lo, hi = self.sigma
        if not (0 < lo and hi <= 0.5):
            raise ValueError("sigma range must lie in (0, 0.5]")
        if self.noise_sigma < 0 or self.turing_sigma < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.lattice_anti_phase not in ("auto", "always", "never"):
            raise ValueError("lattice_anti_phase must be auto, always or never")


FAMILIES = ("single_gaussian", "multi_gaussian", "noisy_gaussian", "patch", "turing_noise",
            "annulus", "stripes", "dot_lattice")
OOD_FAMILIES = FAMILIES[1:]

# Systems whose dot-lattice seeding uses the anti-phase (g, gamma (1 - g)) pair.
SPOT_SYSTEMS = ("gs",)


# ----------------------------------------------------------------------------
# Deterministic field builders (no randomness).

def gaussian_field(grid: GridSpec, center, sigma: float) -> np.ndarray:
    return np.exp(-torus_distance_sq_grid(grid, center) / (2.0 * sigma * sigma))


def patch_field(grid: GridSpec, center, width: float, height: float) -> np.ndarray:
    c = grid.centers()
    inside_x = torus_delta(c, center[0]) < 0.5 * width
    inside_y = torus_delta(c, center[1]) < 0.5 * height
    return (inside_x[:, None] & inside_y[None, :]).astype(np.float64)


def annulus_field(grid: GridSpec, center, r0: float, s: float) -> np.ndarray:
    r = np.sqrt(torus_distance_sq_grid(grid, center))
    return np.exp(-((r - r0) ** 2) / (2.0 * s * s))


def stripes_field(grid: GridSpec, phi: float, freq: int, snap: bool = True) -> np.ndarray:
    """``(1 + sin(2 pi f (cos phi x + sin phi y))) / 2``.

    With ``snap`` the wave vector ``f (cos phi, sin phi)`` is rounded to the
    nearest integer pair so the pattern is periodic on the torus.
    """
    x, y = grid.mesh()
    kx, ky = freq * math.cos(phi), freq * math.sin(phi)
    if snap:
        kx, ky = round(kx), round(ky)
    return 0.5 * (1.0 + np.sin(2.0 * np.pi * (kx * x + ky * y)))


def lattice_centers(nx: int, ny: int, jitter_x: np.ndarray, jitter_y: np.ndarray) -> list[tuple[float, float]]:
    sx, sy = 1.0 / nx, 1.0 / ny
    return [(((i + 0.5 + jitter_x[i, j]) * sx) % 1.0, ((j + 0.5 + jitter_y[i, j]) * sy) % 1.0)
            for i in range(nx) for j in range(ny)]


def lattice_field(grid: GridSpec, centers, sigma: float) -> np.ndarray:
    g = np.zeros((grid.n, grid.n))
    for c in centers:
        g += gaussian_field(grid, c, sigma)
    return g / g.max()


# ----------------------------------------------------------------------------
# Samplers.

def _state(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([u, v])[None]


def _draw_gaussian(rng: Rng, sigma_range):
    c = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0))
    return c, rng.uniform(*sigma_range)


def ic_single_gaussian(rng: Rng, grid: GridSpec, params: IcParams | None = None):
    params = params or IcParams()
    fields_, meta = [], []
    for _ in range(2):
        c, s = _draw_gaussian(rng, params.sigma)
        fields_.append(gaussian_field(grid, c, s))
        meta.append({"center": list(c), "sigma": s})
    return _state(*fields_), {"family": "single_gaussian", "channels": meta}


def ic_multi_gaussian(rng: Rng, grid: GridSpec, params: IcParams | None = None):
    params = params or IcParams()
    fields_, meta = [], []
    for _ in range(2):
        n = rng.integers(*params.n_components)
        comps = [_draw_gaussian(rng, params.sigma) for _ in range(n)]
        fields_.append(sum(gaussian_field(grid, c, s) for c, s in comps) / n)
        meta.append({"n": n, "centers": [list(c) for c, _ in comps], "sigmas": [s for _, s in comps]})
    return _state(*fields_), {"family": "multi_gaussian", "channels": meta}


def ic_noisy_gaussian(rng: Rng, grid: GridSpec, params: IcParams | None = None):
    params = params or IcParams()
    state, meta = ic_single_gaussian(rng, grid, params)
    noise = rng.normal(0.0, params.noise_sigma, size=state.shape)
    meta = {"family": "noisy_gaussian", "channels": meta["channels"], "noise_sigma": params.noise_sigma}
    return state + noise, meta


def ic_patch(rng: Rng, grid: GridSpec, params: IcParams | None = None):
    params = params or IcParams()
    fields_, meta = [], []
    for _ in range(2):
        c = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0))
        w = rng.uniform(*params.patch_w)
        h = rng.uniform(*params.patch_h)
        fields_.append(patch_field(grid, c, w, h))
        meta.append({"center": list(c), "w": w, "h": h})
    return _state(*fields_), {"family": "patch", "channels": meta}


def ic_turing_noise(rng: Rng, grid: GridSpec, sys: SystemSpec, params: IcParams | None = None):
    params = params or IcParams()
    u_star, v_star = homogeneous_equilibrium(sys)
    base = np.empty((1, 2, grid.n, grid.n))
    base[:, 0] = u_star
    base[:, 1] = v_star
    noise = rng.normal(0.0, params.turing_sigma, size=base.shape)
    return base + noise, {"family": "turing_noise", "equilibrium": [u_star, v_star],
                          "noise_sigma": params.turing_sigma}


def ic_annulus(rng: Rng, grid: GridSpec, params: IcParams | None = None):
    params = params or IcParams()
    fields_, meta = [], []
    for _ in range(2):
        c = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0))
        r0 = rng.uniform(*params.annulus_r0)
        s = rng.uniform(*params.annulus_s)
        fields_.append(annulus_field(grid, c, r0, s))
        meta.append({"center": list(c), "r0": r0, "s": s})
    return _state(*fields_), {"family": "annulus", "channels": meta}


def ic_stripes(rng: Rng, grid: GridSpec, params: IcParams | None = None):
    params = params or IcParams()
    fields_, meta = [], []
    for _ in range(2):
        phi = rng.uniform(0.0, 2.0 * np.pi)
        f = rng.integers(*params.stripes_f)
        fields_.append(stripes_field(grid, phi, f, params.stripes_snap))
        meta.append({"phi": phi, "f": f})
    return _state(*fields_), {"family": "stripes", "channels": meta}


def _draw_lattice(rng: Rng, grid: GridSpec, params: IcParams):
    nx = rng.integers(*params.lattice_n)
    ny = rng.integers(*params.lattice_n)
    jx = rng.uniform(*params.lattice_jitter, size=(nx, ny))
    jy = rng.uniform(*params.lattice_jitter, size=(nx, ny))
    sigma = params.lattice_width * min(1.0 / nx, 1.0 / ny)
    g = lattice_field(grid, lattice_centers(nx, ny, jx, jy), sigma)
    return g, {"nx": nx, "ny": ny, "sigma": sigma, "jitter_x": jx.tolist(), "jitter_y": jy.tolist()}


def ic_dot_lattice(rng: Rng, grid: GridSpec, sys: SystemSpec | None = None, params: IcParams | None = None):
    """Jittered lattice of Gaussian dots normalized to max 1.

    For spot-regime systems the second channel is the anti-phase contrast
    ``gamma (1 - g)``; otherwise each channel gets its own lattice draw.
    """
    params = params or IcParams()
    g, m = _draw_lattice(rng, grid, params)
    mode = params.lattice_anti_phase
    anti = mode == "always" or (mode == "auto" and sys is not None and sys.kind in SPOT_SYSTEMS)
    if anti:
        u = np.clip(g, 0.0, 1.0)
        v = np.clip(params.lattice_gamma * (1.0 - g), 0.0, 1.0)
        return _state(u, v), {"family": "dot_lattice", "anti_phase": True, "gamma": params.lattice_gamma,
                              "channels": [m]}
    g2, m2 = _draw_lattice(rng, grid, params)
    return _state(g, g2), {"family": "dot_lattice", "anti_phase": False, "channels": [m, m2]}


def sample_ic(family: str, rng: Rng, grid: GridSpec, sys: SystemSpec | None = None,
              params: IcParams | None = None):
    if family == "turing_noise":
        if sys is None:
            raise ValueError("turing_noise needs a system for its equilibrium")
        return ic_turing_noise(rng, grid, sys, params)
    if family == "dot_lattice":
        return ic_dot_lattice(rng, grid, sys, params)
    try:
        fn = _SAMPLERS[family]
    except KeyError:
        raise ValueError(f"unknown IC family {family!r}; expected one of {FAMILIES}") from None
    return fn(rng, grid, params)


_SAMPLERS = {
    "single_gaussian": ic_single_gaussian,
    "multi_gaussian": ic_multi_gaussian,
    "noisy_gaussian": ic_noisy_gaussian,
    "patch": ic_patch,
    "annulus": ic_annulus,
    "stripes": ic_stripes,
}


@dataclass
class IcBatch:
    states: np.ndarray
    meta: list[dict] = field(default_factory=list)


def sample_batch(family: str, count: int, rng: Rng, grid: GridSpec, sys: SystemSpec | None = None,
                 params: IcParams | None = None) -> IcBatch:
    """Stack ``count`` independent draws; sample ``k`` uses the sub-stream ``rng.derive(k)``."""
    if count <= 0:
        raise ValueError("count must be positive")
    states, metas = [], []
    for k in range(count):
        s, m = sample_ic(family, rng.derive(k), grid, sys, params)
        m["index"] = k
        states.append(s)
        metas.append(m)
    return IcBatch(np.concatenate(states), metas)
