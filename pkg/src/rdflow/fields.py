"""Grid and field primitives on the periodic unit torus.

Field batches are plain float64 numpy arrays of shape ``(b, 2, H, W)``; channel
0 holds ``u`` and channel 1 holds ``v``. The first spatial axis (rows, index
``i``) is the ``x`` coordinate and the second (columns, index ``j``) is ``y``.
Cell centers sit at ``((i + 1/2) h, (j + 1/2) h)``.

Randomness goes through :class:`Rng`, a thin wrapper over numpy's PCG64 bit
generator. PCG64 output for a given seed is fixed by numpy's stream
compatibility policy and is identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Entries whose magnitude exceeds this are treated as a blow-up.
BLOWUP_THRESHOLD = 1e6


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid with ``n`` cells per axis on ``[0, 1]^2``."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 4:
            raise ValueError(f"grid size must be an integer >= 4, got {self.n!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def centers(self) -> np.ndarray:
        """1-D array of cell-center coordinates along one axis."""
        return (np.arange(self.n) + 0.5) / self.n

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(x, y)`` cell-center coordinates, each of shape ``(n, n)``."""
        c = self.centers()
        return np.meshgrid(c, c, indexing="ij")

    @classmethod
    def of(cls, state: np.ndarray) -> "GridSpec":
        """Grid implied by a ``(b, 2, n, n)`` state array."""
        check_state(state)
        return cls(int(state.shape[-1]))


def check_state(state: np.ndarray, grid: GridSpec | None = None) -> np.ndarray:
    """Validate the canonical ``(b, 2, H, W)`` layout and return the array."""
    if state.ndim != 4 or state.shape[1] != 2:
        raise ValueError(f"expected state of shape (b, 2, H, W), got {state.shape}")
    if state.shape[2] != state.shape[3]:
        raise ValueError(f"grid must be square, got {state.shape[2]}x{state.shape[3]}")
    if grid is not None and state.shape[2] != grid.n:
        raise ValueError(f"state grid {state.shape[2]} does not match GridSpec n={grid.n}")
    return state


def is_blown_up(state: np.ndarray, threshold: float = BLOWUP_THRESHOLD) -> bool:
    """True if any entry is nonfinite or larger than ``threshold`` in magnitude."""
    with np.errstate(invalid="ignore"):
        return not bool(np.all(np.abs(state) <= threshold))


def wrap_index(i: int, n: int) -> int:
    if n < 1:
        raise ValueError("n must be positive")
    return i % n


def torus_delta(x, c):
    """Per-axis minimum-image distance ``min(|x - c|, 1 - |x - c|)`` (broadcasts)."""
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(c, dtype=float)) % 1.0
    return np.minimum(d, 1.0 - d)


def torus_distance_sq(x, c) -> float:
    """Squared wrap-around distance between two points of the unit torus."""
    d = torus_delta(x, c)
    return float(np.sum(d * d))


def torus_distance_sq_grid(grid: GridSpec, center) -> np.ndarray:
    """Squared torus distance from every cell center to ``center``, shape ``(n, n)``."""
    c = grid.centers()
    dx = torus_delta(c, center[0])
    dy = torus_delta(c, center[1])
    return dx[:, None] ** 2 + dy[None, :] ** 2


def stack(states) -> np.ndarray:
    """Concatenate ``(b_k, 2, H, W)`` arrays along the batch axis."""
    states = [check_state(np.asarray(s, dtype=np.float64)) for s in states]
    if not states:
        raise ValueError("nothing to stack")
    return np.concatenate(states, axis=0)


class Rng:
    """Seeded random stream (numpy PCG64).

    ``derive`` builds an independent child stream from the parent seed and a
    tuple of integer keys, which is how per-sample and per-task sub-seeds are
    made. Derivation depends only on ``(seed, keys)``, never on how many draws
    the parent has made.
    """

    def __init__(self, seed: int = 0, _keys: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.keys = tuple(int(k) for k in _keys)
        seq = np.random.SeedSequence(entropy=seed, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.keys + tuple(keys))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if lo > hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        if lo == hi:
            # Consume a draw anyway so stream positions do not depend on the bounds.
            u = self._gen.random(size)
            return lo if size is None else np.full(u.shape, float(lo))
        out = lo + (hi - lo) * self._gen.random(size)
        return float(out) if size is None else out

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        if sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {sigma}")
        z = self._gen.standard_normal(size)
        out = mu + sigma * z
        return float(out) if size is None else out

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers on the closed range ``[lo, hi]``."""
        if lo > hi:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        out = self._gen.integers(lo, hi, size=size, endpoint=True)
        return int(out) if size is None else out

    # Aliases matching the names used in configs and docs.
    rand_uniform = uniform
    rand_normal = normal
    rand_int = integers
