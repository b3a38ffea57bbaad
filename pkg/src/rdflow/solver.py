"""Reference integrator: five-point periodic Laplacian with SSP-RK3 in time.

Also provides an implicit Crank-Nicolson stepper, used only as an oracle for
the residual loss, and the ``RDTRAJ01`` trajectory file format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import BLOWUP_THRESHOLD, check_state, is_blown_up
from .systems import SystemSpec, reaction

DT_REF = 1e-4

TRAJ_MAGIC = b"RDTRAJ01"
META_MAGIC = b"RDMETA01"
KIND_TAGS = {"fn": 0, "gs": 1, "lo": 2}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def laplacian_fd2(f: np.ndarray, h: float) -> np.ndarray:
    """Five-point Laplacian with periodic wrap over the last two axes."""
    if f.shape[-1] < 3 or f.shape[-2] < 3:
        raise ValueError("laplacian needs at least 3 cells per axis")
    out = np.roll(f, 1, axis=-2)
    out += np.roll(f, -1, axis=-2)
    out += np.roll(f, 1, axis=-1)
    out += np.roll(f, -1, axis=-1)
    out -= 4.0 * f
    out /= h * h
    return out


def rhs(state: np.ndarray, sys: SystemSpec, h: float) -> np.ndarray:
    """Semi-discrete right-hand side ``D lap(U) + R(U)``."""
    return sys.diffusion * laplacian_fd2(state, h) + reaction(state, sys)


def ssp_rk3_step(state: np.ndarray, sys: SystemSpec, dt: float, h: float | None = None) -> np.ndarray:
    """One Shu-Osher SSP-RK3 step of size ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if h is None:
        h = 1.0 / state.shape[-1]
    u1 = state + dt * rhs(state, sys, h)
    u2 = 0.75 * state + 0.25 * (u1 + dt * rhs(u1, sys, h))
    return state / 3.0 + (2.0 / 3.0) * (u2 + dt * rhs(u2, sys, h))


def stride_of(dt_op: float, dt_ref: float) -> int:
    """Number of reference steps per operator step; must be an integer."""
    if dt_op <= 0 or dt_ref <= 0:
        raise ValueError("time steps must be positive")
    ratio = dt_op / dt_ref
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * ratio:
        raise ValueError(f"dt_op={dt_op} is not an integer multiple of dt_ref={dt_ref}")
    return stride


@dataclass
class Trajectory:
    """Snapshots ``states[k]`` at times ``k * dt_op``, shape ``(M+1, b, 2, H, W)``."""

    states: np.ndarray
    dt_op: float
    dt_ref: float
    sys: SystemSpec
    status: str = "completed"
    failed_at: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_snapshots(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_snapshots) * self.dt_op

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    def sample(self, k: int) -> "Trajectory":
        """Single-sample view along the batch axis."""
        return Trajectory(self.states[:, k:k + 1], self.dt_op, self.dt_ref, self.sys,
                          self.status, self.failed_at, dict(self.meta))


def generate_trajectory(ic: np.ndarray, sys: SystemSpec, dt_op: float, m_steps: int,
                        dt_ref: float = DT_REF, threshold: float = BLOWUP_THRESHOLD) -> Trajectory:
    """Advance ``ic`` with SSP-RK3 at ``dt_ref`` and store every ``dt_op``.

    A nonfinite or oversized state stops the integration; the returned
    trajectory then holds the snapshots up to the last good one and
    ``status == "blew_up"``.
    """
    check_state(ic)
    if m_steps < 1:
        raise ValueError("m_steps must be >= 1")
    stride = stride_of(dt_op, dt_ref)
    h = 1.0 / ic.shape[-1]
    u = np.array(ic, dtype=np.float64)
    snaps = [u.copy()]
    for k in range(1, m_steps + 1):
        for _ in range(stride):
            u = ssp_rk3_step(u, sys, dt_ref, h)
        if is_blown_up(u, threshold):
            return Trajectory(np.stack(snaps), dt_op, dt_ref, sys, "blew_up", k)
        snaps.append(u.copy())
    return Trajectory(np.stack(snaps), dt_op, dt_ref, sys)


class ConvergenceError(RuntimeError):
    pass


def cn_reference_step(state: np.ndarray, sys: SystemSpec, dt: float, tol: float = 1e-12,
                      max_iter: int = 10_000, damping: float = 1.0, h: float | None = None) -> np.ndarray:
    """Solve the Crank-Nicolson system for ``U^{n+1}`` by damped fixed-point iteration.

    Converges only when ``dt/2`` times the Lipschitz constant of the right-hand
    side is below one; that is the caller's responsibility.
    """
    from .losses import cn_residual

    if h is None:
        h = 1.0 / state.shape[-1]
    explicit = state + 0.5 * dt * rhs(state, sys, h)
    u = np.array(state, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            res = cn_residual(u, state, sys, dt, h)
            if np.max(np.abs(res)) <= tol:
                return u
            g = explicit + 0.5 * dt * rhs(u, sys, h)
            u = (1.0 - damping) * u + damping * g
            if not np.all(np.isfinite(u)):
                break
    raise ConvergenceError(f"CN fixed-point iteration did not reach tol={tol} in {max_iter} iterations")


# ----------------------------------------------------------------------------
# RDTRAJ01: magic, u32 (n_snapshots, channels, H, W), f64 dt_op, f64 dt_ref,
# u8 system tag, then f32 snapshot data. One sample per file. An optional
# trailer (RDMETA01, u32 length, UTF-8 JSON) carries metadata.

_HEADER = struct.Struct("<4I2dB")


def save_trajectory(path, traj: Trajectory, sample: int = 0, meta: dict | None = None) -> None:
    data = np.ascontiguousarray(traj.states[:, sample], dtype="<f4")
    n_snap, channels, height, width = data.shape
    buf = bytearray(TRAJ_MAGIC)
    buf += _HEADER.pack(n_snap, channels, height, width, traj.dt_op, traj.dt_ref, KIND_TAGS[traj.sys.kind])
    buf += data.tobytes()
    meta = dict(traj.meta if meta is None else meta)
    meta.setdefault("system", traj.sys.to_dict())
    meta.setdefault("status", traj.status)
    if traj.failed_at is not None:
        meta.setdefault("failed_at", traj.failed_at)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf += META_MAGIC + struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(buf))


def load_trajectory(path, sys: SystemSpec | None = None) -> Trajectory:
    """Read an ``RDTRAJ01`` file; states come back as float64 with batch size 1."""
    raw = Path(path).read_bytes()
    if raw[:8] != TRAJ_MAGIC:
        raise ValueError(f"{path}: not an RDTRAJ01 file")
    if len(raw) < 8 + _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    n_snap, channels, height, width, dt_op, dt_ref, tag = _HEADER.unpack_from(raw, 8)
    if channels != 2 or height != width or height < 4 or n_snap < 1:
        raise ValueError(f"{path}: bad shape ({n_snap}, {channels}, {height}, {width})")
    if tag not in TAG_KINDS:
        raise ValueError(f"{path}: unknown system tag {tag}")
    offset = 8 + _HEADER.size
    count = n_snap * channels * height * width
    end = offset + 4 * count
    if len(raw) < end:
        raise ValueError(f"{path}: truncated data")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    states = data.reshape(n_snap, 1, channels, height, width).astype(np.float64)
    meta = {}
    if len(raw) > end:
        if raw[end:end + 8] != META_MAGIC:
            raise ValueError(f"{path}: unexpected trailing bytes")
        (length,) = struct.unpack_from("<I", raw, end + 8)
        meta = json.loads(raw[end + 12:end + 12 + length].decode())
    if sys is None:
        if "system" in meta:
            s = meta["system"]
            sys = SystemSpec(s["kind"], s["d_u"], s["d_v"], s["params"])
        else:
            sys = SystemSpec(TAG_KINDS[tag])
    elif sys.kind != TAG_KINDS[tag]:
        raise ValueError(f"{path}: file holds system {TAG_KINDS[tag]}, expected {sys.kind}")
    status = meta.get("status", "completed")
    return Trajectory(states, dt_op, dt_ref, sys, status, meta.get("failed_at"), meta)
