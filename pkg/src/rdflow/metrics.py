"""Rollout evaluation: autoregressive inference, per-time errors, AMAE, Pearson correlation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .fields import BLOWUP_THRESHOLD, is_blown_up

METRICS_COLUMNS = ("system", "method", "family", "seed", "time", "error", "status")
SUMMARY_COLUMNS = ("system", "method", "family", "amae", "n_seeds")


@dataclass
class Rollout:
    states: list[np.ndarray]
    status: str = "completed"
    failed_at: int | None = None


def rollout(operator: Callable[[np.ndarray], np.ndarray], ic: np.ndarray, steps: int,
            threshold: float = BLOWUP_THRESHOLD) -> Rollout:
    """Compose ``operator`` ``steps`` times starting from ``ic``.

    If a state becomes nonfinite or exceeds ``threshold`` the rollout stops;
    ``states`` then ends with the last good state and ``failed_at`` is the
    step that failed.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    u = np.asarray(ic, dtype=np.float64)
    out = [u]
    for k in range(1, steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                nxt = operator(u)
            except FloatingPointError:
                return Rollout(out, "blew_up", k)
        if is_blown_up(nxt, threshold):
            return Rollout(out, "blew_up", k)
        u = nxt
        out.append(u)
    return Rollout(out)


def error_at_time(prediction: np.ndarray, reference: np.ndarray, reduce: str = "max") -> float:
    """Absolute error over all channels and cells; sup-norm by default, ``reduce="mean"`` for the mean."""
    prediction = np.asarray(prediction)
    reference = np.asarray(reference)
    if prediction.shape != reference.shape:
        raise ValueError(f"shape mismatch {prediction.shape} vs {reference.shape}")
    err = np.abs(prediction - reference)
    if reduce == "max":
        return float(err.max())
    if reduce == "mean":
        return float(err.mean())
    raise ValueError(f"unknown reduction {reduce!r}")


def worst_rollout_mse(operator: Callable[[np.ndarray], np.ndarray], reference: np.ndarray) -> float:
    """Roll ``operator`` out from ``reference[0]`` and return the worst-over-time mean squared error.

    ``reference`` has shape ``(steps+1, b, 2, H, W)``. A blow-up scores ``inf``.
    """
    ro = rollout(operator, reference[0], reference.shape[0] - 1)
    if ro.status != "completed":
        return math.inf
    return float(max(np.mean((s - r) ** 2) for s, r in zip(ro.states, reference)))


@dataclass
class RolloutRecord:
    seed: int
    family: str
    times: np.ndarray
    errors: np.ndarray
    status: str = "completed"
    failed_at: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if self.times.shape != self.errors.shape or self.times.ndim != 1 or len(self.times) == 0:
            raise ValueError("times and errors must be equal-length nonempty 1-d sequences")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(self.errors < 0) or not np.all(np.isfinite(self.errors)):
            raise ValueError("errors must be finite and nonnegative")

    @property
    def max_error(self) -> float:
        return float(self.errors.max())


def record_from_rollout(ro: Rollout, reference: np.ndarray, dt_op: float, seed: int = 0,
                        family: str = "", reduce: str = "max", sample: int | None = None) -> RolloutRecord:
    """Score ``ro`` against ``reference`` snapshots ``(steps+1, ...)``.

    With ``sample`` set, only that entry of the batch axis is scored.
    """
    sel = (lambda a: a) if sample is None else (lambda a: a[sample:sample + 1])
    n = len(ro.states)
    if reference.shape[0] < n:
        raise ValueError("reference trajectory is shorter than the rollout")
    errs = [error_at_time(sel(ro.states[k]), sel(reference[k]), reduce) for k in range(n)]
    failed = None if ro.failed_at is None else ro.failed_at * dt_op
    return RolloutRecord(seed, family, np.arange(n) * dt_op, np.array(errs), ro.status, failed)


@dataclass
class AmaeSummary:
    amae: float
    maxima: list[float]
    n_seeds: int
    blown_up: list[int] = field(default_factory=list)
    family: str = ""


def amae(records: Sequence[RolloutRecord]) -> AmaeSummary:
    """Mean over seeds of each seed's maximum error over time.

    A blown-up record contributes the maximum of its finite prefix and is
    listed in ``blown_up``.
    """
    if not records:
        raise ValueError("amae needs at least one record")
    maxima = [r.max_error for r in records]
    blown = [r.seed for r in records if r.status != "completed"]
    return AmaeSummary(float(np.mean(maxima)), maxima, len(records), blown, records[0].family)


def time_resolved_trace(records: Sequence[RolloutRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Mean error across seeds at each time of the longest record.

    Truncated (blown-up) records are extended by their last finite error.
    """
    if not records:
        raise ValueError("time_resolved_trace needs at least one record")
    longest = max(records, key=lambda r: len(r.times))
    times = longest.times
    rows = []
    for r in records:
        if not np.allclose(r.times, times[:len(r.times)]):
            raise ValueError(f"record for seed {r.seed} is on a different time grid")
        pad = np.full(len(times) - len(r.errors), r.errors[-1])
        rows.append(np.concatenate([r.errors, pad]))
    return times, np.mean(rows, axis=0)


class UndefinedCorrelation(ValueError):
    pass


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson ``r`` and two-sided p-value from Student's t with ``n-2`` dof."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-d sequences")
    n = len(x)
    if n < 3:
        raise ValueError("pearson needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


# ----------------------------------------------------------------------------
# CSV output.

def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, rows: Sequence[tuple], header: str | None = None) -> None:
    """``rows`` are ``(system, method, RolloutRecord)``; one line per (seed, time)."""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for system_kind, method, rec in rows:
            for t, e in zip(rec.times, rec.errors):
                w.writerow([system_kind, method, rec.family, rec.seed, _fmt(t), _fmt(e), rec.status])


def write_summary_csv(path, rows: Sequence[tuple], header: str | None = None) -> None:
    """``rows`` are ``(system, method, AmaeSummary)``."""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for system_kind, method, s in rows:
            w.writerow([system_kind, method, s.family, _fmt(s.amae), s.n_seeds])


def _read_rows(path, columns):
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(lines)
    try:
        head = tuple(next(reader))
    except StopIteration:
        raise ValueError(f"{path}: empty CSV") from None
    if head != columns:
        raise ValueError(f"{path}: expected columns {columns}, got {head}")
    rows = list(reader)
    for i, row in enumerate(rows, start=2):
        if len(row) != len(columns):
            raise ValueError(f"{path}: row {i} has {len(row)} fields, expected {len(columns)}")
    return rows


def read_metrics_csv(path) -> list[dict]:
    out = []
    for row in _read_rows(path, METRICS_COLUMNS):
        rec = dict(zip(METRICS_COLUMNS, row))
        rec["seed"] = int(rec["seed"])
        rec["time"] = float(rec["time"])
        rec["error"] = float(rec["error"])
        if rec["error"] < 0 or rec["status"] not in ("completed", "blew_up"):
            raise ValueError(f"{path}: invalid row {row}")
        out.append(rec)
    return out


def read_summary_csv(path) -> list[dict]:
    out = []
    for row in _read_rows(path, SUMMARY_COLUMNS):
        rec = dict(zip(SUMMARY_COLUMNS, row))
        rec["amae"] = float(rec["amae"])
        rec["n_seeds"] = int(rec["n_seeds"])
        if rec["amae"] < 0 or rec["n_seeds"] < 1:
            raise ValueError(f"{path}: invalid row {row}")
        out.append(rec)
    return out
