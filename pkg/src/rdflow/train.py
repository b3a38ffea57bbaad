"""Free-run recurrent training (NLOL / DDOL) and its adaptive variant with validation milestones.

Both trainers roll each mini-batch forward on the model's own predictions.
At rollout step ``n`` they take ``b_n`` optimizer updates on the current step
loss, recomputing the prediction after every update, and then feed the
post-update prediction forward as the next input. The fed-forward state is a
plain array, so no gradient flows across steps.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .losses import ddol_step_loss_and_grad, nlol_loss_and_grad, stack_validation, validation_loss
from .systems import SystemSpec

METHODS = ("nlol", "ddol", "ddol_art")
LOG_COLUMNS = ("epoch", "batch", "step", "event", "value", "cum_updates", "cum_seconds")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    method: str = "ddol_art"
    dt_op: float = 0.01
    T: float = 1.0
    B: int = 32
    b: int = 4
    K: int | None = None
    eta0: float = 1e-3
    lr_decay: float = 0.85
    budget_start: int = 500
    budget_end: int = 100
    milestone_interval: int | None = None
    n_fail: float = 2
    outer_epochs: int = 2
    seed: int = 0
    shuffle: bool = False
    val_reduce: str = "mean"

    def __post_init__(self):
        self.method = self.method.lower().replace("-", "_")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.dt_op <= 0 or self.T <= 0:
            raise ValueError("dt_op and T must be positive")
        m = self.T / self.dt_op
        if abs(m - round(m)) > 1e-9 * max(1.0, m) or round(m) < 1:
            raise ValueError(f"T={self.T} is not an integer multiple of dt_op={self.dt_op}")
        if self.b < 1 or self.B < 1 or self.B % self.b:
            raise ValueError(f"mini-batch size b={self.b} must divide B={self.B}")
        if not (self.n_fail >= 1):
            raise ValueError("n_fail must be >= 1 (use inf to disable early exit)")
        if self.milestone_interval is not None and self.milestone_interval < 1:
            raise ValueError("milestone interval must be >= 1")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")
        if self.budget_start < 1 or self.budget_end < 1:
            raise ValueError("inner budgets must be positive")
        if not self.lr_decay > 0 or not self.eta0 > 0:
            raise ValueError("learning rate and decay must be positive")
        if self.outer_epochs < 1:
            raise ValueError("outer_epochs must be >= 1")

    @property
    def M(self) -> int:
        return int(round(self.T / self.dt_op))

    @property
    def p(self) -> int:
        return self.B // self.b

    @property
    def r(self) -> int:
        if self.milestone_interval is not None:
            return self.milestone_interval
        return max(1, self.M // 10)

    @property
    def n_val(self) -> int:
        return self.K if self.K is not None else max(1, self.B // 8)

    def budgets(self) -> list[int]:
        return [inner_budget(n, self.M, self.budget_start, self.budget_end) for n in range(self.M)]


def inner_budget(n: int, M: int, start: int = 500, end: int = 100) -> int:
    """Linearly decreasing number of inner updates at rollout step ``n``."""
    if M == 1:
        return start
    return int(round(start + (end - start) * n / (M - 1)))


def lr_decay_step(lr: float, decay: float) -> float:
    return lr * decay


@dataclass
class LogRecord:
    epoch: int
    batch: int
    step: int
    event: str
    value: float
    cum_updates: int
    cum_seconds: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def add(self, *args) -> None:
        self.records.append(LogRecord(*args))

    def events(self, name: str) -> list[LogRecord]:
        return [r for r in self.records if r.event == name]

    def write_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, r.batch, r.step, r.event, repr(float(r.value)), r.cum_updates,
                            f"{r.cum_seconds:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            rows = [line for line in fh if not line.startswith("#")]
        reader = csv.reader(rows)
        if tuple(next(reader)) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected train log columns")
        for row in reader:
            log.add(int(row[0]), int(row[1]), int(row[2]), row[3], float(row[4]), int(row[5]), float(row[6]))
        return log


@dataclass
class TrainerState:
    J_best: float = math.inf
    c_fail: int = 0
    best_params: object = None
    checkpoint_path: str | None = None
    updates: int = 0
    seconds: float = 0.0
    epoch: int = 0
    batch: int = 0
    saves: int = 0

    def to_meta(self) -> dict:
        return {"J_best": self.J_best if math.isfinite(self.J_best) else None, "c_fail": self.c_fail,
                "updates": self.updates, "seconds": self.seconds, "epoch": self.epoch, "batch": self.batch,
                "saves": self.saves}


class MilestoneController:
    """Best-so-far tracking with a consecutive-failure counter."""

    def __init__(self, n_fail: float = 2, state: TrainerState | None = None):
        self.n_fail = n_fail
        self.state = state if state is not None else TrainerState()

    def observe(self, value: float) -> tuple[bool, bool]:
        """Record a validation value; returns ``(improved, exit_rollout)``."""
        s = self.state
        if value < s.J_best:
            s.J_best = value
            s.c_fail = 0
            return True, False
        s.c_fail += 1
        return False, s.c_fail >= self.n_fail


@dataclass
class TrainData:
    """Initial conditions ``(B, 2, H, W)`` and, for supervised methods, targets ``(B, M+1, 2, H, W)``."""

    ics: np.ndarray
    targets: np.ndarray | None = None

    def batches(self, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
        order = np.arange(cfg.B)
        if cfg.shuffle:
            order = np.random.Generator(np.random.PCG64([cfg.seed, epoch])).permutation(cfg.B)
        return [order[i * cfg.b:(i + 1) * cfg.b] for i in range(cfg.p)]


@dataclass
class TrainResult:
    params: object
    final_params: object
    log: TrainLog
    state: TrainerState


def _check_data(cfg: TrainConfig, data: TrainData) -> None:
    if data.ics.shape[0] != cfg.B:
        raise ValueError(f"expected B={cfg.B} initial conditions, got {data.ics.shape[0]}")
    if cfg.method != "nlol":
        if data.targets is None:
            raise ValueError(f"method {cfg.method} needs reference trajectories")
        if data.targets.shape[1] < cfg.M + 1:
            raise ValueError(f"targets hold {data.targets.shape[1] - 1} steps, need M={cfg.M}")


def _run(cfg: TrainConfig, model, data: TrainData, sys: SystemSpec | None,
         validate: Callable[[object], float] | None, controller: MilestoneController | None,
         state: TrainerState, log: TrainLog, on_checkpoint, callback, batch_end) -> None:
    budgets = cfg.budgets()
    h = 1.0 / data.ics.shape[-1]
    start_epoch, start_batch = state.epoch, state.batch
    for epoch in range(start_epoch, cfg.outer_epochs):
        batches = data.batches(cfg, epoch)
        for ell in range(start_batch if epoch == start_epoch else 0, cfg.p):
            idx = batches[ell]
            u_hat = np.array(data.ics[idx], dtype=np.float64)
            for n in range(cfg.M):
                if cfg.method == "nlol":
                    u_in = u_hat

                    def loss_fn(pred, u_in=u_in):
                        return nlol_loss_and_grad(pred, u_in, sys, cfg.dt_op, h)
                else:
                    target = data.targets[idx, n + 1]

                    def loss_fn(pred, target=target):
                        return ddol_step_loss_and_grad(pred, target)

                t0 = time.perf_counter()
                loss = math.nan
                for _ in range(budgets[n]):
                    try:
                        loss = model.train_step(u_hat, loss_fn)
                    except FloatingPointError as exc:
                        state.seconds += time.perf_counter() - t0
                        raise TrainingDiverged(
                            f"epoch {epoch} batch {ell} step {n}: {exc}") from exc
                    state.updates += 1
                u_next = model(u_hat)
                state.seconds += time.perf_counter() - t0
                log.add(epoch, ell, n, "step_loss", loss, state.updates, state.seconds)
                if callback is not None:
                    callback({"epoch": epoch, "batch": ell, "step": n, "input": u_hat, "output": u_next,
                              "model": model})
                u_hat = u_next
                if controller is not None and (n + 1) % cfg.r == 0:
                    j = float(validate(model))
                    log.add(epoch, ell, n, "val", j, state.updates, state.seconds)
                    improved, stop = controller.observe(j)
                    if improved:
                        state.best_params = model.snapshot()
                        state.saves += 1
                        log.add(epoch, ell, n, "checkpoint", j, state.updates, state.seconds)
                        if on_checkpoint is not None:
                            on_checkpoint(model, state)
                    if stop:
                        log.add(epoch, ell, n, "early_exit", state.c_fail, state.updates, state.seconds)
                        break
            model.lr = lr_decay_step(model.lr, cfg.lr_decay)
            state.epoch, state.batch = (epoch, ell + 1) if ell + 1 < cfg.p else (epoch + 1, 0)
            log.add(epoch, ell, cfg.M, "batch_end", model.lr, state.updates, state.seconds)
            if batch_end is not None:
                batch_end(epoch, ell, model, state, log)


def train_recurrent(cfg: TrainConfig, model, data: TrainData, sys: SystemSpec | None = None, *,
                    state: TrainerState | None = None, log: TrainLog | None = None,
                    callback=None, batch_end=None) -> TrainResult:
    """Plain free-run training (NLOL or DDOL); returns the final iterate."""
    if cfg.method not in ("nlol", "ddol"):
        raise ValueError(f"train_recurrent handles nlol/ddol, got {cfg.method}")
    if cfg.method == "nlol" and sys is None:
        raise ValueError("NLOL needs the system specification")
    _check_data(cfg, data)
    state = state or TrainerState()
    log = log or TrainLog()
    if state.updates == 0 and state.epoch == 0 and state.batch == 0:
        model.lr = cfg.eta0
    _run(cfg, model, data, sys, None, None, state, log, None, callback, batch_end)
    final = model.snapshot()
    return TrainResult(final, final, log, state)


def make_validator(val_set, reduce: str = "mean") -> Callable[[object], float]:
    states = stack_validation(val_set)
    return lambda model: float(validation_loss(model, states, reduce=reduce))


def train_ddol_art(cfg: TrainConfig, model, data: TrainData, val_set=None, *,
                   validate: Callable[[object], float] | None = None,
                   state: TrainerState | None = None, log: TrainLog | None = None,
                   on_checkpoint=None, callback=None, batch_end=None) -> TrainResult:
    """Free-run DDOL with validation milestones and early exit.

    Every ``r`` steps the validation loss is computed (``validate`` overrides
    the default worst-one-step loss on ``val_set``). An improvement snapshots
    the model and resets the failure counter; ``n_fail`` consecutive
    non-improvements end the current rollout. The best-so-far value and the
    counter persist across mini-batches and epochs. Returns the best snapshot
    (or the final iterate if no milestone was ever reached).
    """
    if cfg.method != "ddol_art":
        raise ValueError(f"train_ddol_art needs method ddol_art, got {cfg.method}")
    _check_data(cfg, data)
    if validate is None:
        if val_set is None:
            raise ValueError("DDOL-ART needs a validation set")
        val_states = stack_validation(val_set)
        if val_states.shape[0] < cfg.M + 1:
            raise ValueError("validation trajectories are shorter than the training horizon")
        validate = make_validator(val_states[:cfg.M + 1], cfg.val_reduce)
    state = state or TrainerState()
    log = log or TrainLog()
    if state.updates == 0 and state.epoch == 0 and state.batch == 0:
        model.lr = cfg.eta0
    controller = MilestoneController(cfg.n_fail, state)
    _run(cfg, model, data, None, validate, controller, state, log, on_checkpoint, callback, batch_end)
    final = model.snapshot()
    best = state.best_params if state.best_params is not None else final
    return TrainResult(best, final, log, state)


def analytic_update_count(cfg: TrainConfig) -> int:
    """Inner updates of a run without early exit."""
    return cfg.outer_epochs * cfg.p * sum(cfg.budgets())


def write_log(path, log: TrainLog, header: str | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.write_csv(path, header)

