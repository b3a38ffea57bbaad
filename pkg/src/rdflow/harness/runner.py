"""Experiment orchestration: data splits, training with checkpoints and resume, evaluation,
single rollouts, rendering and the training-dynamics correlation study.

Each function takes an :class:`ExperimentConfig` and writes under ``cfg.out``:

    data/<split>/<family>_<k>.rdtraj   reference trajectories (RDTRAJ01)
    ckpt/{best,final,last}.ckpt        operator checkpoints (RDCKPT01)
    train_log.csv                      per-step losses and milestone events
    metrics.csv, summary.csv           per-time errors and AMAE per family
    rollout/, render/                  inspection dumps
    corr.csv, corr_summary.csv         correlation study points and Pearson summary
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..fields import GridSpec, Rng
from ..icgen import FAMILIES, sample_ic
from ..metrics import (UndefinedCorrelation, amae, pearson, record_from_rollout, rollout, worst_rollout_mse,
                       write_metrics_csv, write_summary_csv)
from ..net import FlowMapModel, forward, load_checkpoint, save_checkpoint
from ..solver import Trajectory, generate_trajectory, load_trajectory, save_trajectory
from ..train import (TrainData, TrainerState, TrainLog, train_ddol_art, train_recurrent, write_log)
from .config import ExperimentConfig

THREADS_ENV = "RDFLOW_THREADS"
SPLITS = ("train", "val", "test", "probe")
# Sub-stream key per split; the family index is the second key.
_SPLIT_KEYS = {"train": 0, "val": 1, "test": 2, "probe": 3}

CORR_COLUMNS = ("n_fail", "seed", "epoch", "batch", "updates", "val", "ood")
CORR_SUMMARY_COLUMNS = ("n_fail", "n_points", "r", "p")


class HarnessError(RuntimeError):
    pass


def n_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise HarnessError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    return max(1, n)


def parallel_map(fn, items) -> list:
    """Order-preserving map over a thread pool sized by ``RDFLOW_THREADS``."""
    items = list(items)
    n = min(n_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# Data splits.

@dataclass(frozen=True)
class SplitPart:
    family: str
    count: int
    steps: int


def split_parts(cfg: ExperimentConfig, split: str) -> list[SplitPart]:
    tc = cfg.train_config()
    if split == "train":
        # NLOL only consumes initial conditions; one reference step keeps the file format uniform.
        steps = 1 if cfg.method == "nlol" else tc.M
        return [SplitPart(cfg.ic.train_family, tc.B, steps)]
    if split == "val":
        return [SplitPart(cfg.ic.train_family, tc.n_val, tc.M)]
    if split == "test":
        return [SplitPart(f, cfg.eval.n_seeds, cfg.steps_test) for f in cfg.eval.families]
    if split == "probe":
        return [SplitPart(f, cfg.corr.probe_per_family, tc.M) for f in cfg.corr.probe_families]
    raise HarnessError(f"unknown split {split!r}; expected one of {SPLITS}")


def split_rng(cfg: ExperimentConfig, split: str, family: str) -> Rng:
    root = {"train": cfg.seeds.ics, "val": cfg.seeds.val, "test": cfg.seeds.eval, "probe": cfg.seeds.eval}[split]
    return Rng(root).derive(_SPLIT_KEYS[split], FAMILIES.index(family))


def data_path(cfg: ExperimentConfig, split: str, family: str, k: int) -> Path:
    return Path(cfg.out) / "data" / split / f"{family}_{k:04d}.rdtraj"


def make_trajectory(cfg: ExperimentConfig, split: str, part: SplitPart, k: int) -> Trajectory:
    grid = GridSpec(cfg.grid)
    sys = cfg.system.spec()
    ic, meta = sample_ic(part.family, split_rng(cfg, split, part.family).derive(k), grid, sys, cfg.ic.params)
    traj = generate_trajectory(ic, sys, cfg.dt_op, part.steps, cfg.dt_ref)
    traj.meta = {"split": split, "family": part.family, "index": k, "ic": meta, "provenance": cfg.provenance()}
    return traj


def gen_data(cfg: ExperimentConfig, splits=("train", "val", "test")) -> list[Path]:
    """Write every trajectory of ``splits``; work is spread over the thread pool per IC."""
    written = []
    for split in splits:
        for part in split_parts(cfg, split):
            paths = [data_path(cfg, split, part.family, k) for k in range(part.count)]
            paths[0].parent.mkdir(parents=True, exist_ok=True)

            def job(k, part=part, paths=paths, split=split):
                save_trajectory(paths[k], make_trajectory(cfg, split, part, k))
                return paths[k]

            written += parallel_map(job, range(part.count))
    return written


def load_split(cfg: ExperimentConfig, split: str, generate_missing: bool = True) -> dict[str, list[Trajectory]]:
    """Load a split from disk, generating missing files first. Shapes are checked against ``cfg``."""
    out = {}
    for part in split_parts(cfg, split):
        paths = [data_path(cfg, split, part.family, k) for k in range(part.count)]
        missing = [p for p in paths if not p.exists()]
        if missing:
            if not generate_missing:
                raise HarnessError(f"missing data file {missing[0]}; run gen-data first")
            missing_idx = [k for k, p in enumerate(paths) if not p.exists()]
            paths[0].parent.mkdir(parents=True, exist_ok=True)
            parallel_map(lambda k, part=part: save_trajectory(paths[k], make_trajectory(cfg, split, part, k)),
                         missing_idx)
        trajs = []
        for p in paths:
            t = load_trajectory(p)
            if t.states.shape[-1] != cfg.grid:
                raise HarnessError(f"{p}: grid {t.states.shape[-1]} does not match config grid {cfg.grid}")
            if not math.isclose(t.dt_op, cfg.dt_op, rel_tol=1e-12):
                raise HarnessError(f"{p}: dt_op {t.dt_op} does not match config dt_op {cfg.dt_op}")
            if t.sys.kind != cfg.system.kind:
                raise HarnessError(f"{p}: system {t.sys.kind} does not match config system {cfg.system.kind}")
            if t.ok and t.n_steps < part.steps:
                raise HarnessError(f"{p}: holds {t.n_steps} steps, config needs {part.steps}")
            trajs.append(t)
        out[part.family] = trajs
    return out


def stacked(trajs: list[Trajectory], steps: int) -> np.ndarray:
    """``(steps+1, n, 2, H, W)`` from single-sample trajectories (all must reach ``steps``)."""
    for t in trajs:
        if t.n_steps < steps:
            raise HarnessError(f"reference {t.meta.get('family')}#{t.meta.get('index')} blew up "
                               f"at step {t.failed_at}; cannot use it as a {steps}-step target")
    return np.concatenate([t.states[:steps + 1] for t in trajs], axis=1)


# ----------------------------------------------------------------------------
# Training.

def _ckpt_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "ckpt"


def _trainer_meta(cfg: ExperimentConfig, state: TrainerState, lr: float) -> dict:
    t = state.to_meta()
    # Wall-clock time would make checkpoints differ between identical runs.
    t.pop("seconds")
    return {"provenance": cfg.provenance(), "config": cfg.hash(), "trainer": t, "lr": lr}


def _state_from_meta(meta: dict) -> TrainerState:
    t = dict(meta["trainer"])
    j = t.pop("J_best")
    return TrainerState(J_best=math.inf if j is None else j, **t)


def train(cfg: ExperimentConfig, resume: bool = False, progress=None):
    """Train the configured method, writing checkpoints and the log. Returns the TrainResult.

    ``last.ckpt`` is rewritten at every mini-batch end; ``resume`` restarts
    from it. Checkpoint tensors are stored in float32, so a resumed run
    continues from rounded parameters.
    """
    tc = cfg.train_config()
    train_set = load_split(cfg, "train")[cfg.ic.train_family]
    steps = split_parts(cfg, "train")[0].steps
    targets = np.swapaxes(stacked(train_set, steps), 0, 1)
    data = TrainData(np.ascontiguousarray(targets[:, 0]), None if cfg.method == "nlol" else targets)
    ckpt = _ckpt_dir(cfg)
    ckpt.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.out) / "train_log.csv"
    last = ckpt / "last.ckpt"

    state, log = TrainerState(), TrainLog()
    model = FlowMapModel.initialize(cfg.seeds.weights, cfg.net, lr=cfg.train.eta0)
    if resume and last.exists():
        params, adam, meta = load_checkpoint(last, cfg.net)
        if meta.get("config") != cfg.hash():
            raise HarnessError(f"{last} was written by config {meta.get('config')}, not {cfg.hash()}")
        model = FlowMapModel(params, adam)
        state = _state_from_meta(meta)
        if (ckpt / "best.ckpt").exists() and state.saves:
            state.best_params = load_checkpoint(ckpt / "best.ckpt", cfg.net)[0]
        if log_path.exists():
            pos = (state.epoch, state.batch)
            log = TrainLog([r for r in TrainLog.read_csv(log_path).records if (r.epoch, r.batch) < pos])
            if log.records:
                state.seconds = log.records[-1].cum_seconds

    header = cfg.provenance()

    def on_checkpoint(m, s):
        save_checkpoint(ckpt / "best.ckpt", s.best_params, None, _trainer_meta(cfg, s, m.lr))

    def batch_end(epoch, ell, m, s, lg):
        save_checkpoint(last, m.params, m.adam, _trainer_meta(cfg, s, m.lr))
        write_log(log_path, lg, header)
        if progress is not None:
            progress(f"epoch {epoch} batch {ell} updates {s.updates}")

    if cfg.method == "ddol_art":
        val = load_split(cfg, "val")[cfg.ic.train_family]
        val_states = stacked(val, tc.M)
        result = train_ddol_art(tc, model, data, val_states, state=state, log=log,
                                on_checkpoint=on_checkpoint, batch_end=batch_end)
    else:
        result = train_recurrent(tc, model, data, cfg.system.spec(), state=state, log=log,
                                 batch_end=batch_end)
    meta = _trainer_meta(cfg, result.state, model.lr)
    save_checkpoint(ckpt / "final.ckpt", result.final_params, model.adam, meta)
    if cfg.method != "ddol_art" or result.state.best_params is None:
        save_checkpoint(ckpt / "best.ckpt", result.params, None, meta)
    write_log(log_path, result.log, header)
    return result


# ----------------------------------------------------------------------------
# Evaluation.

def load_operator(cfg: ExperimentConfig, path=None):
    path = Path(path) if path is not None else _ckpt_dir(cfg) / "best.ckpt"
    if not path.exists():
        raise HarnessError(f"checkpoint {path} does not exist")
    params, _, _ = load_checkpoint(path, cfg.net)
    return lambda x: forward(params, x)


def fixed_point_params(cfg: ExperimentConfig, value):
    """Parameters whose output is the constant field ``value`` per channel (all kernels zero)."""
    from ..net import init_params
    params = init_params(Rng(cfg.seeds.weights), cfg.net)
    for name in params:
        if name.startswith("final."):
            params[name][...] = 0.0
    params["final.bias"][...] = np.asarray(value, dtype=np.float64)
    if cfg.net.norm_final:
        params["final.gn.shift"][...] = np.asarray(value, dtype=np.float64)
        params["final.bias"][...] = 0.0
    return params


def evaluate(cfg: ExperimentConfig, operator, write: bool = True):
    """Roll ``operator`` out on every test reference; returns ``(records, summaries)`` per family."""
    test = load_split(cfg, "test")
    kind, method = cfg.system.kind, cfg.method
    records, summaries = [], []
    for family in cfg.eval.families:
        refs = test[family]

        def job(k, refs=refs, family=family):
            ref = refs[k]
            ro = rollout(operator, ref.states[0], ref.n_steps)
            return record_from_rollout(ro, ref.states, cfg.dt_op, k, family, cfg.eval.reduce)

        recs = parallel_map(job, range(len(refs)))
        records += [(kind, method, r) for r in recs]
        summaries.append((kind, method, amae(recs)))
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", records, cfg.provenance())
        write_summary_csv(out / "summary.csv", summaries, cfg.provenance())
    return records, summaries


def rollout_dump(cfg: ExperimentConfig, operator, family: str, index: int = 0) -> tuple[Path, Path]:
    """Roll one test IC out to ``T_test``; writes prediction and reference trajectories."""
    if family not in FAMILIES:
        raise HarnessError(f"unknown IC family {family!r}")
    part = SplitPart(family, index + 1, cfg.steps_test)
    path = data_path(cfg, "test", family, index)
    ref = load_trajectory(path) if path.exists() else make_trajectory(cfg, "test", part, index)
    ro = rollout(operator, ref.states[0], cfg.steps_test)
    pred = Trajectory(np.stack(ro.states), cfg.dt_op, cfg.dt_ref, cfg.system.spec(), ro.status, ro.failed_at)
    out = Path(cfg.out) / "rollout"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{family}_{index:04d}"
    meta = {"family": family, "index": index, "provenance": cfg.provenance()}
    save_trajectory(out / f"{stem}_pred.rdtraj", pred, meta={**meta, "kind": "prediction"})
    save_trajectory(out / f"{stem}_ref.rdtraj", ref, meta={**meta, "kind": "reference"})
    return out / f"{stem}_pred.rdtraj", out / f"{stem}_ref.rdtraj"


# ----------------------------------------------------------------------------
# Rendering.

# Control points of the fixed perceptual palette (dark blue to yellow).
_PALETTE_POINTS = np.array([
    [0.00, 68, 1, 84],
    [0.25, 59, 82, 139],
    [0.50, 33, 145, 140],
    [0.75, 94, 201, 98],
    [1.00, 253, 231, 37],
])


def palette() -> np.ndarray:
    t = np.linspace(0.0, 1.0, 256)
    cols = [np.interp(t, _PALETTE_POINTS[:, 0], _PALETTE_POINTS[:, j]) for j in (1, 2, 3)]
    return np.round(np.stack(cols, axis=1)).astype(np.uint8)


def quantize(field: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear map ``[lo, hi] -> [0, 255]`` with clipping; nonfinite cells map to 0."""
    x = np.where(np.isfinite(field), field, lo)
    q = np.round((x - lo) / (hi - lo) * 255.0)
    return np.clip(q, 0, 255).astype(np.uint8)


def _image(field: np.ndarray) -> np.ndarray:
    # Arrays are indexed [x, y]; images put x along rows left to right and y upward.
    return np.ascontiguousarray(field.T[::-1])


def pgm_bytes(field: np.ndarray, lo: float, hi: float, comment: str = "") -> bytes:
    img = _image(quantize(field, lo, hi))
    head = b"P5\n" + (f"# {comment}\n".encode() if comment else b"")
    return head + f"{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes()


def ppm_bytes(fields: list[np.ndarray], lo: float, hi: float, comment: str = "", gap: int = 2) -> bytes:
    """Channels side by side, mapped through :func:`palette`, separated by white columns."""
    lut = palette()
    imgs = [lut[_image(quantize(f, lo, hi))] for f in fields]
    h = imgs[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, im in enumerate(imgs):
        if i:
            parts.append(sep)
        parts.append(im)
    img = np.ascontiguousarray(np.concatenate(parts, axis=1))
    head = b"P6\n" + (f"# {comment}\n".encode() if comment else b"")
    return head + f"{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes()


def render(cfg: ExperimentConfig, path, out_dir=None, use_palette: bool | None = None,
           every: int | None = None) -> list[Path]:
    """Write one PGM per channel per snapshot (or one paletted PPM per snapshot)."""
    traj = load_trajectory(path)
    out = Path(out_dir) if out_dir is not None else Path(cfg.out) / "render"
    out.mkdir(parents=True, exist_ok=True)
    use_palette = cfg.render.palette if use_palette is None else use_palette
    every = every or cfg.render.every
    lo, hi = cfg.render.lo, cfg.render.hi
    stem = Path(path).stem
    written = []
    for k in range(0, traj.n_snapshots, every):
        s = traj.states[k, 0]
        comment = f"{cfg.provenance()} t={k * traj.dt_op:.6g}"
        if use_palette:
            p = out / f"{stem}_t{k:05d}.ppm"
            p.write_bytes(ppm_bytes([s[0], s[1]], lo, hi, comment))
            written.append(p)
        else:
            for c, name in enumerate("uv"):
                p = out / f"{stem}_t{k:05d}_{name}.pgm"
                p.write_bytes(pgm_bytes(s[c], lo, hi, comment))
                written.append(p)
    return written


# ----------------------------------------------------------------------------
# Correlation study.

def _fmt(x: float) -> str:
    return repr(float(x))


def corr_study(cfg: ExperimentConfig, progress=None):
    """Train DDOL-ART once per (n_fail, seed) and log ID validation and OOD probe errors at batch ends.

    Both scores are the worst-over-time mean squared error of an
    autoregressive rollout over the training horizon. Returns ``(points,
    summary)`` where ``summary`` maps each ``n_fail`` (and ``"all"``) to
    ``(n_points, r, p)``; blown-up points are excluded from the correlation.
    """
    base = dataclasses.replace(cfg, method="ddol_art", train=dataclasses.replace(cfg.train, K=cfg.corr.K))
    tc0 = base.train_config()
    train_set = load_split(base, "train")[base.ic.train_family]
    targets = np.swapaxes(stacked(train_set, tc0.M), 0, 1)
    data = TrainData(np.ascontiguousarray(targets[:, 0]), targets)
    val_states = stacked(load_split(base, "val")[base.ic.train_family], tc0.M)
    probe = load_split(base, "probe")
    probe_states = stacked([t for f in base.corr.probe_families for t in probe[f]], tc0.M)

    points = []
    for n_fail in base.corr.n_fail_values:
        for seed in base.corr.seeds:
            tc = base.train_config(n_fail=n_fail, seed=seed)
            model = FlowMapModel.initialize(seed, base.net, lr=tc.eta0)

            def batch_end(epoch, ell, m, s, lg, n_fail=n_fail, seed=seed):
                with np.errstate(over="ignore", invalid="ignore"):
                    v = worst_rollout_mse(m, val_states)
                    o = worst_rollout_mse(m, probe_states)
                points.append((n_fail, seed, epoch, ell, s.updates, v, o))
                if progress is not None:
                    progress(f"n_fail {n_fail} seed {seed} epoch {epoch} batch {ell}: val {v:.3e} ood {o:.3e}")

            train_ddol_art(tc, model, data, val_states, batch_end=batch_end)

    summary = {}
    groups = [(nf, [p for p in points if p[0] == nf]) for nf in base.corr.n_fail_values]
    groups.append(("all", points))
    for key, pts in groups:
        good = [(p[5], p[6]) for p in pts if math.isfinite(p[5]) and math.isfinite(p[6])]
        try:
            r, pv = pearson([g[0] for g in good], [g[1] for g in good])
        except (ValueError, UndefinedCorrelation):
            r, pv = math.nan, math.nan
        summary[key] = (len(good), r, pv)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corr.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.provenance()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORR_COLUMNS)
        for nf, seed, epoch, ell, upd, v, o in points:
            w.writerow([_fmt(nf), seed, epoch, ell, upd, _fmt(v), _fmt(o)])
    with open(out / "corr_summary.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.provenance()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORR_SUMMARY_COLUMNS)
        for key, (n, r, pv) in summary.items():
            w.writerow([key if key == "all" else _fmt(key), n, _fmt(r), _fmt(pv)])
    return points, summary
