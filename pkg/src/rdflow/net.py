"""Residual convolutional flow map with hand-written reverse-mode gradients.

Architecture (``tanh`` is the only nonlinearity)::

    z  = GN(C0(x))
    z  = tanh(R_k(z))              for k = 1..n_blocks
    R_k(z) = z + tanh(GN(C_k2(tanh(GN(C_k1(z))))))
    y  = C_final(z)                no activation, no normalization by default

Every convolution is a 3x3, stride-1 cross-correlation with circular padding so
the operator commutes with torus translations. Inputs and outputs use the
``(b, C, H, W)`` layout; internally activations are kept channels-last so each
convolution is a single ``(bHW, 9 Cin) @ (9 Cin, Cout)`` product.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fields import Rng


@dataclass(frozen=True)
class NetConfig:
    channels: int = 2
    c_mid: int = 16
    n_blocks: int = 4
    groups: int = 4
    gn_eps: float = 1e-5
    norm_final: bool = False
    norm_lift: bool = True
    affine: bool = True

    def __post_init__(self):
        if self.c_mid % self.groups:
            raise ValueError(f"c_mid={self.c_mid} is not divisible by groups={self.groups}")
        if min(self.channels, self.c_mid, self.n_blocks, self.groups) < 1:
            raise ValueError("network sizes must be positive")

    @property
    def final_groups(self) -> int:
        # The optional final norm sees only C=2 channels; it uses a single group.
        return 1


def _norm_names(prefix: str, cfg: NetConfig) -> list[str]:
    return [f"{prefix}.scale", f"{prefix}.shift"] if cfg.affine else []


def param_shapes(cfg: NetConfig = NetConfig()) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    c, m = cfg.channels, cfg.c_mid
    shapes: dict[str, tuple[int, ...]] = {"c0.weight": (m, c, 3, 3), "c0.bias": (m,)}
    if cfg.norm_lift:
        for name in _norm_names("c0.gn", cfg):
            shapes[name] = (m,)
    for k in range(1, cfg.n_blocks + 1):
        for j in (1, 2):
            shapes[f"block{k}.conv{j}.weight"] = (m, m, 3, 3)
            shapes[f"block{k}.conv{j}.bias"] = (m,)
            for name in _norm_names(f"block{k}.gn{j}", cfg):
                shapes[name] = (m,)
    shapes["final.weight"] = (c, m, 3, 3)
    shapes["final.bias"] = (c,)
    if cfg.norm_final:
        for name in _norm_names("final.gn", cfg):
            shapes[name] = (c,)
    return shapes


class OperatorParams(dict):
    """Ordered ``name -> float64 array`` mapping with a fixed architecture."""

    def __init__(self, tensors, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        expected = param_shapes(config)
        tensors = dict(tensors)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names do not match architecture (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            arr = np.array(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: nonfinite values")
            self[name] = arr

    def copy(self) -> "OperatorParams":
        return OperatorParams({k: v.copy() for k, v in self.items()}, self.config)

    def n_values(self) -> int:
        return sum(v.size for v in self.values())


def init_params(rng: Rng, config: NetConfig = NetConfig()) -> OperatorParams:
    """Kernels ~ U(-a, a) with ``a = sqrt(1 / (9 Cin))``; biases 0; norm scale 1, shift 0."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            bound = np.sqrt(1.0 / (shape[1] * 9))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return OperatorParams(tensors, config)


def zero_params(config: NetConfig = NetConfig()) -> OperatorParams:
    return OperatorParams({n: np.zeros(s) for n, s in param_shapes(config).items()}, config)


# ----------------------------------------------------------------------------
# Layers on channels-last arrays (b, H, W, C).

def _shifted_columns(x: np.ndarray) -> np.ndarray:
    """Column-shifted copies of ``x`` with wrapped halo rows.

    Returns ``(b, H+2, W, 3*C)`` where feature block ``kj`` holds ``x`` shifted
    by ``kj - 1`` columns; rows ``0`` and ``H+1`` wrap around. A 3x3 circular
    correlation then reduces to three matmuls on row-offset views.
    """
    b, hh, ww, c = x.shape
    cols = np.empty((b, hh + 2, ww, 3, c))
    inner = cols[:, 1:-1]
    inner[:, :, :, 1] = x
    inner[:, :, 1:, 0] = x[:, :, :-1]
    inner[:, :, 0, 0] = x[:, :, -1]
    inner[:, :, :-1, 2] = x[:, :, 1:]
    inner[:, :, -1, 2] = x[:, :, 0]
    cols[:, 0] = cols[:, -2]
    cols[:, -1] = cols[:, 1]
    return cols.reshape(b, hh + 2, ww, 3 * c)


def _row_kernels(weight: np.ndarray) -> np.ndarray:
    """``(Cout, Cin, 3, 3)`` -> ``(3, 3*Cin, Cout)`` indexed by kernel row."""
    cout, cin = weight.shape[:2]
    return weight.transpose(2, 3, 1, 0).reshape(3, 3 * cin, cout)


def _correlate(cols: np.ndarray, wk: np.ndarray, hh: int) -> np.ndarray:
    b, _, ww, k = cols.shape
    out = cols[:, 0:hh].reshape(b, hh * ww, k) @ wk[0]
    out += cols[:, 1:hh + 1].reshape(b, hh * ww, k) @ wk[1]
    out += cols[:, 2:hh + 2].reshape(b, hh * ww, k) @ wk[2]
    return out


def _conv_fwd(x, weight, bias):
    b, hh, ww, cin = x.shape
    if weight.shape[1] != cin or weight.shape[2:] != (3, 3):
        raise ValueError(f"kernel {weight.shape} does not match input with {cin} channels")
    cols = _shifted_columns(x)
    out = _correlate(cols, _row_kernels(weight), hh)
    out += bias
    return out.reshape(b, hh, ww, -1), (cols, weight, x.shape)


def _conv_bwd(dy, cache, need_dx=True):
    cols, weight, xshape = cache
    b, hh, ww, cin = xshape
    cout = weight.shape[0]
    g = dy.reshape(b, hh * ww, cout)
    dw = np.zeros((3, 3 * cin, cout))
    for ki in range(3):
        for i in range(b):
            dw[ki] += cols[i, ki:ki + hh].reshape(hh * ww, 3 * cin).T @ g[i]
    dw = dw.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = np.ones(b * hh * ww) @ dy.reshape(-1, cout)
    dx = None
    if need_dx:
        # Adjoint of a circular correlation: correlate with the flipped, transposed kernel.
        flipped = weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        dx = _correlate(_shifted_columns(dy), _row_kernels(flipped), hh).reshape(xshape)
    return dx, dw, db


def _channel_sums(x: np.ndarray) -> np.ndarray:
    """Per-sample, per-channel sums of a ``(b, H, W, C)`` array -> ``(b, C)``."""
    b, hh, ww, c = x.shape
    return np.ones(hh * ww) @ x.reshape(b, hh * ww, c)


def _group_to_channel(s: np.ndarray, groups: int) -> np.ndarray:
    """Sum ``(b, C)`` channel totals within groups and broadcast back to ``(b, 1, 1, C)``."""
    b, c = s.shape
    gs = s.reshape(b, groups, c // groups).sum(axis=2)
    return np.repeat(gs, c // groups, axis=1).reshape(b, 1, 1, c)


def _gn_fwd(x, groups, scale, shift, eps):
    b, hh, ww, c = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible by {groups} groups")
    n = hh * ww * (c // groups)
    mean = _group_to_channel(_channel_sums(x), groups) / n
    xc = x - mean
    var = _group_to_channel(_channel_sums(xc * xc), groups) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat if scale is None else xhat * scale + shift
    return y, (xhat, inv, groups, scale)


def _gn_bwd(dy, cache):
    xhat, inv, groups, scale = cache
    b, hh, ww, c = xhat.shape
    if scale is None:
        dscale = dshift = None
        dxhat = dy
    else:
        dshift = np.ones(b * hh * ww) @ dy.reshape(-1, c)
        dscale = np.ones(b * hh * ww) @ (dy * xhat).reshape(-1, c)
        dxhat = dy * scale
    n = hh * ww * (c // groups)
    s1 = _group_to_channel(_channel_sums(dxhat), groups)
    s2 = _group_to_channel(_channel_sums(dxhat * xhat), groups)
    dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dscale, dshift


def conv2d_circular_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 circular cross-correlation on ``(b, Cin, H, W)`` input."""
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ValueError("convolution needs at least 3 cells per axis")
    y, _ = _conv_fwd(x.transpose(0, 2, 3, 1), weight, bias)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def group_norm_forward(x: np.ndarray, groups: int, scale, shift, eps: float = 1e-5) -> np.ndarray:
    """Group normalization of a ``(b, C, H, W)`` array with per-channel affine."""
    y, _ = _gn_fwd(x.transpose(0, 2, 3, 1), groups, np.asarray(scale, float), np.asarray(shift, float), eps)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


# ----------------------------------------------------------------------------
# Full network.

class TapeError(RuntimeError):
    pass


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: int, name: str):
        super().__init__(f"nonfinite activation at layer {layer} ({name})")
        self.layer = layer
        self.name = name


@dataclass
class Tape:
    """Forward intermediates for one backward pass."""

    caches: list = field(default_factory=list)
    used: bool = False
    config: NetConfig | None = None


def _affine(params, prefix, cfg):
    if cfg.affine:
        return params[f"{prefix}.scale"], params[f"{prefix}.shift"]
    return None, None


def _check_activations(tape_layers):
    for idx, (name, arr) in enumerate(tape_layers):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteActivation(idx, name)


def forward(params: OperatorParams, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """Apply the flow map to a ``(b, C, H, W)`` batch."""
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ValueError(f"expected input (b, {cfg.channels}, H, W), got {x.shape}")
    if tape is not None and (tape.used or tape.caches):
        raise TapeError("tape already holds a forward pass")
    rec = tape.caches if tape is not None else None
    trace = []  # (name, activation) for blow-up diagnostics

    z, c = _conv_fwd(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), params["c0.weight"], params["c0.bias"])
    n = None
    if cfg.norm_lift:
        z, n = _gn_fwd(z, cfg.groups, *_affine(params, "c0.gn", cfg), cfg.gn_eps)
    trace.append(("c0", z))
    if rec is not None:
        rec.append((c, n))
    for k in range(1, cfg.n_blocks + 1):
        p = f"block{k}"
        h1, c1 = _conv_fwd(z, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"])
        h1, n1 = _gn_fwd(h1, cfg.groups, *_affine(params, f"{p}.gn1", cfg), cfg.gn_eps)
        a1 = np.tanh(h1)
        h2, c2 = _conv_fwd(a1, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"])
        h2, n2 = _gn_fwd(h2, cfg.groups, *_affine(params, f"{p}.gn2", cfg), cfg.gn_eps)
        a2 = np.tanh(h2)
        z = np.tanh(z + a2)
        trace.append((p, z))
        if rec is not None:
            rec.append((c1, n1, a1, c2, n2, a2, z))
    y, cf = _conv_fwd(z, params["final.weight"], params["final.bias"])
    nf = None
    if cfg.norm_final:
        y, nf = _gn_fwd(y, cfg.final_groups, *_affine(params, "final.gn", cfg), cfg.gn_eps)
    if rec is not None:
        rec.append((cf, nf))
        tape.config = cfg
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if not np.all(np.isfinite(out)):
        trace.append(("final", y))
        _check_activations(trace)
    return out


def backward(tape: Tape, output_grad: np.ndarray, need_input_grad: bool = True):
    """Reverse pass. Returns ``(grads, input_grad)``; ``input_grad`` is None if not requested."""
    if tape.used:
        raise TapeError("tape already consumed by a backward pass")
    if not tape.caches:
        raise TapeError("tape is empty; run forward with this tape first")
    tape.used = True
    cfg = tape.config
    grads = {}
    caches = tape.caches
    g = np.ascontiguousarray(output_grad.transpose(0, 2, 3, 1))

    cf, nf = caches[-1]
    if nf is not None:
        g, ds, dsh = _gn_bwd(g, nf)
        if ds is not None:
            grads["final.gn.scale"], grads["final.gn.shift"] = ds, dsh
    g, grads["final.weight"], grads["final.bias"] = _conv_bwd(g, cf)
    for k in range(cfg.n_blocks, 0, -1):
        p = f"block{k}"
        c1, n1, a1, c2, n2, a2, z_out = caches[k]
        g = g * (1.0 - z_out * z_out)  # d tanh(z + a2)
        gz = g
        g2 = g * (1.0 - a2 * a2)
        g2, ds, dsh = _gn_bwd(g2, n2)
        if ds is not None:
            grads[f"{p}.gn2.scale"], grads[f"{p}.gn2.shift"] = ds, dsh
        g2, grads[f"{p}.conv2.weight"], grads[f"{p}.conv2.bias"] = _conv_bwd(g2, c2)
        g1 = g2 * (1.0 - a1 * a1)
        g1, ds, dsh = _gn_bwd(g1, n1)
        if ds is not None:
            grads[f"{p}.gn1.scale"], grads[f"{p}.gn1.shift"] = ds, dsh
        g1, grads[f"{p}.conv1.weight"], grads[f"{p}.conv1.bias"] = _conv_bwd(g1, c1)
        g = gz + g1
    c0, n0 = caches[0]
    if n0 is not None:
        g, ds, dsh = _gn_bwd(g, n0)
        if ds is not None:
            grads["c0.gn.scale"], grads["c0.gn.shift"] = ds, dsh
    gx, grads["c0.weight"], grads["c0.bias"] = _conv_bwd(g, c0, need_dx=need_input_grad)
    tape.caches = []
    order = param_shapes(cfg)
    grads = {name: grads[name] for name in order}
    if gx is not None:
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    return grads, gx


# ----------------------------------------------------------------------------
# Adam.

@dataclass
class AdamState:
    m: dict
    v: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def like(cls, params, lr: float = 1e-3, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, lr, **kw)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                         self.lr, self.beta1, self.beta2, self.eps, self.t)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params or g.shape != params[name].shape:
            raise ValueError(f"gradient {name} does not match any parameter")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"nonfinite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class FlowMapModel:
    """Parameters plus optimizer state; the object the trainers drive."""

    def __init__(self, params: OperatorParams, adam: AdamState | None = None, lr: float = 1e-3):
        self.params = params
        self.adam = adam if adam is not None else AdamState.like(params, lr=lr)

    @classmethod
    def initialize(cls, seed: int, config: NetConfig = NetConfig(), lr: float = 1e-3) -> "FlowMapModel":
        return cls(init_params(Rng(seed), config), lr=lr)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self.params, x)

    @property
    def lr(self) -> float:
        return self.adam.lr

    @lr.setter
    def lr(self, value: float):
        self.adam.lr = value

    def train_step(self, x: np.ndarray, loss_fn) -> float:
        """One forward/backward/Adam update; ``loss_fn(pred) -> (LossValue, dL/dpred)``."""
        tape = Tape()
        pred = forward(self.params, x, tape)
        loss, grad = loss_fn(pred)
        value = float(loss)
        if not np.isfinite(value):
            raise FloatingPointError(f"nonfinite loss {value}")
        grads, _ = backward(tape, grad, need_input_grad=False)
        adam_step(self.params, grads, self.adam)
        return value

    def snapshot(self) -> OperatorParams:
        return self.params.copy()


# ----------------------------------------------------------------------------
# RDCKPT01 checkpoint: magic, u32 record count, records of
# (u16 name length, name, u8 rank, u32 dims, f32 data). Optional sections
# follow: RDADAM01 (optimizer) and RDMETA01 (JSON metadata).

CKPT_MAGIC = b"RDCKPT01"
ADAM_MAGIC = b"RDADAM01"
META_MAGIC = b"RDMETA01"


def _pack_records(tensors: dict) -> bytes:
    out = bytearray(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def _unpack_records(raw: bytes, offset: int, path) -> tuple[dict, int]:
    def need(n):
        if offset + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")

    need(4)
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        need(nlen + 1)
        name = raw[offset:offset + nlen].decode()
        offset += nlen
        rank = raw[offset]
        offset += 1
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        need(4 * size)
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        tensors[name] = data.reshape(shape).astype(np.float64)
        offset += 4 * size
    return tensors, offset


def save_checkpoint(path, params: OperatorParams, adam: AdamState | None = None, meta: dict | None = None) -> None:
    buf = bytearray(CKPT_MAGIC) + _pack_records(params)
    if adam is not None:
        buf += ADAM_MAGIC + struct.pack("<I4d", adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps)
        buf += _pack_records({**{f"m/{k}": a for k, a in adam.m.items()},
                              **{f"v/{k}": a for k, a in adam.v.items()}})
    meta = dict(meta or {})
    meta["net"] = asdict(params.config)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf += META_MAGIC + struct.pack("<I", len(blob)) + blob
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path, config: NetConfig | None = None):
    """Read a checkpoint. Returns ``(params, adam_or_None, meta)``.

    If ``config`` is given the stored architecture must match it.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an RDCKPT01 file")
    tensors, offset = _unpack_records(raw, 8, path)
    adam_raw = None
    meta = {}
    while offset < len(raw):
        tag = raw[offset:offset + 8]
        offset += 8
        if tag == ADAM_MAGIC:
            if offset + 36 > len(raw):
                raise ValueError(f"{path}: truncated optimizer section")
            t, lr, b1, b2, eps = struct.unpack_from("<I4d", raw, offset)
            moments, offset = _unpack_records(raw, offset + 36, path)
            adam_raw = (t, lr, b1, b2, eps, moments)
        elif tag == META_MAGIC:
            (length,) = struct.unpack_from("<I", raw, offset)
            meta = json.loads(raw[offset + 4:offset + 4 + length].decode())
            offset += 4 + length
        else:
            raise ValueError(f"{path}: unknown section {tag!r}")
    stored = NetConfig(**meta["net"]) if "net" in meta else None
    if config is not None and stored is not None and stored != config:
        raise ValueError(f"{path}: checkpoint architecture {stored} does not match config {config}")
    params = OperatorParams(tensors, config or stored or NetConfig())
    adam = None
    if adam_raw is not None:
        t, lr, b1, b2, eps, moments = adam_raw
        adam = AdamState({k: moments[f"m/{k}"] for k in params}, {k: moments[f"v/{k}"] for k in params},
                         lr, b1, b2, eps, t)
    return params, adam, meta
