"""Independent reference implementations shared by the tests."""

import numpy as np

from rdflow.net import Tape, backward, forward


def conv_loop(x, w, bias):
    """Direct quadruple-loop circular cross-correlation on (b, Cin, H, W)."""
    b, cin, hh, ww = x.shape
    cout = w.shape[0]
    out = np.zeros((b, cout, hh, ww))
    for o in range(cout):
        for i in range(hh):
            for j in range(ww):
                acc = np.zeros(b)
                for ki in range(3):
                    for kj in range(3):
                        acc += x[:, :, (i + ki - 1) % hh, (j + kj - 1) % ww] @ w[o, :, ki, kj]
                out[:, o, i, j] = acc + bias[o]
    return out


def group_norm_loop(x, groups, scale, shift, eps):
    b, c, hh, ww = x.shape
    out = np.empty_like(x)
    per = c // groups
    for s in range(b):
        for g in range(groups):
            blk = x[s, g * per:(g + 1) * per]
            out[s, g * per:(g + 1) * per] = (blk - blk.mean()) / np.sqrt(blk.var() + eps)
    return out * scale[None, :, None, None] + shift[None, :, None, None]


def net_loop(params, x):
    """Network forward written directly from the composition formula with the loop layers."""
    cfg = params.config

    def gn(z, prefix):
        return group_norm_loop(z, cfg.groups, params[f"{prefix}.scale"], params[f"{prefix}.shift"], cfg.gn_eps)

    z = conv_loop(x, params["c0.weight"], params["c0.bias"])
    if cfg.norm_lift:
        z = gn(z, "c0.gn")
    for k in range(1, cfg.n_blocks + 1):
        p = f"block{k}"
        a = np.tanh(gn(conv_loop(z, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"]), f"{p}.gn1"))
        a = np.tanh(gn(conv_loop(a, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"]), f"{p}.gn2"))
        z = np.tanh(z + a)
    y = conv_loop(z, params["final.weight"], params["final.bias"])
    if cfg.norm_final:
        y = group_norm_loop(y, cfg.final_groups, params["final.gn.scale"], params["final.gn.shift"], cfg.gn_eps)
    return y


def analytic_grads(params, x, probe):
    tape = Tape()
    forward(params, x, tape)
    return backward(tape, probe)


def gradient_check(params, x, probe, eps=1e-6, coords_per_tensor=6, seed=0):
    """Relative errors of analytic vs central-difference gradients of ``sum(probe * net(x))``.

    For each tensor: a random directional derivative, plus a few individual
    coordinates (the largest-gradient entry and random ones). Returns
    ``{name: max relative error}``.
    """
    rng = np.random.default_rng(seed)
    grads, _ = analytic_grads(params, x, probe)

    def loss():
        return float(np.sum(probe * forward(params, x)))

    out = {}
    for name, g in grads.items():
        p = params[name]
        errs = []
        d = rng.normal(size=p.shape)
        base = p.copy()
        params[name] = base + eps * d
        lp = loss()
        params[name] = base - eps * d
        lm = loss()
        params[name] = base
        fd = (lp - lm) / (2 * eps)
        an = float(np.sum(g * d))
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
        flat = [int(np.argmax(np.abs(g)))] + list(rng.integers(0, p.size, coords_per_tensor - 1))
        scale = max(np.max(np.abs(g)), 1e-12)
        for idx in flat:
            pert = base.copy().reshape(-1)
            pert[idx] += eps
            params[name] = pert.reshape(p.shape)
            lp = loss()
            pert[idx] -= 2 * eps
            params[name] = pert.reshape(p.shape)
            lm = loss()
            params[name] = base
            fd = (lp - lm) / (2 * eps)
            # Entries are compared relative to the tensor's largest gradient to avoid 0/0 on tiny entries.
            errs.append(abs(fd - g.reshape(-1)[idx]) / scale)
        out[name] = max(errs)
    return out
