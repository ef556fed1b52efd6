"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import NetworkGraph, backward, forward


def l2_loss(y):
    """0.5 * sum(y^2) and its gradient; the default probe loss."""
    return 0.5 * float(np.sum(y * y)), np.asarray(y, dtype=np.float64).copy()


def sum_loss(y):
    return float(np.sum(y)), np.ones_like(np.asarray(y, dtype=np.float64))


_LOSSES = {"l2": l2_loss, "sum": sum_loss}


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    passed: bool
    per_param: dict


def grad_check(net: NetworkGraph, x, loss="l2", tolerance=1e-4,
               fd_step=1e-5, abs_fallback=1e-10,
               max_entries_per_param=None, rng=None):
    """Compare reverse-mode parameter gradients against central differences.

    Near-zero gradients fall back to an absolute-error criterion: entries
    whose analytic/numeric difference is below `abs_fallback`, or below the
    cancellation noise floor of the central difference itself
    (~eps * |loss| / step), count as exact. `max_entries_per_param`
    subsamples entries for larger nets (None = all).
    """
    loss_fn = _LOSSES[loss] if isinstance(loss, str) else loss
    x = np.asarray(x, dtype=np.float64)
    trace = forward(net, x)
    loss0, gy = loss_fn(trace.output)
    param_grads, _ = backward(net, trace, gy)
    abs_floor = max(abs_fallback, 1e-15 * abs(loss0) / fd_step)

    def scalar():
        return loss_fn(forward(net, x).output)[0]

    per_param = {}
    max_err = 0.0
    worst = None
    for name, p in net.params.items():
        flat = p.reshape(-1)
        gflat = param_grads[name].reshape(-1)
        idxs = range(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            r = rng if rng is not None else np.random.default_rng(0)
            idxs = r.choice(flat.size, size=max_entries_per_param, replace=False)
        err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + fd_step
            fp = scalar()
            flat[i] = orig - fd_step
            fm = scalar()
            flat[i] = orig
            num = (fp - fm) / (2.0 * fd_step)
            ana = gflat[i]
            diff = abs(ana - num)
            if diff < abs_floor:
                continue
            rel = diff / max(abs(ana), abs(num), 1e-300)
            err = max(err, rel)
        per_param[name] = err
        if err > max_err:
            max_err = err
            worst = name
    return GradCheckReport(max_rel_err=max_err, worst_param=worst,
                           passed=max_err < tolerance, per_param=per_param)
