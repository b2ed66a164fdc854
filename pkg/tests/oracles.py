"""Shared independent oracles for the test suite.

The central-difference gradient oracle here is deliberately separate from
the package's own gradcheck harness: module tests validate analytic
backward passes against this code path, and the harness is itself validated
against fault injection.

Finite differences are evaluated with the parameter bundle cast to extended
precision (80-bit on x86), so the subtractive-cancellation floor of the
numeric gradient (~|L| * eps_machine / 2eps) sits three to four orders of
magnitude below what fp64 evaluation would give.  The analytic side under
test stays in ordinary fp64.
"""

import copy
import dataclasses

import numpy as np


def widened_copy(params):
    """Deep copy of a parameter bundle with every array in longdouble."""
    wide = copy.deepcopy(params)
    _widen(wide)
    return wide


def _widen(obj):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            setattr(obj, f.name, v.astype(np.longdouble))
        elif isinstance(v, dict):
            setattr(
                obj,
                f.name,
                {
                    k: a.astype(np.longdouble) if isinstance(a, np.ndarray) else a
                    for k, a in v.items()
                },
            )
        elif dataclasses.is_dataclass(v) and not isinstance(v, type):
            _widen(v)


def fd_gradients(loss_fn, params, eps=1e-5):
    """Central finite differences for every scalar in ``params``.

    ``loss_fn(params) -> float`` must recompute the loss from scratch.
    Returns {block name: float64 gradient array}.
    """
    wide = widened_copy(params)
    eps = np.longdouble(eps)
    out = {}
    for name, arr in wide.named_arrays():
        g = np.zeros(arr.shape)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = np.longdouble(loss_fn(wide))
            arr[idx] = orig - eps
            lm = np.longdouble(loss_fn(wide))
            arr[idx] = orig
            g[idx] = float((lp - lm) / (2.0 * eps))
        out[name] = g
    return out


def max_rel_err(analytic, numeric, floor=1e-8):
    """Worst relative disagreement |a - n| / max(|a|, |n|, floor)."""
    worst = 0.0
    for name, a in analytic:
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
