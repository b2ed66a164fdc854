"""Echo state network: fixed sparse reservoir, trainable linear readout.

The reservoir is a random sparse recurrent system whose weights are frozen
at construction (the arrays are made read-only); only the linear readout is
trained, by ridge-regularized least squares on the collected states.  State
update:

    h_t = tanh(W_res h_{t-1} + W_in x_t),   h_0 = 0

W_res is rescaled at build time so its spectral radius hits the target
(default just below one), which gives the fading-memory behaviour the
readout relies on: two runs from different initial states converge to the
same trajectory, so early states are discarded as washout before training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .linalg import (
    Matrix,
    Rng,
    ShapeError,
    read_sections,
    spectral_radius,
    write_sections,
)


class ReadoutTrainingError(RuntimeError):
    """Normal equations singular; raise the ridge parameter."""


@dataclass
class Reservoir:
    """Fixed recurrent system plus (after training) the readout.

    ``w_res`` and ``w_in`` are write-protected numpy arrays; ``w_out`` has
    shape (q, p + 1) with the bias in the last column.
    """

    w_res: Matrix
    w_in: Matrix
    lambda_target: float
    sparsity: float
    seed: int
    q: int
    w_out: Matrix | None = None

    @property
    def p(self) -> int:
        return self.w_res.shape[0]

    @property
    def d(self) -> int:
        return self.w_in.shape[1]


def build_reservoir(
    p: int,
    d: int,
    q: int,
    sparsity: float,
    lambda_target: float = 0.95,
    rng: Rng | None = None,
    seed: int | None = None,
) -> Reservoir:
    """Sample a reservoir: uniform [-1, 1] entries on a random mask with
    nonzero fraction ``sparsity``, rescaled to the target spectral radius;
    dense uniform input weights.  Degenerate draws (all-zero mask, or a
    mask whose spectral radius is numerically zero, e.g. a nilpotent
    pattern) are resampled a bounded number of times."""
    if not 0.0 < sparsity <= 1.0:
        raise ValueError("sparsity must be in (0, 1]")
    if lambda_target <= 0.0:
        raise ValueError("target spectral radius must be > 0")
    if rng is None:
        rng = Rng(seed if seed is not None else 0)
    seed = rng.seed

    w_res = None
    for attempt in range(16):
        draw = rng.spawn(f"w_res:{attempt}")
        mask = np.array(
            [[draw.random() < sparsity for _ in range(p)] for _ in range(p)]
        )
        if not mask.any():
            continue
        cand = np.where(mask, draw.uniform_array((p, p), -1.0, 1.0), 0.0)
        rho, _ = spectral_radius(cand, rng=rng.spawn(f"power:{attempt}"))
        if rho > 1e-12:
            w_res = cand * (lambda_target / rho)
            break
    if w_res is None:
        raise FloatingPointError(
            "reservoir spectral radius numerically zero after resampling"
        )
    w_in = rng.spawn("w_in").uniform_array((p, d), -1.0, 1.0)
    w_res.setflags(write=False)
    w_in.setflags(write=False)
    return Reservoir(
        w_res=w_res,
        w_in=w_in,
        lambda_target=lambda_target,
        sparsity=sparsity,
        seed=seed,
        q=q,
    )


def reservoir_run(res: Reservoir, xs, h0=None) -> np.ndarray:
    """Drive the reservoir over a sequence; row t of the result is h_{t+1}.

    ``h0`` overrides the zero initial state (used by the state-convergence
    diagnostics)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[0] == 0:
        raise ValueError("empty sequence")
    if xs.shape[1] != res.d:
        raise ShapeError(f"input width {xs.shape[1]} vs reservoir {res.d}")
    h = np.zeros(res.p) if h0 is None else np.asarray(h0, dtype=np.float64)
    states = np.empty((xs.shape[0], res.p))
    for t, x in enumerate(xs):
        h = np.tanh(res.w_res @ h + res.w_in @ x)
        states[t] = h
    return states


def default_washout(T: int) -> int:
    return min(50, T // 10)


def train_readout(
    res: Reservoir,
    states: np.ndarray,
    targets: np.ndarray,
    ridge: float = 1e-8,
    washout: int | None = None,
) -> Matrix:
    """Fit the readout minimizing ||W_out [h; 1] - y||^2 + ridge ||W_out||^2
    over the washed-in states, by a Cholesky solve of the (p+1) x (p+1)
    normal equations.  Stores and returns W_out."""
    states = np.asarray(states, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[0] != states.shape[0]:
        raise ShapeError(
            f"{states.shape[0]} states vs {targets.shape[0]} target rows"
        )
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    w = default_washout(states.shape[0]) if washout is None else washout
    if states.shape[0] - w < states.shape[1] + 1 and ridge == 0.0:
        raise ReadoutTrainingError(
            "fewer usable states than readout columns; raise ridge or T"
        )
    phi = np.hstack([states[w:], np.ones((states.shape[0] - w, 1))])
    gram = phi.T @ phi + ridge * np.eye(phi.shape[1])
    rhs = phi.T @ targets[w:]
    try:
        cho = scipy.linalg.cho_factor(gram)
        w_out = scipy.linalg.cho_solve(cho, rhs).T
    except np.linalg.LinAlgError as exc:
        raise ReadoutTrainingError(
            f"normal equations singular at ridge={ridge}; raise ridge"
        ) from exc
    res.w_out = w_out
    return w_out


def readout_predict(res: Reservoir, states: np.ndarray) -> np.ndarray:
    """Apply the trained readout to a state matrix; rows are outputs."""
    if res.w_out is None:
        raise RuntimeError("readout not trained")
    phi = np.hstack([states, np.ones((states.shape[0], 1))])
    return phi @ res.w_out.T


def training_objective(
    res: Reservoir,
    states: np.ndarray,
    targets: np.ndarray,
    ridge: float,
    washout: int | None = None,
    w_out: Matrix | None = None,
) -> float:
    """The regularized least-squares objective train_readout minimizes."""
    w = default_washout(states.shape[0]) if washout is None else washout
    w_out = res.w_out if w_out is None else w_out
    phi = np.hstack([states[w:], np.ones((states.shape[0] - w, 1))])
    resid = phi @ w_out.T - np.atleast_2d(targets)[w:]
    return float(np.sum(resid * resid) + ridge * np.sum(w_out * w_out))


def save_reservoir(path, res: Reservoir) -> None:
    header = {
        "seed": str(res.seed),
        "sparsity": f"{res.sparsity:.17g}",
        "lambda": f"{res.lambda_target:.17g}",
        "q": str(res.q),
    }
    sections = [("W_res", res.w_res), ("W_in", res.w_in)]
    if res.w_out is not None:
        sections.append(("W_out", res.w_out))
    Path(path).write_text(write_sections(header, sections))


def load_reservoir(path) -> Reservoir:
    header, secs = read_sections(Path(path).read_text())
    w_res, w_in = secs["W_res"], secs["W_in"]
    w_res.setflags(write=False)
    w_in.setflags(write=False)
    return Reservoir(
        w_res=w_res,
        w_in=w_in,
        lambda_target=float(header["lambda"]),
        sparsity=float(header["sparsity"]),
        seed=int(header["seed"]),
        q=int(header["q"]),
        w_out=secs.get("W_out"),
    )
