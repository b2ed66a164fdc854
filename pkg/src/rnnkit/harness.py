"""Experiment harness: synthetic tasks, gradient checking, the
gradient-flow probe, and a plain SGD training loop.

The gradient checker is the package's central correctness instrument: for
every scalar parameter of a model it compares the analytic backward pass
against central finite differences of the loss.  The numeric side runs with
the parameter bundle cast to extended precision so subtractive cancellation
stays orders of magnitude below the 1e-6 pass threshold; the analytic side
under test stays in ordinary fp64.

The gradient-flow probe reproduces the vanishing/explosion analysis: it
runs a recurrence on zero input (so every tanh derivative is exactly one),
seeds the state adjoint at the last step, records the adjoint norms
backward through time, and fits their geometric decay rate.  At the zero
fixed point that rate equals the spectral radius of the effective one-step
recurrence matrix.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import bidir as bd
from . import gru as gr
from . import lstm as ls
from . import rnn as rn
from .linalg import Matrix, Rng, derive_seed

FAMILIES = (
    "rnn",
    "rnn_identity",
    "rnn_delays",
    "rnn_leaky",
    "lstm",
    "lstm_nopeep",
    "lstm_original",
    "lstm_fgr",
    "gru",
    "gru_minimal",
    "bidir_rnn",
    "bidir_lstm",
)

TASK_NAMES = ("delayed_echo", "adding", "parity", "sine_forecast")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the run halts with this diagnostic."""


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    """Desk-scale sequence tasks with a long-range knob (the echo gap)."""

    name: str
    seq_len: int
    gap: int = 0

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.name == "delayed_echo" and not 0 <= self.gap < self.seq_len:
            raise ValueError("delayed echo needs 0 <= gap < seq_len")

    @property
    def input_dim(self) -> int:
        return 2 if self.name == "adding" else 1

    @property
    def output_dim(self) -> int:
        return 2 if self.name == "parity" else 1

    @property
    def loss_kind(self) -> str:
        return "cross_entropy" if self.name == "parity" else "mse"


@dataclass
class TaskInstance:
    xs: list
    targets: list
    loss_kind: str


def generate_task(task: Task, rng: Rng) -> TaskInstance:
    """Draw one labelled sequence.

    delayed_echo: scalar inputs uniform [-1, 1]; target_t = x_{t-gap}
      (zero before the gap elapses).
    adding: channel 0 holds values uniform [0, 1], channel 1 marks two
      distinct positions; the target is the running sum of marked values,
      so the final step holds the sum of both marked values.
    parity: binary inputs; class target is the cumulative XOR.
    sine_forecast: x_t = sin(w t + phi) with random rate and phase;
      target_t = x_{t+1}.
    """
    T = task.seq_len
    if task.name == "delayed_echo":
        vals = [rng.uniform(-1.0, 1.0) for _ in range(T)]
        xs = [np.array([v]) for v in vals]
        targets = [
            np.array([vals[t - task.gap] if t - task.gap >= 0 else 0.0])
            for t in range(T)
        ]
        return TaskInstance(xs, targets, "mse")
    if task.name == "adding":
        if T < 2:
            raise ValueError("adding task needs seq_len >= 2")
        vals = [rng.uniform(0.0, 1.0) for _ in range(T)]
        first = rng.randint(T)
        second = rng.randint(T - 1)
        if second >= first:
            second += 1
        marks = np.zeros(T)
        marks[first] = marks[second] = 1.0
        xs = [np.array([vals[t], marks[t]]) for t in range(T)]
        running = np.cumsum([vals[t] * marks[t] for t in range(T)])
        targets = [np.array([running[t]]) for t in range(T)]
        return TaskInstance(xs, targets, "mse")
    if task.name == "parity":
        bits = [rng.randint(2) for _ in range(T)]
        xs = [np.array([float(b)]) for b in bits]
        acc = 0
        targets = []
        for b in bits:
            acc ^= b
            targets.append(acc)
        return TaskInstance(xs, targets, "cross_entropy")
    # sine_forecast
    w = rng.uniform(0.2, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    xs = [np.array([math.sin(w * t + phi)]) for t in range(1, T + 1)]
    targets = [np.array([math.sin(w * (t + 1) + phi)]) for t in range(1, T + 1)]
    return TaskInstance(xs, targets, "mse")


def task_metric(outputs, targets, loss_kind: str) -> float:
    """Reported task metric: mean squared error, or accuracy for
    classification."""
    if loss_kind == "mse":
        num = 0.0
        count = 0
        for y, t in zip(outputs, targets):
            r = np.asarray(y, dtype=np.float64) - np.asarray(t, dtype=np.float64)
            num += float(r @ r)
            count += r.shape[0]
        return num / count
    hits = sum(int(np.argmax(y)) == int(t) for y, t in zip(outputs, targets))
    return hits / len(targets)


# ---------------------------------------------------------------------------
# Model registry
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """One trainable sequence model behind a family-independent surface."""

    family: str
    params: object
    kind: str = field(repr=False, default="rnn")
    variant: object = field(repr=False, default=None)

    def run(self, xs):
        return self.run_with(self.params, xs)

    def run_with(self, params, xs):
        if self.kind == "rnn":
            return rn.forward(params, self.variant, xs)
        if self.kind == "lstm":
            return ls.lstm_forward(params, self.variant, xs)
        if self.kind == "gru":
            return gr.gru_forward(params, self.variant, xs)
        return bd.bidir_forward(params, xs)

    def loss(self, instance: TaskInstance, params=None) -> float:
        trace = self.run_with(self.params if params is None else params,
                              instance.xs)
        return rn.sequence_loss(trace, instance.targets, instance.loss_kind)

    def gradients(self, trace, targets, loss_kind: str):
        if self.kind == "rnn":
            return rn.bptt(self.params, self.variant, trace, targets, loss_kind)
        if self.kind == "lstm":
            return ls.lstm_bptt(self.params, self.variant, trace, targets,
                                loss_kind)
        if self.kind == "gru":
            return gr.gru_bptt(self.params, self.variant, trace, targets,
                               loss_kind)
        return bd.bidir_bptt(self.params, trace, targets, loss_kind)

    def updated(self, grads, eta: float) -> "Model":
        return dataclasses.replace(
            self, params=rn.sgd_step(self.params, grads, eta)
        )


def make_model(
    family: str,
    p: int,
    d: int,
    q: int,
    rng: Rng,
    init_scheme: str = "uniform",
    tau_max: float = 30.0,
    delays: tuple[int, ...] = (1, 3),
    activation: str = "tanh",
) -> Model:
    """Build a freshly initialized model of the given family.

    ``tau_max`` sets the leaky time-constant ladder (log-spaced 1..tau_max),
    ``delays`` the extra-delay set, ``activation`` is the diagnostics hook
    of the rnn module.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}")
    if family.startswith("rnn"):
        if family == "rnn_identity":
            variant = rn.RnnVariant(kind="identity", activation=activation)
        elif family == "rnn_delays":
            variant = rn.RnnVariant(kind="delays", delays=tuple(delays),
                                    activation=activation)
        elif family == "rnn_leaky":
            tau = np.exp(np.linspace(0.0, math.log(tau_max), p))
            variant = rn.RnnVariant(kind="leaky", tau=tau,
                                    activation=activation)
        else:
            variant = rn.RnnVariant(activation=activation)
        params = rn.init_rnn_params(p, d, q, variant, rng, scheme=init_scheme)
        return Model(family=family, params=params, kind="rnn", variant=variant)
    if family.startswith("lstm"):
        variant = {
            "lstm": ls.LstmVariant.vanilla(),
            "lstm_nopeep": ls.LstmVariant.no_peepholes(),
            "lstm_original": ls.LstmVariant.original(),
            "lstm_fgr": ls.LstmVariant.full_recurrence(),
        }[family]
        params = ls.init_lstm_params(p, d, q, variant, rng)
        return Model(family=family, params=params, kind="lstm", variant=variant)
    if family.startswith("gru"):
        variant = (gr.GruVariant.minimal() if family == "gru_minimal"
                   else gr.GruVariant.fully_gated())
        params = gr.init_gru_params(p, d, q, variant, rng)
        return Model(family=family, params=params, kind="gru", variant=variant)
    cell = "rnn" if family == "bidir_rnn" else "lstm"
    params = bd.init_bidir_params(p, d, q, cell, rng)
    return Model(family=family, params=params, kind="bidir", variant=None)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckRow:
    param: str
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    family: str
    rows: list[GradcheckRow]

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.rows), default=0.0)

    @property
    def worst_param(self) -> str:
        return max(self.rows, key=lambda r: r.rel_error).param


def _widened_copy(params):
    wide = copy.deepcopy(params)
    _widen(wide)
    return wide


def _widen(obj):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            setattr(obj, f.name, v.astype(np.longdouble))
        elif isinstance(v, dict):
            setattr(obj, f.name, {
                k: a.astype(np.longdouble) if isinstance(a, np.ndarray) else a
                for k, a in v.items()
            })
        elif dataclasses.is_dataclass(v) and not isinstance(v, type):
            _widen(v)


def gradcheck(
    model: Model,
    instance: TaskInstance,
    epsilon: float = 1e-5,
    analytic=None,
) -> GradcheckReport:
    """Compare the analytic gradient of every scalar parameter against
    (L(theta + eps) - L(theta - eps)) / 2 eps.

    Relative error is |a - n| / max(|a|, |n|, 1e-8).  ``analytic`` can be
    supplied to audit an external gradient (fault-injection checks do this).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    if analytic is None:
        trace = model.run(instance.xs)
        analytic = model.gradients(trace, instance.targets, instance.loss_kind)
    amap = dict(analytic.named_arrays())

    wide = _widened_copy(model.params)
    eps = np.longdouble(epsilon)
    rows = []
    for name, arr in wide.named_arrays():
        a_block = amap[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = model.loss(instance, params=wide)
            arr[idx] = orig - eps
            lm = model.loss(instance, params=wide)
            arr[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(
                    f"non-finite loss while perturbing {name}[{idx}]"
                )
            numeric = float((np.longdouble(lp) - np.longdouble(lm)) / (2 * eps))
            a_val = float(a_block[idx])
            rel = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-8)
            label = name + "[" + ",".join(str(i) for i in idx) + "]"
            rows.append(GradcheckRow(label, a_val, numeric, rel))
    return GradcheckReport(family=model.family, rows=rows)


def gradcheck_instance(
    family: str,
    seed: int,
    p: int = 4,
    d: int = 3,
    q: int = 2,
    T: int = 5,
    loss_kind: str = "mse",
) -> tuple[Model, TaskInstance]:
    """Randomized desk-scale instance for the gradient-oracle suite."""
    rng = Rng(derive_seed(seed, f"gradcheck:{family}:{loss_kind}"))
    model = make_model(family, p, d, q, rng.spawn("model"))
    data = rng.spawn("data")
    xs = [data.uniform_array(d, -1.0, 1.0) for _ in range(T)]
    if loss_kind == "mse":
        targets = [data.uniform_array(q, -1.0, 1.0) for _ in range(T)]
    else:
        targets = [data.randint(q) for _ in range(T)]
    return model, TaskInstance(xs, targets, loss_kind)


# ---------------------------------------------------------------------------
# Gradient-flow probe
# ---------------------------------------------------------------------------


@dataclass
class GradFlowReport:
    norms: list[float]
    rate: float
    spectral_radius: float
    residual: float
    capped: bool


def gradient_flow_probe(
    params: rn.RnnParams,
    variant: rn.RnnVariant,
    T: int,
    cap: float = 1e12,
) -> GradFlowReport:
    """Back-propagated adjoint norms on zero input, seeded with a ones
    vector at the last step, plus the fitted geometric rate.

    The log-linear fit runs over the mid-range t in [T/4, 3T/4] (boundary
    transients excluded); norms beyond ``cap`` are reported capped and
    excluded from the fit.
    """
    if T < 10:
        raise ValueError("probe needs T >= 10")
    p, d = params.p, params.d
    trace = rn.forward(params, variant, [np.zeros(d)] * T)
    state_grads = [np.zeros(p)] * (T - 1) + [np.ones(p)]
    _, deltas = rn.backward_through_time(params, variant, trace, state_grads)
    raw = [float(np.linalg.norm(dl)) for dl in deltas]
    capped = any((not math.isfinite(n)) or n > cap for n in raw)
    norms = [cap if (not math.isfinite(n) or n > cap) else n for n in raw]

    lo = max(1, int(math.ceil(T / 4)))
    hi = min(T, int(math.floor(3 * T / 4)))
    pts = [(T - t, math.log(norms[t - 1]))
           for t in range(lo, hi + 1)
           if 0.0 < raw[t - 1] <= cap and math.isfinite(raw[t - 1])]
    if len(pts) < 2:
        pts = [(T - t, math.log(raw[t - 1]))
               for t in range(1, T + 1)
               if 0.0 < raw[t - 1] <= cap and math.isfinite(raw[t - 1])]
    if len(pts) >= 2:
        u = np.array([a for a, _ in pts])
        v = np.array([b for _, b in pts])
        slope, intercept = np.polyfit(u, v, 1)
        rate = float(math.exp(slope))
        residual = float(np.sqrt(np.mean((v - (slope * u + intercept)) ** 2)))
    else:
        rate = 0.0
        residual = 0.0

    from .linalg import spectral_radius as _rho

    lam, _ = _rho(rn.effective_recurrent_matrix(params, variant))
    return GradFlowReport(norms=norms, rate=rate, spectral_radius=lam,
                          residual=residual, capped=capped)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    family: str
    hidden: int
    eta: float
    epochs: int
    seed: int
    init_scheme: str = "uniform"
    clip: float | None = None
    tau_max: float = 30.0
    delays: tuple[int, ...] = (1, 3)
    eval_instances: int = 10

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainResult:
    losses: list[float]   # per-epoch mean per-step loss
    metrics: list[float]  # per-epoch metric on the training instance
    final_metric: float   # metric averaged over fresh evaluation instances
    model: Model


def clip_gradients(grads, threshold: float) -> float:
    """Scale all blocks in place so the global 2-norm is at most
    ``threshold``; returns the pre-clip norm.  Not part of plain BPTT
    training; used only when explicitly configured."""
    total = math.sqrt(sum(float(np.sum(a * a)) for _, a in grads.named_arrays()))
    if total > threshold > 0:
        factor = threshold / total
        for _, a in grads.named_arrays():
            a *= factor
    return total


def evaluate(model: Model, task: Task, rng: Rng, n_instances: int) -> float:
    vals = []
    for _ in range(n_instances):
        inst = generate_task(task, rng)
        trace = model.run(inst.xs)
        vals.append(task_metric(trace.ys, inst.targets, inst.loss_kind))
    return float(np.mean(vals))


def train(config: TrainConfig, task: Task) -> TrainResult:
    """Per-sequence SGD: each epoch draws a fresh instance, runs forward,
    back-propagates, and takes one gradient step.  Deterministic for a
    fixed config: all randomness fans out of the config seed."""
    model = make_model(
        config.family,
        p=config.hidden,
        d=task.input_dim,
        q=task.output_dim,
        rng=Rng(derive_seed(config.seed, "init")),
        init_scheme=config.init_scheme,
        tau_max=config.tau_max,
        delays=config.delays,
    )
    data_rng = Rng(derive_seed(config.seed, "data"))
    losses: list[float] = []
    metrics: list[float] = []
    for epoch in range(config.epochs):
        inst = generate_task(task, data_rng)
        trace = model.run(inst.xs)
        loss = float(rn.sequence_loss(trace, inst.targets, inst.loss_kind))
        if not math.isfinite(loss):
            raise TrainingDiverged(
                f"loss became non-finite at epoch {epoch} "
                f"(family={config.family}, eta={config.eta})"
            )
        losses.append(loss / task.seq_len)
        metrics.append(task_metric(trace.ys, inst.targets, inst.loss_kind))
        grads = model.gradients(trace, inst.targets, inst.loss_kind)
        if config.clip is not None:
            clip_gradients(grads, config.clip)
        model = model.updated(grads, config.eta)
    final = evaluate(model, task, Rng(derive_seed(config.seed, "eval")),
                     config.eval_instances)
    return TrainResult(losses=losses, metrics=metrics, final_metric=final,
                       model=model)


# ---------------------------------------------------------------------------
# Mitigation-ordering experiment
# ---------------------------------------------------------------------------

# Matched budgets: the LSTM runs half the state width so its four gate
# blocks hold as many recurrent weights as the plain RNN's single block.
COMPARISON_MODELS = {
    "rnn": {"hidden": 16, "eta": 0.05, "clip": 1.0},
    "rnn_leaky": {"hidden": 16, "eta": 0.05, "clip": 1.0},
    "lstm": {"hidden": 8, "eta": 0.3, "clip": 1.0},
}


def comparison_cell(
    family: str, seed: int, gap: int, seq_len: int, epochs: int
) -> dict:
    """One (model, seed) run of the capability-ordering experiment."""
    spec = COMPARISON_MODELS[family]
    task = Task(name="delayed_echo", seq_len=seq_len, gap=gap)
    config = TrainConfig(
        family=family,
        hidden=spec["hidden"],
        eta=spec["eta"],
        epochs=epochs,
        seed=seed,
        clip=spec["clip"],
        tau_max=max(2.0, 1.5 * gap),
    )
    result = train(config, task)
    return {
        "family": family,
        "seed": seed,
        "final_mse": result.final_metric,
        "last_loss": result.losses[-1] if result.losses else float("nan"),
    }
