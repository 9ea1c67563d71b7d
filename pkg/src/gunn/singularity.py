"""Overlap singularities in plain, residual and gradual linear maps.

``LinearModel`` covers three forms on ``R^n``:

* ``plain``:     ``y_i = sum_j w_ij x_j``
* ``residual``:  ``y_i = x_i + sum_j w_ij x_j``
* ``gradual``:   ``y_i = x_i + sum_{j<i} w_ij y_j + sum_{j>=i} w_ij x_j``

The gradual form reads already-updated outputs for earlier coordinates,
which is the one-channel-per-segment case of a GUNN layer with linear units.

Gradient steps descend the loss: ``w <- w - eps * dL/dw``. Upstream
gradients passed as ``grad_y`` are the partial derivatives ``dL/dy`` at the
output; for the gradual form they are propagated through the recurrence
before forming ``dL/dw``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .engine import GunnLayer, gunn_forward
from .tensor import ShapeError

FORMS = ("plain", "residual", "gradual")
DEFAULT_THRESHOLD = 1e-9
MIN_PROBES = 32


@dataclass
class LinearModel:
    omega: np.ndarray
    form: str = "gradual"

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.ndim != 2 or self.omega.shape[0] != self.omega.shape[1]:
            raise ShapeError(f"omega must be square, got {self.omega.shape}")
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}; expected one of {FORMS}")

    @property
    def n(self) -> int:
        return self.omega.shape[0]

    @classmethod
    def random(cls, n: int, form: str, rng: np.random.Generator) -> "LinearModel":
        """Weights drawn from N(0, sqrt(2/n))."""
        return cls(rng.standard_normal((n, n)) * np.sqrt(2.0 / n), form)

    def copy(self) -> "LinearModel":
        return LinearModel(self.omega.copy(), self.form)


def _check_x(model: LinearModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n:
        raise ShapeError(f"input of length {x.shape[-1]} for a model of dimension {model.n}")
    return x


def eval_linear(model: LinearModel, x) -> np.ndarray:
    """Evaluate the model on a vector or on a batch of row vectors."""
    x = _check_x(model, x)
    w = model.omega
    if model.form == "plain":
        return x @ w.T
    if model.form == "residual":
        return x + x @ w.T
    y = x.copy()
    for i in range(model.n):
        # y[..., :i] already holds updated values, y[..., i:] still equals x
        y[..., i] = x[..., i] + y @ w[i]
    return y


def _row_inputs(model: LinearModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``u[..., i, j]``: the value row ``i`` multiplies ``w_ij`` by."""
    if model.form != "gradual":
        return np.broadcast_to(x[..., None, :], x.shape[:-1] + (model.n, model.n))
    lower = np.tril(np.ones((model.n, model.n), dtype=bool), k=-1)
    return np.where(lower, y[..., None, :], x[..., None, :])


def total_output_gradient(model: LinearModel, x, grad_y) -> np.ndarray:
    """``dL/dy_i`` including the dependence of later outputs on ``y_i``."""
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if model.form != "gradual":
        return grad_y.copy()
    g = grad_y.copy()
    w = model.omega
    for i in range(model.n - 1, -1, -1):
        if i + 1 < model.n:
            g[..., i] += g[..., i + 1 :] @ w[i + 1 :, i]
    return g


def weight_gradient(model: LinearModel, x, grad_y) -> np.ndarray:
    """``dL/dw`` for upstream gradient ``grad_y``; batches are summed."""
    x = _check_x(model, x)
    y = eval_linear(model, x)
    g = total_output_gradient(model, x, grad_y)
    u = _row_inputs(model, x, y)
    gw = g[..., :, None] * u
    return gw.reshape(-1, model.n, model.n).sum(axis=0) if gw.ndim > 2 else gw


def gd_step(model: LinearModel, x, grad_y, epsilon: float) -> LinearModel:
    if epsilon < 0:
        raise ValueError("learning rate must be non-negative")
    return LinearModel(model.omega - epsilon * weight_gradient(model, x, grad_y), model.form)


def delta_y_predicted(model: LinearModel, x, grad_y, epsilon: float) -> np.ndarray:
    """First-order change of ``y`` at ``x`` after one :func:`gd_step`.

    ``dy_i = -eps * g_i * |u_i|^2 + sum_{j<i} w_ij dy_j`` with ``g`` the total
    output gradient and ``u_i`` the row input (earlier outputs, then inputs).
    The recurrence term only exists for the gradual form. For a batch the
    step uses the summed gradient, so ``g_i |u_i|^2`` becomes
    ``sum_t g_ti <u_si, u_ti>`` over batch entries ``t``.
    """
    x = _check_x(model, x)
    y = eval_linear(model, x)
    g = total_output_gradient(model, x, grad_y)
    u = _row_inputs(model, x, y)
    if x.ndim == 1:
        direct = -epsilon * g * (u * u).sum(axis=-1)
    else:
        flat_u = u.reshape(-1, model.n, model.n)
        flat_g = g.reshape(-1, model.n)
        direct = (-epsilon * np.einsum("sij,tij,ti->si", flat_u, flat_u, flat_g)).reshape(g.shape)
    if model.form != "gradual":
        return direct
    dy = np.zeros_like(direct)
    w = model.omega
    for i in range(model.n):
        dy[..., i] = direct[..., i] + dy[..., :i] @ w[i, :i]
    return dy


# ----------------------------------------------------------------------------
# collapse detection


@dataclass
class CollapseReport:
    pairs: list  # (p, q, gap) with p < q
    collapsed: list  # (p, q) with gap below threshold
    threshold: float
    n_probes: int
    probe_deficient: bool = False
    suspect: list = field(default_factory=list)  # coincident pairs explained by degenerate probes

    def gap(self, p: int, q: int) -> float:
        for a, b, g in self.pairs:
            if (a, b) == (p, q):
                return g
        raise KeyError((p, q))

    def min_gap(self) -> float:
        return min(g for _, _, g in self.pairs) if self.pairs else float("inf")


def _pair_gaps(acts: np.ndarray, groups) -> list:
    """Max |a_p - a_q| over rows for every pair inside each group of columns."""
    out = []
    for group in groups:
        group = list(group)
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                p, q = group[a], group[b]
                out.append((p, q, float(np.abs(acts[:, p] - acts[:, q]).max())))
    return out


def detect_collapse(model: Union[LinearModel, GunnLayer], probes, threshold: float = DEFAULT_THRESHOLD,
                    within_segments: bool = True) -> CollapseReport:
    """Find neuron pairs whose activations coincide on every probe.

    For a :class:`LinearModel` the probes are row vectors and all output pairs
    are compared. For a :class:`GunnLayer` the probes are NCHW feature maps;
    channels are compared inside each segment (or across the whole layer with
    ``within_segments=False``) over every batch entry and position, with BN in
    inference mode.

    If the probes themselves do not span the input space (e.g. duplicated
    input channels), coincidences are reported as ``suspect`` and the report
    is flagged ``probe_deficient`` instead of declaring a collapse.
    """
    probes = np.asarray(probes, dtype=np.float64)
    if probes.size == 0 or probes.shape[0] == 0:
        raise ValueError("empty probe set")
    if probes.shape[0] < MIN_PROBES:
        raise ValueError(f"need at least {MIN_PROBES} probes, got {probes.shape[0]}")
    if isinstance(model, LinearModel):
        acts = eval_linear(model, probes)
        inputs = probes
        groups = [range(model.n)]
    else:
        y = gunn_forward(probes, model, None, training=False, update_stats=False)
        acts = y.transpose(0, 2, 3, 1).reshape(-1, model.n_channels)
        inputs = probes.transpose(0, 2, 3, 1).reshape(-1, model.n_channels)
        groups = model.partition.segments if within_segments else [range(model.n_channels)]
    deficient = np.linalg.matrix_rank(inputs) < inputs.shape[1]
    pairs = _pair_gaps(acts, groups)
    below = [(p, q) for p, q, g in pairs if g < threshold]
    if deficient:
        return CollapseReport(pairs, [], threshold, probes.shape[0], True, below)
    return CollapseReport(pairs, below, threshold, probes.shape[0])


def network_collapse_gaps(network, images) -> dict:
    """Smallest within-segment gap of each GUNN stage of a network.

    Gaps are divided by the stage's largest output magnitude on the same
    probes so networks of different scale compare fairly. ``images`` are
    network inputs; each stage is probed with its own inference-mode input.
    """
    out = {}
    for name, x in network.gunn_inputs(images).items():
        layer = dict(network.gunn_layers())[name]
        rep = detect_collapse(layer, x.astype(np.float64))
        y = gunn_forward(x.astype(np.float64), layer, None, training=False, update_stats=False)
        out[name] = rep.min_gap() / max(float(np.abs(y).max()), 1e-300)
    return out


# ----------------------------------------------------------------------------
# collapse experiments


@dataclass
class CollapseTask:
    """Fixed regression task: loss = 0.5 * mean ||readout @ y - target||^2."""

    inputs: np.ndarray
    targets: np.ndarray
    readout: np.ndarray

    def loss_and_grad_y(self, y: np.ndarray):
        r = y @ self.readout.T - self.targets
        loss = 0.5 * float((r * r).sum()) / len(y)
        return loss, (r @ self.readout) / len(y)


def collapsed_init(form: str, n: int, p: int, q: int, rng: np.random.Generator) -> LinearModel:
    """A random model whose outputs ``p`` and ``q`` coincide for every input.

    * plain: row ``q`` copies row ``p``;
    * residual: ``w_pp + 1 = w_qp``, ``w_qq + 1 = w_pq`` and the other
      entries of the two rows agree;
    * gradual: ``q = p + 1`` with ``w_qp = 1``, ``w_qq = -1`` and the rest of
      row ``q`` zero, so ``y_q`` reproduces ``y_p`` exactly.
    """
    if not 0 <= p < q < n:
        raise ValueError(f"need 0 <= p < q < n, got p={p}, q={q}, n={n}")
    w = LinearModel.random(n, form, rng).omega
    if form == "plain":
        w[q] = w[p]
    elif form == "residual":
        w[q] = w[p]
        w[q, p] = w[p, p] + 1.0
        w[q, q] = w[p, q] - 1.0
    else:
        if q != p + 1:
            raise ValueError("gradual coincidence needs adjacent coordinates (q = p + 1)")
        w[q] = 0.0
        w[q, p] = 1.0
        w[q, q] = -1.0
    return LinearModel(w, form)


def make_task(n: int, rng: np.random.Generator, p: int, q: int, samples: int = 64, outputs: int = 4) -> CollapseTask:
    """Random regression whose readout treats ``y_p`` and ``y_q`` alike.

    Equal readout columns make the loss symmetric in the two neurons, the
    setting in which a coincidence can persist under training.
    """
    readout = rng.standard_normal((outputs, n)) / np.sqrt(n)
    readout[:, q] = readout[:, p]
    return CollapseTask(rng.standard_normal((samples, n)), rng.standard_normal((samples, outputs)), readout)


@dataclass
class CollapseRun:
    form: str
    n: int
    pair: tuple
    steps: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + " ".join(f"{k}={v}" for k, v in self.config.items()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "pair", "gap", "loss"])
        pair = f"{self.pair[0]}-{self.pair[1]}"
        for s, g, l in zip(self.steps, self.gaps, self.losses):
            w.writerow([s, pair, repr(g), repr(l)])
        return buf.getvalue()


def run_collapse_experiment(form: str, n: int = 6, steps: int = 100, seed: int = 0, lr: float = 0.05,
                            pair: Optional[tuple] = None, n_probes: int = 128,
                            collapsed: bool = True) -> CollapseRun:
    """Train from a collapsed (or, with ``collapsed=False``, a generic random)
    initialization and record the collapse gap per step.

    Step 0 is the initial model; the gap is the maximum of ``|y_p - y_q|``
    over a fixed standard-normal probe set.
    """
    if form not in FORMS:
        raise ValueError(f"unknown form {form!r}")
    rng = np.random.default_rng(seed)
    p, q = pair if pair is not None else (n // 2 - 1, n // 2)
    model = collapsed_init(form, n, p, q, rng) if collapsed else LinearModel.random(n, form, rng)
    task = make_task(n, rng, p, q)
    probes = rng.standard_normal((n_probes, n))
    run = CollapseRun(form, n, (p, q), config=dict(form=form, n=n, steps=steps, seed=seed, lr=lr, p=p, q=q,
                                                   probes=n_probes, collapsed=collapsed))
    for step in range(steps + 1):
        y = eval_linear(model, task.inputs)
        loss, gy = task.loss_and_grad_y(y)
        yp = eval_linear(model, probes)
        run.steps.append(step)
        run.gaps.append(float(np.abs(yp[:, p] - yp[:, q]).max()))
        run.losses.append(loss)
        if step < steps:
            model = gd_step(model, task.inputs, gy, lr)
    return run


def epsilon_sweep(model: LinearModel, x, grad_y, epsilons=(1e-3, 1e-4, 1e-5)):
    """Relative error of the first-order prediction for each step size.

    Returns ``(epsilons, errors, slope)`` where ``slope`` is the least-squares
    log-log slope of error against step size.
    """
    y0 = eval_linear(model, x)
    errs = []
    for eps in epsilons:
        dy = eval_linear(gd_step(model, x, grad_y, eps), x) - y0
        pred = delta_y_predicted(model, x, grad_y, eps)
        errs.append(float(np.linalg.norm(dy - pred) / np.linalg.norm(dy)))
    slope = float(np.polyfit(np.log(epsilons), np.log(errs), 1)[0])
    return list(epsilons), errs, slope
