"""Independent checks for the GUNN backward pass.

Two references are provided: an unrolled adjoint that materializes every
intermediate state and keeps every unit's cache from the forward pass, and
central finite differences of a random linear functional of the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import (GRADUAL, SIMULTANEOUS, GunnLayer, StageTape, _unit_apply, _unit_backward, gunn_backward,
                     gunn_forward, sunn_backward)


def unrolled_backward(x, layer: GunnLayer, grad_out, training: bool = True):
    """Reference adjoint of the gradual forward built from stored states."""
    states = [x]
    caches = []
    for i, unit in enumerate(layer.units):
        idx = layer.partition.index(i)
        prev = states[-1]
        new, cache = _unit_apply(unit, prev, idx, training, update_stats=False)
        nxt = prev.copy()
        nxt[:, idx] = new
        states.append(nxt)
        caches.append(cache)
    g = grad_out.copy()
    grads = {}
    for i in range(len(layer.units) - 1, -1, -1):
        unit = layer.units[i]
        idx = layer.partition.index(i)
        g_state, g_seg, gr = _unit_backward(unit, caches[i], g[:, idx])
        for k, v in gr.items():
            grads[f"units.{i}.{k}"] = v
        prev = g.copy()
        prev[:, idx] = 0.0
        prev = prev + g_state
        if g_seg is not None:
            prev[:, idx] += g_seg
        g = prev
    return g, grads, states[-1]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3,
                   scale: Optional[float] = None) -> float:
    """Largest entrywise relative error.

    Denominators are floored at ``floor`` times ``scale`` (by default the
    block's largest magnitude) so entries that are zero up to rounding do
    not dominate. Difference quotients carry noise proportional to the loss,
    so a check over several blocks should pass the largest gradient of the
    whole layer as ``scale``.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    if scale is None:
        scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / denom).max())


def numeric_gradient(f, arr: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` entries at ``indices``."""
    out = np.empty(len(indices))
    flat = arr.reshape(-1)
    for j, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def smooth_numeric_gradient(f, arr: np.ndarray, indices, h: float = 1e-6, agree: float = 1e-3):
    """Central differences at steps ``h`` and ``h / 2``.

    Returns ``(values, smooth)``. An entry whose two quotients differ by more
    than ``agree`` relative to their size straddles a ReLU kink (the loss is
    not differentiable there within the step) and is flagged as not smooth.
    """
    a = numeric_gradient(f, arr, indices, h)
    b = numeric_gradient(f, arr, indices, h / 2)
    smooth = np.abs(a - b) <= agree * np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return b, smooth


def _sample(rng, size: int, limit) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


@dataclass
class CheckResult:
    config: tuple
    mode: str
    oracle_error: float = 0.0
    fd_error: float = 0.0
    worst_block: str = ""
    blocks: dict = field(default_factory=dict)
    skipped: int = 0


def check_layer(layer: GunnLayer, x: np.ndarray, rng: np.random.Generator, fd_entries=8,
                h: float = 1e-6, training: bool = True) -> CheckResult:
    """Compare the layer's own backward with the oracle (gradual) and finite differences.

    Difference quotients that straddle a ReLU kink are excluded and counted
    in ``skipped``; if every sampled entry of every block is excluded the
    finite-difference error is reported as infinite.
    """
    weights = rng.standard_normal(x.shape)
    tape = StageTape()
    y = gunn_forward(x, layer, tape, training=training, update_stats=False)
    if layer.mode == GRADUAL:
        gx, grads = gunn_backward(tape, layer, weights)
    else:
        gx, grads = sunn_backward(x, layer, weights, training)
    res = CheckResult((layer.n_channels, len(layer.units)), layer.mode)

    if layer.mode == GRADUAL:
        ox, ograds, oy = unrolled_backward(x, layer, weights, training)
        err = float(np.abs(oy - y).max())
        scale = lambda a: max(float(np.abs(a).max()), 1.0)
        err = max(err, float(np.abs(ox - gx).max()) / scale(ox))
        for k, v in ograds.items():
            e = float(np.abs(v - grads[k]).max()) / scale(v)
            if e > err:
                err = e
        res.oracle_error = err

    def loss():
        return float((gunn_forward(x, layer, None, training=training, update_stats=False) * weights).sum())

    params = dict(layer.named_parameters())
    blocks = {"input": (x, gx)}
    blocks.update({k: (params[k], grads[k]) for k in params})
    worst, worst_name = 0.0, ""
    layer_scale = max(float(np.abs(g).max()) for _, g in blocks.values())
    for name, (arr, g) in blocks.items():
        idx = _sample(rng, arr.size, fd_entries)
        num, smooth = smooth_numeric_gradient(loss, arr, idx, h)
        res.skipped += int((~smooth).sum())
        e = relative_error(g.reshape(-1)[idx][smooth], num[smooth], scale=layer_scale)
        res.blocks[name] = e
        if e > worst:
            worst, worst_name = e, name
    if res.skipped == sum(min(a.size, fd_entries) if fd_entries else a.size for a, _ in blocks.values()):
        worst, worst_name = float("inf"), "all entries non-smooth"
    res.fd_error, res.worst_block = worst, worst_name
    return res


def random_config(rng: np.random.Generator):
    """A small ``(N, P, K, M, batch, hw)`` drawn from the checked ranges."""
    P = int(rng.choice([1, 2, 3, 4, 6]))
    n = int(rng.integers(1, 24 // P + 1))
    N = n * P
    K = int(rng.integers(1, 3))
    M = int(rng.integers(1, 3))
    batch = int(rng.integers(2, 5))
    hw = int(rng.integers(2, 9))
    return N, P, K, M, batch, hw


def run_suite(n_configs: int = 50, seed: int = 0, mode: str = GRADUAL, fd_entries=6, residual: bool = True,
              h: float = 1e-6):
    """Randomized oracle + finite-difference checks; returns one result per config."""
    from .network import make_gunn_layer

    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_configs):
        N, P, K, M, batch, hw = random_config(rng)
        layer = make_gunn_layer(rng, N, P, K, M, mode, residual)
        _perturb_bn(layer, rng)
        x = rng.standard_normal((batch, N, hw, hw))
        r = check_layer(layer, x, rng, fd_entries=fd_entries, h=h)
        r.config = (N, P, K, M, batch, hw)
        results.append(r)
    return results


def _perturb_bn(layer: GunnLayer, rng) -> None:
    # non-trivial BN affine parameters so their gradients are exercised
    for name, arr in layer.named_parameters():
        if name.endswith(".scale"):
            arr[...] = 1.0 + 0.2 * rng.standard_normal(arr.shape)
        elif name.endswith(".shift"):
            arr[...] = 0.2 * rng.standard_normal(arr.shape)
