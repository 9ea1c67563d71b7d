"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Criteria 7 and 8 (and the training part of 9) need the CIFAR-10 binary
files under ``GUNN_DATA_ROOT``; without them those criteria fail with an
explanation rather than being skipped.
"""

import hashlib
import io
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gunn.arch import (build_gunn15, build_gunn18, build_gunn24, build_tiny_pair, build_wide_gunn18, parameter_count,
                       stage_geometry)
from gunn.data import DataError, DatasetSource, load_cifar, train_stats
from gunn.engine import GRADUAL, NAIVE, SIMULTANEOUS, StageTape, gunn_backward, gunn_forward, peak_activation_bytes, sunn_backward
from gunn.gradcheck import _perturb_bn, check_layer, random_config
from gunn.network import Network, make_gunn_layer
from gunn.singularity import LinearModel, epsilon_sweep, network_collapse_gaps, run_collapse_experiment
from gunn.train import TrainConfig, epoch_means, metrics_digest, train
from oracles import unrolled_gunn

TINY_SCALE = "1/20"
TINY_PARTITIONS = (4, 5, 6)
SEEDS = (0, 1, 2)
EPOCHS = 20
TRAIN_SUBSET, TEST_SUBSET = 5000, 1000


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ----------------------------------------------------------------------------
# 1. parameter counts


def criterion1():
    got = [parameter_count(build_gunn15()), parameter_count(build_gunn15(classes=100)),
           parameter_count(build_gunn24()), parameter_count(build_gunn24(classes=100)),
           parameter_count(build_gunn18()), parameter_count(build_wide_gunn18())]
    return got


def test_criterion_1_parameter_counts():
    want = [1585746, 1618236, 29534106, 29631396, 28909736, 45624936]
    got = criterion1()
    report(1, got == want, f"counts {got} (expected {want}, exact)")


# ----------------------------------------------------------------------------
# 2. P = 1 mode equivalence


def criterion2(seed=0, n_configs=12):
    rng = np.random.default_rng(seed)
    lines = []
    bitwise, worst = True, 0.0
    for _ in range(n_configs):
        N, K, M = int(rng.integers(1, 13)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        residual = bool(rng.integers(0, 2))
        layer = make_gunn_layer(rng, N, 1, K, M, GRADUAL, residual)
        _perturb_bn(layer, rng)
        x = rng.standard_normal((int(rng.integers(2, 5)), N, 5, 5))
        g = rng.standard_normal(x.shape)
        tape = StageTape()
        yg = gunn_forward(x, layer, tape, update_stats=False)
        twin = layer.with_mode(SIMULTANEOUS)
        ys = gunn_forward(x, twin, update_stats=False)
        same = yg.tobytes() == ys.tobytes()
        gx1, gr1 = gunn_backward(tape, layer, g)
        gx2, gr2 = sunn_backward(x, twin, g)
        err = max([float(np.abs(gx1 - gx2).max())] + [float(np.abs(gr1[k] - gr2[k]).max()) for k in gr1])
        bitwise &= same
        worst = max(worst, err)
        lines.append(f"{N},{K},{M},{int(residual)},{int(same)},{err!r}")
    return bitwise, worst, "N,K,M,residual,bitwise,grad_err\n" + "\n".join(lines) + "\n"


def test_criterion_2_mode_equivalence():
    bitwise, worst, _ = criterion2()
    report(2, bitwise and worst <= 1e-12,
           f"12 P=1 configs: forward bitwise={bitwise}, max gradient difference {worst:.2e} (tolerance 1e-12)")


# ----------------------------------------------------------------------------
# 3. backward correctness


def criterion3(mode, seed, n_configs=50):
    rng = np.random.default_rng(seed)
    rows = []
    worst_oracle = worst_fd = 0.0
    kinks = 0
    for _ in range(n_configs):
        N, P, K, M, batch, hw = random_config(rng)
        layer = make_gunn_layer(rng, N, P, K, M, mode, bool(rng.integers(0, 4)))
        _perturb_bn(layer, rng)
        x = rng.standard_normal((batch, N, hw, hw))
        g = rng.standard_normal(x.shape)
        if mode == GRADUAL:
            tape = StageTape()
            y = gunn_forward(x, layer, tape, update_stats=False)
            gx, grads = gunn_backward(tape, layer, g)
        else:
            y = gunn_forward(x, layer, None, update_stats=False)
            gx, grads = sunn_backward(x, layer, g)
        oy, ogx, ograds = unrolled_gunn(layer, x, g, gradual=mode == GRADUAL)
        scale = lambda a: max(float(np.abs(a).max()), 1.0)
        e_oracle = max([float(np.abs(oy - y).max()), float(np.abs(ogx - gx).max()) / scale(ogx)]
                       + [float(np.abs(ograds[k] - grads[k]).max()) / scale(ograds[k]) for k in ograds])
        fd = check_layer(layer, x, rng, fd_entries=6)
        worst_oracle = max(worst_oracle, e_oracle)
        worst_fd = max(worst_fd, fd.fd_error)
        kinks += fd.skipped
        rows.append(f"{N},{P},{K},{M},{batch},{hw},{e_oracle!r},{fd.fd_error!r}")
    csv = "N,P,K,M,batch,hw,oracle_error,fd_error\n" + "\n".join(rows) + "\n"
    return worst_oracle, worst_fd, kinks, csv


@pytest.mark.parametrize("mode", [GRADUAL, SIMULTANEOUS])
def test_criterion_3_backward_correctness(mode):
    t0 = time.perf_counter()
    oracle, fd, kinks, _ = criterion3(mode, seed=3)
    dt = time.perf_counter() - t0
    ok = oracle <= 1e-10 and fd <= 1e-5 and dt < 300
    report(3, ok, f"{mode}: 50 configs, oracle error {oracle:.2e} (<= 1e-10), finite-difference error {fd:.2e} "
                  f"(<= 1e-5, {kinks} kink-straddling entries excluded), {dt:.0f} s (< 300 s)")


# ----------------------------------------------------------------------------
# 4. memory accounting


def criterion4():
    presets = {"gunn15": (build_gunn15(), 32), "gunn24": (build_gunn24(), 32), "gunn18": (build_gunn18(), 224),
               "wide-gunn18": (build_wide_gunn18(), 224),
               "tiny": (build_tiny_pair(TINY_SCALE, partitions=TINY_PARTITIONS)[0], 32)}
    ratios, rows = {}, []
    for name, (spec, hw0) in presets.items():
        for i, (_, st, hw) in enumerate(stage_geometry(spec, hw0), start=1):
            shape = (64, st.config.N, hw, hw)
            g, s, n = (peak_activation_bytes(st.config, shape, m, 4) for m in (GRADUAL, SIMULTANEOUS, NAIVE))
            ratios[(name, i)] = (g / s, n / g)
            rows.append(f"{name},{i},{g},{s},{n}")
    return ratios, "preset,stage,gradual,simultaneous,naive\n" + "\n".join(rows) + "\n"


def test_criterion_4_memory():
    ratios, _ = criterion4()
    worst = max(r[0] for r in ratios.values())
    naive = ratios[("gunn15", 1)][1]
    report(4, worst <= 1.2 and naive > 5,
           f"max gradual/simultaneous over all preset stages {worst:.3f} (<= 1.2); "
           f"naive/gradual on GUNN-15 first stage {naive:.1f}x (> 5x)")


# ----------------------------------------------------------------------------
# 5. first-order output change


def criterion5(seed=0, n_models=20):
    rng = np.random.default_rng(seed)
    rows, slopes, monotone = [], [], True
    for _ in range(n_models):
        n = int(rng.integers(2, 9))
        model = LinearModel.random(n, "gradual", rng)
        x = rng.standard_normal((16, n))
        gy = rng.standard_normal((16, n))
        eps, errs, slope = epsilon_sweep(model, x, gy)
        slopes.append(slope)
        monotone &= errs[0] > errs[1] > errs[2]
        rows.append(f"{n},{errs[0]!r},{errs[1]!r},{errs[2]!r},{slope!r}")
    return slopes, monotone, "n,err_1e-3,err_1e-4,err_1e-5,slope\n" + "\n".join(rows) + "\n"


def test_criterion_5_first_order_prediction():
    slopes, monotone, _ = criterion5()
    ok = monotone and all(abs(s - 1.0) <= 0.2 for s in slopes)
    report(5, ok, f"20 models n<=8: log-log slopes in [{min(slopes):.3f}, {max(slopes):.3f}] (1.0 +- 0.2), "
                  f"errors decreasing={monotone}")


# ----------------------------------------------------------------------------
# 6. collapse elimination


def criterion6():
    plain = [run_collapse_experiment("plain", steps=1000, seed=s) for s in range(10)]
    gradual = [run_collapse_experiment("gradual", steps=5, seed=s) for s in range(10)]
    csv = "".join(r.to_csv() for r in plain + gradual)
    return max(max(r.gaps) for r in plain), min(max(r.gaps[1:]) for r in gradual), csv


def test_criterion_6_collapse_elimination():
    plain_gap, gradual_gap, _ = criterion6()
    report(6, plain_gap < 1e-12 and gradual_gap > 1e-6,
           f"plain: max gap over 1000 steps x 10 seeds {plain_gap:.1e} (< 1e-12); gradual: smallest 5-step "
           f"separation over 10 seeds {gradual_gap:.2e} (> 1e-6)")


# ----------------------------------------------------------------------------
# 7, 8. desk training


def data_root():
    root = os.environ.get("GUNN_DATA_ROOT")
    if not root:
        return None, "GUNN_DATA_ROOT is not set; the CIFAR-10 binary files are required"
    try:
        mean, std = train_stats(root, 10)
    except DataError as exc:
        return None, f"CIFAR-10 files unusable: {exc}"
    return (root, mean, std), ""


def desk_run(kind, seed, data):
    root, mean, std = data
    gunn, sunn = build_tiny_pair(TINY_SCALE, partitions=TINY_PARTITIONS)
    spec = {"gunn": gunn, "sunn": sunn,
            "nores": build_tiny_pair(TINY_SCALE, partitions=TINY_PARTITIONS, residual=False)[0]}[kind]
    tr = load_cifar(DatasetSource(root, "train", 10, TRAIN_SUBSET, seed), mean, std, np.float32)
    te = load_cifar(DatasetSource(root, "test", 10, TEST_SUBSET, seed), mean, std, np.float32)
    res = train(spec, tr, TrainConfig.desk(EPOCHS, seed=seed, precision="f32"), test_data=te)
    if res.diverged:
        return dict(loss=float("inf"), err=1.0, digest="diverged", network=res.network, probes=te[0][:64])
    return dict(loss=epoch_means(res.rows)[-1], err=res.rows[-1].test_err, digest=metrics_digest(res.rows),
                network=res.network, probes=te[0][:64])


@pytest.fixture(scope="module")
def desk_runs():
    data, why = data_root()
    if data is None:
        return None, why
    cache = {}

    def get(kind, seed):
        if (kind, seed) not in cache:
            cache[(kind, seed)] = desk_run(kind, seed, data)
        return cache[(kind, seed)]

    return get, ""


def test_criterion_7_gunn_vs_sunn(desk_runs):
    get, why = desk_runs
    if get is None:
        report(7, False, f"not run: {why}")
    t0 = time.perf_counter()
    g = [get("gunn", s) for s in SEEDS]
    s = [get("sunn", s) for s in SEEDS]
    gl, sl = np.median([r["loss"] for r in g]), np.median([r["loss"] for r in s])
    ge, se = np.median([r["err"] for r in g]), np.median([r["err"] for r in s])
    dt = time.perf_counter() - t0
    report(7, gl < sl and ge <= se and dt < 1800,
           f"median final training loss GUNN {gl:.4f} vs SUNN {sl:.4f} (strictly lower); median test error "
           f"GUNN {ge:.4f} vs SUNN {se:.4f} (no worse); {dt:.0f} s (< 1800 s)")


def test_criterion_8_residual_ablation(desk_runs):
    get, why = desk_runs
    if get is None:
        report(8, False, f"not run: {why}")
    t0 = time.perf_counter()
    res = [get("gunn", s) for s in SEEDS]
    nores = [get("nores", s) for s in SEEDS]
    rl, nl = np.median([r["loss"] for r in res]), np.median([r["loss"] for r in nores])
    gap = lambda r: float(np.mean(list(network_collapse_gaps(r["network"], r["probes"]).values())))
    rg, ng = np.median([gap(r) for r in res]), np.median([gap(r) for r in nores])
    dt = time.perf_counter() - t0
    report(8, nl >= rl and ng < rg,
           f"median final training loss without residual {nl:.4f} vs with {rl:.4f} (>=); median relative "
           f"within-segment collapse gap without {ng:.4f} vs with {rg:.4f} (smaller); {dt:.0f} s")


# ----------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(desk_runs):
    parts = {
        "2": lambda: criterion2()[2],
        "3": lambda: criterion3(GRADUAL, seed=3, n_configs=10)[3] + criterion3(SIMULTANEOUS, seed=3, n_configs=10)[3],
        "4": lambda: criterion4()[1],
        "5": lambda: criterion5()[2],
        "6": lambda: criterion6()[2],
    }
    mismatched = [k for k, f in parts.items() if digest(f()) != digest(f())]
    get, why = desk_runs
    if get is None:
        report(9, False, f"criteria 2-6 digests identical on repeat: {not mismatched}; criterion 7 runs not "
                         f"repeated: {why}")
    for kind in ("gunn", "sunn"):
        first = get(kind, SEEDS[0])["digest"]
        again = desk_run(kind, SEEDS[0], data_root()[0])["digest"]
        if first != again:
            mismatched.append(f"7-{kind}")
    report(9, not mismatched, f"repeated digests differ for {mismatched}" if mismatched
           else "criteria 2-7 CSV digests identical on repeat")
