"""Acceptance criteria 1-9.

Each test records one verdict line per check through the ``verdict`` fixture;
the terminal summary prints an aggregated PASS/FAIL line per criterion.

The desk-scale runs (criteria 4-8) train on a 10k/2k class-balanced MNIST
subsample for 20 epochs and take most of an hour on one CPU. They share
session fixtures so the vanilla sweep is trained once.
"""
import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from moe_lab import datasets as D
from moe_lab import metrics as MX
from moe_lab import models as M
from moe_lab import tensor as T
from moe_lab import training as TR
from moe_lab.config import ExperimentConfig
from moe_lab.experiments import run_experiment
from moe_lab.regularizers import RegConfig, importance_loss, regularizer, similarity_loss, total_loss
from moe_lab.tensor import Tensor

import oracles as O

MNIST_DIR = Path(os.environ.get("MOE_LAB_DATA_DIR", "/root/data")) / "mnist"
needs_mnist = pytest.mark.skipif(not MNIST_DIR.is_dir(), reason=f"no MNIST under {MNIST_DIR}")

SEEDS = [0, 1, 2]
PAIR_SPLIT = [[0, 7], [1, 9], [2, 4], [3, 8], [5, 6]]
# grid points picked by pilot runs from the default grids (see README)
LS_POINT = {"beta_s": [1e-6], "beta_d": [1e-1]}
IMPORTANCE_POINT = {"w_importance": [1.0]}


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------
def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away(rng, shape, low, high, kink):
    # keep samples clear of a kink so the central difference never straddles it
    v = rng.uniform(low, high, size=shape)
    return np.where(np.abs(v - kink) < 0.05, v + 0.1, v)


def _op_cases():
    """name -> builder(rng) returning (output closure, parameters)."""
    def unary(fn, low=-2.0, high=2.0, shape=(3, 4)):
        def build(rng):
            a = _leaf(rng.uniform(low, high, size=shape))
            return (lambda: fn(a)), [a]
        return build

    def binary(fn, sa, sb):
        def build(rng):
            a, b = _leaf(rng.normal(size=sa)), _leaf(rng.normal(size=sb))
            return (lambda: fn(a, b)), [a, b]
        return build

    def relu_case(rng):
        a = _leaf(_away(rng, (4, 5), -2, 2, 0.0))
        return (lambda: T.relu(a)), [a]

    def clamp_case(rng):
        a = _leaf(_away(rng, (4, 5), -1, 1, 0.3))
        return (lambda: T.clamp_min(a, 0.3)), [a]

    def conv_case(rng):
        x = _leaf(rng.normal(size=(2, 2, 6, 5)))
        k = _leaf(rng.normal(size=(3, 2, 3, 2)))
        b = _leaf(rng.normal(size=3))
        return (lambda: T.conv2d_valid(x, k, b)), [x, k, b]

    def pool_case(rng):
        # well-separated values keep every window's max unique under the probe step
        x = _leaf(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.01)
        return (lambda: T.maxpool2(x)), [x]

    def stack_case(rng):
        a, b = _leaf(rng.normal(size=(3, 2))), _leaf(rng.normal(size=(3, 2)))
        return (lambda: T.stack([a, b, a * b], axis=1)), [a, b]

    def getitem_case(rng):
        a = _leaf(rng.normal(size=(5, 4)))
        rows, cols = np.array([0, 2, 2, 4]), np.array([1, 0, 3, 3])
        return (lambda: T.stack([a[rows, cols], a[1:5, 2]], axis=0)), [a]

    def softmax_case(rng):
        z = _leaf(rng.normal(scale=2.0, size=(4, 5)))
        return (lambda: T.row_softmax(z)), [z]

    def attentive_case(rng):
        g = _leaf(rng.normal(size=(3, 4)))
        es = [_leaf(rng.normal(size=(3, 4))) for _ in range(3)]
        wq, wk = _leaf(rng.normal(size=(4, 4))), _leaf(rng.normal(size=(4, 4)))
        return (lambda: M.attentive_scores(g, es, wq, wk)), [g, *es, wq, wk]

    def combine_case(rng):
        p = _leaf(rng.dirichlet(np.ones(3), size=4))
        outs = [_leaf(rng.dirichlet(np.ones(5), size=4)) for _ in range(3)]
        return (lambda: M.combine(p, outs)), [p, *outs]

    def nll_case(rng):
        z = _leaf(rng.normal(size=(6, 4)))
        y = rng.integers(0, 4, size=6)
        return (lambda: M.mixture_nll(T.row_softmax(z), y)), [z]

    def importance_case(rng):
        z = _leaf(rng.normal(size=(7, 4)))
        return (lambda: importance_loss(T.row_softmax(z), 0.6)), [z]

    def similarity_case(rng):
        x = rng.uniform(size=(6, 1, 4, 4))
        z = _leaf(rng.normal(size=(6, 3)))
        return (lambda: similarity_loss(x, T.row_softmax(z), 0.05, 0.02)), [z]

    return {
        "add": binary(T.add, (3, 4), (1, 4)),
        "mul": binary(T.mul, (3, 4), (3, 1)),
        "neg": unary(T.neg),
        "power": unary(lambda a: T.power(a, 2.5), 0.2, 2.0),
        "exp": unary(T.exp),
        "log": unary(T.log, 0.2, 3.0),
        "sqrt": unary(T.sqrt, 0.2, 3.0),
        "clamp_min": clamp_case,
        "relu": relu_case,
        "sum": unary(lambda a: T.tsum(a, axis=1, keepdims=True)),
        "mean": unary(lambda a: a.mean(axis=0)),
        "reshape": unary(lambda a: T.reshape(a, (2, 6))),
        "transpose": unary(T.transpose),
        "getitem": getitem_case,
        "stack": stack_case,
        "matmul": binary(T.matmul, (3, 4), (4, 2)),
        "row_softmax": softmax_case,
        "conv2d_valid": conv_case,
        "maxpool2": pool_case,
        "attentive_scores": attentive_case,
        "combine": combine_case,
        "mixture_nll": nll_case,
        "importance_loss": importance_case,
        "similarity_loss": similarity_case,
    }


def _scalar(out_fn, rng):
    """Reduce a tensor-valued closure to a scalar with a fixed random read-out."""
    shape = out_fn().shape
    if shape == ():
        return out_fn
    w = Tensor(rng.normal(size=shape))
    return lambda: (out_fn() * w).sum()


def _composite(gate: str, reg: RegConfig, arch: M.Architecture, seed: int):
    rng = np.random.default_rng(seed)
    model = M.build_model(3 if gate != "none" else 1, 10, gate, seed=seed, arch=arch)
    x = rng.uniform(size=(4, 1, *arch.image_size))
    y = rng.integers(0, 10, size=4)

    def f():
        y_hat, p, _ = M.mixture_forward(model, x)
        return total_loss(M.mixture_nll(y_hat, y), regularizer(reg, x, p))
    return f, list(model.named_parameters().values())


# Gradients below 1e-6 are compared absolutely: at step 1e-5 the central
# difference resolves the slope of an O(1) loss only to ~1e-11.
def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    worst = {}
    for name, build in _op_cases().items():
        errs = []
        for seed in range(5):
            rng = np.random.default_rng([1, seed])
            out_fn, params = build(rng)
            errs.append(T.grad_check(_scalar(out_fn, rng), params, step=1e-5, floor=1e-6))
        worst[name] = max(errs)

    # Composites probe up to 30 coordinates of every parameter tensor. Coordinates
    # whose probe interval crosses a relu / maxpool branch change are skipped and counted.
    composites = {
        "moe softmax+importance 8x8": ("softmax", RegConfig("importance", w_importance=0.8), (8, 8)),
        "moe attentive+Ls 8x8": ("attentive", RegConfig("similarity", beta_s=1e-2, beta_d=1e-2), (8, 8)),
        "moe softmax+importance 28x28": ("softmax", RegConfig("importance", w_importance=0.8), (28, 28)),
        "moe attentive+Ls 28x28": ("attentive", RegConfig("similarity", beta_s=1e-4, beta_d=1e-3), (28, 28)),
        "single model 28x28": ("none", RegConfig(), (28, 28)),
    }
    stats = {}
    for name, (gate, reg, size) in composites.items():
        errs = []
        for seed in range(5):
            f, params = _composite(gate, reg, M.Architecture(image_size=size), seed)
            errs.append(T.grad_check(f, params, step=1e-5, max_coords=30, rng=np.random.default_rng(seed),
                                     floor=1e-6, skip_kinks=True, stats=stats))
        worst[name] = max(errs)

    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    verdict(1, not bad, f"{len(worst)} checks x 5 seeds, max rel err {max(worst.values()):.2e}"
                        + (f", failing {sorted(bad)}" if bad else ""))
    kinks = stats["skipped"] / (stats["checked"] + stats["skipped"])
    verdict(1, kinks < 0.01, f"composite coords checked {stats['checked']}, at a relu/maxpool kink "
                             f"{stats['skipped']} ({kinks:.2%}, < 1%)")
    verdict(1, elapsed < 120, f"runtime {elapsed:.1f}s (< 120s)")
    assert not bad, bad
    assert kinks < 0.01 and elapsed < 120


# ---------------------------------------------------------------------------
# 2. metric oracles
# ---------------------------------------------------------------------------
def test_criterion_2_metric_oracles(verdict):
    worst_h, table_mismatch, worst_mi = 0.0, 0, 0.0
    for i in range(1000):
        rng = np.random.default_rng([2, i])
        n, m, k = int(rng.integers(1, 60)), int(rng.integers(1, 9)), int(rng.integers(1, 13))
        conc = rng.choice([0.05, 0.5, 1.0, 5.0])
        p = rng.dirichlet(np.full(m, conc), size=n)
        labels = rng.integers(0, k, size=n)
        rows = p.tolist()
        worst_h = max(worst_h, abs(MX.h_s(p) - O.h_s_loop(rows)), abs(MX.h_u(p) - O.h_u_loop(rows)))
        table = MX.selection_table(p, labels, k)
        want = O.selection_table_loop(rows, labels.tolist(), k)
        table_mismatch += not np.array_equal(table.counts, np.asarray(want))
        worst_mi = max(worst_mi, abs(MX.mutual_information(table) - O.mutual_information_kl(want)))

    collapse = np.zeros((100, 5))
    collapse[:, 3] = 1.0
    uniform_use = np.tile(np.eye(5), (20, 1))
    fixed = (MX.h_u(collapse) == 0.0 and MX.h_s(collapse) == 0.0
             and abs(MX.h_u(uniform_use) - math.log2(5)) < 1e-12
             and abs(MX.h_u(uniform_use) - 2.3219) < 1e-4)

    ok = worst_h < 1e-10 and table_mismatch == 0 and worst_mi < 1e-10
    verdict(2, ok, f"1000 instances: max |dH| {worst_h:.1e}, table mismatches {table_mismatch}, "
                   f"max |dI| {worst_mi:.1e}")
    verdict(2, fixed, f"H_u collapse = {MX.h_u(collapse)}, H_u uniform = {MX.h_u(uniform_use):.6f}")
    assert ok and fixed


# ---------------------------------------------------------------------------
# 3. L_s and L_importance oracles
# ---------------------------------------------------------------------------
def test_criterion_3_regularizer_oracles(verdict):
    worst = 0.0
    cases = 0
    for n in range(2, 9):
        for m in range(1, 5):
            for seed in range(50):
                rng = np.random.default_rng([3, n, m, seed])
                x = rng.uniform(size=(n, 1, 5, 5))
                p = rng.dirichlet(np.ones(m), size=n)
                bs, bd = rng.uniform(1e-3, 1e-1, size=2)
                got = similarity_loss(x, Tensor(p), bs, bd).item()
                worst = max(worst, abs(got - O.similarity_loss_loop(x, p.tolist(), bs, bd)))
                cases += 1

    collapse_err = 0.0
    for m in range(2, 16):
        for w in (0.2, 0.4, 0.6, 0.8, 1.0):
            p = np.zeros((64, m))
            p[:, m // 2] = 1.0
            collapse_err = max(collapse_err, abs(importance_loss(Tensor(p), w).item() - w * math.sqrt(m - 1)))

    verdict(3, worst <= 1e-12, f"L_s vs loop oracle on {cases} cases: max abs err {worst:.1e}")
    verdict(3, collapse_err <= 1e-12, f"L_importance collapse = w*sqrt(M-1): max err {collapse_err:.1e}")
    assert worst <= 1e-12 and collapse_err <= 1e-12


# ---------------------------------------------------------------------------
# desk-scale sweeps shared by criteria 4-8
# ---------------------------------------------------------------------------
def _sweep(root: Path, name: str, regime: str, **extra):
    cfg = {"regime": regime, "name": name, "seeds": SEEDS,
           "dataset": {"name": "mnist", "root": str(MNIST_DIR), "train_n": 10_000, "test_n": 2_000}}
    cfg.update(extra)
    start = time.perf_counter()
    res = run_experiment(ExperimentConfig.from_dict(cfg), root / name)
    res.elapsed = time.perf_counter() - start
    return res


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def single_sweep(desk_root):
    return _sweep(desk_root, "single", "single_model", n_experts=1)


@pytest.fixture(scope="session")
def vanilla_sweep(desk_root):
    return _sweep(desk_root, "vanilla", "vanilla")


@pytest.fixture(scope="session")
def attentive_ls_sweep(desk_root):
    return _sweep(desk_root, "attentive_ls", "attentive+Ls", grid=LS_POINT)


def _median(reports, field):
    return statistics.median(getattr(r, field) for r in reports)


@needs_mnist
@pytest.mark.slow
def test_criterion_4_desk_mnist(verdict, single_sweep, vanilla_sweep):
    single = single_sweep.selected_report.test_error
    vanilla = vanilla_sweep.selected_report.test_error
    minutes = (single_sweep.elapsed + vanilla_sweep.elapsed) / 60
    a = verdict(4, 0.04 <= single <= 0.15, f"single model test error {single:.4f} in [0.04, 0.15]")
    b = verdict(4, vanilla <= single and vanilla <= 0.10,
                f"vanilla MoE test error {vanilla:.4f} <= single and <= 0.10")
    c = verdict(4, minutes <= 30, f"runtime {minutes:.1f} min (<= 30)")
    assert a and b and c


@needs_mnist
@pytest.mark.slow
def test_criterion_5_pretrained_expert_protocol(verdict):
    train_ds, test_ds = _desk_data()
    results = [TR.run_fig3_protocol(train_ds, PAIR_SPLIT, TR.TrainConfig(seed=s), test_ds)
               for s in SEEDS]
    loss_a = statistics.median(r.report_a.final_train_loss for r in results)
    loss_b = statistics.median(r.report_b.final_train_loss for r in results)
    err_a = statistics.median(r.report_a.test_error for r in results)
    err_b = statistics.median(r.report_b.test_error for r in results)
    worst_route = 1.0
    for r in results:
        counts = np.array(r.report_b.stages["gate"]["selection_table"]["counts"])
        for expert, group in enumerate(PAIR_SPLIT):
            for cls in group:
                worst_route = min(worst_route, counts[expert, cls] / counts[:, cls].sum())
    a = verdict(5, loss_b < loss_a, f"median final train loss (b) {loss_b:.4f} < (a) {loss_a:.4f}")
    b = verdict(5, err_b < err_a, f"median test error (b) {err_b:.4f} < (a) {err_a:.4f}")
    c = verdict(5, worst_route >= 0.90, f"(b) gate routes >= {worst_route:.3f} of every class to its expert")
    assert a and b and c


@needs_mnist
@pytest.mark.slow
def test_criterion_6_attentive_trend(verdict, vanilla_sweep, attentive_ls_sweep):
    van, att = list(vanilla_sweep.reports.values()), list(attentive_ls_sweep.reports.values())
    hs_v, hs_a = _median(van, "h_s"), _median(att, "h_s")
    err_v, err_a = _median(van, "test_error"), _median(att, "test_error")
    a = verdict(6, hs_a < hs_v, f"median H_s attentive+L_s {hs_a:.4f} < vanilla {hs_v:.4f}")
    b = verdict(6, err_a <= err_v + 0.01,
                f"median test error attentive+L_s {err_a:.4f} <= vanilla {err_v:.4f} + 0.01")
    assert a and b


@needs_mnist
@pytest.mark.slow
def test_criterion_7_distillation(verdict, desk_root, attentive_ls_sweep):
    res = _sweep(desk_root, "distilled", "distill_from_Ls", seeds=[0], source=str(attentive_ls_sweep.out))
    source_err = res.summary["source_test_error"]
    distilled = res.selected_report.test_error
    model = M.load_checkpoint(res.out / "selected" / "checkpoint.npz")
    _, test_ds = _desk_data()
    y_full, _ = TR.predict(model, test_ds.images)
    y_k2, evals = M.conditional_forward(model, test_ds.images, top_k=2)
    full_err = MX.classification_error(y_full, test_ds.labels)
    k2_err = MX.classification_error(y_k2, test_ds.labels)
    n = len(test_ds)
    a = verdict(7, distilled <= source_err + 0.02,
                f"distilled test error {distilled:.4f} <= source {source_err:.4f} + 0.02")
    b = verdict(7, abs(k2_err - full_err) < 0.01,
                f"top-2 error {k2_err:.4f} vs full {full_err:.4f} (|diff| < 0.01)")
    c = verdict(7, evals <= 2 * n, f"{evals} expert evaluations for N = {n} (<= 2N)")
    assert a and b and c


@needs_mnist
@pytest.mark.slow
def test_criterion_8_expert_count_scaling(verdict, desk_root):
    ls = _sweep(desk_root, "m15_ls", "attentive+Ls", n_experts=15, grid=LS_POINT)
    imp = _sweep(desk_root, "m15_importance", "attentive+importance", n_experts=15, grid=IMPORTANCE_POINT)

    def active(res):
        return statistics.median(MX.active_experts(r.table(), 0.01) for r in res.reports.values())

    n_ls, n_imp = active(ls), active(imp)
    a = verdict(8, n_ls <= n_imp, f"median active experts L_s {n_ls} <= L_importance {n_imp}")
    b = verdict(8, n_imp == 15, f"L_importance median active experts {n_imp} == 15")
    assert a and b


_DATA = {}


def _desk_data():
    if not _DATA:
        tr = D.subsample(D.load_standard(MNIST_DIR, "train", D.MNIST_CLASSES), 10_000, 0)
        te = D.subsample(D.load_standard(MNIST_DIR, "test", D.MNIST_CLASSES), 2_000, 0)
        _DATA["pair"] = (tr, te)
    return _DATA["pair"]


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------
def _numerics(report) -> str:
    return json.dumps(report.numerics(), sort_keys=True)


def test_criterion_9_determinism(verdict, tmp_path):
    rng = np.random.default_rng(9)
    labels = np.arange(120) % 4
    imgs = rng.uniform(0, 0.4, size=(120, 1, 10, 10))
    for i, y in enumerate(labels):
        imgs[i, 0, 2 * y:2 * y + 2, :] = 1.0
    train_ds = D.Dataset(np.round(imgs * 255) / 255, labels, ["a", "b", "c", "d"])
    test_ds = D.Dataset(train_ds.images[:40], labels[:40], train_ds.class_names)
    arch = {"image_size": [10, 10]}

    regimes = [("single_model", {"n_experts": 1}), ("vanilla", {}),
               ("vanilla+importance", {"grid": {"w_importance": [0.4]}}),
               ("attentive+Ls", {"grid": {"beta_s": [1e-4], "beta_d": [1e-3]}})]
    same = []
    for regime, extra in regimes:
        runs = []
        for attempt in ("a", "b"):
            cfg = ExperimentConfig.from_dict({"regime": regime, "n_experts": 3, "seeds": [5],
                                              "train": {"epochs": 2, "batch_size": 32},
                                              "architecture": arch, **extra})
            res = run_experiment(cfg, tmp_path / f"{regime}-{attempt}", data=(train_ds, test_ds))
            runs.append(_numerics(res.selected_report))
        same.append(runs[0] == runs[1])

    fig = [TR.run_fig3_protocol(train_ds, [[0, 1], [2, 3]], TR.TrainConfig(epochs=1, batch_size=32, seed=3),
                                test_ds, M.Architecture(image_size=(10, 10))) for _ in range(2)]
    same.append(all(_numerics(x) == _numerics(y) for x, y in zip(*fig)))

    ok_runs = all(same)
    verdict(9, ok_runs, f"{sum(same)}/{len(same)} configurations byte-identical on rerun")

    path_i, path_l = tmp_path / "imgs-idx3-ubyte", tmp_path / "labels-idx1-ubyte"
    D.save_idx(train_ds, path_i, path_l)
    back = D.load_idx(path_i, path_l, train_ds.class_names)
    round_trip = (back.images.tobytes() == train_ds.images.tobytes()
                  and back.labels.tobytes() == train_ds.labels.tobytes())
    raw = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    round_trip &= D.parse_idx(D.encode_idx(raw)).tobytes() == raw.tobytes()
    verdict(9, round_trip, "IDX save/load round trip is bit-exact")
    assert ok_runs and round_trip
