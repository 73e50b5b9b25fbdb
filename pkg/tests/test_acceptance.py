"""Acceptance suite: each test enforces one release criterion at its stated
tolerance and prints one PASS/FAIL line.

The MNIST criteria (6-8) train real models and take tens of minutes of CPU
combined; everything else finishes in seconds.  Run with ``-s`` to watch the
lines appear.
"""

import os
import time

import numpy as np
import pytest

from compandq.gradients import grad_ql_alpha, grad_ql_theta
from compandq.nn import build_cnn4
from compandq.quantizer import (
    CompandingState,
    QuantSpec,
    clip_uniform_quantize,
    compress,
    expand,
    identity_rounding,
    lcq_forward,
    lcq_forward_requant,
    quant_levels,
)
from compandq.train import TrainConfig, train_loop
from compandq.verify import fd_check_network, gradcheck_suite, lut_check_suite

DATA_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..",
                                         "data"))
SEEDS = (0, 1, 2)


def report(criterion, passed, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert passed, line


def test_criterion_1_identity_reduction():
    t0 = time.time()
    rng = np.random.default_rng(101)
    mismatches = 0
    total = 0
    for bits in (2, 3, 4):
        for signed in (True, False):
            for k, alpha in ((4, 1.0), (16, 1.7)):
                spec = QuantSpec(bits, signed, 9, k)
                state = CompandingState.derive(np.zeros(k), alpha)
                n = 100_000 // 12 + 1
                x = rng.uniform(-2 * alpha, 2 * alpha, n)
                a = lcq_forward(x, state, spec)
                b = clip_uniform_quantize(x, alpha, spec)
                mismatches += int((a != b).sum())
                total += n
    elapsed = time.time() - t0
    report(1, mismatches == 0 and elapsed < 1.0,
           f"{total} inputs, {mismatches} bitwise mismatches, "
           f"{elapsed:.2f}s (budget 1s)")


def test_criterion_2_core_invariants():
    t0 = time.time()
    rng = np.random.default_rng(102)
    worst_inverse = 0.0
    bad_monotone = bad_range = bad_count = 0
    per_state = 625
    for k in (4, 8, 12, 16):
        for _ in range(40):
            state = CompandingState.derive(rng.normal(0, 1, k),
                                           float(rng.uniform(0.5, 4)))
            bits = int(rng.choice([2, 3, 4]))
            signed = bool(rng.choice([True, False]))
            spec = QuantSpec(bits, signed, 8, k)
            v = rng.uniform(0, 1, per_state)
            fv = compress(v, state)
            worst_inverse = max(worst_inverse,
                                float(np.abs(expand(fv, state) - v).max()))
            if np.any(fv < 0) or np.any(fv >= 1):
                bad_range += 1
            sv = np.sort(v)
            if not (np.all(np.diff(compress(sv, state)) > 0)
                    and np.all(np.diff(expand(sv, state)) > 0)):
                bad_monotone += 1
            x = np.sort(rng.uniform(-2, 2, per_state) * state.alpha)
            if np.any(np.diff(lcq_forward(x, state, spec)) < 0):
                bad_monotone += 1
            out = lcq_forward(x, state, spec)
            lo = -state.alpha if signed else 0.0
            if out.min() < lo - 1e-12 or out.max() > state.alpha + 1e-12:
                bad_range += 1
            levels = quant_levels(state, spec)
            limit = 2**bits - 1 if signed else 2**bits
            if len(levels) > limit or np.any(np.diff(levels) <= 0):
                bad_count += 1
    elapsed = time.time() - t0
    ok = (worst_inverse < 1e-12 and bad_monotone == 0 and bad_range == 0
          and bad_count == 0 and elapsed < 10.0)
    report(2, ok,
           f"inverse max err {worst_inverse:.2e} (tol 1e-12), "
           f"monotonicity/range/level-count violations "
           f"{bad_monotone}/{bad_range}/{bad_count}, {elapsed:.1f}s "
           f"(budget 10s)")


def test_criterion_3_gradient_validation():
    t0 = time.time()
    rng = np.random.default_rng(103)

    # (a) identity-rounding null gradients over 1e4 random states
    worst_null = 0.0
    with identity_rounding():
        for _ in range(10_000):
            k = int(rng.choice([4, 8, 12, 16]))
            state = CompandingState.derive(rng.normal(0, 1, k),
                                           float(rng.uniform(0.5, 4)))
            spec = QuantSpec(int(rng.choice([2, 3, 4])),
                             bool(rng.choice([True, False])), 8, k)
            x = float(rng.uniform(0.01, 0.99)) * state.alpha
            if spec.signed and rng.random() < 0.5:
                x = -x
            worst_null = max(
                worst_null,
                float(np.abs(grad_ql_theta(x, state, spec)).max()),
                abs(float(grad_ql_alpha(x, state, spec))),
            )
    ok_a = worst_null < 1e-10

    # (b) component partial derivatives vs central differences
    rows = {r[0]: r for r in gradcheck_suite(samples=2000, seed=103)}
    ok_b = bool(rows["compress_partials_fd"][4]) and \
        bool(rows["expand_partials_fd"][4])
    fd_err = max(rows["compress_partials_fd"][2], rows["expand_partials_fd"][2])

    # (c) toy-network finite differences at float64
    x = rng.normal(0, 1, (3, 1, 8, 8))
    y = rng.integers(0, 5, 3)
    fp = build_cnn4({"method": "fp", "channels": [2, 3, 4], "classes": 5,
                     "image_hw": 8}, seed=1, dtype=np.float64)
    worst_fp = fd_check_network(fp, x, y, rng=np.random.default_rng(0))[0][1]
    qn = build_cnn4({"method": "lcq", "channels": [2, 3, 4], "classes": 5,
                     "w_bits": 3, "a_bits": 3, "alpha_w": 6.0, "image_hw": 8},
                    seed=2, dtype=np.float64)
    with identity_rounding():
        worst_id = fd_check_network(qn, x, y,
                                    rng=np.random.default_rng(0))[0][1]
    ok_c = worst_fp < 1e-2 and worst_id < 1e-6

    elapsed = time.time() - t0
    report(3, ok_a and ok_b and ok_c and elapsed < 120.0,
           f"null-grad max {worst_null:.2e} (tol 1e-10), component FD max "
           f"{fd_err:.2e} (tol 1e-5), toy-net FD fp {worst_fp:.2e} "
           f"(tol 1e-2) / identity {worst_id:.2e} (tol 1e-6), "
           f"{elapsed:.0f}s (budget 120s)")


def test_criterion_4_lut_equivalence():
    t0 = time.time()
    rows = {r[0]: r for r in lut_check_suite(seed=104, bit_widths=(2, 3, 4),
                                             outer_bits=(4, 6, 8))}
    exact = rows["lut_pair_products_exact"]
    conv = rows["lut_conv_equivalence"]
    elapsed = time.time() - t0
    ok = bool(exact[4]) and bool(conv[4]) and elapsed < 60.0
    report(4, ok,
           f"{exact[1]} bit-width combos: pair products exact "
           f"({int(exact[2])} mismatches), conv max rel err {conv[2]:.2e} "
           f"(tol 1e-5), {elapsed:.1f}s (budget 60s)")


def test_criterion_5_lut_size_formula():
    from compandq.lut import lut_element_count, lut_memory_bytes

    m = lut_element_count(3, 3)
    sizes = (lut_memory_bytes(3, 3, 8, 8), lut_memory_bytes(3, 3, 6, 6),
             lut_memory_bytes(3, 3, 4, 4))
    ok = m == 21 and sizes == (42.0, 31.5, 21.0)
    report(5, ok, f"m={m} (expect 21), bytes {sizes} "
                  f"(expect (42.0, 31.5, 21.0))")


def _mnist_available():
    return os.path.exists(os.path.join(DATA_ROOT, "mnist",
                                       "train-images-idx3-ubyte.gz"))


def _run(tmp_path, name, seed, **overrides):
    base = dict(dataset="mnist", data_root=DATA_ROOT, train_limit=10_000,
                epochs=3, batch_size=125, lr_weights=0.15, lr_quant=0.02,
                warmup_epochs=0.5, channels=(8, 16, 32), seed=seed,
                out_dir=str(tmp_path / f"{name}_{seed}"))
    base.update(overrides)
    cfg = TrainConfig(**base)
    _, metrics = train_loop(cfg)
    return float([m for m in metrics if m["split"] == "test"][-1]["top1"])


@pytest.fixture(scope="module")
def mnist_results(tmp_path_factory):
    if not _mnist_available():
        pytest.fail(f"MNIST IDX files missing under {DATA_ROOT}/mnist")
    tmp = tmp_path_factory.mktemp("accept_mnist")
    res = {"timing": {}}

    t0 = time.time()
    for method in ("fp", "uniform", "lcq"):
        res[method] = [_run(tmp, method, s, method=method) for s in SEEDS]
    res["timing"]["criterion6"] = time.time() - t0

    t0 = time.time()
    res["lwn"] = [_run(tmp, "lwn", s, method="lcq", lr_weights=0.02)
                  for s in SEEDS]
    res["no_lwn"] = [_run(tmp, "nolwn", s, method="lcq-no-lwn",
                          lr_weights=0.02) for s in SEEDS]
    res["timing"]["criterion7"] = time.time() - t0

    t0 = time.time()
    res["outer4"] = [_run(tmp, "outer4", s, method="lcq", outer_bits=4)
                     for s in SEEDS]
    res["timing"]["criterion8"] = time.time() - t0
    return res


def test_criterion_6_desk_scale_training(mnist_results):
    r = mnist_results
    fp, uni, lcq = (float(np.mean(r[m])) for m in ("fp", "uniform", "lcq"))
    elapsed = r["timing"]["criterion6"]
    ok = (lcq >= fp - 1.5) and (lcq >= uni - 0.1) and elapsed < 1800
    report(6, ok,
           f"3-seed means: fp {fp:.2f}, uniform {uni:.2f}, lcq {lcq:.2f} | "
           f"(a) fp-lcq gap {fp - lcq:.2f} (limit 1.5) | "
           f"(b) lcq-uniform {lcq - uni:+.2f} (floor -0.1) | "
           f"{elapsed:.0f}s (budget 1800s)")


def test_criterion_7_lwn_ablation(mnist_results):
    r = mnist_results
    with_lwn = float(np.mean(r["lwn"]))
    without = float(np.mean(r["no_lwn"]))
    ok = with_lwn >= without - 0.1
    report(7, ok,
           f"3-seed means: with normalization restore {with_lwn:.2f}, "
           f"without {without:.2f}, delta {with_lwn - without:+.2f} "
           f"(floor -0.1)")


def test_criterion_8_outer_bits_ablation(mnist_results):
    r = mnist_results
    outer8 = float(np.mean(r["lcq"]))
    outer4 = float(np.mean(r["outer4"]))
    ok = outer4 >= outer8 - 0.5
    report(8, ok,
           f"3-seed means: outer 8 bits {outer8:.2f}, outer 4 bits "
           f"{outer4:.2f}, delta {outer4 - outer8:+.2f} (floor -0.5)")


def test_criterion_9_cifar_script_provided():
    path = os.path.join(os.path.dirname(__file__), "..", "demos",
                        "cifar_resnet20.py")
    ok = os.path.exists(path)
    text = open(path).read() if ok else ""
    documented = all(t in text for t in ("91.8", "92.8", "93.2", "300", "0.04",
                                         "0.02", "128", "1e-4"))
    report(9, ok and documented,
           "optional CIFAR-10 script present with the reference recipe and "
           "target accuracies documented (non-gating reference)")
