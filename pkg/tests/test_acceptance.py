"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary.
"""

from __future__ import annotations

import time
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from oracles import block_ldu_deviation, discarded_energy, q_kahan, skip_block_max_f64
from skipcat.calibration import synth_samples
from skipcat.compressor import (
    CompressionConfig,
    groups_from_weights,
    layer_rank_for_rate,
    rank_for_rate,
)
from skipcat.container import pack_container, unpack_container
from skipcat.costmodel import breakeven_rank, cost, cost_curve
from skipcat.linalg import LowRankPair, Permutation, schur_identity_check, skip_forward, skip_transform, strong_rrqr, svd, truncated_svd
from skipcat.manifest import layer_from_container, layer_to_container, recompute_rates
from skipcat.precision import Arithmetic, FlopCounter
from skipcat.quantstab import STABILIZERS, outlier_pair, stabilize, stabilized_quant_report
from skipcat.runtime import (
    adversarial_pair,
    compress_toy_layer,
    compressed_forward,
    cosine_similarity,
    dense_forward,
    fp16_overflow_experiment,
    golden_tensors,
    make_toy_layer,
)


class Clock:
    def __init__(self, limit: float | None):
        self.limit = limit
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def ok(self) -> bool:
        return self.limit is None or self.elapsed < self.limit

    def text(self) -> str:
        lim = f" (limit {self.limit:g} s)" if self.limit else ""
        return f"{self.elapsed:.2f} s{lim}"


def test_criterion_01_skip_equivalence(acceptance_line):
    clock = Clock(10.0)
    worst = 0.0
    trials = 0
    for seed in range(120):
        rng = np.random.default_rng(seed)
        d_out, d_in = (int(v) for v in rng.integers(1, 129, size=2))
        r = int(rng.integers(1, min(d_out, d_in) + 1)) if seed % 4 else min(d_out, d_in)
        pair = LowRankPair(rng.standard_normal((d_out, r)), rng.standard_normal((r, d_in)))
        fac = skip_transform(pair, strong_rrqr(pair.A))
        X = rng.standard_normal((d_in, 8))
        ref = pair.B @ (pair.A @ X)
        err = np.linalg.norm(skip_forward(fac, X) - ref, axis=0) / np.linalg.norm(ref, axis=0)
        worst = max(worst, float(err.max()))
        trials += 1
    passed = trials >= 100 and worst <= 1e-10 and clock.ok()
    acceptance_line(1, passed, f"{trials} trials, max relative deviation {worst:.2e} <= 1e-10, {clock.text()}")
    assert passed


def test_criterion_02_eckart_young(acceptance_line):
    clock = Clock(5.0)
    worst_self = worst_oracle = 0.0
    count = 0
    for seed in range(60):
        rng = np.random.default_rng(1000 + seed)
        m, n = (int(v) for v in rng.integers(2, 65, size=2))
        r = int(rng.integers(1, min(m, n)))
        W = rng.standard_normal((m, n))
        pair = truncated_svd(W, r)
        resid = float(np.linalg.norm(W - pair.dense()))
        sigma = svd(W).singular_values
        formula = float(np.sqrt(np.sum(sigma[r:] ** 2)))
        worst_self = max(worst_self, abs(resid - formula) / formula)
        worst_oracle = max(worst_oracle, abs(resid - discarded_energy(W, r)) / formula)
        count += 1
    passed = count >= 50 and worst_self <= 1e-8 and worst_oracle <= 1e-8 and clock.ok()
    acceptance_line(
        2, passed,
        f"{count} matrices, relative error {worst_self:.1e} (own spectrum) / {worst_oracle:.1e} (eigh oracle), {clock.text()}",
    )
    assert passed


def test_criterion_03_breakeven(acceptance_line):
    r = breakeven_rank(4096, 4096)
    dense = cost("dense", 4096, 4096).params
    crosses = cost("naive", 4096, 4096, 1, 2047).params < dense <= cost("naive", 4096, 4096, 1, 2048).params
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        d_in, d_out = (int(v) for v in rng.integers(1, 20000, size=2))
        bound = Fraction(d_in * d_out, d_in + d_out)
        direct = bound.numerator // bound.denominator
        if direct == bound:
            direct -= 1
        mismatches += breakeven_rank(d_in, d_out) != direct
    passed = r == 2047 and crosses and mismatches == 0
    acceptance_line(3, passed, f"breakeven(4096)={r}, crossing in (2047, 2048]: {crosses}, 100 random pairs mismatches={mismatches}")
    assert passed


@pytest.mark.xfail(
    strict=True,
    reason="at r = d_in = 4096 skipcat and the skip group store exactly 4096*12288 parameters, "
    "so the strict inequality cannot hold at full rank",
)
def test_criterion_04_cost_ordering(acceptance_line):
    d, C = 4096, 3
    dense = cost("dense", d, d, C)
    violations = []
    for r in range(8, 4097, 8):
        sc, ca, na, sk = (cost(m, d, d, C, r) for m in ("skipcat", "cat", "naive", "skip"))
        for field in ("flops_per_token", "params"):
            a, b, c, s = (getattr(x, field) for x in (sc, ca, na, sk))
            if not (a < b < c):
                violations.append(f"r={r} {field}: skipcat<cat<naive fails ({a}, {b}, {c})")
            if not a < s:
                violations.append(f"r={r} {field}: skipcat<skip fails ({a} vs {s})")
            if not a <= getattr(dense, field):
                violations.append(f"r={r} {field}: skipcat<=dense fails ({a} vs {getattr(dense, field)})")
    passed = not violations
    acceptance_line(4, passed, "strict ordering over r=8..4096 step 8" + ("" if passed else f"; {len(violations)} violation(s): {violations[0]}"))
    assert passed


def test_criterion_04_attainable_part(acceptance_line):
    """Everything in the ordering criterion except strictness of skipcat < skip at r = d_in."""
    d, C = 4096, 3
    dense = cost("dense", d, d, C)
    for r in range(8, 4097, 8):
        sc, ca, na, sk = (cost(m, d, d, C, r) for m in ("skipcat", "cat", "naive", "skip"))
        for field in ("flops_per_token", "params"):
            a, b, c, s = (getattr(x, field) for x in (sc, ca, na, sk))
            assert a < b < c
            assert a <= getattr(dense, field)
            assert a < s if r < d else a == s


def test_criterion_05_rank_maximization(acceptance_line):
    lines = []
    passed = True
    toy = make_toy_layer(7)
    shapes = [(g.d_in, g.d_outs) for g in groups_from_weights(toy.weights)]
    for rate in (0.2, 0.3):
        r = {m: rank_for_rate(64, 64, 3, m, rate) for m in ("naive", "cat", "skip", "skipcat")}
        budget = (1 - rate) * 3 * 64 * 64
        audit = all(cost(m, 64, 64, 3, k).params <= budget for m, k in r.items())
        audit &= all(cost(m, 64, 64, 3, k + 1).params > budget for m, k in r.items())
        layer_r = {m: layer_rank_for_rate(shapes, m, rate) for m in r}
        ok = r["skipcat"] > r["cat"] > r["naive"] and audit and layer_r["skipcat"] > layer_r["cat"] > layer_r["naive"]
        passed &= ok
        lines.append(f"{rate:.0%}: skipcat {r['skipcat']} > cat {r['cat']} > naive {r['naive']}")
    acceptance_line(5, passed, "; ".join(lines) + ", budgets audited")
    assert passed


def test_criterion_06_rrqr_bound(acceptance_line):
    clock = Clock(60.0)
    f = 2.0
    worst = 0.0
    count = 0
    rng = np.random.default_rng(6)
    for i in range(1000):
        r = int(rng.integers(1, 65))
        n = int(rng.integers(r, 257))
        A = rng.standard_normal((r, n))
        if i % 3 == 1:
            A *= np.logspace(-4, 4, n)[rng.permutation(n)]
        elif i % 3 == 2:
            A = A[:, :1] * rng.standard_normal((1, n)) + 1e-3 * A
        worst = max(worst, skip_block_max_f64(A, strong_rrqr(A, f).indices))
        count += 1
    kahan_worst = 0.0
    for n in (16, 32, 64, 128, 256):
        for r in (1, 4, 16, 32, 64):
            if r <= n:
                A = q_kahan(r, n, seed=n + r)
                kahan_worst = max(kahan_worst, skip_block_max_f64(A, strong_rrqr(A, f).indices))
                count += 1
    passed = count >= 1000 and max(worst, kahan_worst) <= f and clock.ok()
    acceptance_line(
        6, passed,
        f"{count} matrices, max |inv(A1) A2| = {worst:.3f} (random) / {kahan_worst:.3f} (Kahan) <= {f}, {clock.text()}",
    )
    assert passed


def test_criterion_07_fp16_overflow(acceptance_line):
    clock = Clock(30.0)
    seeds = range(20)
    unperm_all = perm_none = ratio_ok = True
    ratios = []
    for seed in seeds:
        pair = adversarial_pair(seed)
        x = synth_samples(seed, pair.d_in, 32)
        raw = fp16_overflow_experiment(pair, False, x)
        fixed = fp16_overflow_experiment(pair, True, x)
        unperm_all &= raw.overflowed
        perm_none &= not fixed.overflowed
        ratio_ok &= raw.max_abs_intermediate / fixed.max_abs_intermediate >= 10
        # magnitudes before fp16 saturation
        peaks = []
        for perm in (Permutation.identity(pair.d_in), strong_rrqr(pair.A)):
            ar = Arithmetic("fp64")
            skip_forward(skip_transform(pair, perm), x, ar)
            peaks.append(ar.trace.max_abs_intermediate)
        ratios.append(peaks[0] / peaks[1])
        ratio_ok &= ratios[-1] >= 10
    passed = unperm_all and perm_none and ratio_ok and clock.ok()
    acceptance_line(
        7, passed,
        f"{len(seeds)} seeds: unpermuted overflow on all={unperm_all}, permuted overflow on none={perm_none}, "
        f"min fp64 max-abs ratio={min(ratios):.3g}, {clock.text()}",
    )
    assert passed


def test_criterion_08_schur_identity(acceptance_line):
    A = np.array([[2, 0, 1, 0], [0, 2, 0, 1], [1, 0, 2, 0], [0, 1, 0, 2]], dtype=float)
    D, _ = block_ldu_deviation(A, 2)
    hand = np.allclose(D, np.diag([1.5, 1.5]), atol=1e-15) and schur_identity_check(A, 2) <= 1e-12
    worst = 0.0
    count = 0
    for seed in range(60):
        rng = np.random.default_rng(800 + seed)
        n = int(rng.integers(2, 17))
        r = int(rng.integers(1, n + 1))
        M = rng.standard_normal((n, n))
        Q, _ = np.linalg.qr(rng.standard_normal((r, r)))
        M[:r, :r] = Q * rng.uniform(1.0, 3.0, r)
        worst = max(worst, schur_identity_check(M, r))
        count += 1
    passed = hand and count >= 50 and worst <= 1e-12
    acceptance_line(8, passed, f"hand case D=diag(1.5,1.5): {hand}; {count} matrices, max deviation {worst:.1e} <= 1e-12")
    assert passed


def test_criterion_09_quant_stabilization(acceptance_line):
    clock = Clock(10.0)
    subsets = [c for k in range(len(STABILIZERS) + 1) for c in combinations(STABILIZERS, k)]
    invariance = 0.0
    improved = 0
    seeds = range(40)
    for seed in seeds:
        pair = outlier_pair(seed)
        ref = pair.dense()
        for steps in subsets:
            Bs, As = stabilize(pair.B, pair.A, steps)
            invariance = max(invariance, float(np.linalg.norm(Bs @ As - ref) / np.linalg.norm(ref)))
        rep = stabilized_quant_report(pair)
        improved += rep["hadamard+scaling"] <= rep["none"]
    passed = invariance <= 1e-10 and improved == len(seeds) and clock.ok()
    acceptance_line(
        9, passed,
        f"product invariance {invariance:.1e} <= 1e-10; stabilized error <= baseline on {improved}/{len(seeds)} seeds, {clock.text()}",
    )
    assert passed


def test_criterion_10_toy_end_to_end(acceptance_line):
    clock = Clock(10.0)
    toy = make_toy_layer(7)
    g = golden_tensors(7)
    x, golden = g["golden/7/x"], g["golden/7/y"]
    sc = compress_toy_layer(toy, CompressionConfig("skipcat", target_rate=0.2, rank_multiple=1))
    cos = cosine_similarity(compressed_forward(sc, x)[0], golden)
    full = compress_toy_layer(toy, CompressionConfig("naive", rank=64))
    y_full = compressed_forward(full, x)[0]
    rel = float(np.linalg.norm(y_full - dense_forward(toy, x)) / np.linalg.norm(golden))
    passed = cos >= 0.99 and rel <= 1e-8 and clock.ok()
    acceptance_line(
        10, passed,
        f"skipcat@20% (r={sc.rank}, rate {sc.achieved_rate:.4f}) cosine {cos:.5f} >= 0.99; full-rank naive rel. error {rel:.1e} <= 1e-8, {clock.text()}",
    )
    assert passed


def test_criterion_11_shared_projection_flops(acceptance_line):
    toy = make_toy_layer(7)
    r = 40
    layer = compress_toy_layer(toy, CompressionConfig("cat", rank=r))
    counter = FlopCounter()
    layer.groups["qkv"].forward(np.ones((64, 1)), Arithmetic("fp64", counter))
    d_in = d_out = 64
    shared = 2 * r * (d_in + 3 * d_out)
    separate = 3 * 2 * r * (d_in + d_out)
    passed = counter.total == shared != separate and counter.by_site["lowrank:A"] == 2 * r * d_in
    acceptance_line(11, passed, f"qkv group FLOPs {counter.total} == 2r(d_in+3d_out) = {shared} (separate would be {separate})")
    assert passed


def test_criterion_12_container_manifest(acceptance_line):
    rng = np.random.default_rng(12)
    tensors = {
        "f64": rng.standard_normal((3, 5)),
        "f32": rng.standard_normal((2, 2, 2)).astype("<f4"),
        "f16": rng.standard_normal(7).astype("<f2"),
        "i8": rng.integers(-127, 128, (4, 4)).astype("i1"),
    }
    data = pack_container(tensors)
    byte_identical = pack_container(unpack_container(data)) == data
    layer = compress_toy_layer(make_toy_layer(7), CompressionConfig("skipcat", target_rate=0.3, rank_multiple=1))
    lt, manifest = layer_to_container(layer)
    lt_back = unpack_container(pack_container(lt))
    rates = recompute_rates(manifest, lt_back)
    exact = rates["layer"] == manifest["achieved_rate"] and all(
        rates[gr["name"]] == gr["achieved_rate"] for gr in manifest["groups"]
    )
    layer_from_container(lt_back, manifest)
    passed = byte_identical and exact
    acceptance_line(12, passed, f"byte-identical rewrite over f64/f32/f16/i8: {byte_identical}; manifest rates recompute exactly: {exact}")
    assert passed
