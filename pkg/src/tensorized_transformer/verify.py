"""Executable identity checks, grouped into named suites.

Each property draws random instances from a seeded generator, compares the
library path against an independent oracle and reports the worst error seen.
Library functions are looked up on their modules at call time, so a patched
implementation is what gets checked.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import tensor_core as tc
from .layers import multi_linear_attention as ml_layer
from .layers import scaled_dot_attention as sd_layer


@dataclass
class PropertyResult:
    suite: str
    name: str
    passed: bool
    max_error: float
    tolerance: float
    trials: int
    seconds: float

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"[{flag}] {self.suite}/{self.name}: max_err={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} trials={self.trials} ({self.seconds:.2f}s)")

    def to_dict(self) -> dict:
        return asdict(self)


def _run(suite, name, tol, trials, fn: Callable[[], float]) -> PropertyResult:
    t0 = time.perf_counter()
    try:
        err = float(fn())
    except Exception as exc:  # a crash is a failed property, not an aborted run
        return PropertyResult(suite, f"{name} ({type(exc).__name__}: {exc})", False,
                              float("inf"), tol, trials, time.perf_counter() - t0)
    ok = bool(np.isfinite(err) and err <= tol)
    return PropertyResult(suite, name, ok, err, tol, trials, time.perf_counter() - t0)


def _simplex(rng, R):
    return att.DiagonalCore(rng.random(R)).weights()


# --------------------------------------------------------------- oracles


def loop_single_block(w, Qp, Kp, Vp) -> np.ndarray:
    """Element-by-element Tucker product with an explicit superdiagonal core."""
    R = len(w)
    G = np.zeros((R, R, R))
    for r in range(R):
        G[r, r, r] = w[r]
    N = Qp.shape[0]
    T = np.zeros((N, N, N))
    for a in range(N):
        for b in range(N):
            for c in range(N):
                T[a, b, c] = np.sum(
                    G * Qp[a, :R][:, None, None] * Kp[b, :R][None, :, None] * Vp[c, :R][None, None, :]
                )
    return T


def matrix_linear_attention(w, Qp, Kp, Vp) -> np.ndarray:
    R = len(w)
    return Qp[:, :R] @ np.diag(w) @ Kp[:, :R].T @ Vp


# ------------------------------------------------------------------ suites


def suite_tucker(rng, trials):
    def tucker_vs_loops():
        worst = 0.0
        for _ in range(trials):
            N = rng.integers(1, 7)
            d = rng.integers(1, 7)
            R = rng.integers(1, d + 1)
            w = _simplex(rng, R)
            Qp, Kp = rng.normal(size=(N, d)), rng.normal(size=(N, d))
            Vp = rng.normal(size=(N, max(d, R)))
            T = att.single_block_tensor(w, Qp, Kp, Vp)
            worst = max(worst, np.abs(T - loop_single_block(w, Qp, Kp, Vp)).max())
            f = tc.BlockTermFactors.equal_rank(
                [(tc.superdiagonal(w), (Qp[:, :R], Kp[:, :R], Vp[:, :R]))]
            )
            worst = max(worst, np.abs(T - tc.btd3(f)).max())
        return worst

    def btd_additive():
        worst = 0.0
        for _ in range(trials):
            R = rng.integers(1, 4)
            dims = rng.integers(1, 6, size=3)
            blocks = [(rng.normal(size=(R, R, R)),
                       tuple(rng.normal(size=(n, R)) for n in dims)) for _ in range(3)]
            whole = tc.btd3(tc.BlockTermFactors(tuple(blocks)))
            parts = tc.btd3(tc.BlockTermFactors(tuple(blocks[:1]))) + tc.btd3(
                tc.BlockTermFactors(tuple(blocks[1:])))
            worst = max(worst, np.abs(whole - parts).max())
        return worst

    def modes_commute():
        worst = 0.0
        for _ in range(trials):
            T = rng.normal(size=tuple(rng.integers(1, 6, size=3)))
            Ms = [rng.normal(size=(rng.integers(1, 5), n)) for n in T.shape]
            ref = tc.mode_product(tc.mode_product(tc.mode_product(T, Ms[0], 0), Ms[1], 1), Ms[2], 2)
            alt = tc.mode_product(tc.mode_product(tc.mode_product(T, Ms[2], 2), Ms[0], 0), Ms[1], 1)
            worst = max(worst, np.abs(ref - alt).max())
        return worst

    return [
        _run("tucker", "single_block_equals_tucker_loops_and_btd", 1e-12, trials, tucker_vs_loops),
        _run("tucker", "btd_additive_in_blocks", 1e-12, trials, btd_additive),
        _run("tucker", "mode_products_commute", 1e-12, trials, modes_commute),
    ]


def suite_corollary(rng, trials):
    def exact_branch():
        worst = 0.0
        for _ in range(trials):
            N = rng.integers(1, 7)
            d = rng.integers(1, 7)
            R = rng.integers(1, d + 1)
            w = _simplex(rng, R)
            Qp, Kp, Vp = (rng.normal(size=(N, d)) for _ in range(3))
            lhs = att.sum_second_index(att.row_coupled_tensor(w, Qp, Kp, Vp))
            worst = max(worst, np.abs(lhs - matrix_linear_attention(w, Qp, Kp, Vp)).max())
            worst = max(worst, np.abs(att.linear_attention(w, Qp, Kp, Vp) - lhs).max())
        return worst

    def conditional_branch():
        worked = att.sum_second_index(
            att.single_block_tensor([0.5, 0.5], [[1, 2], [3, 4]], np.eye(2), np.ones((2, 2)))
        )
        worst = np.abs(worked - np.array([[1.5, 1.5], [3.5, 3.5]])).max()
        for _ in range(trials):
            N = rng.integers(1, 7)
            w = _simplex(rng, N)
            Qp, Kp = rng.normal(size=(N, N)), rng.normal(size=(N, N))
            Vp = np.full((N, N), rng.normal())
            lhs = att.sum_second_index(att.single_block_tensor(w, Qp, Kp, Vp))
            worst = max(worst, np.abs(lhs - matrix_linear_attention(w, Qp, Kp, Vp)).max())
        return worst

    return [
        _run("corollary", "row_coupled_sum_equals_linear_attention", 1e-12, trials, exact_branch),
        _run("corollary", "literal_form_constant_v_square", 1e-12, trials, conditional_branch),
    ]


def suite_collapse(rng, trials):
    def collapse():
        worst = 0.0
        for i in range(trials):
            mode = ("chunked", "sum")[i % 2]
            N = int(rng.integers(2, 7))
            d_model, d = int(rng.integers(2, 7)), int(rng.integers(1, 5))
            h = int(rng.integers(1, min(4, N) + 1))
            p = att.AttentionParams.init(d_model, d, h, mode=mode, seed=rng)
            mean_core = att.DiagonalCore(np.log(p.mean_weights()))
            Q, K, V = (rng.normal(size=(N, d_model)) for _ in range(3))
            causal = bool(rng.integers(0, 2))
            out = att.multi_linear_attention(p, Q, K, V, causal=causal)
            # every core replaced by the averaged one: chunking and Wo are unchanged
            same = att.AttentionParams(p.Wq, p.Wk, p.Wv, [mean_core] * h, p.Wo, mode)
            ref = att.multi_linear_attention(same, Q, K, V, causal=causal)
            if mode == "sum":
                single = att.AttentionParams(p.Wq, p.Wk, p.Wv, [mean_core], p.Wo, "sum")
                worst = max(worst, np.abs(out - att.multi_linear_attention(single, Q, K, V, causal=causal)).max())
            worst = max(worst, np.abs(out - ref).max())
            if not causal:
                worst = max(worst, np.abs(out - att.multi_linear_attention_materialized(p, Q, K, V)).max())
        return worst

    return [_run("collapse", "h_cores_equal_mean_core", 1e-12, trials, collapse)]


def suite_theorem(rng, trials):
    def span():
        worst = 0.0
        for _ in range(trials):
            N, d = int(rng.integers(1, 8)), int(rng.integers(2, 9))
            n = int(rng.integers(1, d + 1))
            B = att.BasisSet.random(d, n, N, rng)
            Q, K, V = B.qkv()
            worst = max(worst, att.span_residual(att.scaled_dot_attention(Q, K, V), B))
            worst = max(worst, att.span_residual(att.scaled_dot_attention(Q, K, V, causal=True), B))
        return worst

    return [_run("theorem", "attention_rows_in_value_span", 1e-8, trials, span)]


def suite_invariants(rng, trials):
    def causality():
        flips = 0
        for _ in range(trials):
            N, d_model, d = int(rng.integers(2, 8)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
            X = rng.normal(size=(N, d_model))
            t = int(rng.integers(0, N - 1))
            Y = X.copy()
            Y[t + 1:] = rng.normal(size=Y[t + 1:].shape)
            a = att.scaled_dot_attention(X, X, X, causal=True)
            b = att.scaled_dot_attention(Y, Y, Y, causal=True)
            flips += int(not np.array_equal(a[: t + 1], b[: t + 1]))
            for mode in ("chunked", "sum"):
                h = int(rng.integers(1, N + 1))
                p = att.AttentionParams.init(d_model, d, h, mode=mode, seed=rng)
                a = att.multi_linear_attention(p, X, X, X, causal=True)
                b = att.multi_linear_attention(p, Y, Y, Y, causal=True)
                flips += int(not np.array_equal(a[: t + 1], b[: t + 1]))
        return flips

    def permutation():
        worst = 0.0
        for _ in range(trials):
            N, d_model, d = int(rng.integers(1, 8)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
            p = att.AttentionParams.init(d_model, d, int(rng.integers(1, 4)), mode="sum", seed=rng)
            Q, K, V = (rng.normal(size=(N, d_model)) for _ in range(3))
            perm = rng.permutation(N)
            a = att.multi_linear_attention(p, Q, K, V)[perm]
            b = att.multi_linear_attention(p, Q[perm], K[perm], V[perm])
            worst = max(worst, np.abs(a - b).max())
        return worst

    return [
        _run("invariants", "causal_prefix_bit_identical", 0.0, trials, causality),
        _run("invariants", "sum_mode_permutation_equivariant", 1e-12, trials, permutation),
    ]


def suite_compression(rng, trials):
    def headline_value():
        return abs(att.compression_ratio(8, 512) - 7.9585)

    def store_ratio():
        mh = att.MultiHeadParams.init(512, 64, 8, seed=0)
        ml = att.AttentionParams.init(512, 64, 8, R=64, seed=0)
        n_mh = sum(w.size for w in (*mh.Wq, *mh.Wk, *mh.Wv))
        n_ml = ml.Wq.size + ml.Wk.size + ml.Wv.size + sum(c.g.size for c in ml.cores)
        return abs(n_mh / n_ml - att.compression_ratio(8, 512))

    def rank_formula():
        err = abs(att.compression_ratio_rank(2, 256, 40, 18) - 1.99766)
        ratios = [att.compression_ratio_rank(2, 256, 40, R) for R in range(1, 41)]
        if any(b >= a for a, b in zip(ratios, ratios[1:])):
            return float("inf")
        return err

    return [
        _run("compression", "ratio_h8_dmodel512", 1e-4, 1, headline_value),
        _run("compression", "allocated_store_ratio_matches_formula", 1e-9, 1, store_ratio),
        _run("compression", "rank_ratio_and_monotone", 1e-5, 1, rank_formula),
    ]


def suite_gradients(rng, trials):
    def layer_grads(kind):
        def run():
            worst = 0.0
            for _ in range(max(1, trials // 10)):
                N, d_model, d, h = 4, 8, 8, 2
                X = rng.normal(size=(N, d_model))
                if kind == "multi_linear":
                    p = att.AttentionParams.init(d_model, d, h, seed=rng)
                    params = {"wq": p.Wq, "wk": p.Wk, "wv": p.Wv, "wo": p.Wo,
                              **{f"g{j}": c.g for j, c in enumerate(p.cores)}}

                    def f(tape, pv):
                        x = tape.const(X)
                        out = ml_layer(x, x, x, pv["wq"], pv["wk"], pv["wv"],
                                       [pv["g0"], pv["g1"]], pv["wo"], causal=True)
                        return ad.sum(out * out) * 0.5
                else:
                    params = {n: rng.normal(size=(d_model, d)) for n in ("wq", "wk", "wv")}

                    def f(tape, pv):
                        x = tape.const(X)
                        out = sd_layer(x @ pv["wq"], x @ pv["wk"], x @ pv["wv"], causal=True)
                        return ad.sum(out * out) * 0.5
                rep = ad.finite_diff_check(f, params, eps=1e-5)
                worst = max(worst, max(r.max_rel_error for r in rep.values()))
            return worst
        return run

    return [
        _run("gradients", "multi_linear_layer_fd", 1e-4, max(1, trials // 10), layer_grads("multi_linear")),
        _run("gradients", "scaled_dot_layer_fd", 1e-4, max(1, trials // 10), layer_grads("scaled_dot")),
    ]


SUITES = {
    "tucker": suite_tucker,
    "corollary": suite_corollary,
    "collapse": suite_collapse,
    "theorem": suite_theorem,
    "invariants": suite_invariants,
    "compression": suite_compression,
    "gradients": suite_gradients,
}


def run_suites(selector: str = "all", seed: int = 0, trials: int = 100) -> list[PropertyResult]:
    if selector == "all":
        names = list(SUITES)
    else:
        names = [s.strip() for s in selector.split(",")]
        unknown = [n for n in names if n not in SUITES]
        if unknown:
            raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from "
                           f"{', '.join(['all', *SUITES])}")
    results = []
    for n in names:
        results.extend(SUITES[n](np.random.default_rng([seed, list(SUITES).index(n)]), trials))
    return results
