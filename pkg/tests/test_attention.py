import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorized_transformer import attention as att
from tensorized_transformer import tensor_core as tc
from tensorized_transformer.errors import ArgumentError, DimensionError

seeds = st.integers(0, 2**31 - 1)


def simplex(rng, R):
    return att.DiagonalCore(rng.normal(size=R)).weights()


def loop_attention(Q, K, V):
    out = np.zeros((Q.shape[0], V.shape[1]))
    for a in range(Q.shape[0]):
        s = np.array([Q[a] @ K[b] for b in range(K.shape[0])]) / np.sqrt(Q.shape[1])
        p = np.exp(s - s.max())
        p /= p.sum()
        for b in range(K.shape[0]):
            out[a] += p[b] * V[b]
    return out


# ---------------------------------------------------------------- baselines


def test_scaled_dot_examples():
    np.testing.assert_allclose(att.scaled_dot_attention([[1.0, 0.0]], [[1.0, 0.0]], [[3.0, 4.0]]),
                               [[3.0, 4.0]])
    rng = np.random.default_rng(0)
    V = rng.normal(size=(5, 3))
    out = att.scaled_dot_attention(np.zeros((5, 3)), rng.normal(size=(5, 3)), V)
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (5, 1)), atol=1e-12)
    e = np.e
    out = att.scaled_dot_attention([[1.0], [0.0]], [[1.0], [0.0]], [[2.0], [4.0]])
    np.testing.assert_allclose(out, [[(2 * e + 4) / (e + 1)], [3.0]], atol=1e-12)
    np.testing.assert_allclose(out, [[2.537883], [3.0]], atol=1e-5)


def test_scaled_dot_shape_error():
    with pytest.raises(DimensionError):
        att.scaled_dot_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), seeds)
def test_scaled_dot_matches_loops(N, d, seed):
    rng = np.random.default_rng(seed)
    Q, K, V = (rng.normal(size=(N, d)) for _ in range(3))
    np.testing.assert_allclose(att.scaled_dot_attention(Q, K, V), loop_attention(Q, K, V), atol=1e-12)


def test_multi_head_examples():
    rng = np.random.default_rng(1)
    Q, K, V = (rng.normal(size=(3, 4)) for _ in range(3))
    I = np.eye(4)
    p = att.MultiHeadParams([I], [I], [I], I)
    np.testing.assert_allclose(att.multi_head_attention(p, Q, K, V), att.scaled_dot_attention(Q, K, V),
                               atol=1e-14)
    p = att.MultiHeadParams.init(4, 2, 2, seed=3)
    zero = att.MultiHeadParams(p.Wq, p.Wk, [np.zeros((4, 2))] * 2, p.Wo)
    assert not att.multi_head_attention(zero, Q, K, V).any()
    heads = [loop_attention(Q @ p.Wq[i], K @ p.Wk[i], V @ p.Wv[i]) for i in range(2)]
    np.testing.assert_allclose(att.multi_head_attention(p, Q, K, V), np.hstack(heads) @ p.Wo,
                               atol=1e-10)


# ------------------------------------------------------------------- cores


def test_init_core_examples():
    np.testing.assert_array_equal(att.init_core(1, 5).weights(), [1.0])
    np.testing.assert_array_equal(att.init_core(6, 11).g, att.init_core(6, 11).g)
    g = att.init_core(4, 0).g
    assert np.all((g > 0) & (g < 1))
    np.testing.assert_array_equal(g, np.random.default_rng(0).random(4))
    with pytest.raises(ArgumentError):
        att.init_core(0, 0)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10))
def test_core_weights_on_simplex(g):
    w = att.DiagonalCore(np.array(g)).weights()
    assert abs(w.sum() - 1) <= 1e-12
    assert np.all(w > 0) and np.all(w <= 1)


def test_attention_params_invariants():
    p = att.AttentionParams.init(16, 4, 3, seed=0)
    assert p.Wo.shape == (12, 16) and p.h == 3 and p.R == 4
    assert p.n_params() == att.count_attention_params("multi_linear", 16, 4, 3, 4)
    s = att.AttentionParams.init(16, 4, 3, mode="sum", seed=0)
    assert s.Wo.shape == (4, 16)
    assert s.n_params() == att.count_attention_params("multi_linear", 16, 4, 3, 4, mode="sum")
    with pytest.raises(DimensionError):
        att.AttentionParams(p.Wq, p.Wk, p.Wv, p.cores, np.zeros((4, 16)))
    with pytest.raises(ArgumentError):
        att.AttentionParams(p.Wq, p.Wk, p.Wv, [att.DiagonalCore(np.zeros(5))], np.zeros((4, 16)))


# ------------------------------------------------------- tensorised forms


def test_single_block_examples():
    I = np.eye(2)
    T = att.single_block_tensor([0.3, 0.7], I, I, I)
    expected = np.zeros((2, 2, 2))
    expected[0, 0, 0], expected[1, 1, 1] = 0.3, 0.7
    np.testing.assert_allclose(T, expected, atol=1e-15)
    T = att.single_block_tensor([0.5, 0.5], [[1.0, 2.0]], [[3.0, 4.0]], [[5.0, 6.0]])
    assert T.shape == (1, 1, 1) and T[0, 0, 0] == pytest.approx(31.5)
    with pytest.raises(ArgumentError):
        att.single_block_tensor([0.2, 0.3, 0.5], I, I, I)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_single_block_matches_btd(N, d, data):
    R = data.draw(st.integers(1, d))
    rng = np.random.default_rng(data.draw(seeds))
    w = simplex(rng, R)
    Qp, Kp, Vp = (rng.normal(size=(N, d)) for _ in range(3))
    block = tc.BlockTerm(tc.superdiagonal(w), (Qp[:, :R], Kp[:, :R], Vp[:, :R]))
    np.testing.assert_allclose(att.single_block_tensor(w, Qp, Kp, Vp),
                               tc.btd3(tc.BlockTermFactors((block,))), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seeds, st.floats(-3, 3).filter(lambda x: abs(x) > 1e-3))
def test_single_block_multilinear(seed, lam):
    rng = np.random.default_rng(seed)
    w = simplex(rng, 3)
    args = [w] + [rng.normal(size=(4, 3)) for _ in range(3)]
    base = att.single_block_tensor(*args)
    for i in range(4):
        scaled = list(args)
        scaled[i] = scaled[i] * lam
        np.testing.assert_allclose(att.single_block_tensor(*scaled), lam * base, atol=1e-12)


def test_row_coupled_examples():
    rng = np.random.default_rng(2)
    w = simplex(rng, 3)
    Qp, Kp, Vp = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    T = att.row_coupled_tensor(w, Qp, Kp, Vp)
    np.testing.assert_allclose(T[0, 0], (w * Qp[0] * Kp[0]).sum() * Vp[0], atol=1e-14)
    Qp, Kp = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ones = np.ones((3, 3))
    np.testing.assert_allclose(att.row_coupled_tensor(w, Qp, Kp, ones),
                               att.single_block_tensor(w, Qp, Kp, ones), atol=1e-14)


def test_sum_second_index_examples():
    T = np.random.default_rng(3).normal(size=(3, 1, 2))
    np.testing.assert_array_equal(att.sum_second_index(T), T[:, 0, :])
    T = np.array([[[1, 2], [3, 4]], [[5, 6], [7, 8]]], dtype=float)
    assert att.sum_second_index(T).tolist() == [[4, 6], [12, 14]]
    T = np.random.default_rng(4).normal(size=(3, 4, 2))
    np.testing.assert_array_equal(att.sum_second_index(T), tc.split_concat(T, 1))


def test_linear_attention_examples():
    I = np.eye(2)
    out = att.linear_attention([0.5, 0.5], I, I, [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(out, [[0.5, 1.0], [1.5, 2.0]], atol=1e-15)
    out = att.linear_attention([0.6, 0.4], [[1.0, 0.0], [1.0, 1.0]], [[1.0, 1.0], [0.0, 1.0]], I)
    np.testing.assert_allclose(out, [[0.6, 0.0], [1.0, 0.4]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_corollary_exact_branch(N, d, data):
    R = data.draw(st.integers(1, d))
    rng = np.random.default_rng(data.draw(seeds))
    w = simplex(rng, R)
    Qp, Kp, Vp = (rng.normal(size=(N, d)) for _ in range(3))
    oracle = Qp[:, :R] @ np.diag(w) @ Kp[:, :R].T @ Vp
    np.testing.assert_allclose(att.sum_second_index(att.row_coupled_tensor(w, Qp, Kp, Vp)), oracle,
                               atol=1e-12)
    np.testing.assert_allclose(att.linear_attention(w, Qp, Kp, Vp), oracle, atol=1e-12)


def test_corollary_conditional_branch_worked_case():
    Qp, Kp, Vp = np.array([[1.0, 2.0], [3.0, 4.0]]), np.eye(2), np.ones((2, 2))
    lhs = att.sum_second_index(att.single_block_tensor([0.5, 0.5], Qp, Kp, Vp))
    rhs = att.linear_attention([0.5, 0.5], Qp, Kp, Vp)
    np.testing.assert_allclose(lhs, [[1.5, 1.5], [3.5, 3.5]], atol=1e-15)
    np.testing.assert_allclose(rhs, [[1.5, 1.5], [3.5, 3.5]], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(-2, 2), seeds)
def test_corollary_conditional_branch_random(N, c, seed):
    rng = np.random.default_rng(seed)
    w = simplex(rng, N)
    Qp, Kp = rng.normal(size=(N, N)), rng.normal(size=(N, N))
    Vp = np.full((N, N), c)
    np.testing.assert_allclose(att.sum_second_index(att.single_block_tensor(w, Qp, Kp, Vp)),
                               att.linear_attention(w, Qp, Kp, Vp), atol=1e-12)


def test_literal_form_differs_for_general_v():
    rng = np.random.default_rng(5)
    w, Qp, Kp, Vp = simplex(rng, 3), *(rng.normal(size=(3, 3)) for _ in range(3))
    gap = att.sum_second_index(att.single_block_tensor(w, Qp, Kp, Vp)) - att.linear_attention(w, Qp, Kp, Vp)
    assert np.abs(gap).max() > 1e-3


# ------------------------------------------------------ multi-linear layer


def test_multi_linear_identity_plumbing():
    rng = np.random.default_rng(6)
    I = np.eye(3)
    core = att.init_core(3, 1)
    p = att.AttentionParams(I, I, I, [core], I, mode="sum")
    Q, K, V = (rng.normal(size=(4, 3)) for _ in range(3))
    np.testing.assert_allclose(att.multi_linear_attention(p, Q, K, V),
                               att.linear_attention(core.weights(), Q, K, V), atol=1e-14)


@pytest.mark.parametrize("mode", ["chunked", "sum"])
def test_block_collapse(mode):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        h = int(rng.integers(1, 4))
        p = att.AttentionParams.init(5, 3, h, mode=mode, seed=rng)
        N = int(rng.integers(h, 7))
        Q, K, V = (rng.normal(size=(N, 5)) for _ in range(3))
        mean_core = att.DiagonalCore(np.log(p.mean_weights()))
        collapsed = att.AttentionParams(p.Wq, p.Wk, p.Wv, [mean_core] * h, p.Wo, mode)
        for causal in (False, True):
            np.testing.assert_allclose(att.multi_linear_attention(p, Q, K, V, causal),
                                       att.multi_linear_attention(collapsed, Q, K, V, causal), atol=1e-12)
        if mode == "sum":
            single = att.AttentionParams(p.Wq, p.Wk, p.Wv, [mean_core], p.Wo, mode)
            np.testing.assert_allclose(att.multi_linear_attention(p, Q, K, V),
                                       att.multi_linear_attention(single, Q, K, V), atol=1e-12)


def test_equal_cores_match_single_core_sum_mode():
    rng = np.random.default_rng(7)
    p = att.AttentionParams.init(4, 2, 3, mode="sum", seed=8)
    same = att.AttentionParams(p.Wq, p.Wk, p.Wv, [p.cores[0]] * 3, p.Wo, "sum")
    one = att.AttentionParams(p.Wq, p.Wk, p.Wv, [p.cores[0]], p.Wo, "sum")
    X = rng.normal(size=(5, 4))
    np.testing.assert_allclose(att.multi_linear_attention(same, X, X, X),
                               att.multi_linear_attention(one, X, X, X), atol=1e-14)


def test_chunked_matches_materialized_tensor():
    rng = np.random.default_rng(9)
    p = att.AttentionParams.init(4, 2, 2, seed=10)
    Q, K, V = (rng.normal(size=(4, 4)) for _ in range(3))
    Qp, Kp, Vp = Q @ p.Wq, K @ p.Wk, V @ p.Wv
    T = att.row_coupled_tensor(p.mean_weights(), Qp, Kp, Vp)
    oracle = tc.split_concat(T, 2) @ p.Wo
    np.testing.assert_allclose(att.multi_linear_attention(p, Q, K, V), oracle, atol=1e-10)
    np.testing.assert_allclose(att.multi_linear_attention_materialized(p, Q, K, V), oracle, atol=1e-10)


def test_chunked_rejects_more_chunks_than_positions():
    p = att.AttentionParams.init(4, 2, 3, seed=0)
    X = np.ones((2, 4))
    with pytest.raises(ArgumentError):
        att.multi_linear_attention(p, X, X, X)
    with pytest.raises(DimensionError):
        att.multi_linear_attention(p, np.ones((4, 4)), np.ones((4, 4)), np.ones((5, 4)))


@pytest.mark.parametrize("kind", ["scaled_dot", "chunked", "sum"])
def test_causality(kind):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(2, 7))
        Q, K, V = (rng.normal(size=(N, 4)) for _ in range(3))
        if kind == "scaled_dot":
            f = lambda q, k, v: att.scaled_dot_attention(q, k, v, causal=True)
        else:
            p = att.AttentionParams.init(4, 3, 2, mode=kind, seed=rng)
            f = lambda q, k, v: att.multi_linear_attention(p, q, k, v, causal=True)
        base = f(Q, K, V)
        a = int(rng.integers(0, N - 1))
        K2, V2, Q2 = K.copy(), V.copy(), Q.copy()
        for M in (K2, V2, Q2):
            M[a + 1:] = rng.normal(size=M[a + 1:].shape)
        changed = f(Q2, K2, V2)
        assert changed[: a + 1].tobytes() == base[: a + 1].tobytes()


def test_permutation_equivariance_sum_mode():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(1, 7))
        p = att.AttentionParams.init(5, 3, 2, mode="sum", seed=rng)
        Q, K, V = (rng.normal(size=(N, 5)) for _ in range(3))
        perm = rng.permutation(N)
        np.testing.assert_allclose(att.multi_linear_attention(p, Q[perm], K[perm], V[perm]),
                                   att.multi_linear_attention(p, Q, K, V)[perm], atol=1e-12)


# ------------------------------------------------------------------- span


def test_span_residual_examples():
    basis = att.BasisSet(np.eye(3)[:, :2])
    rng = np.random.default_rng(11)
    Y = rng.normal(size=(4, 2)) @ np.eye(3)[:2]
    assert att.span_residual(Y, basis) < 1e-10
    assert att.span_residual([[0.0, 0.0, 1.0]], basis) == pytest.approx(1.0)
    with pytest.raises(ArgumentError):
        att.BasisSet(np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]))


def test_span_of_attention_output():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        b = att.BasisSet.random(8, 3, 5, rng)
        Q, K, V = b.qkv()
        assert att.span_residual(att.scaled_dot_attention(Q, K, V), b) < 1e-8
        assert att.span_residual(att.scaled_dot_attention(Q, K, V, causal=True), b) < 1e-8


# ------------------------------------------------------------- accounting


def test_compression_ratio_examples():
    assert att.compression_ratio(8, 512) == pytest.approx(3 * 8 * 512 / (3 * 512 + 8))
    assert abs(att.compression_ratio(8, 512) - 7.9585) <= 1e-4
    assert att.compression_ratio(1, 256) < 1.0
    assert abs(att.compression_ratio(2, 256) - 1.99481) <= 1e-5
    mh = att.count_attention_params("multi_head", 256, 40, 2, 40, include_Wo=False)
    ml = att.count_attention_params("multi_linear", 256, 40, 2, 40, include_Wo=False)
    assert abs(mh / ml - att.compression_ratio(2, 256)) <= 1e-12


def test_compression_ratio_rank_examples():
    assert att.compression_ratio_rank(2, 256, 40, 18) == pytest.approx(61440 / 30756, abs=1e-12)
    assert abs(att.compression_ratio_rank(2, 256, 40, 18) - 1.99766) <= 1e-5
    with pytest.raises(ArgumentError):
        att.compression_ratio_rank(2, 256, 40, 41)


@given(st.integers(1, 16), st.integers(1, 600), st.integers(1, 64))
def test_rank_ratio_reduces_at_full_rank_and_is_monotone(h, d_model, d):
    assert att.compression_ratio_rank(h, d_model, d, d) == pytest.approx(att.compression_ratio(h, d_model),
                                                                          rel=1e-12)
    ratios = [att.compression_ratio_rank(h, d_model, d, R) for R in range(1, d + 1)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_count_attention_params_examples():
    assert att.count_attention_params("multi_head", 256, 40, 2, 40, include_Wo=False) == 61440
    assert att.count_attention_params("multi_linear", 256, 40, 2, 40, include_Wo=False) == 30800
    r = (att.count_attention_params("multi_head", 64, 8, 1, 8, include_Wo=False)
         / att.count_attention_params("multi_linear", 64, 8, 1, 8, include_Wo=False))
    assert r == pytest.approx(3 * 64 * 8 / (3 * 64 * 8 + 8))
    mh = att.count_attention_params("multi_head", 512, 64, 8, 64, include_Wo=False)
    ml = att.count_attention_params("multi_linear", 512, 64, 8, 64, include_Wo=False)
    assert (mh, ml) == (786432, 98816)
    assert abs(mh / ml - att.compression_ratio(8, 512)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 32), st.integers(1, 8), st.integers(1, 4), st.data())
def test_counts_match_allocated_storage(d_model, d, h, data):
    R = data.draw(st.integers(1, d))
    mode = data.draw(st.sampled_from(["chunked", "sum"]))
    p = att.AttentionParams.init(d_model, d, h, R, mode, seed=0)
    m = att.MultiHeadParams.init(d_model, d, h, seed=0)
    assert p.n_params() == att.count_attention_params("multi_linear", d_model, d, h, R, True, mode)
    assert m.n_params() == att.count_attention_params("multi_head", d_model, d, h, R, True)
    proj_ml = p.n_params() - p.Wo.size
    proj_mh = m.n_params() - m.Wo.size
    assert abs(proj_mh / proj_ml - att.compression_ratio_rank(h, d_model, d, R)) <= 1e-9
