"""The recalibration mechanism: domain tokens, similarity loss, factor
generation, and recalibrated attention, checked against naive-loop oracles
and closed forms."""

import numpy as np
import pytest

from pcsr import recalibration as R
from pcsr import tensor as T
from pcsr.errors import ConfigError, ContractError, ShapeError
from pcsr.gradcheck import grad_check
from pcsr.tensor import Tensor

from oracles import naive_attention, naive_similarity_loss, naive_similarity_matrix

F64 = np.float64


# -- dsn features -------------------------------------------------------------


def test_dsn_identity_passthrough():
    rng = np.random.default_rng(0)
    patches = Tensor(rng.standard_normal((2, 5, 4)).astype(np.float32))
    w = Tensor(np.eye(4, dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    out = R.dsn_features(patches, w, b)
    np.testing.assert_allclose(out.data, patches.data, atol=1e-7)


def test_dsn_zero_weight_maps_to_bias():
    patches = Tensor(np.ones((1, 3, 4), dtype=np.float32))
    w = Tensor(np.zeros((4, 4), dtype=np.float32))
    b = Tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32))
    out = R.dsn_features(patches, w, b)
    for j in range(3):
        np.testing.assert_allclose(out.data[0, j], b.data)


def test_dsn_gradcheck_through_similarity_loss():
    rng = np.random.default_rng(1)
    patches = Tensor(rng.standard_normal((2, 4, 3)), dtype=F64)
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=F64)
    b = Tensor(rng.standard_normal(3), requires_grad=True, dtype=F64)

    def loss():
        feats = R.dsn_features(patches, w, b)
        return R.similarity_loss([R.similarity_matrix(feats)])

    assert grad_check(loss, [w, b], eps=1e-4) < 1e-4


# -- domain token ---------------------------------------------------------------


def test_domain_token_single_patch():
    f = Tensor(np.arange(6, dtype=np.float32).reshape(2, 1, 3))
    out = R.domain_token(f, "avg")
    np.testing.assert_array_equal(out.data, f.data[:, 0, :])


def test_domain_token_avg_and_max():
    f = Tensor(np.array([[[0.0, 2.0], [2.0, 0.0]]], dtype=np.float32))
    np.testing.assert_allclose(R.domain_token(f, "avg").data, [[1.0, 1.0]])
    np.testing.assert_allclose(R.domain_token(f, "max").data, [[2.0, 2.0]])


def test_domain_token_rejects_empty():
    f = Tensor(np.zeros((1, 0, 3), dtype=np.float32))
    with pytest.raises(ContractError):
        R.domain_token(f, "avg")


# -- similarity matrix / loss ------------------------------------------------------


def test_similarity_exact_cases():
    f = Tensor(np.array([[[3.0, 4.0], [4.0, 3.0], [1.0, 0.0], [0.0, 1.0]]],
                        dtype=np.float32))
    m = R.similarity_matrix(f).data[0]
    assert abs(m[0, 0] - 1.0) < 1e-6          # self similarity
    assert abs(m[0, 1] - 24.0 / 25.0) < 1e-6  # [3,4] vs [4,3]
    assert abs(m[2, 3] - 0.0) < 1e-6          # orthogonal pair


def test_similarity_matrix_matches_naive_oracle():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((3, 5, 4)).astype(np.float32)
    got = R.similarity_matrix(Tensor(f)).data
    for s in range(3):
        np.testing.assert_allclose(got[s], naive_similarity_matrix(f[s]), atol=1e-6)


def test_similarity_matrix_properties():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((2, 6, 3)).astype(np.float32)
    m = R.similarity_matrix(Tensor(f)).data
    np.testing.assert_allclose(m, np.swapaxes(m, -1, -2), atol=1e-6)  # symmetric
    np.testing.assert_allclose(np.diagonal(m, axis1=-2, axis2=-1), 1.0, atol=1e-6)
    assert np.all(m >= -1.0 - 1e-6) and np.all(m <= 1.0 + 1e-6)


def test_similarity_zero_norm_row_counted_and_zeroed():
    R.degeneracy.reset()
    f = Tensor(np.array([[[0.0, 0.0], [1.0, 0.0]]], dtype=np.float32))
    m = R.similarity_matrix(f).data[0]
    np.testing.assert_allclose(m[0], [0.0, 0.0])
    np.testing.assert_allclose(m[:, 0], [0.0, 0.0])
    assert m[1, 1] == pytest.approx(1.0)
    assert R.degeneracy.zero_norm_features == 1
    R.degeneracy.reset()


def test_similarity_loss_all_equal_features_is_minus_one():
    f = np.tile(np.array([1.0, 2.0, -1.0]), (2, 5, 1)).astype(np.float32)
    loss = R.similarity_loss([R.similarity_matrix(Tensor(f))] * 3)
    assert loss.item() == pytest.approx(-1.0, abs=1e-6)


def test_similarity_loss_orthogonal_pair_closed_form():
    f = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]], dtype=np.float32))
    loss = R.similarity_loss([R.similarity_matrix(f)])
    assert loss.item() == pytest.approx(-0.5, abs=1e-6)  # M sums to 2 over N^2 = 4


def test_similarity_loss_matches_naive_oracle():
    rng = np.random.default_rng(4)
    layers = [rng.standard_normal((3, 4, 5)).astype(np.float32) for _ in range(2)]
    got = R.similarity_loss([R.similarity_matrix(Tensor(f)) for f in layers]).item()
    assert got == pytest.approx(naive_similarity_loss(layers), abs=1e-6)


# -- factor generation ----------------------------------------------------------


def test_identity_init_factors():
    params = R.init_pcsr(2, 4)
    for l in range(2):
        cond = Tensor(np.random.default_rng(l).standard_normal((3, 4)).astype(np.float32))
        gamma, beta = R.generate_factors(cond, params.fgn_w[l], params.fgn_b[l], "shared")
        np.testing.assert_allclose(gamma.data, np.ones((3, 4)), atol=1e-7)
        np.testing.assert_allclose(beta.data, np.zeros((3, 4)), atol=1e-7)


def test_identity_init_factors_independent():
    params = R.init_pcsr(1, 4, R.PcsrConfig(sharing="independent"))
    cond = Tensor(np.ones((2, 4), dtype=np.float32))
    factors = R.generate_factors(cond, params.fgn_w[0], params.fgn_b[0], "independent")
    assert len(factors) == 6
    for i, f in enumerate(factors):
        expect = np.ones((2, 4)) if i % 2 == 0 else np.zeros((2, 4))
        np.testing.assert_allclose(f.data, expect, atol=1e-7)


def test_factors_hand_computed_case():
    # d=2: weight rows sum the input coordinates, zero bias.
    w = Tensor(np.ones((2, 4), dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    cond = Tensor(np.array([[1.0, 1.0]], dtype=np.float32))
    gamma, beta = R.generate_factors(cond, w, b, "shared")
    np.testing.assert_allclose(gamma.data, [[2.0, 2.0]])
    np.testing.assert_allclose(beta.data, [[2.0, 2.0]])


def test_both_mode_with_zero_class_token_equals_domain_only():
    rng = np.random.default_rng(5)
    dom = Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    zeros = Tensor(np.zeros((2, 4), dtype=np.float32))
    patches = Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
    both = R.conditioning_input(R.PcsrConfig(conditioning="both"), dom, zeros, patches)
    dom_only = R.conditioning_input(R.PcsrConfig(conditioning="domain_only"), dom, zeros, patches)
    np.testing.assert_allclose(both.data, dom_only.data, atol=1e-7)


def test_zero_init_output_invariant_to_input_scale():
    params = R.init_pcsr(1, 3)
    for scale in (1.0, 100.0):
        cond = Tensor(scale * np.ones((2, 3), dtype=np.float32))
        gamma, beta = R.generate_factors(cond, params.fgn_w[0], params.fgn_b[0], "shared")
        np.testing.assert_allclose(gamma.data, 1.0)
        np.testing.assert_allclose(beta.data, 0.0)


# -- recalibration ----------------------------------------------------------------


def _qkv(rng, b=2, t=3, d=4):
    return tuple(Tensor(rng.standard_normal((b, t, d)).astype(np.float32)) for _ in range(3))


def test_recalibrate_identity():
    rng = np.random.default_rng(6)
    q, k, v = _qkv(rng)
    ones = Tensor(np.ones((2, 4), dtype=np.float32))
    zeros = Tensor(np.zeros((2, 4), dtype=np.float32))
    q2, k2, v2 = R.recalibrate_qkv(q, k, v, (ones, zeros), "shared")
    np.testing.assert_array_equal(q2.data, q.data)
    np.testing.assert_array_equal(k2.data, k.data)
    np.testing.assert_array_equal(v2.data, v.data)


def test_recalibrate_shared_preserves_equality():
    rng = np.random.default_rng(7)
    q, _, v = _qkv(rng)
    k = Tensor(q.data.copy())
    gamma = Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    beta = Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    q2, k2, _ = R.recalibrate_qkv(q, k, v, (gamma, beta), "shared")
    np.testing.assert_array_equal(q2.data, k2.data)


def test_recalibrate_affine_arithmetic():
    q = Tensor(np.full((1, 1, 2), 0.5, dtype=np.float32))
    gamma = Tensor(np.full((1, 2), 2.0, dtype=np.float32))
    beta = Tensor(np.full((1, 2), 1.0, dtype=np.float32))
    q2, _, _ = R.recalibrate_qkv(q, q, q, (gamma, beta), "shared")
    np.testing.assert_allclose(q2.data, 2.0)


def test_attention_single_token_returns_value():
    rng = np.random.default_rng(8)
    q, k, v = _qkv(rng, b=2, t=1, d=4)
    out = R.recalibrated_attention(q, k, v, n_heads=2)
    np.testing.assert_allclose(out.data, v.data, atol=1e-6)


def test_attention_identical_queries_average_values():
    rng = np.random.default_rng(9)
    b, t, d = 1, 4, 4
    q = Tensor(np.tile(rng.standard_normal((1, 1, d)), (b, t, 1)).astype(np.float32))
    k = Tensor(np.tile(rng.standard_normal((1, 1, d)), (b, t, 1)).astype(np.float32))
    v = Tensor(rng.standard_normal((b, t, d)).astype(np.float32))
    out = R.recalibrated_attention(q, k, v, n_heads=2)
    mean_v = v.data.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data, np.tile(mean_v, (1, t, 1)), atol=1e-6)


def test_attention_matches_naive_three_loop_oracle():
    rng = np.random.default_rng(10)
    q, k, v = _qkv(rng, b=2, t=5, d=6)
    got = R.recalibrated_attention(q, k, v, n_heads=3).data
    for s in range(2):
        expect = naive_attention(q.data[s], k.data[s], v.data[s], n_heads=3)
        np.testing.assert_allclose(got[s], expect, atol=1e-6)


def test_attention_rows_are_probabilities():
    rng = np.random.default_rng(11)
    q, k, v = _qkv(rng, b=1, t=6, d=4)
    scores = T.matmul(
        q.reshape(1, 6, 2, 2).transpose(0, 2, 1, 3),
        T.swap_last(k.reshape(1, 6, 2, 2).transpose(0, 2, 1, 3)),
    ) * (1.0 / np.sqrt(2.0))
    attn = T.softmax(scores, axis=-1)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


# -- init ------------------------------------------------------------------------


def test_init_pcsr_is_seedless_and_deterministic():
    a = R.init_pcsr(3, 8, seed=1)
    b = R.init_pcsr(3, 8, seed=999)
    for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_init_pcsr_layer_shared_aliases_tensors():
    p = R.init_pcsr(4, 8, R.PcsrConfig(layer_shared=True))
    assert p.dsn_w[0] is p.dsn_w[3]
    assert len(p.tensors()) == 4


def test_init_pcsr_trainability_contract():
    p = R.init_pcsr(2, 4)
    assert all(t.requires_grad for t in p.tensors())
    assert len(p.tensors()) == 8


def test_domain_token_at_init_equals_mean_patch():
    rng = np.random.default_rng(12)
    p = R.init_pcsr(1, 4)
    patches = Tensor(rng.standard_normal((2, 5, 4)).astype(np.float32))
    feats = R.dsn_features(patches, p.dsn_w[0], p.dsn_b[0])
    tok = R.domain_token(feats, "avg")
    np.testing.assert_allclose(tok.data, patches.data.mean(axis=1), atol=1e-6)


def test_bad_modes_rejected():
    with pytest.raises(ConfigError):
        R.PcsrConfig(conditioning="nope")
    with pytest.raises(ConfigError):
        R.PcsrConfig(aggregation="median")
    with pytest.raises(ConfigError):
        R.PcsrConfig(sharing="sometimes")
    with pytest.raises(ShapeError):
        R.generate_factors(Tensor(np.zeros((2, 3), dtype=np.float32)),
                           Tensor(np.zeros((3, 4), dtype=np.float32)),
                           Tensor(np.zeros(4, dtype=np.float32)), "shared")
