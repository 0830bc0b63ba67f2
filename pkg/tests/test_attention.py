"""Attention against independent per-point loop oracles, the second-moment
decomposition identity, the temperature reduction, and the FLOP model."""

import numpy as np
import numpy.testing as npt
import pytest

from pointmt.attention import (
    AttentionParams,
    channel_second_moment,
    flop_count,
    linear_local_attention,
    moment_decomposition,
    quadratic_local_attention,
    ta_attention,
    temperature,
)
from pointmt.autodiff import Tensor
from pointmt.geometry import NeighborhoodIndex, knn

F64 = np.float64


from oracles import (
    affine as _affine,
    linear_attention_oracle,
    quadratic_attention_oracle,
    ta_attention_oracle,
)


def _random_setup(rng, n, k, c, ta_enabled):
    coords = rng.standard_normal((n, 3))
    nbr = knn(coords, coords, k, self_indices=np.arange(n))
    params = AttentionParams.build(c, ta_enabled=ta_enabled,
                                   rng=np.random.default_rng(rng.integers(2**31)), dtype=F64)
    features = rng.standard_normal((n, c))
    return features, nbr, params


# oracle comparisons -------------------------------------------------------


def test_linear_attention_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, k, c = int(rng.integers(4, 33)), int(rng.integers(1, 9)), int(rng.integers(2, 17))
        k = min(k, n)
        features, nbr, params = _random_setup(rng, n, k, c, ta_enabled=False)
        z, _ = linear_local_attention(Tensor(features), nbr, params)
        npt.assert_allclose(z.data, linear_attention_oracle(features, nbr, params), atol=1e-6)


def test_ta_attention_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n, k, c = int(rng.integers(4, 33)), int(rng.integers(1, 9)), int(rng.integers(2, 17))
        k = min(k, n)
        features, nbr, params = _random_setup(rng, n, k, c, ta_enabled=True)
        z, _ = ta_attention(Tensor(features), nbr, params)
        npt.assert_allclose(z.data, ta_attention_oracle(features, nbr, params), atol=1e-6)


def test_quadratic_attention_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        n, k, c = int(rng.integers(4, 17)), int(rng.integers(1, 6)), int(rng.integers(2, 9))
        k = min(k, n)
        features, nbr, params = _random_setup(rng, n, k, c, ta_enabled=False)
        z = quadratic_local_attention(Tensor(features), nbr, params)
        npt.assert_allclose(z.data, quadratic_attention_oracle(features, nbr, params), atol=1e-6)


# degenerate and analytic cases ---------------------------------------------


def test_linear_attention_k1_returns_value_bias():
    rng = np.random.default_rng(3)
    features, nbr, params = _random_setup(rng, 5, 1, 4, ta_enabled=False)
    z, _ = linear_local_attention(Tensor(features), nbr, params)
    # sole neighbor is the center: relative feature 0, so Z is Linear_V's bias
    npt.assert_allclose(z.data, np.tile(params.linear_v.bias.value, (5, 1)), atol=1e-12)


def test_ta_attention_k1_identity():
    rng = np.random.default_rng(4)
    features, nbr, params = _random_setup(rng, 5, 1, 4, ta_enabled=True)
    z, traces = ta_attention(Tensor(features), nbr, params, collect_traces=True)
    npt.assert_allclose(z.data, np.tile(params.linear_v.bias.value, (5, 1)), atol=1e-12)
    for tr in traces:
        npt.assert_allclose(tr.w, np.ones_like(tr.w), atol=1e-12)


def test_linear_attention_orthogonal_query_uniform():
    # zero scores: weights uniform, Z is the column mean of V
    rng = np.random.default_rng(5)
    n, k, c = 6, 3, 4
    coords = rng.standard_normal((n, 3))
    nbr = knn(coords, coords, k, self_indices=np.arange(n))
    params = AttentionParams.build(c, ta_enabled=False, rng=rng, dtype=F64)
    params.linear_q.weight.value = np.zeros((c, c))
    params.linear_q.bias.value = np.zeros(c)
    features = rng.standard_normal((n, c))
    z, traces = linear_local_attention(Tensor(features), nbr, params, collect_traces=True)
    for i, tr in enumerate(traces):
        npt.assert_allclose(tr.w_token, np.full((1, k), 1 / k), atol=1e-12)
        npt.assert_allclose(z.data[i], tr.v_mat.mean(axis=0), atol=1e-12)


def test_quadratic_attention_identical_tokens():
    rng = np.random.default_rng(6)
    n, k, c = 4, 3, 5
    coords = rng.standard_normal((n, 3))
    nbr = knn(coords, coords, k, self_indices=np.arange(n))
    params = AttentionParams.build(c, ta_enabled=False, rng=rng, dtype=F64)
    features = np.tile(rng.standard_normal(c), (n, 1))
    z = quadratic_local_attention(Tensor(features), nbr, params)
    expect = _affine(features[0], params.linear_v)
    npt.assert_allclose(z.data, np.tile(expect, (n, 1)), atol=1e-10)


def test_quadratic_attention_k1():
    rng = np.random.default_rng(7)
    features, nbr, params = _random_setup(rng, 5, 1, 4, ta_enabled=False)
    z = quadratic_local_attention(Tensor(features), nbr, params)
    npt.assert_allclose(z.data, _affine(features, params.linear_v), atol=1e-12)


# channel statistics -----------------------------------------------------------


def test_channel_second_moment_examples():
    npt.assert_array_equal(channel_second_moment(np.array([0.5, 0.5]), np.zeros((2, 3))),
                           np.zeros(3))
    got = channel_second_moment(np.array([0.5, 0.5]), np.array([[1.0], [-1.0]]))
    npt.assert_allclose(got, [1.0], atol=1e-12)


def test_channel_second_moment_matches_double_loop():
    rng = np.random.default_rng(8)
    for _ in range(10):
        k, c = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        w = rng.random(k)
        w /= w.sum()
        v = rng.standard_normal((k, c))
        expect = np.zeros(c)
        for j in range(c):
            for i in range(k):
                expect[j] += w[i] * v[i, j] ** 2
        npt.assert_allclose(channel_second_moment(w, v), expect, atol=1e-6)


def test_channel_second_moment_validates_weights():
    with pytest.raises(ValueError):
        channel_second_moment(np.array([0.9, 0.3]), np.zeros((2, 1)))


def test_temperature_examples():
    npt.assert_allclose(temperature(np.zeros(4), 3, 1e-6), np.full(4, 1e6), rtol=1e-12)
    npt.assert_allclose(temperature(np.array([1.0]), 2, 1e-6), [np.sqrt(2.0)], rtol=1e-12)
    v2 = np.array([0.5, 1.5, 3.0])
    npt.assert_allclose(temperature(3.0 * v2, 4, 1e-9), temperature(v2, 4, 1e-9) / 3.0, rtol=1e-12)


def test_moment_decomposition_examples():
    stats = moment_decomposition(np.array([0.25, 0.75]), np.array([[2.0], [2.0]]))
    npt.assert_allclose(stats.diversity, [0.0], atol=1e-12)
    npt.assert_allclose(stats.second_moment, stats.weighted_mean ** 2, atol=1e-12)
    stats = moment_decomposition(np.array([0.5, 0.5]), np.array([[1.0], [-1.0]]))
    npt.assert_allclose(stats.weighted_mean, [0.0], atol=1e-12)
    npt.assert_allclose(stats.diversity, [1.0], atol=1e-12)
    npt.assert_allclose(stats.second_moment, [1.0], atol=1e-12)


def test_moment_decomposition_identity_random():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        k, c = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        w = rng.random(k)
        w /= w.sum()
        v = rng.standard_normal((k, c)) * rng.uniform(0.1, 5.0)
        stats = moment_decomposition(w, v)
        npt.assert_allclose(stats.second_moment,
                            stats.weighted_mean ** 2 + stats.diversity, atol=1e-6)
        assert (stats.diversity >= -1e-12).all()


# invariants -----------------------------------------------------------------


def test_trace_weight_columns_sum_to_one():
    rng = np.random.default_rng(10)
    features, nbr, params = _random_setup(rng, 10, 4, 6, ta_enabled=True)
    _, traces = ta_attention(Tensor(features), nbr, params, collect_traces=True)
    for tr in traces:
        npt.assert_allclose(tr.w_token.sum(), 1.0, atol=1e-6)
        npt.assert_allclose(tr.w.sum(axis=0), np.ones(6), atol=1e-6)
        assert (tr.temperature > 0).all()
        for field in (tr.q, tr.k_mat, tr.v_mat, tr.score, tr.v2_bar, tr.z):
            assert np.isfinite(field).all()


def test_reduction_t1_equals_linear_bitwise():
    rng = np.random.default_rng(11)
    features, nbr, _ = _random_setup(rng, 16, 4, 8, ta_enabled=False)
    lin = AttentionParams.build(8, ta_enabled=False, rng=np.random.default_rng(99), dtype=F64)
    ta = AttentionParams.build(8, ta_enabled=True, rng=np.random.default_rng(99), dtype=F64)
    z_lin, _ = linear_local_attention(Tensor(features), nbr, lin)
    z_ta, _ = ta_attention(Tensor(features), nbr, ta, temperature_override=1.0)
    assert np.array_equal(z_lin.data, z_ta.data)


def test_neighbor_order_equivariance():
    rng = np.random.default_rng(12)
    features, nbr, params = _random_setup(rng, 12, 5, 6, ta_enabled=True)
    z, _ = ta_attention(Tensor(features), nbr, params)
    shuffled = nbr.indices.copy()
    for row in shuffled:
        rng.shuffle(row)
    z2, _ = ta_attention(Tensor(features), NeighborhoodIndex(shuffled), params)
    npt.assert_allclose(z.data, z2.data, atol=1e-6)


def test_monotone_sharpening():
    rng = np.random.default_rng(13)
    for _ in range(20):
        scores = rng.standard_normal(6)
        scores[rng.integers(6)] += 3.0  # unique max
        best = np.argmax(scores)
        weights = []
        for t in (4.0, 2.0, 1.0, 0.5, 0.25):
            e = np.exp(scores / t - (scores / t).max())
            weights.append((e / e.sum())[best])
        assert all(b > a for a, b in zip(weights, weights[1:]))


def test_ta_attention_grad_check():
    from pointmt.verification import check_ta_attention

    assert check_ta_attention() < 1e-4


def test_mode_mismatch_raises():
    rng = np.random.default_rng(14)
    features, nbr, params = _random_setup(rng, 6, 3, 4, ta_enabled=True)
    with pytest.raises(ValueError):
        linear_local_attention(Tensor(features), nbr, params)
    params.ta_enabled = False
    with pytest.raises(ValueError):
        ta_attention(Tensor(features), nbr, params)


# FLOP model -------------------------------------------------------------------


class _Counter:
    def __init__(self):
        self.mac = 0
        self.exp = 0
        self.div = 0

    @property
    def total(self):
        return self.mac + self.exp + self.div


def _counted_affine(x, c_in, c_out, counter):
    counter.mac += c_in * c_out  # bias adds are not counted
    return np.zeros(c_out)


def _counted_softmax(scores, counter):
    counter.exp += len(scores)
    counter.div += len(scores)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def instrumented_linear_pass(n, k, c):
    """Tally the multiply-accumulates, exps, and divisions one center of the
    linear mode actually performs, mirroring the oracle's loop structure, then
    scale by the number of centers."""
    per_point = _Counter()
    _counted_affine(None, c, c, per_point)      # Q
    for j in range(k):
        _counted_affine(None, c, c, per_point)  # K
        _counted_affine(None, c, c, per_point)  # V
        per_point.mac += c                      # q . k_j
        per_point.div += 1                      # / sqrt(C)
    _counted_softmax(np.zeros(k), per_point)
    per_point.mac += k * c                      # weighted aggregation
    counter = _Counter()
    counter.mac, counter.exp, counter.div = (n * per_point.mac, n * per_point.exp, n * per_point.div)
    return counter


def instrumented_quadratic_pass(n, k, c):
    per_point = _Counter()
    for tok in range(k):
        _counted_affine(None, c, c, per_point)  # Q per token
        _counted_affine(None, c, c, per_point)  # K
        _counted_affine(None, c, c, per_point)  # V
    for row in range(k):
        for col in range(k):
            per_point.mac += c
            per_point.div += 1
        _counted_softmax(np.zeros(k), per_point)
        per_point.mac += k * c
    counter = _Counter()
    counter.mac, counter.exp, counter.div = (n * per_point.mac, n * per_point.exp, n * per_point.div)
    return counter


def test_flop_count_matches_instrumented_run():
    for n, k, c in [(3, 1, 2), (5, 4, 8), (2, 7, 3)]:
        fl = flop_count("linear", n, k, c)
        counted = instrumented_linear_pass(n, k, c)
        assert fl.total == counted.total
        fq = flop_count("quadratic", n, k, c)
        counted = instrumented_quadratic_pass(n, k, c)
        assert fq.total == counted.total


def test_flop_count_k1_modes_equal():
    a = flop_count("linear", 10, 1, 8)
    b = flop_count("quadratic", 10, 1, 8)
    assert a.total == b.total
    assert a.score_aggregation == b.score_aggregation


def test_flop_ratio_is_k():
    for n, k, c in [(1024, 16, 64), (7, 3, 5), (128, 32, 16)]:
        lin = flop_count("linear", n, k, c)
        quad = flop_count("quadratic", n, k, c)
        assert quad.score_aggregation == k * lin.score_aggregation


def test_flop_count_rejects_bad_sizes():
    with pytest.raises(ValueError):
        flop_count("linear", 0, 1, 1)
    with pytest.raises(ValueError):
        flop_count("cubic", 1, 1, 1)
