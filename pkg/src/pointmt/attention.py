"""Local attention over point neighborhoods.

Two aggregation modes share the same projections. In the linear mode only the
center point queries its neighborhood, so the score/softmax/aggregation work
grows as N*k instead of the N*k^2 of conventional local self-attention. The
temperature-adaptive mode then rescales the shared per-neighbor score by a
per-channel temperature derived, parameter-free, from the weighted second
moment of the value rows, which splits elementwise into squared mean
(activation intensity) plus weighted variance (feature diversity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    LinearLayer,
    Tensor,
    channel_dot,
    channel_weighted_sum,
    div,
    matmul,
    maximum_const,
    moveaxis,
    mul,
    mulsum_neighbors,
    relative_rows,
    scale_by_temperature,
    softmax,
    sum_,
)
from .geometry import InternalError, NeighborhoodIndex, gather_rows


def project_relative(features: Tensor, nbr: NeighborhoodIndex, layer: LinearLayer) -> Tensor:
    """Apply an affine map to every relative neighbor feature f_j - f_i.

    The map is linear, so the projection runs once over the N points and the
    difference is formed afterwards (the bias enters after the subtraction,
    where it would otherwise cancel): N*C^2 work instead of N*k*C^2.
    """
    idx = nbr.indices
    n = features.data.shape[0]
    if idx.min() < 0 or idx.max() >= n:
        raise InternalError(f"neighborhood index out of range for {n} points")
    proj = matmul(features, layer.weight.tensor)
    return relative_rows(proj, idx, layer.bias.tensor if layer.bias is not None else None)


@dataclass
class AttentionParams:
    """The three projections of one attention layer plus its mode switches."""

    linear_q: LinearLayer
    linear_k: LinearLayer
    linear_v: LinearLayer
    ta_enabled: bool = True
    epsilon: float = 1e-6

    def __post_init__(self):
        widths = {self.linear_q.in_features, self.linear_k.in_features, self.linear_v.in_features,
                  self.linear_q.out_features, self.linear_k.out_features, self.linear_v.out_features}
        if len(widths) != 1:
            raise ValueError(f"attention projections must share one width, got {widths}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.linear_q.out_features

    @classmethod
    def build(cls, channels: int, *, ta_enabled=True, epsilon=1e-6, bias=True,
              rng=None, dtype=None, name="attn") -> "AttentionParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            LinearLayer(channels, channels, bias=bias, rng=rng, dtype=dtype, name=f"{name}.q"),
            LinearLayer(channels, channels, bias=bias, rng=rng, dtype=dtype, name=f"{name}.k"),
            LinearLayer(channels, channels, bias=bias, rng=rng, dtype=dtype, name=f"{name}.v"),
            ta_enabled=ta_enabled,
            epsilon=epsilon,
        )

    def parameters(self):
        return self.linear_q.parameters() + self.linear_k.parameters() + self.linear_v.parameters()


@dataclass
class AttentionTrace:
    """Per-center intermediate record, for tests and heatmap export.

    ``w`` is the k x C weight table actually used for aggregation; in the
    linear mode it is the token weights broadcast across channels and
    ``temperature`` is all ones.
    """

    q: np.ndarray
    k_mat: np.ndarray
    v_mat: np.ndarray
    score: np.ndarray
    w_token: np.ndarray
    v2_bar: np.ndarray
    temperature: np.ndarray
    w: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel weighted mean, diversity, and second moment of value rows."""

    weighted_mean: np.ndarray
    diversity: np.ndarray
    second_moment: np.ndarray


def _project(features: Tensor, nbr: NeighborhoodIndex, params: AttentionParams):
    """Shared front end: center query, relative key/value, scaled scores."""
    n, c = features.data.shape
    if c != params.channels:
        raise InternalError(f"feature width {c} does not match attention width {params.channels}")
    q = params.linear_q(features)                          # (N, C)
    k_mat = project_relative(features, nbr, params.linear_k)  # (N, k, C)
    v_mat = project_relative(features, nbr, params.linear_v)
    score = div(channel_dot(q, k_mat), float(np.sqrt(c)))  # (N, k)
    return q, k_mat, v_mat, score


def _collect_traces(q, k_mat, v_mat, score, w_token, v2_bar, temperature, w, z):
    traces = []
    n = q.shape[0]
    for i in range(n):
        traces.append(AttentionTrace(
            q=q[i:i + 1].copy(),
            k_mat=k_mat[i].copy(),
            v_mat=v_mat[i].copy(),
            score=score[i:i + 1].copy(),
            w_token=w_token[i:i + 1].copy(),
            v2_bar=v2_bar[i:i + 1].copy(),
            temperature=temperature[i:i + 1].copy(),
            w=w[i].copy(),
            z=z[i:i + 1].copy(),
        ))
    return traces


def linear_local_attention(features: Tensor, nbr: NeighborhoodIndex,
                           params: AttentionParams, collect_traces=False):
    """Center-token attention: score = QK^T/sqrt(C), token softmax, Z = W V."""
    if params.ta_enabled:
        raise ValueError("params are configured for temperature adaptation; use ta_attention")
    n, c = features.data.shape
    k = nbr.k
    q, k_mat, v_mat, score = _project(features, nbr, params)
    w_token = softmax(score, axis=1)                 # (N, k)
    z = channel_weighted_sum(w_token, v_mat)         # (N, C)
    traces = None
    if collect_traces:
        ones = np.ones((n, c), dtype=features.data.dtype)
        w_full = np.repeat(w_token.data[:, :, None], c, axis=2)
        v2_bar = np.einsum("nk,nkc->nc", w_token.data, v_mat.data ** 2)
        traces = _collect_traces(q.data, k_mat.data, v_mat.data, score.data,
                                 w_token.data, v2_bar, ones, w_full, z.data)
    return z, traces


def ta_attention(features: Tensor, nbr: NeighborhoodIndex, params: AttentionParams,
                 collect_traces=False, temperature_override=None):
    """Temperature-adaptive attention.

    After the shared scores and token weights, the weighted second moment of
    the squared values gives, per channel, a temperature T = 1/max(V2/sqrt(k),
    epsilon); each channel then softmaxes score/T over the neighbors and
    aggregates its own value column. ``temperature_override`` pins T to a
    constant (test hook: T = 1 reproduces the linear mode bit-for-bit).
    """
    if not params.ta_enabled:
        raise ValueError("params are configured for the linear mode; use linear_local_attention")
    n, c = features.data.shape
    k = nbr.k
    q, k_mat, v_mat, score = _project(features, nbr, params)
    w_token = softmax(score, axis=1)
    v2_bar = channel_weighted_sum(w_token, mul(v_mat, v_mat))  # (N, C)
    if temperature_override is None:
        scaled = div(v2_bar, float(np.sqrt(k)))
        temp = div(Tensor(np.ones((n, c), dtype=features.data.dtype)),
                   maximum_const(scaled, params.epsilon))
    else:
        if temperature_override <= 0:
            raise ValueError("temperature override must be positive")
        temp = Tensor(np.full((n, c), temperature_override, dtype=features.data.dtype))
    per_channel = scale_by_temperature(score, temp)  # (N, k, C)
    w = softmax(per_channel, axis=1)
    z = mulsum_neighbors(w, v_mat)
    traces = None
    if collect_traces:
        traces = _collect_traces(q.data, k_mat.data, v_mat.data, score.data,
                                 w_token.data, v2_bar.data, temp.data, w.data, z.data)
    return z, traces


def channel_second_moment(w_token: np.ndarray, v_mat: np.ndarray) -> np.ndarray:
    """Weighted average of squared values per channel: sum_i w_i * v_ij^2."""
    w = np.asarray(w_token, dtype=np.float64).reshape(-1)
    v = np.asarray(v_mat, dtype=np.float64)
    if w.shape[0] != v.shape[0]:
        raise ValueError(f"weight length {w.shape[0]} does not match value rows {v.shape[0]}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("w_token must be a probability vector")
    return (w[:, None] * v * v).sum(axis=0)


def temperature(v2_bar: np.ndarray, k: int, epsilon: float) -> np.ndarray:
    """Per-channel temperature: reciprocal of the sqrt(k)-scaled second moment,
    clamped at ``epsilon`` so all-zero channels get a large finite temperature
    (and hence a near-uniform weight distribution)."""
    v2 = np.asarray(v2_bar, dtype=np.float64)
    return 1.0 / np.maximum(v2 / np.sqrt(k), epsilon)


def moment_decomposition(w_token: np.ndarray, v_mat: np.ndarray) -> ChannelStats:
    """Split the weighted second moment into squared mean plus diversity."""
    w = np.asarray(w_token, dtype=np.float64).reshape(-1)
    v = np.asarray(v_mat, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("w_token must be a probability vector")
    mean = (w[:, None] * v).sum(axis=0)
    diversity = (w[:, None] * (v - mean) ** 2).sum(axis=0)
    second = (w[:, None] * v * v).sum(axis=0)
    return ChannelStats(weighted_mean=mean, diversity=diversity, second_moment=second)


def quadratic_local_attention(features: Tensor, nbr: NeighborhoodIndex,
                              params: AttentionParams) -> Tensor:
    """Conventional local self-attention baseline: every neighborhood token
    queries every other, and the center's updated token is returned.

    Tokens enter the projections as absolute features (no relative offsets).
    Each point is projected once and the results gathered per neighborhood
    (the same function, since the maps are affine and tokens repeat across
    neighborhoods), so the k-quadratic score/softmax/aggregation stage is what
    grows with the neighborhood size.
    """
    idx = nbr.indices
    n, c = features.data.shape
    k = nbr.k
    if idx.min() < 0 or idx.max() >= n:
        raise InternalError(f"neighborhood index out of range for {n} points")
    q = gather_rows(params.linear_q(features), idx)         # (N, k, C)
    key = gather_rows(params.linear_k(features), idx)
    val = gather_rows(params.linear_v(features), idx)
    scores = div(matmul(q, moveaxis(key, 1, 2)), float(np.sqrt(c)))  # (N, k, k)
    w = softmax(scores, axis=2)
    updated = matmul(w, val)                                # (N, k, C)
    center_pos = np.argmax(idx == np.arange(n)[:, None], axis=1)
    if not (idx[np.arange(n), center_pos] == np.arange(n)).all():
        raise InternalError("neighborhood rows must contain their own center")
    onehot = np.zeros((n, k, 1), dtype=features.data.dtype)
    onehot[np.arange(n), center_pos, 0] = 1.0
    return sum_(mul(updated, Tensor(onehot)), axis=1)


@dataclass(frozen=True)
class FlopCount:
    """Closed-form operation counts for one attention pass.

    Convention: one multiply-accumulate = 1 FLOP, each exponential and each
    division = 1 FLOP. Bias additions, max-subtractions, and the additions
    inside softmax denominators are not counted. ``score`` includes the
    per-entry scaling division; ``softmax`` counts one exp and one normalizing
    division per entry.
    """

    projections: int
    score: int
    softmax: int
    aggregation: int

    @property
    def score_aggregation(self) -> int:
        return self.score + self.aggregation

    @property
    def total(self) -> int:
        return self.projections + self.score + self.softmax + self.aggregation


def flop_count(mode: str, n: int, k: int, c: int) -> FlopCount:
    """FLOPs of one attention pass over n centers with k neighbors, width c.

    linear: one query projection per center, key/value per neighbor, k scores
    and one k-row softmax per center, k*c aggregation.
    quadratic: all k tokens project as queries, k^2 scores and k softmax rows
    per center, k^2*c aggregation. The score-plus-aggregation ratio between
    the modes is exactly k for every (n, k, c).
    """
    if min(n, k, c) < 1:
        raise ValueError("sizes must be >= 1")
    if mode == "linear":
        return FlopCount(
            projections=n * (2 * k + 1) * c * c,
            score=n * (k * c + k),
            softmax=n * 2 * k,
            aggregation=n * k * c,
        )
    if mode == "quadratic":
        return FlopCount(
            projections=n * 3 * k * c * c,
            score=n * (k * k * c + k * k),
            softmax=n * 2 * k * k,
            aggregation=n * k * k * c,
        )
    raise ValueError(f"unknown mode {mode!r}")
