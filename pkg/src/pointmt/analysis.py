"""Evaluation methodology: KL statistics, point discriminability, branch
ablation curves, complexity benchmarking, and feature export.

Full-scale reference numbers from the published 1024-point ModelNet40 runs are
kept here as named constants; desk-scale experiments reproduce their ordering,
not their values.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, flop_count, linear_local_attention, quadratic_local_attention
from .autodiff import Tensor
from .geometry import knn
from .model import ModelConfig, PointMTClassifier
from .training import TrainConfig, EpochRecord, fit

# Published full-scale anchors (ModelNet40, 1024 points). Desk-scale acceptance
# checks orderings only; these values are not reproducible at desk scale.
MODELNET40_HYBRID_CYCLE_ACCURACY = {1: 0.934, 2: 0.942}   # after 30 / 60 epochs
MODELNET40_MEAN_KL = {"spf": 0.39, "traditional": 0.82}
MODELNET40_CORRECT_POINT_FRACTION = {"spf": 0.550, "traditional": 0.366}
MODELNET40_PARAM_COUNT = 2_400_000

KL_FLOOR = 1e-12
KL_HISTOGRAM_BINS = 40


@dataclass
class SampleKlRecord:
    sample: int
    mean_kl: float
    correct_point_fraction: float


def kl_divergence(p, q) -> float:
    """Sum of p_i * ln(p_i / q_i) with q floored at 1e-12 and 0*ln0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("inputs must sum to 1 within 1e-6")
    q = np.maximum(q, KL_FLOOR)
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def spf_statistics(model: PointMTClassifier, dataset, plans=None):
    """Per-sample KL and correct-point statistics plus dataset aggregates.

    Every model is inspected through the fusion view (the classifier map is
    shared, so a traditionally-trained model simply gets the head applied to
    its point features at inference). Unlabeled samples are skipped with a
    warning.
    """
    import warnings

    records = []
    for i, sample in enumerate(dataset.samples):
        if sample.label is None:
            warnings.warn(f"sample {i} unlabeled; skipped")
            continue
        plan = plans[i] if plans is not None else None
        out = model.spf_output(sample.coords, plan)
        shape_p = softmax_probs(out.shape_logit.data[0])
        point_logits = out.point_logits.data
        kls = [kl_divergence(softmax_probs(row), shape_p) for row in point_logits]
        correct = float(np.mean(np.argmax(point_logits, axis=1) == sample.label))
        records.append(SampleKlRecord(i, float(np.mean(kls)), correct))
    mean_kl = float(np.mean([r.mean_kl for r in records]))
    mean_fraction = float(np.mean([r.correct_point_fraction for r in records]))
    top = max((r.mean_kl for r in records), default=0.0)
    counts, edges = np.histogram([r.mean_kl for r in records],
                                 bins=KL_HISTOGRAM_BINS, range=(0.0, top if top > 0 else 1.0))
    aggregates = {
        "mean_kl": mean_kl,
        "mean_correct_point_fraction": mean_fraction,
        "histogram_counts": counts,
        "histogram_edges": edges,
    }
    return records, aggregates


def write_kl_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "mean_kl", "correct_fraction"])
        for r in records:
            w.writerow([r.sample, repr(r.mean_kl), repr(r.correct_point_fraction)])


def convergence_compare(train_set, test_set, base_config: ModelConfig,
                        modes, cfg: TrainConfig, num_classes=None,
                        dtype=np.float32) -> dict[str, list[EpochRecord]]:
    """Train one model per branch mode under identical seeds and schedules.

    The branch mode changes only the forward routing, so the per-sample
    geometry is computed once and shared by every run.
    """
    from .training import build_plans

    num_classes = num_classes if num_classes is not None else len(train_set.class_names)
    train_plans = build_plans(train_set, base_config)
    test_plans = build_plans(test_set, base_config)
    curves = {}
    for mode in modes:
        model = PointMTClassifier(base_config.with_branch_mode(mode), num_classes,
                                  seed=cfg.seed, dtype=dtype)
        curves[mode] = fit(model, train_set, test_set, cfg,
                           train_plans=train_plans, test_plans=test_plans)
    return curves


@dataclass
class BenchRow:
    mode: str
    n: int
    k: int
    c: int
    flops: int
    median_ms: float


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1000.0


def complexity_bench(n_list, k_list, c: int, repeats: int = 5, seed: int = 0,
                     csv_path=None, dtype=np.float64) -> list[BenchRow]:
    """Wall-clock medians for the two attention modes, paired with the
    closed-form FLOP counts. One warmup run precedes the timed repeats.

    Measured in float64 by default, like the verification suites: the
    neighborhood-sized buffers are then memory-bound, so per-call dispatch
    overhead stops masking the k-scaling the comparison is after.
    """
    from ._alloc import reuse_large_blocks

    reuse_large_blocks()
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_list:
        coords = rng.standard_normal((n, 3))
        features = Tensor(rng.standard_normal((n, c)).astype(dtype))
        linear_params = AttentionParams.build(c, ta_enabled=False, rng=rng, dtype=dtype)
        quad_params = AttentionParams.build(c, ta_enabled=False, rng=rng, dtype=dtype)
        for k in k_list:
            nbr = knn(coords, coords, k, self_indices=np.arange(n))
            runs = {
                "linear": lambda: linear_local_attention(features, nbr, linear_params),
                "quadratic": lambda: quadratic_local_attention(features, nbr, quad_params),
            }
            for mode, fn in runs.items():
                fn()  # two warmups: the first maps pages, the second runs warm
                fn()
                times = sorted(_time_once(fn) for _ in range(repeats))
                rows.append(BenchRow(mode, n, k, c, flop_count(mode, n, k, c).total,
                                     times[len(times) // 2]))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "n", "k", "c", "flops", "median_ms"])
            for r in rows:
                w.writerow([r.mode, r.n, r.k, r.c, r.flops, repr(r.median_ms)])
    return rows


def fit_scaling_exponent(ks, times) -> float:
    """Slope of log(time) against log(k)."""
    return float(np.polyfit(np.log(np.asarray(ks, dtype=float)),
                            np.log(np.asarray(times, dtype=float)), 1)[0])


def export_features(model: PointMTClassifier, dataset, out_dir) -> dict:
    """Write per-sample pooled features and logits, plus per-point logits.

    ``features.csv``: sample, label, shape_logit_*, point_logit_* (the mean
    over points), feat_* (the pooled feature) — one row per sample.
    ``point_logits.csv``: sample, point, label, logit_* — one row per point.
    Recomputing combined logits from features.csv reproduces the classifier's
    accuracy.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    features_path = os.path.join(out_dir, "features.csv")
    points_path = os.path.join(out_dir, "point_logits.csv")
    num_classes = model.num_classes
    with open(features_path, "w", newline="") as fh, open(points_path, "w", newline="") as ph:
        fw = csv.writer(fh)
        pw = csv.writer(ph)
        first = True
        pw.writerow(["sample", "point", "label"] + [f"logit_{j}" for j in range(num_classes)])
        for i, sample in enumerate(dataset.samples):
            _, final, _ = model.encode(sample.coords)
            out = model.spf_output(sample.coords)
            pooled = final.data.max(axis=0)
            if first:
                fw.writerow(["sample", "label"]
                            + [f"shape_logit_{j}" for j in range(num_classes)]
                            + [f"point_logit_{j}" for j in range(num_classes)]
                            + [f"feat_{j}" for j in range(pooled.size)])
                first = False
            point_mean = out.point_logits.data.mean(axis=0)
            fw.writerow([i, sample.label]
                        + [repr(float(v)) for v in out.shape_logit.data[0]]
                        + [repr(float(v)) for v in point_mean]
                        + [repr(float(v)) for v in pooled])
            for j, row in enumerate(out.point_logits.data):
                pw.writerow([i, j, sample.label] + [repr(float(v)) for v in row])
    return {"features": features_path, "point_logits": points_path}


def write_attention_trace_csv(trace, path):
    """One CSV per point: rows are the k neighbors, columns the C channels,
    values the aggregation weights actually used."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in trace.w:
            w.writerow([repr(float(v)) for v in row])
