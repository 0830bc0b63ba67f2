"""The hybrid-block point-cloud classifier.

An input cloud passes through a linear stem (3 -> channels[0]), then a pyramid
of stages. Each stage optionally downsamples by farthest-point sampling, builds
k-nearest neighborhoods over the surviving points in their original
coordinates, and runs its hybrid blocks. A block splits FC_1's output into a
pooled shared-MLP branch and a temperature-adaptive attention branch, fuses the
two with FC_2, layer-normalizes, and adds a residual when the widths match.

Two heads share one classifier map: the traditional head classifies only the
max-pooled shape feature, while the fusion head additionally classifies every
point feature and averages the resulting point logits with the shape logits,
so point features take part in the prediction directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    LinearLayer,
    Parameter,
    Tensor,
    add,
    concat,
    layer_normalize,
    mean_,
    mul,
    pool,
    relu,
    reshape,
    take_rows,
)
from .attention import AttentionParams, project_relative, ta_attention
from .geometry import NeighborhoodIndex, PointCloud, farthest_point_sample, knn


class ConfigError(ValueError):
    """Model configuration rejected before any work starts."""


BRANCH_MODES = ("hybrid", "mlp_only", "attn_only")
HEADS = ("spf", "traditional")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder pyramid and head selection.

    The defaults are the desk-scale setup used by the synthetic benchmark;
    ``full_scale_classification`` gives the 1024-point configuration (ratios
    1/2/2, neighborhoods 8/12/16, widths 64 to 256, one block per stage).
    """

    stages: int = 3
    ratios: tuple = (1, 2, 2)
    neighborhood_sizes: tuple = (4, 6, 8)
    channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    head: str = "spf"
    branch_mode: str = "hybrid"
    mlp_hidden_mult: int = 2
    head_hidden: tuple = (64,)
    head_pool: str = "max"
    ta_epsilon: float = 1e-6

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError("need at least one stage")
        for name in ("ratios", "neighborhood_sizes", "channels"):
            if len(getattr(self, name)) != self.stages:
                raise ConfigError(f"{name} must list one entry per stage")
        if any(r < 1 for r in self.ratios):
            raise ConfigError("ratios must be >= 1")
        if any(k < 1 for k in self.neighborhood_sizes):
            raise ConfigError("neighborhood sizes must be >= 1")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel widths must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"branch_mode must be one of {BRANCH_MODES}")
        if self.head_pool not in ("max", "mean"):
            raise ConfigError("head_pool must be max or mean")

    @classmethod
    def full_scale_classification(cls) -> "ModelConfig":
        return cls(stages=3, ratios=(1, 2, 2), neighborhood_sizes=(8, 12, 16),
                   channels=(64, 128, 256), blocks_per_stage=1,
                   mlp_hidden_mult=4, head_hidden=(512, 256))

    def stage_point_counts(self, n_points: int) -> list[int]:
        """Surviving points per stage: floor(previous / ratio), minimum 1."""
        counts = []
        n = n_points
        for r in self.ratios:
            if r > 1:
                n = max(1, n // r)
            counts.append(n)
        return counts

    def validate_for_points(self, n_points: int):
        for s, (count, k) in enumerate(zip(self.stage_point_counts(n_points), self.neighborhood_sizes)):
            if k > count:
                raise ConfigError(
                    f"stage {s}: neighborhood size {k} exceeds the {count} surviving points")

    def with_branch_mode(self, mode: str) -> "ModelConfig":
        return replace(self, branch_mode=mode)

    def with_head(self, head: str) -> "ModelConfig":
        return replace(self, head=head)


class MtBlock:
    """One hybrid block; ``residual`` is set iff input and output widths match."""

    def __init__(self, c_in: int, c: int, *, mlp_hidden: int, ta_epsilon: float,
                 rng, dtype, name: str):
        self.c_in = c_in
        self.c = c
        self.fc1 = LinearLayer(c_in, c, rng=rng, dtype=dtype, name=f"{name}.fc1")
        self.mlp1 = LinearLayer(c, mlp_hidden, rng=rng, dtype=dtype, name=f"{name}.mlp1")
        self.mlp2 = LinearLayer(mlp_hidden, c, rng=rng, dtype=dtype, name=f"{name}.mlp2")
        self.attn = AttentionParams.build(c, ta_enabled=True, epsilon=ta_epsilon,
                                          rng=rng, dtype=dtype, name=f"{name}.attn")
        self.fc2 = LinearLayer(2 * c, c, rng=rng, dtype=dtype, name=f"{name}.fc2")
        self.norm_gain = Parameter(f"{name}.norm.gain", np.ones(c, dtype=dtype))
        self.norm_shift = Parameter(f"{name}.norm.shift", np.zeros(c, dtype=dtype))
        self.residual = c_in == c

    def forward(self, x: Tensor, nbr: NeighborhoodIndex, branch_mode="hybrid",
                collect_traces=False):
        n = x.data.shape[0]
        h = self.fc1(x)
        if branch_mode in ("hybrid", "mlp_only"):
            m = relu(self.mlp2(relu(project_relative(h, nbr, self.mlp1))))
            mlp_out = pool(m, axis=1, mode="max")
        else:
            mlp_out = Tensor(np.zeros((n, self.c), dtype=x.data.dtype))
        traces = None
        if branch_mode in ("hybrid", "attn_only"):
            attn_out, traces = ta_attention(h, nbr, self.attn, collect_traces=collect_traces)
        else:
            attn_out = Tensor(np.zeros((n, self.c), dtype=x.data.dtype))
        y = self.fc2(concat([mlp_out, attn_out], axis=1))
        y = layer_normalize(y, self.norm_gain.tensor, self.norm_shift.tensor)
        if self.residual:
            y = add(y, x)
        return (y, traces) if collect_traces else y

    def parameters(self):
        return (self.fc1.parameters() + self.mlp1.parameters() + self.mlp2.parameters()
                + self.attn.parameters() + self.fc2.parameters()
                + [self.norm_gain, self.norm_shift])


def mt_block_forward(features: Tensor, nbr: NeighborhoodIndex, block: MtBlock,
                     branch_mode="hybrid") -> Tensor:
    return block.forward(features, nbr, branch_mode=branch_mode)


class ClassifierHead:
    """The shared classifier map: linear layers with rectifiers between."""

    def __init__(self, c_in: int, hidden: tuple, num_classes: int, *, rng, dtype, name="head"):
        dims = [c_in, *hidden, num_classes]
        self.layers = [
            LinearLayer(dims[i], dims[i + 1], rng=rng, dtype=dtype, name=f"{name}.fc{i + 1}")
            for i in range(len(dims) - 1)
        ]

    def apply(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class SpfOutput:
    """Shape logits, per-point logits, and their elementwise mean."""

    shape_logit: Tensor
    point_logits: Tensor
    combined: Tensor


def spf_head_forward(point_features: Tensor, head: ClassifierHead, pool_mode="max") -> SpfOutput:
    """Classify the pooled shape feature and every point feature with the same
    map; the prediction is the mean of the averaged point logits and the shape
    logits. The shape path is computed exactly as the traditional head would."""
    n, c = point_features.data.shape
    pooled = reshape(pool(point_features, axis=0, mode=pool_mode), (1, c))
    shape_logit = head.apply(pooled)
    point_logits = head.apply(point_features)
    point_mean = mean_(point_logits, axis=0, keepdims=True)
    combined = mul(add(point_mean, shape_logit), 0.5)
    return SpfOutput(shape_logit=shape_logit, point_logits=point_logits, combined=combined)


def traditional_head_forward(point_features: Tensor, head: ClassifierHead, pool_mode="max") -> Tensor:
    """Max-pool then classify; only the pooled row contributes."""
    n, c = point_features.data.shape
    pooled = reshape(pool(point_features, axis=0, mode=pool_mode), (1, c))
    return head.apply(pooled)


@dataclass
class GeometryPlan:
    """Per-stage sampling indices and neighborhoods for one cloud.

    ``stage_indices[s]`` indexes the previous stage's surviving points (or is
    None when the ratio is 1 and every point survives); neighborhoods are built
    over each stage's surviving points in their original coordinates.
    """

    stage_indices: list
    neighborhoods: list
    stage_coords: list


def build_plan(coords: np.ndarray, config: ModelConfig) -> GeometryPlan:
    coords = np.asarray(coords, dtype=np.float64)
    indices, neighborhoods, stage_coords = [], [], []
    cur = coords
    for s in range(config.stages):
        ratio = config.ratios[s]
        if ratio == 1:
            indices.append(None)
        else:
            target = max(1, cur.shape[0] // ratio)
            idx = farthest_point_sample(cur, target)
            indices.append(idx)
            cur = cur[idx]
        k = config.neighborhood_sizes[s]
        if k > cur.shape[0]:
            raise ConfigError(f"stage {s}: neighborhood size {k} exceeds {cur.shape[0]} points")
        neighborhoods.append(knn(cur, cur, k, self_indices=np.arange(cur.shape[0])))
        stage_coords.append(cur)
    return GeometryPlan(indices, neighborhoods, stage_coords)


class PointMTClassifier:
    """Stem + staged hybrid blocks + one of the two classification heads."""

    def __init__(self, config: ModelConfig, num_classes: int, *, seed=0, dtype=np.float32):
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        self.config = config
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        c0 = config.channels[0]
        self.stem = LinearLayer(3, c0, rng=rng, dtype=self.dtype, name="stem.linear")
        self.stem_gain = Parameter("stem.norm.gain", np.ones(c0, dtype=self.dtype))
        self.stem_shift = Parameter("stem.norm.shift", np.zeros(c0, dtype=self.dtype))
        self.stages = []
        c_prev = c0
        for s in range(config.stages):
            c = config.channels[s]
            blocks = []
            for b in range(config.blocks_per_stage):
                blocks.append(MtBlock(
                    c_prev if b == 0 else c, c,
                    mlp_hidden=config.mlp_hidden_mult * c,
                    ta_epsilon=config.ta_epsilon,
                    rng=rng, dtype=self.dtype, name=f"stage{s}.block{b}"))
            self.stages.append(blocks)
            c_prev = c
        self.head = ClassifierHead(c_prev, config.head_hidden, num_classes,
                                   rng=rng, dtype=self.dtype)

    # ------------------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = self.stem.parameters() + [self.stem_gain, self.stem_shift]
        for blocks in self.stages:
            for block in blocks:
                params += block.parameters()
        params += self.head.parameters()
        names = [p.name for p in params]
        assert len(names) == len(set(names)), "parameter names must be unique"
        return params

    def parameter_groups(self) -> dict:
        groups = {"stem": self.stem.parameters() + [self.stem_gain, self.stem_shift]}
        for s, blocks in enumerate(self.stages):
            groups[f"stage{s}"] = [p for block in blocks for p in block.parameters()]
        groups["head"] = self.head.parameters()
        return groups

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.zero_grad()

    @staticmethod
    def _coords_of(cloud) -> np.ndarray:
        return cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud)

    def encode(self, cloud, plan: GeometryPlan | None = None, collect_traces=False):
        """Run stem and stages; returns per-stage features, the final features,
        the plan, and (optionally) per-stage attention traces."""
        coords = self._coords_of(cloud)
        if plan is None:
            self.config.validate_for_points(coords.shape[0])
            plan = build_plan(coords, self.config)
        x = Tensor(coords.astype(self.dtype, copy=False))
        f = relu(layer_normalize(self.stem(x), self.stem_gain.tensor, self.stem_shift.tensor))
        stage_features = []
        stage_traces = []
        for s, blocks in enumerate(self.stages):
            if plan.stage_indices[s] is not None:
                f = take_rows(f, plan.stage_indices[s])
            traces = None
            for block in blocks:
                if collect_traces:
                    f, traces = block.forward(f, plan.neighborhoods[s],
                                              branch_mode=self.config.branch_mode,
                                              collect_traces=True)
                else:
                    f = block.forward(f, plan.neighborhoods[s],
                                      branch_mode=self.config.branch_mode)
            stage_features.append(f)
            stage_traces.append(traces)
        if collect_traces:
            return stage_features, f, plan, stage_traces
        return stage_features, f, plan

    def forward(self, cloud, plan: GeometryPlan | None = None):
        """Returns an SpfOutput for the fusion head, a (1, num_classes) logits
        Tensor for the traditional head."""
        _, final, _ = self.encode(cloud, plan)
        if self.config.head == "spf":
            return spf_head_forward(final, self.head, self.config.head_pool)
        return traditional_head_forward(final, self.head, self.config.head_pool)

    def spf_output(self, cloud, plan: GeometryPlan | None = None) -> SpfOutput:
        """Fusion-head view regardless of the configured head (the classifier
        map is shared, so a traditionally-trained model can be inspected the
        same way)."""
        _, final, _ = self.encode(cloud, plan)
        return spf_head_forward(final, self.head, self.config.head_pool)

    def logits(self, cloud, plan: GeometryPlan | None = None) -> np.ndarray:
        out = self.forward(cloud, plan)
        t = out.combined if isinstance(out, SpfOutput) else out
        return t.data.reshape(-1)

    def predict(self, cloud, plan: GeometryPlan | None = None) -> int:
        return int(np.argmax(self.logits(cloud, plan)))


def encoder_forward(model: PointMTClassifier, cloud, plan=None):
    """Per-stage features plus the final feature matrix."""
    stage_features, final, _ = model.encode(cloud, plan)
    return stage_features, final


# batched execution --------------------------------------------------------


@dataclass
class BatchOutput:
    """Per-sample logits for a batch of equally-sized clouds."""

    shape_logits: Tensor                 # (B, num_classes)
    point_logits: Tensor | None          # (B, N_L, num_classes) for the fusion head
    combined: Tensor                     # (B, num_classes)


def merge_plans(plans, n_points: int, config: ModelConfig) -> GeometryPlan:
    """Fuse per-sample plans into one block-diagonal plan.

    Samples never share neighborhoods, so concatenating clouds and offsetting
    every index reproduces the per-sample computation exactly, one graph per
    batch instead of one per sample. All clouds must have ``n_points`` points.
    """
    b = len(plans)
    counts = config.stage_point_counts(n_points)
    indices, neighborhoods, stage_coords = [], [], []
    prev = n_points
    for s in range(config.stages):
        cur = counts[s]
        if plans[0].stage_indices[s] is None:
            indices.append(None)
        else:
            indices.append(np.concatenate(
                [plans[i].stage_indices[s] + i * prev for i in range(b)]))
        neighborhoods.append(NeighborhoodIndex(np.concatenate(
            [plans[i].neighborhoods[s].indices + i * cur for i in range(b)])))
        stage_coords.append(np.concatenate([plans[i].stage_coords[s] for i in range(b)]))
        prev = cur
    return GeometryPlan(indices, neighborhoods, stage_coords)


def forward_batch(model: PointMTClassifier, clouds, plans) -> BatchOutput:
    """One recorded graph for a whole batch of equally-sized clouds."""
    coords_list = [model._coords_of(c) for c in clouds]
    n = coords_list[0].shape[0]
    if any(c.shape[0] != n for c in coords_list):
        raise ConfigError("forward_batch needs equally-sized clouds")
    b = len(coords_list)
    merged = merge_plans(plans, n, model.config)
    _, final, _ = model.encode(np.concatenate(coords_list, axis=0), merged)
    n_l = final.data.shape[0] // b
    c = final.data.shape[1]
    grid = reshape(final, (b, n_l, c))
    pooled = pool(grid, axis=1, mode=model.config.head_pool)        # (B, C)
    shape_logits = model.head.apply(pooled)
    if model.config.head == "spf":
        point_logits = reshape(model.head.apply(final), (b, n_l, model.num_classes))
        point_mean = mean_(point_logits, axis=1)
        combined = mul(add(point_mean, shape_logits), 0.5)
        return BatchOutput(shape_logits, point_logits, combined)
    return BatchOutput(shape_logits, None, shape_logits)


def count_parameters(params) -> int:
    return int(sum(p.tensor.data.size for p in params))


def param_count(config: ModelConfig, num_classes: int = 40) -> int:
    """Total scalar parameters of a classifier built from ``config``."""
    return count_parameters(PointMTClassifier(config, num_classes).parameters())


def param_count_breakdown(config: ModelConfig, num_classes: int = 40) -> dict:
    model = PointMTClassifier(config, num_classes)
    breakdown = {name: count_parameters(ps) for name, ps in model.parameter_groups().items()}
    breakdown["total"] = sum(breakdown.values())
    return breakdown
