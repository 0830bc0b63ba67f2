"""The finite-difference verification suite behind the ``gradcheck`` command.

Every fragment is built in float64, as the checker requires. The suite covers
each layer type, the temperature-adaptive attention, a full hybrid block, and
an end-to-end two-class model on a 16-point cloud.
"""

from __future__ import annotations

import numpy as np

from .autodiff import LinearLayer, Parameter, Tensor, grad_check, layer_normalize, mul, pool, softmax, sum_
from .attention import AttentionParams, ta_attention
from .geometry import knn
from .model import ModelConfig, MtBlock, PointMTClassifier, SpfOutput, build_plan
from .training import cross_entropy

F64 = np.float64


def _weighted_sum(out: Tensor, rng) -> Tensor:
    # a fixed random projection makes the scalar sensitive to every output
    w = Tensor(rng.standard_normal(out.data.shape))
    return sum_(mul(out, w))


def check_linear_layer(seed=0) -> float:
    rng = np.random.default_rng(seed)
    layer = LinearLayer(3, 2, rng=rng, dtype=F64, name="check.linear")
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    w = rng.standard_normal((3, 2))

    def fragment():
        return sum_(mul(layer(x), Tensor(w)))

    wrt = [("input", x)] + [(p.name, p.tensor) for p in layer.parameters()]
    return grad_check(fragment, wrt)


def check_softmax_temperature(seed=0) -> float:
    rng = np.random.default_rng(seed)
    scores = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    temp = Tensor(rng.uniform(0.5, 2.0, (1, 3)), requires_grad=True)
    w = rng.standard_normal((4, 3))

    def fragment():
        return sum_(mul(softmax(scores, axis=0, temperature=temp), Tensor(w)))

    return grad_check(fragment, [("scores", scores), ("temperature", temp)])


def check_max_pool(seed=0) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w = rng.standard_normal(4)

    def fragment():
        return sum_(mul(pool(x, axis=0, mode="max"), Tensor(w)))

    return grad_check(fragment, [("input", x)])


def check_layer_norm(seed=0) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    gain = Parameter("check.norm.gain", rng.uniform(0.5, 1.5, 6))
    shift = Parameter("check.norm.shift", rng.standard_normal(6))
    w = rng.standard_normal((4, 6))

    def fragment():
        return sum_(mul(layer_normalize(x, gain.tensor, shift.tensor), Tensor(w)))

    return grad_check(fragment, [("input", x), (gain.name, gain.tensor), (shift.name, shift.tensor)])


def check_ta_attention(seed=0, n=6, k=3, c=5) -> float:
    rng = np.random.default_rng(seed)
    params = AttentionParams.build(c, ta_enabled=True, rng=rng, dtype=F64, name="check.attn")
    coords = rng.standard_normal((n, 3))
    nbr = knn(coords, coords, k, self_indices=np.arange(n))
    x = Tensor(rng.standard_normal((n, c)), requires_grad=True)
    w = rng.standard_normal((n, c))

    def fragment():
        z, _ = ta_attention(x, nbr, params)
        return sum_(mul(z, Tensor(w)))

    wrt = [("features", x)] + [(p.name, p.tensor) for p in params.parameters()]
    return grad_check(fragment, wrt)


def check_mt_block(seed=0, n=8, k=3, c=6) -> float:
    rng = np.random.default_rng(seed)
    block = MtBlock(c, c, mlp_hidden=2 * c, ta_epsilon=1e-6, rng=rng, dtype=F64,
                    name="check.block")
    coords = rng.standard_normal((n, 3))
    nbr = knn(coords, coords, k, self_indices=np.arange(n))
    x = Tensor(rng.standard_normal((n, c)), requires_grad=True)
    w = rng.standard_normal((n, c))

    def fragment():
        return sum_(mul(block.forward(x, nbr), Tensor(w)))

    wrt = [("features", x)] + [(p.name, p.tensor) for p in block.parameters()]
    return grad_check(fragment, wrt)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(stages=3, ratios=(1, 2, 2), neighborhood_sizes=(2, 3, 4),
                       channels=(8, 8, 8), mlp_hidden_mult=2, head_hidden=(8,))


def check_end_to_end(seed=0, n=16) -> float:
    rng = np.random.default_rng(seed)
    model = PointMTClassifier(tiny_model_config(), num_classes=2, seed=seed, dtype=F64)
    coords = rng.standard_normal((n, 3))
    plan = build_plan(coords, model.config)

    def fragment():
        out = model.forward(coords, plan)
        logits = out.combined if isinstance(out, SpfOutput) else out
        return cross_entropy(logits, 1)

    wrt = [(p.name, p.tensor) for p in model.parameters()]
    return grad_check(fragment, wrt)


def run_gradient_suite(full=True, seed=0):
    """(name, max relative error) for every fragment in the suite."""
    results = [
        ("linear_layer", check_linear_layer(seed)),
        ("softmax_per_channel_temperature", check_softmax_temperature(seed)),
        ("max_pool", check_max_pool(seed)),
        ("layer_norm", check_layer_norm(seed)),
        ("ta_attention", check_ta_attention(seed)),
        ("mt_block", check_mt_block(seed)),
    ]
    if full:
        results.append(("end_to_end_16pt_2class", check_end_to_end(seed)))
    return results
