#!/usr/bin/env python3
"""Why the fusion head helps: point-versus-shape prediction agreement.

Trains two small models that differ only in the classification head, then
measures, per test sample, the mean KL divergence between each point's
predicted distribution and the pooled shape prediction, plus the fraction of
points whose own argmax already names the true class. Training the points to
participate in the prediction pulls both statistics in the model's favor.
"""

from pointmt import ModelConfig, PointMTClassifier, SynthConfig, TrainConfig, fit, generate_synthetic
from pointmt.analysis import spf_statistics
from pointmt.training import build_plans

classes = ("sphere", "cube", "torus", "plane")
train = generate_synthetic(SynthConfig(classes=classes, samples_per_class=24,
                                       points_per_cloud=96, seed=42))
test = generate_synthetic(SynthConfig(classes=classes, samples_per_class=8,
                                      points_per_cloud=96, seed=43), split="test")

config = ModelConfig(neighborhood_sizes=(4, 6, 8))
train_plans = build_plans(train, config)
test_plans = build_plans(test, config)

summary = {}
for head in ("spf", "traditional"):
    model = PointMTClassifier(config.with_head(head), num_classes=len(classes), seed=0)
    records = fit(model, train, test, TrainConfig(epochs=10, cycle_length=10, seed=0),
                  train_plans=train_plans, test_plans=test_plans)
    _, agg = spf_statistics(model, test, plans=test_plans)
    summary[head] = (records[-1].test_acc, agg["mean_kl"], agg["mean_correct_point_fraction"])
    print(f"{head:12s} test acc {summary[head][0]:.3f}  mean point-vs-shape KL "
          f"{summary[head][1]:.3f}  correct-point fraction {summary[head][2]:.3f}")

spf, trad = summary["spf"], summary["traditional"]
print("\nfusion head vs traditional head:")
print(f"  KL  {spf[1]:.3f} < {trad[1]:.3f}  (points agree more with the shape)")
print(f"  frac {spf[2]:.3f} > {trad[2]:.3f}  (more points are right on their own)")
