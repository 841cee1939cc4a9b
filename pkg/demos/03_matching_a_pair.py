"""Untrained end-to-end inference on one synthetic pair.

Runs the full pipeline (pillars, attention graph, Sinkhorn) with freshly
initialized weights and reads out mutual-argmax matches. Expect noise: the
point is the data flow, not the quality; see demo 04 for a trained model.
"""
import numpy as np

from pillarmatch import HyperParams, ModelParameters, SceneConfig, generate_synthetic_pair
from pillarmatch.learn import match_metrics
from pillarmatch.pairio import preprocess_pair
from pillarmatch.pipeline import match_pair

hyper = HyperParams(
    src_keypoints=24, tgt_keypoints=24, pillar_points=16,
    feature_depth=16, attention_heads=4, attention_layers=4,
    sinkhorn_iterations=50, positional_hidden=(16, 32),
)
scene = SceneConfig(point_count=1200, overlap=0.8, rotation_bound=0.05,
                    translation_bound=0.2, noise_sigma=0.003)
pair = preprocess_pair(generate_synthetic_pair(7, scene), hyper)
print(f"labels: {len(pair.labels.matched)} matched, "
      f"{len(pair.labels.unmatched_rows)} unmatched rows, "
      f"{len(pair.labels.ignored_rows)} ignored rows")

params = ModelParameters.initialize(hyper, seed=0)
result = match_pair(params, pair)
probs = result.assignment.probabilities
print(f"assignment matrix: {probs.shape}, rows sum to {probs.sum(axis=1)[:3].round(4)} ...")
print(f"predicted matches: {len(result.matches.pairs)}")
print("metrics:", match_metrics(result.matches, pair.labels))
