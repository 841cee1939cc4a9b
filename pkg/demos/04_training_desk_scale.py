"""A short desk-scale training run.

Trains the matcher on a handful of synthetic pairs for a couple of minutes
and prints the loss/precision trajectory. The acceptance suite runs the full
experiment (32 pairs, 500 steps); this demo keeps it small.
"""
from pillarmatch import HyperParams, SceneConfig, TrainRun, generate_synthetic_pair, train
from pillarmatch.pairio import preprocess_pair

hyper = HyperParams(
    src_keypoints=24, tgt_keypoints=24, pillar_points=16,
    feature_depth=16, attention_heads=4, attention_layers=4,
    sinkhorn_iterations=50, positional_hidden=(16, 32),
)
scene = SceneConfig(point_count=1200, overlap=0.9, rotation_bound=0.02,
                    translation_bound=0.15, noise_sigma=0.002)
pairs = [preprocess_pair(generate_synthetic_pair(200 + k, scene), hyper) for k in range(8)]
print(f"dataset: {len(pairs)} pairs, "
      f"{sum(len(p.labels.matched) for p in pairs)} ground-truth matches total")

run = TrainRun(epochs=40, batch_size=4, seed=0, loss_kind="nllp", learning_rate=1e-4)
result = train(
    pairs, run, hyper,
    log=lambda r: print(
        f"epoch {r['epoch']:3d}  loss {r['loss']:10.2f}  "
        f"precision {r['precision']:.3f}  accuracy {r['accuracy']:.3f}"
    ) if r["epoch"] % 5 == 0 else None,
)
first, last = result.history[0], result.history[-1]
print(f"\nloss {first['loss']:.1f} -> {last['loss']:.1f}, "
      f"precision {first['precision']:.3f} -> {last['precision']:.3f} "
      f"in {result.steps} optimizer steps")
