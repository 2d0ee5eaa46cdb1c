"""Laplace noise on the shared gradient versus reconstruction quality.

Every sample is attacked at each noise level with the same underlying noise
draw (only its scale changes), so the curve shows the effect of the level
rather than luck of the draw.

    python demos/noise_defense.py
"""
import numpy as np

from gradleak import data
from gradleak.attacks import AmbiguousLabelError, AttackConfig, run_attack
from gradleak.defense import DefenseConfig, perturb
from gradleak.federation import client_update
from gradleak.metrics import asr
from gradleak.models import build_mlp, init_params

LEVELS = (0, 100, 200, 300, 400)
spec = build_mlp(num_classes=4)
params = init_params(spec, seed=1)
samples = data.synth_dataset(seed=1, n=12, num_classes=4, size=8)

print("level  mean SSIM  ASR")
for level in LEVELS:
    scores = []
    for j, s in enumerate(samples):
        clean = client_update(spec, params, s.pixels, [s.label])
        noisy = perturb(clean, DefenseConfig("laplace", level=level, seed=j))
        try:
            r = run_attack(spec, params, noisy, AttackConfig(method="cpl", seed=j),
                           ground_truth=s.pixels)
        except AmbiguousLabelError:
            # noise hid the label; the attacker has nothing to work with
            scores.append(0.0)
            continue
        scores.append(r.ssim)
    print(f"{level:5d}  {np.mean(scores):9.3f}  {asr(scores):.2f}")
