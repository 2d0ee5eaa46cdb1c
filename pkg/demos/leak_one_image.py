"""Recover a private training image from a single client's gradient.

A client computes the gradient of its loss on one image and ships it to the
server. Anyone who sees that gradient and the model weights can search for
an input whose gradient matches. On a small sigmoid MLP the search lands on
the original image to within floating point noise.

    python demos/leak_one_image.py
"""
from gradleak import data
from gradleak.attacks import AttackConfig, infer_label, run_attack
from gradleak.federation import client_update
from gradleak.models import build_mlp, init_params

spec = build_mlp(num_classes=4)
params = init_params(spec, seed=0)
sample = data.synth_dataset(seed=0, n=4, num_classes=4, size=8)[2]

# what the server receives
update = client_update(spec, params, sample.pixels, [sample.label])
print("label read off the head gradient:", infer_label(update, spec), "true:", sample.label)

for method in ("dlg", "idlg"):
    cfg = AttackConfig(method=method, seed=0, restarts=5)
    res = run_attack(spec, params, update, cfg, ground_truth=sample.pixels)
    print(f"{method:5s} label={res.label} iterations={res.iterations:4d} "
          f"objective={res.final_objective:.2e} mse={res.mse:.2e} ssim={res.ssim:.4f}")
