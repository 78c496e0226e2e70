"""
Training two classifiers and fusing their maps
==============================================

A short run on the synthetic two-part objects. Each image holds a glyph
that names the category and an attached body that is nearly the same for
every category. Classifier A tends to fire on the glyph; once the glyph is
erased, classifier B has to use what is left. The fused map covers more of
the object than A's map alone.

This uses a reduced dataset and few epochs so it finishes in about a
minute; the command-line tool runs the full configuration.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from acol.locmaps import overlay_heatmap
from acol.synthdata import SynthConfig, generate
from acol.trainer import TrainConfig, evaluate_model, localize_batch, prepare, train

out = Path("demo_output")
out.mkdir(exist_ok=True)

train_set, test_set, _ = generate(SynthConfig(num_train=240, num_test=40), seed=3)
config = TrainConfig(epochs=6, warmup_epochs=2, patience=0, seed=3)
result = train(train_set, config)
for row in result.history:
    print(row)

###############################################################################
# Metrics for the fused map and for classifier A's map on its own, both
# boxed the same way.
fused, only_a = evaluate_model(result.params, test_set, config)
print("fused:", fused.to_json())
print("A only:", only_a.to_json())

###############################################################################
# Overlays for the first test image: A, B and fused.
images, labels = prepare(test_set.samples[:1])
row = localize_batch(result.params, images, config, labels)[0]
img = test_set[0].image
panels = [overlay_heatmap(img, row[k]) for k in ("map_a", "map_b", "fused")]
strip = np.concatenate([(img.transpose(1, 2, 0) * 255).astype(np.uint8)] + panels, axis=1)
Image.fromarray(strip).save(out / "maps.png")
print("box from fused map:", row["boxes"][0], "ground truth:", test_set[0].gt_box)
