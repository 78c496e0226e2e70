"""
Localization maps without a post-hoc step
=========================================

A classifier that ends in global average pooling followed by a fully
connected layer can be rewritten as a 1x1 convolution followed by global
average pooling. The two give the same scores, and the 1x1 convolution's
output *is* the class activation map, so no second pass is needed.
"""

import numpy as np

from acol.locmaps import cam_posthoc, equivalence_report, normalize_map, select_map
from acol.tensor_core import ConvLayerParams, conv2d_forward, gap

rng = np.random.default_rng(0)

# features from some backbone: K channels on an 8x8 grid
K, C = 64, 10
s = rng.standard_normal((1, K, 8, 8))
w_fc = rng.standard_normal((K, C)) / np.sqrt(K)

###############################################################################
# Route 1: pool first, then the fully connected layer. The map is built
# afterwards from the same weights.
scores_fc = gap(s) @ w_fc
cam = cam_posthoc(s[0], w_fc, c=3)

###############################################################################
# Route 2: a 1x1 convolution sharing those weights, then pooling.
head = ConvLayerParams(np.ascontiguousarray(w_fc.T).reshape(C, K, 1, 1), np.zeros(C))
maps = conv2d_forward(s, head)
scores_conv = gap(maps)

print("score difference:", np.abs(scores_fc - scores_conv).max())
print("map difference:  ", np.abs(cam.grid - select_map(maps, 3).grid).max())

###############################################################################
# The same check over many random heads, in both precisions.
for dtype in (np.float64, np.float32):
    r = equivalence_report(trials=100, dtype=dtype)
    print(dtype.__name__, "worst logit diff %.1e, worst map diff %.1e" % (r["max_logit_diff"], r["max_map_diff"]))

###############################################################################
# Normalized map, ready for thresholding.
print(np.round(normalize_map(cam.grid), 2))
