"""
What the second classifier gets to see
======================================

Classifier A's map at the target category is min-max normalized and every
cell above the erase threshold is zeroed in the shared features before they
reach classifier B. Higher thresholds erase less; the erased sets are
nested.
"""

import numpy as np

from acol import acol_net as net
from acol.synthdata import SynthConfig, generate
from acol.trainer import prepare

train, _, _ = generate(SynthConfig(num_train=4, num_test=4), seed=1)
images, labels = prepare(train.samples)
params = net.init_params(seed=0)

record = net.acol_forward(images, params, delta=0.6, labels=labels)
map_a = record.maps_a[0, labels[0]]

###############################################################################
# Erase masks at a few thresholds (1 = erased).
for delta in (0.5, 0.6, 0.7, 0.8, 0.9):
    mask = net.make_erase_mask(map_a, delta)
    print(f"delta={delta}: {int(mask.sum())} cells erased")
    print(mask.astype(int))

###############################################################################
# Every channel is zeroed at an erased cell, and branch B's gradient never
# reaches those cells.
_, _, parts = net.acol_loss_and_grads(record, labels, params, return_parts=True)
m = record.mask
print("erased features all zero:", not record.S_erased.transpose(0, 2, 3, 1)[m].any())
print("B gradient at erased cells:", np.abs(parts["grad_S_from_b"].transpose(0, 2, 3, 1)[m]).max(initial=0.0))
