"""
Partial convolution on a masked image
=====================================

A partial convolution only reads valid pixels and rescales each window by how
many of them it saw. This script builds a small masked image, runs a few
layers, and prints how the hole closes as the mask is updated.
"""

import numpy as np

from pconvnet.pconv import LayerSpec, MaskedFeature, pconv_forward, propagate_mask_chain
from pconvnet.tensor import Tensor

###############################################################################
# A constant image with a square hole. Averaging weights make the effect of
# renormalization easy to read: every valid output is exactly 1.

image = np.ones((1, 1, 12, 12), np.float32)
mask = np.ones((1, 1, 12, 12), np.float32)
mask[..., 3:10, 3:10] = 0
box = Tensor(np.full((1, 1, 3, 3), 1 / 9, np.float32))

feat = MaskedFeature(Tensor(image * mask), mask)
for layer in range(4):
    feat = pconv_forward(feat, box, None, stride=1, pad=1)
    valid = feat.mask > 0
    print(f"layer {layer + 1}: {int((~valid).sum()):3d} hole pixels, "
          f"valid outputs in [{feat.features.data[valid].min():.4f}, "
          f"{feat.features.data[valid].max():.4f}]")

###############################################################################
# The same schedule from the masks alone.

chain = propagate_mask_chain(mask[0, 0], [LayerSpec(3, 1, 1)] * 4)
print("hole sizes:", [int((m == 0).sum()) for m in chain])
