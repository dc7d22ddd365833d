"""
Segment, expand, recover
========================

The full workflow on synthetic data: a segmentation network finds a bright
blob, the blob is grown by a few pixels and removed, and the inpainting
network fills the gap. Both networks are trained briefly here.
"""

import numpy as np

from pconvnet.imageproc import dilate, synthesize_blobs, synthesize_masks, synthesize_textures
from pconvnet.metrics import dice
from pconvnet.model import ModelConfig, inpaint_forward, seg_forward
from pconvnet.trainer import PairedDataset, TrainConfig, train_inpaint, train_segment

###############################################################################
# Segmentation on blobs.

images, labels = synthesize_blobs(seed=5, size=32, count=60)
seg = train_segment(PairedDataset(images[:50], labels[:50]),
                    ModelConfig(variant="seg_unet"),
                    TrainConfig(lr_initial=2e-3, lr_finetune=5e-4, batch_size=4, max_iters=150))
prob = seg_forward(seg.model, images[50:, None].astype(np.float32)).data[:, 0]
found = prob > 0.5
print("held-out Dice:", np.round([dice(found[i], labels[50 + i].astype(bool), True)
                                  for i in range(5)], 3))

###############################################################################
# Turn the segmentation into a hole mask (1 = keep, 0 = remove) and grow the
# hole by 2 pixels so its rim is also recovered.

hole_mask = dilate((~found[0]).astype(np.float32), 2)
print("hole fraction before/after growing:",
      round(float(found[0].mean()), 3), round(float((hole_mask == 0).mean()), 3))

###############################################################################
# Recovery with an inpainting network trained on textures of the same size.

tex = synthesize_textures(seed=1, size=32, count=40)
holes = np.stack(synthesize_masks(seed=2, width=32, height=32, count=40))
inp = train_inpaint(PairedDataset(tex, holes), ModelConfig(),
                    TrainConfig(lr_initial=5e-3, lr_finetune=1.25e-3, batch_size=4,
                                max_iters=150))
x = images[50:51, None].astype(np.float32)
m = hole_mask[None, None]
out, _ = inpaint_forward(inp.model, x * m, m)
recovered = np.where(m > 0, x, np.clip(out.data, 0, 1))
print("mean intensity inside the removed region:", float(recovered[m == 0].mean()))
