"""
Training a small inpainting network
===================================

Synthetic textures with random blob holes are enough to watch the network
learn. The run below is short; increase ``ITERS`` for better recoveries.
"""

import numpy as np

from pconvnet.imageproc import synthesize_masks, synthesize_textures
from pconvnet.metrics import psnr, ssim
from pconvnet.model import ModelConfig, inpaint_forward
from pconvnet.trainer import PairedDataset, TrainConfig, train_inpaint

ITERS = 200

images = synthesize_textures(seed=1, size=64, count=60)
masks = np.stack(synthesize_masks(seed=2, width=64, height=64, count=60))
train = PairedDataset(images[:50], masks[:50])


def report(record):
    if record["iter"] % 50 == 0:
        print(f"iter {record['iter']:4d}  loss {record['total']:.4f}")


config = TrainConfig(lr_initial=5e-3, lr_finetune=1.25e-3, batch_size=4, max_iters=ITERS)
result = train_inpaint(train, ModelConfig(), config, on_step=report)

###############################################################################
# Compare against filling the hole with the mean of the valid pixels.

x = images[50:, None].astype(np.float32)
m = masks[50:, None]
out, _ = inpaint_forward(result.model, x * m, m)
for i in range(3):
    truth, hole = x[i, 0].astype(np.float64), m[i, 0] == 0
    comp = np.where(hole, np.clip(out.data[i, 0], 0, 1), truth)
    fill = np.where(hole, truth[~hole].mean(), truth)
    print(f"image {i}: hole PSNR {psnr(comp, truth, region=hole):.2f} dB "
          f"(mean fill {psnr(fill, truth, region=hole):.2f} dB), "
          f"SSIM {ssim(comp, truth):.4f}")
