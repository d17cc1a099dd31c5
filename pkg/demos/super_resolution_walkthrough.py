"""
Training a small super-resolution network on a synthetic corpus
================================================================

Run with ``python demos/super_resolution_walkthrough.py``. Takes about a
minute on one CPU core.
"""

# %%
# A tiny corpus: 8 subjects with 3 samples each, split by subject.
import tempfile

import numpy as np

from esisr import (EsisrConfig, LossWeights, TrainConfig, build, degrade, psnr, resize, sharpness, ssim,
                   super_resolve, train)
from esisr.corpus import gen_corpus
from esisr.imgcore import PatchSet, ResizeMethod, extract_patches, to_luma

root = tempfile.mkdtemp()
corpus = gen_corpus(seed=0, n_subjects=8, samples_per_subject=3, out_dir=root, width=96, height=96)
images = {s: [to_luma(corpus.load(e)) for e in corpus.select(s)] for s in ("train", "val", "test")}
print({s: len(v) for s, v in images.items()})

# %%
# Training pairs are HR crops and their bicubic downscales.
def patch_set(imgs, stride):
    ps = PatchSet(32, stride, 2)
    for img in imgs:
        ps.extend(extract_patches(img, 32, stride, 2))
    return ps

train_set, val_set = patch_set(images["train"], 16), patch_set(images["val"], 32)
print(len(train_set), "training pairs,", len(val_set), "validation pairs")

# %%
# The default x2 network has under 40k parameters.
model = build(EsisrConfig(scale=2), seed=0)
print("parameters:", model.param_count())

report = train(model, train_set, val_set, TrainConfig(epochs=5, patches_per_epoch=800, lr=2e-3), LossWeights())
for e in report.epochs:
    print(f"epoch {e.epoch}: val loss {e.val_loss:.4f}  psnr {e.val_psnr:.2f}")

# %%
# Compare against plain bicubic on the held-out subjects.
rows = []
for hr in images["test"]:
    lr = degrade(hr, 2)
    sr = super_resolve(model, lr)
    bic = resize(lr, hr.width, hr.height, ResizeMethod.CUBIC)
    rows.append([psnr(sr, hr), psnr(bic, hr), ssim(sr, hr), ssim(bic, hr),
                 abs(sharpness(sr) - sharpness(hr)), abs(sharpness(bic) - sharpness(hr))])
m = np.mean(rows, axis=0)
print(f"PSNR  sr {m[0]:.2f}  bicubic {m[1]:.2f}")
print(f"SSIM  sr {m[2]:.4f}  bicubic {m[3]:.4f}")
print(f"|dS|  sr {m[4]:.3f}  bicubic {m[5]:.3f}")
