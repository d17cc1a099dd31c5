"""
Does upscaling change verification accuracy?
============================================

Every image is prepared (left alone, interpolated, or super-resolved),
turned into a feature vector, and compared against every other image.
Run with ``python demos/verification_walkthrough.py``.
"""

# %%
import tempfile

from esisr import EsisrConfig, build
from esisr.bsif import generate_test_bank
from esisr.corpus import gen_corpus
from esisr.imgcore import ResizeMethod
from esisr.verify import (Bsif, NoRedimension, Resize, SuperResolve, ToyEmbedder, evaluate_pipeline,
                          format_report, labeled_images, run_grid)

corpus = gen_corpus(seed=3, n_subjects=10, samples_per_subject=3, out_dir=tempfile.mkdtemp(), width=64, height=64)
images = labeled_images(corpus)

# %%
# An untrained head adds random texture that BSIF picks up readily, so the
# stand-in network gets a zeroed head and reproduces bicubic exactly.
# Swap in a trained checkpoint (esisr.load_checkpoint) for real runs.
untrained = build(EsisrConfig(scale=2), seed=0)
untrained.zero_head()
preps = [NoRedimension(), Resize(ResizeMethod.AREA, 2), Resize(ResizeMethod.CUBIC, 3), SuperResolve(untrained)]
extractors = [ToyEmbedder(), Bsif(generate_test_bank(seed=0, k=5, n_bits=5))]
results = run_grid(images, preps, extractors)
print(format_report(results))

# %%
# One configuration in detail: the DET curve trades false matches for
# false non-matches as the distance threshold moves.
r = evaluate_pipeline(images, prep=NoRedimension(), extractor=extractors[1])
print(f"EER {r.eer:.3f} at distance {r.eer_threshold:.3f}; FNMR at 10% FMR {r.fnmr:.3f}")
for t, fmr, fnmr in list(zip(r.det.thresholds, r.det.fmr, r.det.fnmr))[:: max(1, len(r.det.thresholds) // 8)]:
    print(f"  t={t:.3f}  fmr={fmr:.3f}  fnmr={fnmr:.3f}")
