"""Command-line interface: ``esisr <command> [options]``.

Exit codes: 0 on success, 2 for usage errors, 1 for runtime failures. A JSON
file passed with ``--config`` supplies defaults for any flag, either flat
(``{"epochs": 5}``) or keyed by command (``{"train": {"epochs": 5}}``);
explicit flags win. ``ESISR_MODEL_DIR`` is the default directory for model
checkpoints named ``esisr_x<scale>.ckpt``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

MODEL_DIR_ENV = "ESISR_MODEL_DIR"
log = logging.getLogger("esisr")


class UsageError(Exception):
    pass


def model_dir() -> Path:
    return Path(os.environ.get(MODEL_DIR_ENV, "."))


def default_model_path(scale: int) -> Path:
    return model_dir() / f"esisr_x{scale}.ckpt"


def _resolve_model(path, scale):
    from .model import load_checkpoint

    if path is None:
        path = default_model_path(scale)
    elif not Path(path).exists() and (model_dir() / path).exists():
        path = model_dir() / path
    model = load_checkpoint(path)
    if scale is not None and model.config.scale != scale:
        raise UsageError(f"model {path} is x{model.config.scale}, but --scale {scale} was requested")
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    from .corpus import gen_corpus

    m = gen_corpus(args.seed, args.subjects, args.samples, args.out, args.size, args.size, gray=args.gray)
    print(f"wrote {len(m)} images for {args.subjects} subjects to {m.root}")
    return 0


def _patch_set(images, patch, stride, scale):
    from .imgcore import PatchSet, extract_patches

    ps = PatchSet(patch, stride, scale)
    for e, img in images:
        ps.extend(extract_patches(img, patch, stride, scale, source_id=e.path))
    return ps


def cmd_train(args) -> int:
    from .corpus import CorpusManifest
    from .imgcore import mod_crop, to_luma
    from .loss import LossWeights
    from .model import EsisrConfig, build, save_checkpoint
    from .trainer import TrainConfig, train

    if args.patch_size % args.scale:
        raise UsageError(f"--patch-size {args.patch_size} is not divisible by --scale {args.scale}")
    manifest = CorpusManifest.read(args.corpus_dir)
    load = lambda split: [(e, mod_crop(to_luma(manifest.load(e)), args.scale)) for e in manifest.select(split)]
    train_imgs, val_imgs = load("train"), load("val")
    if not train_imgs or not val_imgs:
        raise UsageError("the corpus needs both train and val entries")
    train_set = _patch_set(train_imgs, args.patch_size, args.patch_size // 2, args.scale)
    val_set = _patch_set(val_imgs, args.patch_size, args.patch_size, args.scale)

    cfg = EsisrConfig(scale=args.scale, upsampler=args.upsampler, dropout_rate=args.dropout)
    model = build(cfg, seed=args.seed)
    weights = LossWeights.normalized(args.w_sharp, args.w_ssim, args.w_psnr, form=args.loss_form)
    tcfg = TrainConfig(epochs=args.epochs, patches_per_epoch=args.patches_per_epoch, batch_size=args.batch_size,
                       patch_size=args.patch_size, lr=args.lr, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"esisr_x{args.scale}.ckpt"
    report = train(model, train_set, val_set, tcfg, weights, log_path=out / "train_log.csv",
                   loss_log_path=out / "loss_log.csv", checkpoint_path=ckpt)
    save_checkpoint(model, ckpt)
    print(f"params={model.param_count()} epochs={len(report.epochs)} best_epoch={report.best_epoch} "
          f"val_loss={report.initial_val_loss:.5f}->{report.best_val_loss:.5f} checkpoint={ckpt}")
    return 0


def cmd_sr(args) -> int:
    from .imgcore import load_image, save_image
    from .model import super_resolve

    if args.model is None and args.scale is None:
        raise UsageError("give --model or --scale")
    model = _resolve_model(args.model, args.scale)
    out = super_resolve(model, load_image(args.input), args.self_ensemble)
    save_image(out, args.output)
    print(f"{args.output}: {out.width}x{out.height}")
    return 0


def cmd_metrics(args) -> int:
    from .imgcore import load_image, to_luma
    from .metrics import psnr, sharpness, ssim

    a, b = to_luma(load_image(args.a)), to_luma(load_image(args.b))
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    sa, sb = sharpness(a), sharpness(b)
    print(f"psnr={psnr(a, b):.2f} ssim={ssim(a, b):.4f} sharpness_a={sa:.4f} sharpness_b={sb:.4f} "
          f"delta={abs(sa - sb):.4f}")
    return 0


def cmd_resize(args) -> int:
    from .imgcore import ResizeMethod, degrade, load_image, resize, save_image

    img = load_image(args.input)
    if args.down:
        out = degrade(img, args.scale)
    else:
        out = resize(img, img.width * args.scale, img.height * args.scale, ResizeMethod(args.method))
    save_image(out, args.output)
    print(f"{args.output}: {out.width}x{out.height}")
    return 0


def _bank(args):
    from .bsif import generate_test_bank, load_filterbank

    if args.bank:
        return load_filterbank(args.bank)
    return generate_test_bank(args.bank_seed, args.bank_k, args.bank_bits)


def cmd_bsif(args) -> int:
    import csv

    from .bsif import bsif_descriptor
    from .imgcore import load_image

    bank = _bank(args)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    n = args.grid_rows * args.grid_cols * 2**bank.n_bits
    if args.header:
        writer.writerow(["path"] + [f"v{i}" for i in range(n)])
    for path in args.images:
        d = bsif_descriptor(load_image(path), bank, args.grid_rows, args.grid_cols, args.normalization)
        writer.writerow([path] + [f"{v:.8g}" for v in d.values])
    return 0


def parse_prep(text: str, models_from=None, cache=None):
    """``none``, ``<area|cubic|linear|nearest>:<s>`` or ``esisr:<s>``."""
    from .imgcore import ResizeMethod
    from .verify import NoRedimension, Resize, SuperResolve

    if text == "none":
        return NoRedimension()
    name, _, s = text.partition(":")
    if not s.isdigit() or int(s) < 1:
        raise UsageError(f"bad --prep value {text!r}; expected none, <method>:<scale> or esisr:<scale>")
    scale = int(s)
    if name == "esisr":
        cache = {} if cache is None else cache
        if scale not in cache:
            path = None if models_from is None else Path(models_from) / f"esisr_x{scale}.ckpt"
            cache[scale] = _resolve_model(path, scale)
        return SuperResolve(cache[scale])
    try:
        return Resize(ResizeMethod(name), scale)
    except ValueError:
        raise UsageError(f"unknown resize method {name!r}") from None


def _extractors(args):
    from .verify import Bsif, ToyEmbedder

    out = []
    for name in args.extractor:
        if name == "toy":
            out.append(ToyEmbedder())
        elif name == "bsif":
            out.append(Bsif(_bank(args)))
        else:
            raise UsageError(f"unknown extractor {name!r}")
    return out


def _results(args):
    from .corpus import CorpusManifest
    from .verify import EmbeddingFile, NoRedimension, evaluate_pipeline, labeled_images, run_grid

    if args.embeddings:
        if args.corpus:
            raise UsageError("use either --embeddings or --corpus, not both")
        if args.prep not in (None, ["none"]):
            raise UsageError("--prep is not applicable to precomputed --embeddings")
        return [evaluate_pipeline(None, None, NoRedimension(), EmbeddingFile(args.embeddings),
                                  args.fmr_target, args.max_nonmated, args.seed)]
    if not args.corpus:
        raise UsageError("one of --embeddings or --corpus is required")
    cache = {}
    preps = [parse_prep(p, args.model_dir, cache) for p in (args.prep or ["none"])]
    manifest = CorpusManifest.read(args.corpus)
    split = None if args.split == "all" else args.split
    images = labeled_images(manifest, split)
    return run_grid(images, preps, _extractors(args), None, args.fmr_target, args.max_nonmated, args.seed)


def cmd_verify(args) -> int:
    from .verify import format_report, report_json

    results = _results(args)
    print(format_report(results), end="")
    for r in results:
        print(f"prep={r.prep!r} extractor={r.extractor!r} eer={r.eer:.4f} "
              f"fnmr@fmr={r.fmr_target:g}={r.fnmr:.4f} mated={r.n_mated} nonmated={r.n_nonmated}")
    if args.json:
        Path(args.json).write_text(report_json(results) + "\n")
    return 0


def cmd_det(args) -> int:
    results = _results(args)
    if len(results) != 1:
        raise UsageError("det exports one configuration; give a single --prep and --extractor")
    det = results[0].det
    det.to_csv(args.out)
    if args.normal_deviates:
        x, y = det.normal_deviates()
        np.savetxt(args.normal_deviates, np.column_stack([det.thresholds, x, y]), delimiter=",",
                   header="threshold,fmr_deviate,fnmr_deviate", comments="", fmt="%.10g")
    print(f"{args.out}: {len(det.thresholds)} points, eer={results[0].eer:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_bank_flags(p):
    p.add_argument("--bank", help="filter-bank text file ('bsif <k> <n_bits>' + coefficients)")
    p.add_argument("--bank-seed", type=int, default=0, help="seed for the generated test bank when --bank is absent")
    p.add_argument("--bank-k", type=int, default=5, help="filter size of the generated test bank")
    p.add_argument("--bank-bits", type=int, default=5, help="number of filters of the generated test bank")


def _add_score_source(p):
    p.add_argument("--embeddings", help="CSV with header subject_id,sample_id,v0,...")
    p.add_argument("--corpus", help="corpus directory (or manifest.json) to extract features from")
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"],
                   help="corpus split to evaluate")
    p.add_argument("--extractor", nargs="+", default=["toy"], choices=["toy", "bsif"],
                   help="feature extractors for --corpus")
    p.add_argument("--prep", nargs="+", default=None,
                   help="preparation stages: none, area:<s>, cubic:<s>, linear:<s>, nearest:<s>, esisr:<s>")
    p.add_argument("--model-dir", default=None,
                   help=f"directory holding esisr_x<s>.ckpt (default ${MODEL_DIR_ENV} or .)")
    p.add_argument("--fmr-target", type=float, default=0.1, help="FMR operating point for FNMR")
    p.add_argument("--max-nonmated", type=int, default=None, help="seeded cap on non-mated pairs")
    p.add_argument("--seed", type=int, default=0, help="seed for pair sampling")
    _add_bank_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esisr", description="Super-resolution and verification toolkit.")
    parser.add_argument("--config", help="JSON file with default values for any flag")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-corpus", help="write a synthetic periocular-like corpus")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--subjects", type=int, default=25, help="number of subjects")
    p.add_argument("--samples", type=int, default=4, help="samples per subject")
    p.add_argument("--size", type=int, default=128, help="image width and height")
    p.add_argument("--gray", action="store_true", help="write single-channel images")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a super-resolution model on a corpus")
    p.add_argument("--scale", type=int, default=2, choices=[2, 3, 4], help="upscaling factor")
    p.add_argument("--patch-size", type=int, default=32, help="HR patch size")
    p.add_argument("--epochs", type=int, default=100, help="maximum epochs")
    p.add_argument("--patches-per-epoch", type=int, default=24000, help="patches drawn per epoch")
    p.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    p.add_argument("--lr", type=float, default=1e-3, help="initial Adam learning rate")
    p.add_argument("--dropout", type=float, default=0.5, help="dropout rate in the feature layers")
    p.add_argument("--seed", type=int, default=0, help="seed for initialisation and sampling")
    p.add_argument("--loss-form", default="additive", choices=["additive", "product"], help="loss form")
    p.add_argument("--w-sharp", type=float, default=0.5, help="sharpness weight")
    p.add_argument("--w-ssim", type=float, default=0.25, help="SSIM weight")
    p.add_argument("--w-psnr", type=float, default=0.25, help="PSNR weight")
    p.add_argument("--upsampler", default="pixel_shuffle", choices=["pixel_shuffle", "transpose_conv"],
                   help="upsampling head")
    p.add_argument("--corpus-dir", required=True, help="corpus directory with manifest.json")
    p.add_argument("--out", default=None, help=f"output directory (default ${MODEL_DIR_ENV} or .)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("--scale", type=int, default=None, choices=[2, 3, 4], help="expected model scale")
    p.add_argument("--model", default=None, help=f"checkpoint (default ${MODEL_DIR_ENV}/esisr_x<scale>.ckpt)")
    p.add_argument("--self-ensemble", action="store_true", help="average the 8 dihedral transforms")
    p.add_argument("input", help="input image")
    p.add_argument("output", help="output image (.png, .ppm or .pgm)")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("metrics", help="PSNR, SSIM and LoG sharpness of two images")
    p.add_argument("a", help="first image (e.g. reconstruction)")
    p.add_argument("b", help="second image (e.g. reference)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("resize", help="interpolation upscaling or the bicubic degradation")
    p.add_argument("--scale", type=int, default=2, help="integer factor")
    p.add_argument("--method", default="cubic", choices=["nearest", "linear", "cubic", "area"],
                   help="interpolation method for upscaling")
    p.add_argument("--down", action="store_true", help="downscale with the bicubic degradation instead")
    p.add_argument("input", help="input image")
    p.add_argument("output", help="output image")
    p.set_defaults(func=cmd_resize)

    p = sub.add_parser("bsif", help="BSIF descriptors as CSV rows")
    _add_bank_flags(p)
    p.add_argument("--grid-rows", type=int, default=2, help="histogram grid rows")
    p.add_argument("--grid-cols", type=int, default=3, help="histogram grid columns")
    p.add_argument("--normalization", default="l1", choices=["l1", "none"], help="per-cell normalisation")
    p.add_argument("--header", action="store_true", help="print a header row")
    p.add_argument("images", nargs="+", help="input images")
    p.set_defaults(func=cmd_bsif)

    p = sub.add_parser("verify", help="EER and FNMR at a fixed FMR")
    _add_score_source(p)
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("det", help="export a DET curve as CSV (threshold,fmr,fnmr)")
    _add_score_source(p)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--normal-deviates", help="also write probit-scaled rates to this CSV")
    p.set_defaults(func=cmd_det)
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        doc = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config: {exc}")
    if not isinstance(doc, dict):
        parser.error("--config must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        dests = {a.dest for a in sp._actions}
        flat = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
        nested = {k.replace("-", "_"): v for k, v in doc.get(name, {}).items()}
        values = {k: v for k, v in {**flat, **nested}.items() if k in dests}
        unknown = set(nested) - dests
        if unknown:
            parser.error(f"--config: unknown keys for {name}: {', '.join(sorted(unknown))}")
        if values:
            sp.set_defaults(**values)
            # values from the file satisfy required flags
            for a in sp._actions:
                if a.dest in values:
                    a.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    _apply_config(parser, argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "out", "") is None:
        args.out = str(model_dir())
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"esisr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"esisr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
