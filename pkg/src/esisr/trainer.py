"""Adam training loop with plateau learning-rate decay and early stopping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imgcore import PatchSet
from .loss import LossWeights, loss_report, perceptual_loss
from .metrics import LogKernel, log_kernel
from .model import EsisrModel, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    patches_per_epoch: int = 24_000
    batch_size: int = 32
    patch_size: int = 32
    lr: float = 1e-3
    decay_gamma: float = 1.2
    decay_patience: int = 3
    early_stop_patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_batch_size: int = 64

    def __post_init__(self):
        if self.decay_gamma <= 1:
            raise ValueError("decay_gamma must be > 1")
        if self.early_stop_patience < self.decay_patience:
            raise ValueError("early_stop_patience must be >= decay_patience")
        if self.epochs < 0 or self.patches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, patches_per_epoch and batch_size must be positive")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_psnr: float
    val_ssim: float
    val_sharp_delta: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list
    initial_val_loss: float
    initial_val_psnr: float
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    final_lr: float

    def to_rows(self):
        return [
            {"epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss, "val_loss": e.val_loss,
             "val_psnr": e.val_psnr, "val_ssim": e.val_ssim}
            for e in self.epochs
        ]


TRAIN_LOG_FIELDS = ["epoch", "lr", "train_loss", "val_loss", "val_psnr", "val_ssim"]
LOSS_LOG_FIELDS = ["epoch", "split", "total", "sharp", "ssim", "psnr"]


def adam_step(model: EsisrModel, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of every parameter in ``model``."""
    for name, p in model.params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for layer {name!r}")
        for slot, (arr, g) in enumerate(zip((p.weight, p.bias), grads[name])):
            if g.shape != arr.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {arr.shape}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, p in model.params.items():
        for slot, (arr, g) in enumerate(zip((p.weight, p.bias), grads[name])):
            key = (name, slot)
            m = state.m.setdefault(key, np.zeros_like(arr))
            v = state.v.setdefault(key, np.zeros_like(arr))
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            arr -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(arr.dtype, copy=False)


def predict(model: EsisrModel, lr_batch: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [model.forward(lr_batch[i : i + batch_size]) for i in range(0, len(lr_batch), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + lr_batch.shape[1:])


def evaluate(model: EsisrModel, patches: PatchSet, w: LossWeights, k: LogKernel, batch_size: int = 64):
    lr, hr = patches.arrays(model.dtype)
    return loss_report(predict(model, lr, batch_size), hr, w, k)


def _write_csv(path, fields, rows, append=False):
    if path is None:
        return
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def train(model: EsisrModel, train_set: PatchSet, val_set: PatchSet, cfg: TrainConfig = TrainConfig(),
          w: LossWeights = LossWeights(), k: LogKernel | None = None, log_path=None,
          loss_log_path=None, checkpoint_path=None) -> TrainReport:
    """Train ``model`` in place; on return it holds the best-validation weights."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if train_set.scale != model.config.scale or val_set.scale != model.config.scale:
        raise ValueError("patch sets were generated for a different scale than the model")
    k = k or log_kernel()
    rng = np.random.default_rng(cfg.seed)
    lr_all, hr_all = train_set.arrays(model.dtype)
    n = len(lr_all)

    init = evaluate(model, val_set, w, k, cfg.val_batch_size)
    log.info("initial val loss %.5f psnr %.3f", init.total, init.psnr)
    report = TrainReport([], init.total, init.psnr, 0, init.total, False, cfg.lr)
    _write_csv(log_path, TRAIN_LOG_FIELDS, [])
    _write_csv(loss_log_path, LOSS_LOG_FIELDS,
               [{"epoch": 0, "split": "val", "total": init.total, "sharp": init.sharp_term,
                 "ssim": init.ssim, "psnr": init.psnr}])

    state = AdamState()
    lr = cfg.lr
    best_val = init.total
    best_params = model.copy().params
    since_best = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.patches_per_epoch <= n:
            order = rng.permutation(n)[: cfg.patches_per_epoch]
        else:
            order = rng.integers(0, n, size=cfg.patches_per_epoch)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            sr, cache = model.forward(lr_all[idx], training=True, rng=rng, return_cache=True)
            value, grad = perceptual_loss(sr, hr_all[idx], w, k)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
            grads = model.backward(cache, grad)
            adam_step(model, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            losses.append(value * len(idx))
        train_loss = float(np.sum(losses) / len(order))

        val = evaluate(model, val_set, w, k, cfg.val_batch_size)
        entry = EpochLog(epoch, lr, train_loss, val.total, val.psnr, val.ssim, val.sharp_delta,
                         time.perf_counter() - t0)
        report.epochs.append(entry)
        _write_csv(log_path, TRAIN_LOG_FIELDS, [report.to_rows()[-1]], append=True)
        _write_csv(loss_log_path, LOSS_LOG_FIELDS,
                   [{"epoch": epoch, "split": "val", "total": val.total, "sharp": val.sharp_term,
                     "ssim": val.ssim, "psnr": val.psnr}], append=True)
        log.info("epoch %d lr %.2e train %.5f val %.5f psnr %.3f (%.1fs)",
                 epoch, lr, train_loss, val.total, val.psnr, entry.seconds)

        if val.total < best_val:
            best_val = val.total
            best_params = model.copy().params
            report.best_epoch = epoch
            since_best = 0
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                report.stopped_early = True
                break
            if since_best % cfg.decay_patience == 0:
                lr /= cfg.decay_gamma

    model.params = best_params
    report.best_val_loss = best_val
    report.final_lr = lr
    return report


def gradient_check(model: EsisrModel, patch_pair, w: LossWeights = LossWeights(),
                   coords_per_layer: int = 200, h: float = 1e-5, seed: int = 0,
                   k: LogKernel | None = None) -> float:
    """Largest relative error between backprop and central differences.

    Runs in float64 on a copy of ``model``. Up to ``coords_per_layer``
    coordinates are drawn from every weight and bias tensor; coordinates
    whose perturbation flips a ReLU are redrawn. The relative error is
    ``|a - f| / max(|a|, |f|, 1e-6)``. In float32 a tolerance of 1e-2 is
    the realistic bound; float64 reaches 1e-4.
    """
    k = k or log_kernel()
    m = model.astype(np.float64)
    lr_b, hr_b = (np.asarray(a, dtype=np.float64) for a in patch_pair)
    if lr_b.ndim == 2:
        lr_b, hr_b = lr_b[None, None], hr_b[None, None]

    def run(return_cache=False):
        out = m.forward(lr_b, training=True, rng=np.random.default_rng(seed), return_cache=True)
        value, grad = perceptual_loss(out[0], hr_b, w, k)
        return (value, grad, out[1]) if return_cache else (value, out[1])

    _, grad_sr, cache = run(return_cache=True)
    grads = m.backward(cache, grad_sr)
    base_pattern = m.activation_pattern(cache)
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for name, p in m.params.items():
        for slot, arr in enumerate((p.weight, p.bias)):
            flat = arr.reshape(-1)
            analytic = grads[name][slot].reshape(-1)
            candidates = rng.permutation(flat.size)
            checked = 0
            for i in candidates:
                if checked >= coords_per_layer:
                    break
                orig = flat[i]
                flat[i] = orig + h
                fp, cp = run()
                flat[i] = orig - h
                fm, cm = run()
                flat[i] = orig
                if not (np.array_equal(m.activation_pattern(cp), base_pattern)
                        and np.array_equal(m.activation_pattern(cm), base_pattern)):
                    continue
                fd = (fp - fm) / (2 * h)
                err = abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-6)
                worst = max(worst, err)
                checked += 1
    return worst
