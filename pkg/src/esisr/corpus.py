"""Synthetic periocular-like corpus and its JSON manifest.

Each subject gets a fixed appearance (skin tone, band-limited skin texture,
eye and brow geometry); each sample re-renders it with a small shift,
photometric jitter and sensor noise. The result has genuine within/between
subject structure, which is all the verification pipeline needs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import ColorSpace, Image, load_image, save_image, to_luma

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CorpusEntry:
    subject_id: str
    sample_id: str
    path: str  # relative to the manifest root
    split: str = "train"


@dataclass
class CorpusManifest:
    root: Path
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split tag {e.split!r}")

    def __len__(self):
        return len(self.entries)

    def select(self, split=None) -> list:
        if split is None:
            return list(self.entries)
        splits = {split} if isinstance(split, str) else set(split)
        return [e for e in self.entries if e.split in splits]

    def subset(self, split) -> "CorpusManifest":
        return CorpusManifest(self.root, self.select(split))

    def load(self, entry: CorpusEntry) -> Image:
        return load_image(self.root / entry.path)

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        doc = {"root": ".", "entries": [asdict(e) for e in self.entries]}
        path.write_text(json.dumps(doc, indent=1) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        doc = json.loads(path.read_text())
        root = (path.parent / doc.get("root", ".")).resolve()
        entries = [CorpusEntry(**e) for e in doc["entries"]]
        missing = [e.path for e in entries if not (root / e.path).is_file()]
        if missing:
            raise FileNotFoundError(f"{len(missing)} manifest paths missing, e.g. {missing[0]}")
        return cls(root, entries)


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def _smooth_noise(rng, shape, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _subject_params(rng, width, height):
    return {
        "skin": np.array([0.78, 0.60, 0.50]) + rng.uniform(-0.18, 0.12, 3) * np.array([1, 1, 1.1]),
        "tex_seed": int(rng.integers(2**31)),
        "tex_sigma": rng.uniform(0.6, 1.0),
        "tex_amp": rng.uniform(0.04, 0.08),
        "blotch_amp": rng.uniform(0.03, 0.08),
        "eye_cx": width * rng.uniform(0.42, 0.58),
        "eye_cy": height * rng.uniform(0.50, 0.62),
        "eye_rx": width * rng.uniform(0.20, 0.30),
        "eye_ry": height * rng.uniform(0.09, 0.15),
        "iris_r": rng.uniform(0.45, 0.8),
        "iris_tone": rng.uniform(0.08, 0.45),
        "brow_y": height * rng.uniform(0.18, 0.30),
        "brow_curve": rng.uniform(0.1, 0.5),
        "brow_thick": height * rng.uniform(0.04, 0.08),
        "brow_tone": rng.uniform(0.1, 0.35),
        "iris_freq": int(rng.integers(9, 20)),
        "iris_phase": rng.uniform(0, 2 * np.pi),
        "lash_t": np.sort(rng.uniform(-0.95, 0.95, int(rng.integers(25, 45)))),
        "lash_len": rng.uniform(0.25, 0.55),
        "lash_tilt": rng.uniform(-0.3, 0.3),
    }


def _lashes(params, xx, yy, cx, cy):
    """Coverage map of thin dark strokes rooted on the upper lid."""
    rx, ry = params["eye_rx"], params["eye_ry"]
    cover = np.zeros_like(xx)
    for t in params["lash_t"]:
        x0 = cx + rx * t
        y0 = cy - ry * np.sqrt(max(1 - t * t, 0.0))
        ang = -np.pi / 2 + 1.1 * t + params["lash_tilt"]
        length = params["lash_len"] * ry * (2.2 - abs(t))
        x1, y1 = x0 + length * np.cos(ang), y0 + length * np.sin(ang)
        # distance from each pixel to the segment (x0, y0)-(x1, y1)
        vx, vy = x1 - x0, y1 - y0
        u = np.clip(((xx - x0) * vx + (yy - y0) * vy) / (vx * vx + vy * vy), 0, 1)
        d = np.hypot(xx - x0 - u * vx, yy - y0 - u * vy)
        cover = np.maximum(cover, np.exp(-((d / 0.6) ** 2)))
    return cover


def render_sample(params: dict, rng, width: int, height: int, jitter: float = 1.0) -> np.ndarray:
    """Render one RGB sample ``(3, height, width)`` for a subject."""
    pad = 4
    hh, ww = height + 2 * pad, width + 2 * pad
    yy, xx = np.mgrid[0:hh, 0:ww].astype(float)
    dx, dy = rng.uniform(-2, 2, 2) * jitter
    cx, cy = params["eye_cx"] + pad + dx, params["eye_cy"] + pad + dy

    tex_rng = np.random.default_rng(params["tex_seed"])
    tex = params["tex_amp"] * _smooth_noise(tex_rng, (hh, ww), params["tex_sigma"])
    tex += params["blotch_amp"] * _smooth_noise(tex_rng, (hh, ww), 4.0)
    img = params["skin"][:, None, None] * (1 + tex)[None]

    # brow: a soft dark arc above the eye
    u = (xx - cx) / params["eye_rx"]
    brow_c = params["brow_y"] + pad + dy + params["brow_curve"] * params["eye_ry"] * u**2
    brow = np.exp(-((yy - brow_c) / params["brow_thick"]) ** 2 - (u / 1.3) ** 6)
    img = img * (1 - brow * (1 - params["brow_tone"]))[None]

    # eye opening: lighter sclera ellipse with a dark iris disc and pupil
    e = ((xx - cx) / params["eye_rx"]) ** 2 + ((yy - cy) / params["eye_ry"]) ** 2
    sclera = _sigmoid(-(e - 1) * 30)
    img = img * (1 - sclera)[None] + 0.88 * sclera[None]
    r = np.hypot(xx - cx, yy - cy) / (params["eye_ry"] * 1.1)
    iris = sclera * _sigmoid(-(r - params["iris_r"]) * 25)
    theta = np.arctan2(yy - cy, xx - cx)
    stria = 1 + 0.35 * np.cos(params["iris_freq"] * theta + params["iris_phase"])
    iris_rgb = np.array([1.1, 1.0, 0.8])[:, None, None] * (params["iris_tone"] * stria)[None]
    img = img * (1 - iris)[None] + iris_rgb * iris[None]
    pupil = sclera * _sigmoid(-(r - 0.3 * params["iris_r"]) * 20)
    img = img * (1 - pupil)[None] + 0.03 * pupil[None]
    # lid line
    lid = np.exp(-((np.sqrt(e) - 1) / 0.05) ** 2)
    img = img * (1 - 0.6 * lid)[None]
    img = img * (1 - 0.85 * _lashes(params, xx, yy, cx, cy))[None]

    gain = 1 + rng.uniform(-0.08, 0.08) * jitter
    bias = rng.uniform(-0.04, 0.04) * jitter
    img = img * gain + bias + rng.normal(0, 0.008, img.shape) * jitter
    return np.clip(img[:, pad : pad + height, pad : pad + width], 0, 1)


def gen_corpus(seed: int, n_subjects: int, samples_per_subject: int, out_dir,
               width: int = 128, height: int = 128, split_fractions=(0.7, 0.15, 0.15),
               gray: bool = False) -> CorpusManifest:
    """Write a synthetic corpus of PNG files plus ``manifest.json``.

    Subjects are assigned to train/val/test in order by ``split_fractions``.
    """
    if n_subjects < 1 or samples_per_subject < 1:
        raise ValueError("need at least one subject and one sample")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cuts = np.round(np.cumsum(split_fractions) / np.sum(split_fractions) * n_subjects).astype(int)
    entries = []
    for s in range(n_subjects):
        split = SPLITS[int(np.searchsorted(cuts, s, side="right"))]
        params = _subject_params(rng, width, height)
        sid = f"s{s:04d}"
        for j in range(samples_per_subject):
            rgb = render_sample(params, rng, width, height)
            img = Image(rgb, ColorSpace.RGB)
            if gray:
                img = to_luma(img)
            rel = f"{sid}_{j:02d}.png"
            save_image(img, out_dir / rel)
            entries.append(CorpusEntry(sid, f"{j:02d}", rel, split))
    manifest = CorpusManifest(out_dir.resolve(), entries)
    manifest.save()
    return manifest
