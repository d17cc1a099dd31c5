"""Distance-based biometric verification scoring.

Comparisons are Euclidean distances: a pair is accepted when its distance is
strictly below the threshold. So at threshold ``t``::

    FMR(t)  = fraction of non-mated distances <  t
    FNMR(t) = fraction of mated distances     >= t

Every rate is evaluated on one finite sweep: the midpoints between
consecutive sorted unique scores, plus one point below the minimum (accept
nothing) and one above the maximum (accept everything). The end points sit
one score-range outside the data, so multiplying all distances by ``c > 0``
multiplies every sweep threshold by ``c`` and leaves all rates unchanged.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import norm

from .bsif import FilterBank, bsif_descriptor, grid_edges
from .imgcore import Image, ResizeMethod, resize, to_luma
from .model import EsisrModel, super_resolve


class IngestError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    subjects: list
    samples: list
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.subjects = [str(s) for s in self.subjects]
        self.samples = [str(s) for s in self.samples]
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        n = len(self.subjects)
        if len(self.samples) != n or self.vectors.shape[0] != n:
            raise IngestError("subjects, samples and vectors must have the same length")
        if not np.all(np.isfinite(self.vectors)):
            raise IngestError("embedding vectors must be finite")
        keys = list(zip(self.subjects, self.samples))
        if len(set(keys)) != n:
            seen = set()
            dup = next(k for k in keys if k in seen or seen.add(k))
            raise IngestError(f"duplicate (subject_id, sample_id) key {dup}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.subjects)

    @classmethod
    def from_rows(cls, rows) -> "EmbeddingTable":
        rows = list(rows)
        if not rows:
            raise IngestError("empty embedding table")
        dims = {len(r[2]) for r in rows}
        if len(dims) != 1:
            raise IngestError(f"inconsistent vector dimensions {sorted(dims)}")
        return cls([r[0] for r in rows], [r[1] for r in rows], np.array([r[2] for r in rows], dtype=float))


def load_embeddings_csv(path) -> EmbeddingTable:
    """Read ``subject_id,sample_id,v0,...,v{d-1}`` rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["subject_id", "sample_id"] or len(header) < 3:
            raise IngestError(f"{path}: expected header subject_id,sample_id,v0,...")
        d = len(header) - 2
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 2:
                raise IngestError(f"{path}:{lineno}: expected {d + 2} fields, got {len(rec)}")
            try:
                vec = [float(v) for v in rec[2:]]
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from exc
            rows.append((rec[0], rec[1], vec))
    return EmbeddingTable.from_rows(rows)


def save_embeddings_csv(table: EmbeddingTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "sample_id"] + [f"v{i}" for i in range(table.dim)])
        for s, j, v in zip(table.subjects, table.samples, table.vectors):
            writer.writerow([s, j] + [repr(float(x)) for x in v])


def euclidean_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


@dataclass
class ScoreSet:
    mated: np.ndarray
    nonmated: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mated = np.asarray(self.mated, dtype=np.float64).ravel()
        self.nonmated = np.asarray(self.nonmated, dtype=np.float64).ravel()
        both = np.concatenate([self.mated, self.nonmated])
        if not np.all(np.isfinite(both)) or np.any(both < 0):
            raise ValueError("distances must be finite and non-negative")

    def require_both(self):
        if self.mated.size == 0 or self.nonmated.size == 0:
            raise ProtocolError(
                f"need mated and non-mated scores, got {self.mated.size} and {self.nonmated.size}")


def _cap_pairs(values, cap, seed):
    if cap is None or values.size <= cap:
        return values, "exhaustive"
    keep = np.sort(np.random.default_rng(seed).choice(values.size, size=cap, replace=False))
    return values[keep], f"sampled(cap={cap}, seed={seed})"


def build_scores(table: EmbeddingTable, max_nonmated: int | None = None, seed: int = 0,
                 source: str = "") -> ScoreSet:
    """All unordered within-table pairs, split by subject identity.

    Pairs are visited in row-major ``i < j`` order. ``max_nonmated`` keeps a
    seeded random subset of the non-mated pairs in their original order.
    """
    subj = np.asarray(table.subjects)
    if len(np.unique(subj)) < 2:
        raise ProtocolError("at least two subjects are needed for non-mated pairs")
    dist = pdist(table.vectors)
    i, j = np.triu_indices(len(table), k=1)
    same = subj[i] == subj[j]
    if not same.any():
        raise ProtocolError("no subject has two samples; mated pairs are impossible")
    nonmated, pairing = _cap_pairs(dist[~same], max_nonmated, seed)
    return ScoreSet(dist[same], nonmated, {"source": source, "pairing": pairing})


def build_cross_scores(gallery: EmbeddingTable, probes: EmbeddingTable, max_nonmated: int | None = None,
                       seed: int = 0, source: str = "") -> ScoreSet:
    """Every gallery row against every probe row; mated when subjects agree."""
    if gallery.dim != probes.dim:
        raise IngestError(f"gallery dimension {gallery.dim} differs from probe dimension {probes.dim}")
    dist = cdist(gallery.vectors, probes.vectors)
    same = np.asarray(gallery.subjects)[:, None] == np.asarray(probes.subjects)[None, :]
    if not same.any():
        raise ProtocolError("no probe subject appears in the gallery")
    nonmated, pairing = _cap_pairs(dist[~same], max_nonmated, seed)
    s = ScoreSet(dist[same], nonmated, {"source": source, "pairing": "cross-" + pairing})
    s.require_both()
    return s


def sweep_thresholds(s: ScoreSet) -> np.ndarray:
    scores = np.unique(np.concatenate([s.mated, s.nonmated]))
    lo, hi = scores[0], scores[-1]
    span = hi - lo if hi > lo else (abs(hi) if hi != 0 else 1.0)
    return np.concatenate([[lo - span], (scores[:-1] + scores[1:]) / 2, [hi + span]])


def rates(s: ScoreSet, thresholds) -> tuple:
    """(fmr, fnmr) arrays at the given thresholds."""
    s.require_both()
    t = np.asarray(thresholds, dtype=np.float64)
    fmr = np.searchsorted(np.sort(s.nonmated), t, side="left") / s.nonmated.size
    fnmr = (s.mated.size - np.searchsorted(np.sort(s.mated), t, side="left")) / s.mated.size
    return fmr, fnmr


@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray  # ascending
    fmr: np.ndarray  # non-decreasing along thresholds
    fnmr: np.ndarray  # non-increasing along thresholds

    @property
    def points(self) -> list:
        return list(zip(self.fmr.tolist(), self.fnmr.tolist()))

    def normal_deviates(self, eps: float = 1e-6) -> tuple:
        """Probit-transformed rates, clipped away from 0 and 1, for DET plots."""
        return (norm.ppf(np.clip(self.fmr, eps, 1 - eps)), norm.ppf(np.clip(self.fnmr, eps, 1 - eps)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fmr", "fnmr"])
            for row in zip(self.thresholds, self.fmr, self.fnmr):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "DetCurve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


def det_curve(s: ScoreSet) -> DetCurve:
    s.require_both()
    t = sweep_thresholds(s)
    fmr, fnmr = rates(s, t)
    return DetCurve(t, fmr, fnmr)


def eer(s: ScoreSet) -> tuple:
    """Equal error rate and the threshold where it occurs.

    Uses the first sweep point where FMR reaches FNMR; when the two curves
    cross between sweep points the rate and threshold are linearly
    interpolated between the bracketing points.
    """
    c = det_curve(s)
    gap = c.fnmr - c.fmr  # positive at the low end, negative at the high end
    i = int(np.argmax(gap <= 0))
    if gap[i] == 0 or i == 0:
        return float(c.fmr[i]), float(c.thresholds[i])
    a = gap[i - 1] / (gap[i - 1] - gap[i])
    rate = c.fmr[i - 1] + a * (c.fmr[i] - c.fmr[i - 1])
    thr = c.thresholds[i - 1] + a * (c.thresholds[i] - c.thresholds[i - 1])
    return float(rate), float(thr)


def operating_point(s: ScoreSet, target_fmr: float) -> tuple:
    """(fnmr, threshold, fmr) at the most permissive sweep threshold with FMR <= target."""
    if not 0 < target_fmr < 1:
        raise ValueError(f"target_fmr must lie in (0, 1), got {target_fmr}")
    c = det_curve(s)
    i = int(np.flatnonzero(c.fmr <= target_fmr)[-1])
    return float(c.fnmr[i]), float(c.thresholds[i]), float(c.fmr[i])


def fnmr_at_fmr(s: ScoreSet, target_fmr: float = 0.1) -> float:
    return operating_point(s, target_fmr)[0]


# ---------------------------------------------------------------------------
# End-to-end evaluation: preparation stage -> features -> scores -> metrics
# ---------------------------------------------------------------------------

_METHOD_LABELS = {ResizeMethod.AREA: "Inter-Area", ResizeMethod.CUBIC: "Inter-Cubic",
                  ResizeMethod.LINEAR: "Inter-Linear", ResizeMethod.NEAREST: "Nearest"}


@dataclass(frozen=True)
class NoRedimension:
    label = "No Redimension"

    def apply(self, img: Image) -> Image:
        return img


@dataclass(frozen=True)
class Resize:
    method: ResizeMethod
    scale: int

    @property
    def label(self) -> str:
        return f"{_METHOD_LABELS[ResizeMethod(self.method)]} x{self.scale}"

    def apply(self, img: Image) -> Image:
        return resize(img, img.width * self.scale, img.height * self.scale, ResizeMethod(self.method))


@dataclass(frozen=True)
class SuperResolve:
    model: EsisrModel
    use_self_ensemble: bool = False

    @property
    def scale(self) -> int:
        return self.model.config.scale

    @property
    def label(self) -> str:
        return f"ESISR x{self.scale}"

    def apply(self, img: Image) -> Image:
        return super_resolve(self.model, img, self.use_self_ensemble)


def toy_embed(img: Image, grid: int = 8) -> np.ndarray:
    """Block means of the luma plane on a grid x grid layout, centred and unit-normalised.

    A stand-in for a learned embedding: cheap, resolution independent and
    insensitive to global gain and offset.
    """
    plane = to_luma(img).plane if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    ys, xs = grid_edges(plane.shape[0], grid), grid_edges(plane.shape[1], grid)
    sums = np.add.reduceat(np.add.reduceat(plane, ys[:-1], axis=0), xs[:-1], axis=1)
    v = (sums / np.outer(np.diff(ys), np.diff(xs))).ravel()
    v = v - v.mean()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@dataclass(frozen=True)
class ToyEmbedder:
    grid: int = 8

    @property
    def label(self) -> str:
        return f"Toy {self.grid}x{self.grid}"

    def extract(self, img: Image) -> np.ndarray:
        return toy_embed(img, self.grid)


@dataclass(frozen=True)
class Bsif:
    bank: FilterBank
    grid_rows: int = 2
    grid_cols: int = 3

    @property
    def label(self) -> str:
        return f"BSIF {self.bank.k}x{self.bank.k}-{self.bank.n_bits}"

    def extract(self, img: Image) -> np.ndarray:
        return bsif_descriptor(img, self.bank, self.grid_rows, self.grid_cols).values


@dataclass(frozen=True)
class EmbeddingFile:
    """Precomputed vectors; only meaningful without a preparation stage."""

    path: str

    @property
    def label(self) -> str:
        return f"Embeddings({Path(self.path).name})"


def labeled_images(manifest, split=None) -> list:
    """``(subject_id, sample_id, luma Image)`` triples from a corpus manifest."""
    return [(e.subject_id, e.sample_id, to_luma(manifest.load(e))) for e in manifest.select(split)]


def extract_table(images, prep, extractor) -> EmbeddingTable:
    rows = [(s, j, extractor.extract(prep.apply(img))) for s, j, img in images]
    return EmbeddingTable.from_rows(rows)


@dataclass
class PipelineResult:
    prep: str
    extractor: str
    eer: float
    eer_threshold: float
    fnmr: float
    fmr_target: float
    n_mated: int
    n_nonmated: int
    dim: int
    pairing: str
    det: DetCurve = field(repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("prep", "extractor", "eer", "eer_threshold", "fnmr",
                                              "fmr_target", "n_mated", "n_nonmated", "dim", "pairing")}


def _score(gallery_t, probe_t, fmr_target, max_nonmated, seed, source):
    if probe_t is None:
        s = build_scores(gallery_t, max_nonmated, seed, source)
    else:
        s = build_cross_scores(gallery_t, probe_t, max_nonmated, seed, source)
    e, t = eer(s)
    return s, e, t, fnmr_at_fmr(s, fmr_target)


def evaluate_pipeline(gallery, probes=None, prep=NoRedimension(), extractor=ToyEmbedder(),
                      fmr_target: float = 0.1, max_nonmated: int | None = None, seed: int = 0) -> PipelineResult:
    """Prepare, extract, score and summarise one (prep, extractor) configuration.

    ``gallery`` and ``probes`` are lists of ``(subject_id, sample_id, Image)``
    (see :func:`labeled_images`). With ``probes=None`` every gallery pair is
    compared; otherwise each gallery row is compared with each probe row.
    An :class:`EmbeddingFile` extractor ignores the image lists and reads
    its vectors directly.
    """
    if isinstance(extractor, EmbeddingFile):
        if not isinstance(prep, NoRedimension):
            raise ValueError("precomputed embeddings cannot be re-prepared; use NoRedimension")
        g_t, p_t = load_embeddings_csv(extractor.path), None
    else:
        g_t = extract_table(gallery, prep, extractor)
        p_t = None if probes is None else extract_table(probes, prep, extractor)
    s, e, t, f = _score(g_t, p_t, fmr_target, max_nonmated, seed, f"{prep.label} / {extractor.label}")
    return PipelineResult(prep.label, extractor.label, e, t, f, fmr_target, s.mated.size, s.nonmated.size,
                          g_t.dim, s.metadata["pairing"], det_curve(s))


def run_grid(gallery, preps, extractors, probes=None, fmr_target: float = 0.1,
             max_nonmated: int | None = None, seed: int = 0) -> list:
    """Evaluate every (prep, extractor) pair, preparing each image once per prep."""
    results = []
    for prep in preps:
        g_imgs = [(s, j, prep.apply(img)) for s, j, img in gallery]
        p_imgs = None if probes is None else [(s, j, prep.apply(img)) for s, j, img in probes]
        for ex in extractors:
            results.append(evaluate_pipeline(g_imgs, p_imgs, NoRedimension(), ex, fmr_target, max_nonmated, seed))
            results[-1].prep = prep.label
    return results


def format_report(results) -> str:
    """Plain-text table: one row per prep, EER and FNMR (in %) per extractor."""
    preps = list(dict.fromkeys(r.prep for r in results))
    extractors = list(dict.fromkeys(r.extractor for r in results))
    by_key = {(r.prep, r.extractor): r for r in results}
    width = max(len(p) for p in preps) + 2
    target = results[0].fmr_target if results else 0.1
    head1 = " " * width + "".join(f"{e:^22}" for e in extractors)
    head2 = f"{'Method':<{width}}" + f"{'EER%':>10}{f'FNMR@{target:.0%}':>12}" * len(extractors)
    lines = [head1.rstrip(), head2]
    for p in preps:
        cells = []
        for e in extractors:
            r = by_key.get((p, e))
            cells.append(f"{'-':>10}{'-':>12}" if r is None else f"{100 * r.eer:>10.2f}{100 * r.fnmr:>12.2f}")
        lines.append(f"{p:<{width}}" + "".join(cells))
    pairing = sorted({r.pairing for r in results})
    lines.append(f"pairing: {', '.join(pairing)}")
    return "\n".join(lines) + "\n"


def report_json(results) -> str:
    return json.dumps([r.to_dict() for r in results], indent=1)
