"""Binarized statistical image features (BSIF).

A bank of ``n_bits`` zero-mean ``k x k`` filters is applied to the luminance
plane; each filter's response is thresholded at zero (strictly positive ->
1) and the bits are packed into a per-pixel code in ``[0, 2**n_bits)``.
Codes are histogrammed over a rows x cols grid and concatenated.

Filter banks are read from a plain text format::

    bsif <k> <n_bits>
    <k*k*n_bits floats, filter-major, row-major within each filter>

Learned ICA banks are external data. ``generate_test_bank`` gives a seeded
orthonormal stand-in so everything runs self-contained; it is *not* a
trained BSIF bank.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgcore import Image, to_luma
from .metrics import correlate_valid


class FilterBankError(ValueError):
    pass


class Provenance(str, enum.Enum):
    LOADED_ICA = "loaded_ica"
    GENERATED_TEST = "generated_test"


@dataclass(frozen=True)
class FilterBank:
    filters: np.ndarray  # (n_bits, k, k)
    provenance: Provenance = Provenance.LOADED_ICA

    @property
    def n_bits(self) -> int:
        return self.filters.shape[0]

    @property
    def k(self) -> int:
        return self.filters.shape[1]

    @property
    def name(self) -> str:
        return f"{self.k}x{self.k}-{self.n_bits}"


def validate_filters(filters: np.ndarray, zero_mean_tol: float = 1e-6) -> None:
    if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
        raise FilterBankError(f"filters must be (n, k, k), got {filters.shape}")
    means = filters.reshape(len(filters), -1).mean(axis=1)
    bad = np.flatnonzero(np.abs(means) > zero_mean_tol)
    if bad.size:
        raise FilterBankError(f"filter {bad[0]} has mean {means[bad[0]]:.3g}, expected zero")
    if np.linalg.matrix_rank(filters.reshape(len(filters), -1)) < len(filters):
        raise FilterBankError("filters are linearly dependent")


def load_filterbank(path, zero_mean_tol: float = 1e-6) -> FilterBank:
    tokens = Path(path).read_text().split()
    if len(tokens) < 3 or tokens[0] != "bsif":
        raise FilterBankError(f"{path}: missing 'bsif <k> <n_bits>' header")
    try:
        k, n_bits = int(tokens[1]), int(tokens[2])
        values = np.array([float(t) for t in tokens[3:]])
    except ValueError as exc:
        raise FilterBankError(f"{path}: {exc}") from exc
    if k < 1 or n_bits < 1:
        raise FilterBankError(f"{path}: invalid header values k={k}, n_bits={n_bits}")
    if values.size != k * k * n_bits:
        raise FilterBankError(f"{path}: expected {k * k * n_bits} coefficients, found {values.size}")
    filters = values.reshape(n_bits, k, k)
    validate_filters(filters, zero_mean_tol)
    return FilterBank(filters, Provenance.LOADED_ICA)


def save_filterbank(bank: FilterBank, path) -> None:
    rows = [f"bsif {bank.k} {bank.n_bits}"]
    for f in bank.filters:
        rows.extend(" ".join(repr(float(v)) for v in row) for row in f)
    Path(path).write_text("\n".join(rows) + "\n")


def generate_test_bank(seed: int = 0, k: int = 5, n_bits: int = 5) -> FilterBank:
    """Seeded zero-mean orthonormal filters (a stand-in, not ICA-learned)."""
    if k % 2 == 0:
        raise ValueError(f"filter size must be odd, got {k}")
    if n_bits + 1 > k * k:
        raise ValueError(f"cannot fit {n_bits} zero-mean orthogonal filters in {k}x{k}")
    rng = np.random.default_rng(seed)
    basis = np.column_stack([np.ones(k * k), rng.standard_normal((k * k, n_bits))])
    q, _ = np.linalg.qr(basis)
    filters = q[:, 1:].T.reshape(n_bits, k, k)
    # exact DC removal; QR leaves ~1e-17 residue
    filters = filters - filters.mean(axis=(1, 2), keepdims=True)
    return FilterBank(filters, Provenance.GENERATED_TEST)


def _plane(img) -> np.ndarray:
    if isinstance(img, Image):
        return to_luma(img).plane
    return np.asarray(img, dtype=np.float64)


_NOISE_ULPS = 64


def bsif_code(img, bank: FilterBank) -> np.ndarray:
    """Integer code raster over the valid region, shape ``(h-k+1, w-k+1)``.

    Filters are zero-mean only up to rounding, so a flat region responds
    with ~1e-17 instead of 0. Responses below a rounding-noise floor
    (a few ulps of ``sum|f| * max|x|``) count as ties and give bit 0.
    """
    plane = _plane(img)
    if plane.shape[0] < bank.k or plane.shape[1] < bank.k:
        raise ValueError(f"image {plane.shape} smaller than {bank.k}x{bank.k} filters")
    code = np.zeros((plane.shape[0] - bank.k + 1, plane.shape[1] - bank.k + 1), dtype=np.int64)
    scale = np.max(np.abs(plane))
    for i, f in enumerate(bank.filters):
        floor = _NOISE_ULPS * np.finfo(np.float64).eps * np.sum(np.abs(f)) * scale
        code |= (correlate_valid(plane, f) > floor).astype(np.int64) << i
    return code


@dataclass(frozen=True)
class BsifDescriptor:
    values: np.ndarray
    n_bits: int
    grid: tuple
    normalization: str = "l1"

    def cells(self) -> np.ndarray:
        return self.values.reshape(self.grid[0] * self.grid[1], 2**self.n_bits)


def grid_edges(n: int, parts: int) -> list:
    """Equal cells of ``n // parts``; the remainder goes to the last cell."""
    base = n // parts
    return [i * base for i in range(parts)] + [n]


def cell_histograms(code: np.ndarray, n_bits: int, grid_rows: int = 2, grid_cols: int = 3) -> np.ndarray:
    """Raw per-cell code counts, shape ``(rows*cols, 2**n_bits)``."""
    h, w = code.shape
    if h < grid_rows or w < grid_cols:
        raise ValueError(f"code raster {code.shape} smaller than the {grid_rows}x{grid_cols} grid")
    ys, xs = grid_edges(h, grid_rows), grid_edges(w, grid_cols)
    hist = []
    for r in range(grid_rows):
        for c in range(grid_cols):
            cell = code[ys[r] : ys[r + 1], xs[c] : xs[c + 1]]
            hist.append(np.bincount(cell.ravel(), minlength=2**n_bits))
    return np.array(hist, dtype=np.float64)


def bsif_descriptor(img, bank: FilterBank, grid_rows: int = 2, grid_cols: int = 3,
                    normalization: str = "l1") -> BsifDescriptor:
    """Concatenated grid histograms of BSIF codes (row-major cells)."""
    if normalization not in ("l1", "none"):
        raise ValueError(f"unknown normalization {normalization!r}")
    hist = cell_histograms(bsif_code(img, bank), bank.n_bits, grid_rows, grid_cols)
    if normalization == "l1":
        hist = hist / hist.sum(axis=1, keepdims=True)
    return BsifDescriptor(hist.ravel(), bank.n_bits, (grid_rows, grid_cols), normalization)
