"""The ESISR network: two feature branches, a recursive reconstruction block
and a sub-pixel (or transposed-convolution) upsampler on top of a bicubic
global residual.

Data flow for a ``(B, 1, h, w)`` luminance batch::

    c = x - 0.5
    c -> [5x5 conv, ReLU, dropout] * n_a --+
    c -> [3x3 conv, ReLU, dropout] * n_b --+-> concat -> f
    f -> (f + conv(relu(conv(f))))  R times, shared weights -> g
    g -> upsampler (pixel shuffle or transposed conv) -> residual
    output = residual + bicubic(x)
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nnkernels as nk
from .imgcore import (
    ColorSpace,
    Image,
    ResizeMethod,
    dihedral,
    dihedral_inverse,
    resize_matrix,
    rgb_to_ycbcr,
    resize_array,
    ycbcr_to_rgb,
)


# subtracted from the luminance before the feature branches
INPUT_OFFSET = 0.5


class Upsampler(str, enum.Enum):
    PIXEL_SHUFFLE = "pixel_shuffle"
    TRANSPOSE_CONV = "transpose_conv"


@dataclass(frozen=True)
class EsisrConfig:
    scale: int = 2
    n_feature_layers: int = 7
    first_filters: int = 32
    last_filters: int = 8
    # (layers in the 5x5 branch, layers in the 3x3 branch)
    branch_split: tuple = (3, 4)
    recursion_count: int = 2
    upsampler: Upsampler = Upsampler.PIXEL_SHUFFLE
    dropout_rate: float = 0.5
    # std multiplier for the upsampler's He init; keeps the initial output near bicubic
    head_init_gain: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "upsampler", Upsampler(self.upsampler))
        object.__setattr__(self, "branch_split", tuple(int(n) for n in self.branch_split))
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if len(self.branch_split) != 2 or min(self.branch_split) < 1:
            raise ValueError("branch_split needs a positive layer count for each branch")
        if sum(self.branch_split) != self.n_feature_layers:
            raise ValueError(f"branch split {self.branch_split} does not total "
                             f"{self.n_feature_layers} feature layers")
        if self.last_filters < 1 or self.first_filters < self.last_filters:
            raise ValueError("filter taper needs first_filters >= last_filters >= 1")
        if self.recursion_count < 1:
            raise ValueError("recursion_count must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def feature_width(self) -> int:
        """Channel count after concatenating both branches."""
        return 2 * self.last_filters

    def branch_widths(self, n_layers: int) -> list:
        if n_layers == 1:
            return [self.last_filters]
        return [int(round(v)) for v in np.linspace(self.first_filters, self.last_filters, n_layers)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["upsampler"] = self.upsampler.value
        d["branch_split"] = list(self.branch_split)
        return d


@dataclass
class EsisrModel:
    config: EsisrConfig
    params: dict = field(default_factory=dict)
    rng_seed: int = 0

    # -- parameter bookkeeping ---------------------------------------------

    @property
    def dtype(self):
        return next(iter(self.params.values())).weight.dtype

    def branch_names(self, branch: str) -> list:
        n = self.config.branch_split[0 if branch == "a" else 1]
        return [f"{branch}{i}" for i in range(n)]

    def param_count(self) -> int:
        return sum(p.param_count for p in self.params.values())

    def astype(self, dtype) -> "EsisrModel":
        params = {
            k: nk.ConvParams(p.weight.astype(dtype), p.bias.astype(dtype), p.stride, p.padding)
            for k, p in self.params.items()
        }
        return EsisrModel(self.config, params, self.rng_seed)

    def copy(self) -> "EsisrModel":
        return self.astype(self.dtype)

    def arrays(self):
        """Yield ``(name, array)`` for every trainable tensor, in a fixed order."""
        for k, p in self.params.items():
            yield f"{k}.weight", p.weight
            yield f"{k}.bias", p.bias

    def zero_head(self) -> None:
        """Zero the upsampler so the network output equals the bicubic path."""
        self.params["head"].weight[...] = 0
        self.params["head"].bias[...] = 0

    # -- forward / backward ----------------------------------------------

    def _bicubic_mats(self, h, w):
        s = self.config.scale
        dt = self.dtype
        return (resize_matrix(h, h * s, ResizeMethod.CUBIC).astype(dt),
                resize_matrix(w, w * s, ResizeMethod.CUBIC).astype(dt))

    def forward(self, x: np.ndarray, training: bool = False, rng=None, return_cache: bool = False):
        """Super-resolve a ``(B, 1, h, w)`` batch to ``(B, 1, h*s, w*s)``."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected a (B, 1, h, w) luminance batch, got {x.shape}")
        cfg = self.config
        x = x.astype(self.dtype, copy=False)
        if training and cfg.dropout_rate > 0 and rng is None:
            rng = np.random.default_rng(self.rng_seed)
        cache = {"x": x}
        centred = x - x.dtype.type(INPUT_OFFSET)

        outs = []
        for br in ("a", "b"):
            h = centred
            for name in self.branch_names(br):
                z, cols = nk.conv2d_fwd(h, self.params[name], return_cols=True)
                a = nk.relu_fwd(z)
                a, mask = nk.dropout_fwd(a, cfg.dropout_rate, rng, training)
                cache[name] = (h, z, mask, cols)
                h = a
            outs.append(h)
        f = nk.concat_channels(outs)
        cache["concat_sizes"] = [o.shape[1] for o in outs]

        g = f
        rec = []
        for _ in range(cfg.recursion_count):
            u, cols0 = nk.conv2d_fwd(g, self.params["rec0"], return_cols=True)
            v = nk.relu_fwd(u)
            w, cols1 = nk.conv2d_fwd(v, self.params["rec1"], return_cols=True)
            rec.append((g, u, v, cols0, cols1))
            g = nk.add(g, w)
        cache["rec"] = rec
        cache["g"] = g

        head = self.params["head"]
        if cfg.upsampler is Upsampler.PIXEL_SHUFFLE:
            z, cache["head_cols"] = nk.conv2d_fwd(g, head, return_cols=True)
            residual = nk.pixel_shuffle_fwd(z, cfg.scale)
        else:
            residual = nk.conv2d_transpose_fwd(g, head)

        ry, rx = self._bicubic_mats(x.shape[2], x.shape[3])
        out = residual + ry @ x @ rx.T
        return (out, cache) if return_cache else out

    @staticmethod
    def activation_pattern(cache: dict) -> np.ndarray:
        """Signs of every ReLU pre-activation; used to spot kink crossings."""
        parts = [v[1] > 0 for k, v in cache.items() if k[0] in "ab" and k[1:].isdigit()]
        parts += [u > 0 for _, u, *_ in cache["rec"]]
        return np.concatenate([p.ravel() for p in parts])

    def backward(self, cache: dict, grad_out: np.ndarray, input_grad: bool = False):
        """Gradients of a scalar loss for every parameter.

        Returns a dict ``{layer: (grad_w, grad_b)}``, plus ``"x"`` with the
        input gradient when ``input_grad`` is set.
        """
        cfg = self.config
        grad_out = grad_out.astype(self.dtype, copy=False)
        grads = {}
        g = cache["g"]
        head = self.params["head"]
        if cfg.upsampler is Upsampler.PIXEL_SHUFFLE:
            dz = nk.pixel_shuffle_bwd(grad_out, cfg.scale)
            dg, gw, gb = nk.conv2d_bwd(g, head, dz, cols=cache["head_cols"])
        else:
            dg, gw, gb = nk.conv2d_transpose_bwd(g, head, grad_out)
        grads["head"] = (gw, gb)

        acc = {k: [np.zeros_like(self.params[k].weight), np.zeros_like(self.params[k].bias)]
               for k in ("rec0", "rec1")}
        for g_in, u, v, cols0, cols1 in reversed(cache["rec"]):
            dg_skip, dw = nk.add_bwd(dg)
            dv, gw1, gb1 = nk.conv2d_bwd(v, self.params["rec1"], dw, cols=cols1)
            du = nk.relu_bwd(u, dv)
            dgi, gw0, gb0 = nk.conv2d_bwd(g_in, self.params["rec0"], du, cols=cols0)
            acc["rec1"][0] += gw1
            acc["rec1"][1] += gb1
            acc["rec0"][0] += gw0
            acc["rec0"][1] += gb0
            dg = dg_skip + dgi
        grads.update({k: tuple(v) for k, v in acc.items()})

        dx = np.zeros_like(cache["x"]) if input_grad else None
        for br, d in zip(("a", "b"), nk.split_channels(dg, cache["concat_sizes"])):
            names = self.branch_names(br)
            for name in reversed(names):
                h, z, mask, cols = cache[name]
                d = nk.relu_bwd(z, nk.dropout_bwd(d, mask))
                first = name == names[0]
                d, gw, gb = nk.conv2d_bwd(h, self.params[name], d, cols=cols,
                                          need_grad_x=input_grad or not first)
                grads[name] = (gw, gb)
            if input_grad:
                dx += d
        if input_grad:
            x = cache["x"]
            ry, rx = self._bicubic_mats(x.shape[2], x.shape[3])
            grads["x"] = dx + ry.T @ grad_out @ rx
        return grads


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _he_conv(rng, out_ch, in_ch, k, gain=1.0, transpose=False, padding=None, stride=1, dtype=np.float32):
    fan_in = in_ch * k * k
    shape = (in_ch, out_ch, k, k) if transpose else (out_ch, in_ch, k, k)
    w = rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))
    pad = k // 2 if padding is None else padding
    return nk.ConvParams(w.astype(dtype), np.zeros(out_ch, dtype), stride, pad)


def build(config: EsisrConfig = EsisrConfig(), seed: int = 0, dtype=np.float32) -> EsisrModel:
    """Create a model with seeded He-normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for br, k, n in (("a", 5, config.branch_split[0]), ("b", 3, config.branch_split[1])):
        widths = config.branch_widths(n)
        if min(widths) < 1:
            raise ValueError(f"invalid filter taper {widths}")
        in_ch = 1
        for i, out_ch in enumerate(widths):
            params[f"{br}{i}"] = _he_conv(rng, out_ch, in_ch, k, dtype=dtype)
            in_ch = out_ch
    c = config.feature_width
    params["rec0"] = _he_conv(rng, c, c, 3, dtype=dtype)
    params["rec1"] = _he_conv(rng, c, c, 3, dtype=dtype)
    s = config.scale
    if config.upsampler is Upsampler.PIXEL_SHUFFLE:
        params["head"] = _he_conv(rng, s * s, c, 3, gain=config.head_init_gain, dtype=dtype)
    else:
        # k = s + 2 with padding 1 gives an output of exactly s times the input
        params["head"] = _he_conv(rng, 1, c, s + 2, gain=config.head_init_gain, transpose=True,
                                  padding=1, stride=s, dtype=dtype)
    return EsisrModel(config, params, seed)


def forward(model: EsisrModel, y_lr: np.ndarray) -> np.ndarray:
    return model.forward(y_lr)


def param_count(model: EsisrModel) -> int:
    return model.param_count()


# ---------------------------------------------------------------------------
# Inference on images
# ---------------------------------------------------------------------------


def _sr_plane(model, plane, use_self_ensemble):
    if not use_self_ensemble:
        return model.forward(plane[None, None])[0, 0]
    acc = None
    for i in range(8):
        out = model.forward(dihedral(plane, i)[None, None])[0, 0]
        out = dihedral_inverse(out, i).astype(np.float64)
        acc = out if acc is None else acc + out
    return acc / 8


def super_resolve(model: EsisrModel, img: Image, use_self_ensemble: bool = False) -> Image:
    """Upscale an RGB or GrayY image by the model's scale.

    Only luminance passes through the network; chroma is upscaled bicubically.
    """
    s = model.config.scale
    if img.colorspace is ColorSpace.GRAY_Y:
        y = _sr_plane(model, img.plane, use_self_ensemble)
        return Image(np.clip(y, 0, 1)[None], ColorSpace.GRAY_Y)
    ycc = img if img.colorspace is ColorSpace.YCBCR else rgb_to_ycbcr(img)
    y = _sr_plane(model, ycc.data[0], use_self_ensemble)
    chroma = resize_array(ycc.data[1:], img.width * s, img.height * s, ResizeMethod.CUBIC)
    out = Image(np.concatenate([np.clip(y, 0, 1)[None], np.clip(chroma, 0, 1)]), ColorSpace.YCBCR)
    return out if img.colorspace is ColorSpace.YCBCR else ycbcr_to_rgb(out)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ESISRCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def save_checkpoint(model: EsisrModel, path) -> None:
    """Write ``magic | u32 header length | JSON header | f32 LE blob``.

    Weights are stored as float32, so a float32 model round-trips bit-exactly.
    """
    layers = []
    blobs = []
    for name, p in model.params.items():
        layers.append({"name": name, "weight": list(p.weight.shape), "bias": list(p.bias.shape),
                       "stride": p.stride, "padding": p.padding})
        blobs.append(p.weight.astype("<f4").tobytes())
        blobs.append(p.bias.astype("<f4").tobytes())
    blob = b"".join(blobs)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "rng_seed": model.rng_seed,
        "layers": layers,
        "blob_bytes": len(blob),
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(blob)


def load_checkpoint(path) -> EsisrModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 12:
        raise CheckpointVersionError(f"{path}: not an ESISR checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + n].decode("utf-8"))
        version = header["format_version"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointVersionError(f"{path}: unreadable header ({exc})") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    blob = data[12 + n :]
    if len(blob) != header["blob_bytes"]:
        raise CheckpointTruncatedError(f"{path}: blob has {len(blob)} bytes, header says {header['blob_bytes']}")

    config = EsisrConfig(**header["config"])
    reference = build(config, header.get("rng_seed", 0))
    params = {}
    offset = 0
    for entry in header["layers"]:
        name = entry["name"]
        ref = reference.params.get(name)
        if ref is None or tuple(entry["weight"]) != ref.weight.shape or tuple(entry["bias"]) != ref.bias.shape:
            raise CheckpointShapeError(f"{path}: layer {name!r} does not match the configured network")
        arrs = []
        for shape in (entry["weight"], entry["bias"]):
            count = int(np.prod(shape))
            if offset + 4 * count > len(blob):
                raise CheckpointTruncatedError(f"{path}: blob ends inside layer {name!r}")
            arrs.append(np.frombuffer(blob, "<f4", count, offset).astype(np.float32).reshape(shape))
            offset += 4 * count
        params[name] = nk.ConvParams(arrs[0], arrs[1], entry["stride"], entry["padding"])
    if set(params) != set(reference.params):
        raise CheckpointShapeError(f"{path}: layer set does not match the configured network")
    if offset != len(blob):
        raise CheckpointTruncatedError(f"{path}: {len(blob) - offset} trailing blob bytes")
    return EsisrModel(config, {k: params[k] for k in reference.params}, header.get("rng_seed", 0))
