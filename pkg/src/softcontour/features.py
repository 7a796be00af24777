"""Multi-scale feature pyramids.

Both extractors return five feature maps ``f_s`` of spatial size
``(H / 2**s, W / 2**s)`` for ``s = 0..4`` after the input is padded to a
multiple of 16 by edge replication.  The identity extractor keeps the RGB
values and bilinearly downsamples them; the convolutional extractor runs a
fixed 13-layer, 5-block topology (2, 2, 3, 3, 3 convs of widths 64, 128,
256, 512, 512, each 3x3/ReLU with 2x2 max pooling between blocks) and takes
``f_s`` before pool ``s + 1``.  Weights are never trained here; they are
loaded from a small binary container and the extractor is treated as a
constant during contour evolution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import N_SCALES, block_mean

PAD_MULTIPLE = 16

CONV_BLOCKS = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

WEIGHT_MAGIC = b"SCWT"
WEIGHT_VERSION = 1


class WeightFormatError(ValueError):
    """Raised for malformed weight containers or wrong tensor inventories."""


@dataclass
class FeaturePyramid:
    """Five per-scale feature maps plus their cached per-scale norms.

    The cached norm is the centered root-mean-square entry magnitude of each
    map (the entry-wise standard deviation).  Dividing a feature separation
    by it yields a dimensionless ratio that is independent of resolution,
    channel count and global feature offsets: region-mean separations are
    unchanged when a constant is added to every feature, so their
    normalizer must be too.  A constant map has norm 0 (guarded downstream).
    """

    maps: list
    norms: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.maps) != N_SCALES:
            raise ValueError(f"expected {N_SCALES} maps, got {len(self.maps)}")
        if not self.norms:
            self.norms = [float(np.std(m)) for m in self.maps]

    @property
    def channels(self):
        return [m.shape[2] for m in self.maps]

    @property
    def base_shape(self):
        return self.maps[0].shape[:2]


def pad_to_multiple(image, multiple=PAD_MULTIPLE) -> np.ndarray:
    """Edge-replicate the trailing rows/cols up to the next multiple."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="edge")


def pyramid_shapes(h, w, extractor="conv"):
    """Expected (H_s, W_s, C_s) for each scale of a padded H x W input."""
    channels = [width for _, width in CONV_BLOCKS] if extractor == "conv" else [3] * N_SCALES
    return [(h >> s, w >> s, channels[s]) for s in range(N_SCALES)]


# ---------------------------------------------------------------------------
# conv building blocks


def conv_forward(x, kernel, bias, relu=True) -> np.ndarray:
    """3x3 same-size convolution (zero padded), optional ReLU.

    ``x`` is (H, W, C_in), ``kernel`` is (3, 3, C_in, C_out), ``bias`` is
    (C_out,).  Implemented as an im2col matmul.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w, c_in = x.shape
    if kernel.shape[:3] != (3, 3, c_in):
        raise ValueError(f"kernel {kernel.shape} does not fit input {x.shape}")
    c_out = kernel.shape[3]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, C_in, 3, 3)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, 9 * c_in)
    out = cols @ kernel.reshape(9 * c_in, c_out)
    out += np.asarray(bias, dtype=np.float64)
    if relu:
        np.maximum(out, 0.0, out=out)
    return out.reshape(h, w, c_out)


def maxpool2(x) -> np.ndarray:
    """2x2 max pooling with stride 2 (input sides must be even)."""
    h, w = x.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even sides, got {x.shape}")
    return x.reshape(h // 2, 2, w // 2, 2, *x.shape[2:]).max(axis=(1, 3))


def conv_tensor_shapes() -> dict:
    """Required tensor inventory for the conv extractor: name -> shape."""
    shapes = {}
    c_in = 3
    for b, (n_conv, width) in enumerate(CONV_BLOCKS, start=1):
        for c in range(1, n_conv + 1):
            shapes[f"block{b}.conv{c}.weight"] = (3, 3, c_in, width)
            shapes[f"block{b}.conv{c}.bias"] = (width,)
            c_in = width
    return shapes


def validate_conv_weights(store) -> None:
    """Check a loaded container against the conv topology, naming offenders."""
    for name, shape in conv_tensor_shapes().items():
        if name not in store:
            raise WeightFormatError(f"missing tensor '{name}'")
        if tuple(store[name].shape) != shape:
            raise WeightFormatError(
                f"tensor '{name}' has shape {tuple(store[name].shape)}, expected {shape}"
            )


def extract_pyramid_conv(image, weights, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> FeaturePyramid:
    """Run the fixed conv topology and collect the pre-pool map of each block."""
    validate_conv_weights(weights)
    x = (pad_to_multiple(image) - mean) / std
    maps = []
    for b, (n_conv, _) in enumerate(CONV_BLOCKS, start=1):
        for c in range(1, n_conv + 1):
            x = conv_forward(
                x, weights[f"block{b}.conv{c}.weight"], weights[f"block{b}.conv{c}.bias"]
            )
        maps.append(x)
        if b < len(CONV_BLOCKS):
            x = maxpool2(x)
    return FeaturePyramid(maps)


def extract_pyramid_identity(image) -> FeaturePyramid:
    """RGB pyramid: scale 0 is the (padded) input, deeper scales area-averaged
    (every pixel keeps a vote at every scale, unlike sparse-tap bilinear)."""
    img = pad_to_multiple(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    maps = [img]
    for s in range(1, N_SCALES):
        maps.append(block_mean(img, (h >> s, w >> s)))
    return FeaturePyramid(maps)


def make_extractor(name, weights_path=None):
    """Build an ``image -> FeaturePyramid`` callable by extractor name."""
    if name == "identity":
        return extract_pyramid_identity
    if name == "conv":
        if weights_path is None:
            raise WeightFormatError("conv extractor requires a weight container")
        store = load_weight_container(weights_path)
        validate_conv_weights(store)
        return lambda image: extract_pyramid_conv(image, store)
    raise ValueError(f"unknown extractor '{name}'")


# ---------------------------------------------------------------------------
# weight container I/O
#
# Little-endian layout: magic "SCWT", version u32, tensor count u32, then per
# tensor: name length u32, UTF-8 name, ndim u32, dims u32 * ndim, raw float32
# data in row-major order.  No alignment padding anywhere.


def write_weight_container(path, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise WeightFormatError(f"truncated container while reading {what}")
    return data


def load_weight_container(path) -> dict:
    """Read a weight container back into an ordered name -> float32 dict."""
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != WEIGHT_MAGIC:
            raise WeightFormatError("bad magic; not a weight container")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != WEIGHT_VERSION:
            raise WeightFormatError(f"unsupported container version {version}")
        for k in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"tensor {k} name length"))
            name = _read_exact(fh, name_len, f"tensor {k} name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, f"'{name}' ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"'{name}' dims"))
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
            raw = _read_exact(fh, n_bytes, f"'{name}' data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise WeightFormatError("trailing bytes after last tensor")
    return tensors
