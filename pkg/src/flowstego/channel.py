"""Codec round trip and the corruption channel applied to the generated latent.

The decode/encode pair of an image pipeline is modelled by a uniform
quantizer on a clip range. Channel distortions act on the latent directly:
additive keyed noise, quantization (a JPEG stand-in), and median blur,
Gaussian blur and bilinear resize on the latent's grid shape.

Every function accepts a single latent ``(d,)`` or a batch ``(batch, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import ConfigError, LatentVector, ShapeError, StegoKey, keyed_rng

BLUR_SIZES = (3, 5, 7)
RESIZE_SCALES = (0.5, 0.75, 1.25, 1.5)
NOISE_STDS = (0.01, 0.05, 0.1)

# quantizer depth standing in for JPEG quality levels
JPEG_BITS = {"QF50": 6, "QF90": 8}


def codec_roundtrip(x, bits: int = 16, lo: float = -8.0, hi: float = 8.0):
    """Clip to ``[lo, hi]``, quantize to ``2**bits`` levels, return bin centres.

    Idempotent: bin centres map to themselves.
    """
    if not lo < hi:
        raise ConfigError(f"codec range needs lo < hi, got [{lo}, {hi}]")
    if not 1 <= int(bits) <= 16:
        raise ConfigError(f"codec bits must lie in [1, 16], got {bits}")
    levels = 2 ** int(bits)
    width = (hi - lo) / levels
    arr = np.asarray(x, dtype=np.float64)
    k = np.floor((np.clip(arr, lo, hi) - lo) / width)
    k = np.clip(k, 0, levels - 1)
    out = lo + (k + 0.5) * width
    if isinstance(x, LatentVector):
        return LatentVector(out, x.shape_hint)
    return out


@dataclass(frozen=True)
class GaussianNoise:
    std: float

    def __post_init__(self):
        if not self.std >= 0:
            raise ConfigError("noise std must be non-negative")


@dataclass(frozen=True)
class Quantize:
    bits: int
    lo: float = -8.0
    hi: float = 8.0

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ConfigError("quantizer bits must lie in [1, 16]")
        if not self.lo < self.hi:
            raise ConfigError("quantizer range needs lo < hi")


@dataclass(frozen=True)
class MedianBlur:
    size: int

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError("median kernel size must be a positive odd integer")


@dataclass(frozen=True)
class GaussianBlur:
    size: int

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError("blur kernel size must be a positive odd integer")

    @property
    def sigma(self) -> float:
        # the usual image-library default for a k x k kernel
        return 0.3 * ((self.size - 1) * 0.5 - 1) + 0.8


@dataclass(frozen=True)
class Resize:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("resize scale must be positive")


Distortion = GaussianNoise | Quantize | MedianBlur | GaussianBlur | Resize

_KINDS = {
    "gaussian_noise": (GaussianNoise, "std"),
    "quantize": (Quantize, "bits"),
    "median_blur": (MedianBlur, "size"),
    "gaussian_blur": (GaussianBlur, "size"),
    "resize": (Resize, "scale"),
}


@dataclass(frozen=True)
class ChannelSpec:
    distortions: tuple = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distortions", tuple(self.distortions))

    @property
    def needs_shape(self) -> bool:
        return any(isinstance(d, (MedianBlur, GaussianBlur, Resize)) for d in self.distortions)

    @classmethod
    def from_config(cls, items, seed: int = 0) -> "ChannelSpec":
        """Build from a list like ``[{"quantize": 6}, {"gaussian_noise": 0.05}]``.

        Entries may also be full mappings such as
        ``{"kind": "quantize", "bits": 6, "lo": -4, "hi": 4}``.
        """
        out = []
        for item in items or ():
            item = dict(item)
            if "kind" in item:
                kind = item.pop("kind")
                kwargs = item
            elif len(item) == 1:
                kind, value = next(iter(item.items()))
                kwargs = {_KINDS[kind][1]: value} if kind in _KINDS else {}
            else:
                raise ConfigError(f"cannot parse distortion {item!r}")
            if kind not in _KINDS:
                raise ConfigError(f"unknown distortion {kind!r}")
            out.append(_KINDS[kind][0](**kwargs))
        return cls(tuple(out), seed)

    def to_config(self) -> list:
        rows = []
        for d in self.distortions:
            kind = next(k for k, (c, _) in _KINDS.items() if isinstance(d, c))
            rows.append({"kind": kind, **d.__dict__})
        return rows

    def label(self) -> str:
        if not self.distortions:
            return "lossless"
        parts = []
        for d in self.distortions:
            kind = next(k for k, (c, _) in _KINDS.items() if isinstance(d, c))
            parts.append(f"{kind}={getattr(d, _KINDS[kind][1])}")
        return "+".join(parts)


def _on_grid(x, shape, fn):
    rows, cols = shape
    batch = x.reshape(-1, rows, cols)
    out = np.stack([fn(g) for g in batch])
    return out.reshape(x.shape)


def _bilinear(grid, shape):
    r = np.linspace(0.0, grid.shape[0] - 1.0, shape[0])
    c = np.linspace(0.0, grid.shape[1] - 1.0, shape[1])
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return ndimage.map_coordinates(grid, [rr, cc], order=1, mode="nearest")


def _resize_roundtrip(grid, scale):
    small = (max(1, int(round(grid.shape[0] * scale))), max(1, int(round(grid.shape[1] * scale))))
    return _bilinear(_bilinear(grid, small), grid.shape)


def apply_channel(x, spec: ChannelSpec, shape_hint=None, stream=0):
    """Apply ``spec.distortions`` in order.

    Noise comes from a generator keyed on ``(spec.seed, stream)``, so a trial
    index passed as ``stream`` gives every trial its own reproducible draw.
    """
    is_vec = isinstance(x, LatentVector)
    if is_vec and shape_hint is None:
        shape_hint = x.shape_hint
    out = np.array(x, dtype=np.float64)
    if spec.needs_shape:
        if shape_hint is None:
            raise ShapeError("blur and resize need a latent with a shape_hint")
        if shape_hint[0] * shape_hint[1] != out.shape[-1]:
            raise ShapeError(f"shape_hint {shape_hint} does not match dim {out.shape[-1]}")
    rng = None
    for d in spec.distortions:
        if isinstance(d, GaussianNoise):
            if rng is None:
                rng = keyed_rng(StegoKey.derive("channel", spec.seed, stream))
            out = out + d.std * rng.standard_normal(out.shape)
        elif isinstance(d, Quantize):
            out = codec_roundtrip(out, d.bits, d.lo, d.hi)
        elif isinstance(d, MedianBlur):
            out = _on_grid(out, shape_hint, lambda g: ndimage.median_filter(g, size=d.size, mode="reflect"))
        elif isinstance(d, GaussianBlur):
            radius = (d.size - 1) // 2
            out = _on_grid(
                out, shape_hint, lambda g: ndimage.gaussian_filter(g, d.sigma, mode="reflect", radius=radius)
            )
        elif isinstance(d, Resize):
            out = _on_grid(out, shape_hint, lambda g: _resize_roundtrip(g, d.scale))
        else:
            raise ConfigError(f"unsupported distortion {d!r}")
    if is_vec:
        return LatentVector(out, shape_hint)
    return out


def robustness_presets(quant_bits: int = JPEG_BITS["QF50"], noise: float = 0.05, median: int = 3) -> dict:
    """Named channel settings for the robustness sweep, singles then combinations."""
    q, n, m = Quantize(quant_bits), GaussianNoise(noise), MedianBlur(median)
    presets = {"lossless": ()}
    for s in NOISE_STDS:
        presets[f"noise_{s}"] = (GaussianNoise(s),)
    for name, b in JPEG_BITS.items():
        presets[f"jpeg_{name}"] = (Quantize(b),)
    for k in BLUR_SIZES:
        presets[f"median_{k}"] = (MedianBlur(k),)
    for k in BLUR_SIZES:
        presets[f"gblur_{k}"] = (GaussianBlur(k),)
    for s in RESIZE_SCALES:
        presets[f"resize_{s}"] = (Resize(s),)
    presets["quantize+median"] = (q, m)
    presets["quantize+noise"] = (q, n)
    presets["noise+median"] = (n, m)
    presets["all_three"] = (q, n, m)
    return presets


# constituents of each combined preset, by single-preset name
def combination_parts(quant_bits: int = JPEG_BITS["QF50"], noise: float = 0.05, median: int = 3) -> dict:
    qname = next((f"jpeg_{k}" for k, b in JPEG_BITS.items() if b == quant_bits), None)
    if qname is None or noise not in NOISE_STDS or median not in BLUR_SIZES:
        raise ConfigError("combined presets must be built from listed single settings")
    q, n, m = qname, f"noise_{noise}", f"median_{median}"
    return {
        "quantize+median": (q, m),
        "quantize+noise": (q, n),
        "noise+median": (n, m),
        "all_three": (q, n, m),
    }
