"""Keyed sign mapping between bit strings and standard-normal latents.

Each latent coordinate gets a keyed half-normal magnitude. A coordinate that
carries bit ``b`` takes the sign ``+`` for 1 and ``-`` for 0; coordinates not
used by the message receive a full signed normal. With unbiased bits every
coordinate is exactly N(0, 1), and decoding only looks at signs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import CapacityError, ConfigError, LatentVector, Message, StegoKey, keyed_uniforms


@dataclass(frozen=True)
class MappingParams:
    latent_dim: int
    bits_per_dim: int = 1
    permutation_seeded: bool = True
    shape_hint: tuple[int, int] | None = None

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.bits_per_dim != 1:
            raise ConfigError("only one bit per dimension is supported")


def keyed_permutation(key: StegoKey, params: MappingParams) -> np.ndarray:
    """``perm[j]`` is the latent index that carries message bit ``j``."""
    if not params.permutation_seeded:
        return np.arange(params.latent_dim)
    u = keyed_uniforms(key.with_domain("perm"), params.latent_dim)
    return np.argsort(u, kind="stable")


def keyed_normals(key: StegoKey, n: int) -> np.ndarray:
    return ndtri(keyed_uniforms(key.with_domain("mag"), n))


def sign_embed(bits, magnitudes, perm, filler=None) -> np.ndarray:
    """Place ``bits`` as signs on ``magnitudes`` at positions ``perm[:L]``.

    ``filler`` supplies the values for the remaining coordinates; when omitted
    they keep the (positive) magnitudes.
    """
    bits = np.asarray(bits)
    mags = np.abs(np.asarray(magnitudes, dtype=np.float64))
    x = mags.copy() if filler is None else np.array(filler, dtype=np.float64)
    idx = np.asarray(perm)[: bits.size]
    x[idx] = np.where(bits == 1, mags[idx], -mags[idx])
    return x


def embed_message(m: Message, key: StegoKey, params: MappingParams) -> LatentVector:
    if m.length > params.latent_dim:
        raise CapacityError(f"message of {m.length} bits exceeds latent dim {params.latent_dim}")
    normals = keyed_normals(key, params.latent_dim)
    x = sign_embed(m.bits, normals, keyed_permutation(key, params), filler=normals)
    return LatentVector(x, params.shape_hint)


def extract_message(x_hat, key: StegoKey, params: MappingParams, length: int | None = None) -> Message:
    """Decode bit ``j`` as ``x_hat[perm[j]] >= 0`` (an exact zero reads as 1)."""
    x = np.asarray(x_hat, dtype=np.float64).reshape(-1)
    if x.size != params.latent_dim:
        raise CapacityError(f"latent has dim {x.size}, expected {params.latent_dim}")
    length = params.latent_dim if length is None else length
    if length > params.latent_dim:
        raise CapacityError(f"cannot read {length} bits from dim {params.latent_dim}")
    idx = keyed_permutation(key, params)[:length]
    return Message((x[idx] >= 0).astype(np.uint8))


def tolerance_radius(x_0, key: StegoKey, params: MappingParams, length: int | None = None) -> float:
    """Largest sup-norm perturbation that cannot flip any message bit."""
    x = np.asarray(x_0, dtype=np.float64).reshape(-1)
    length = params.latent_dim if length is None else length
    idx = keyed_permutation(key, params)[:length]
    return float(np.min(np.abs(x[idx])))
