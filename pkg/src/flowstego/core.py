"""Shared domain types, keyed randomness and the binary latent format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FlowStegoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FlowStegoError):
    pass


class FormatError(FlowStegoError):
    pass


class CapacityError(FlowStegoError):
    pass


class DomainError(FlowStegoError):
    pass


class IntegrationError(FlowStegoError):
    pass


class ShapeError(FlowStegoError):
    pass


@dataclass(frozen=True)
class LatentVector:
    """A flat float64 latent, optionally tagged with a (rows, cols) grid shape."""

    data: np.ndarray
    shape_hint: tuple[int, int] | None = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise ShapeError("latent must have at least one element")
        if not np.all(np.isfinite(arr)):
            raise FormatError("latent contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if self.shape_hint is not None:
            rows, cols = (int(v) for v in self.shape_hint)
            if rows * cols != arr.size:
                raise ShapeError(f"shape_hint {rows}x{cols} does not match dim {arr.size}")
            object.__setattr__(self, "shape_hint", (rows, cols))

    @property
    def dim(self) -> int:
        return self.data.size

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return self.dim

    def grid(self) -> np.ndarray:
        if self.shape_hint is None:
            raise ShapeError("latent has no shape_hint")
        return self.data.reshape(self.shape_hint)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0, 1] into ``n_steps`` Euler steps."""

    n_steps: int
    t_end: float = 1.0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        if self.t_end != 1.0:
            raise ConfigError("the time horizon is fixed to T = 1")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def t_start(self) -> float:
        return 0.0

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1, dtype=np.float64) / self.n_steps


@dataclass(frozen=True)
class Message:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or bits.size < 1:
            raise ConfigError("message must be a non-empty 1-D bit array")
        if not np.all((bits == 0) | (bits == 1)):
            raise ConfigError("message bits must be 0 or 1")
        bits = bits.astype(np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def length(self) -> int:
        return self.bits.size

    def __len__(self):
        return self.length

    @classmethod
    def from_hex(cls, text: str, length: int | None = None) -> "Message":
        raw = bytes.fromhex(text.strip())
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
        if length is not None:
            if length > bits.size:
                raise ConfigError(f"hex string carries {bits.size} bits, {length} requested")
            bits = bits[:length]
        return cls(bits)

    def to_hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex()


@dataclass(frozen=True)
class StegoKey:
    key_bytes: bytes
    counter_domain: str = "default"

    def __post_init__(self):
        if not isinstance(self.key_bytes, (bytes, bytearray)):
            raise ConfigError("key_bytes must be bytes")
        if len(self.key_bytes) < 16:
            raise ConfigError("stego key must be at least 16 bytes")
        object.__setattr__(self, "key_bytes", bytes(self.key_bytes))

    def with_domain(self, domain: str) -> "StegoKey":
        return StegoKey(self.key_bytes, domain)

    @classmethod
    def derive(cls, *parts, domain: str = "default") -> "StegoKey":
        """Build a 32-byte key by hashing ``parts`` (seeds, trial indices, labels)."""
        h = hashlib.blake2b(digest_size=32, person=b"fstg-derive")
        for p in parts:
            h.update(repr(p).encode())
            h.update(b"\x00")
        return cls(h.digest(), domain)


@dataclass(frozen=True)
class TrajectoryRecord:
    """States at every grid node plus the velocity used on every step.

    ``states[n]`` is always the state at node ``t_n``. For a forward run
    ``velocities[n]`` was evaluated at ``(states[n], t_n)``; for an inverse run
    at ``(states[n + 1], t_{n+1})``. Leading axes beyond the node axis are batch
    axes.
    """

    states: np.ndarray
    velocities: np.ndarray
    grid: TimeGrid
    direction: str = "forward"

    def __post_init__(self):
        if self.states.shape[0] != self.grid.n_steps + 1:
            raise ShapeError("states must hold n_steps + 1 entries")
        if self.velocities.shape[0] != self.grid.n_steps:
            raise ShapeError("velocities must hold n_steps entries")
        if self.direction not in ("forward", "inverse"):
            raise ConfigError(f"unknown direction {self.direction!r}")

    @property
    def start(self) -> np.ndarray:
        return self.states[0] if self.direction == "forward" else self.states[-1]

    @property
    def end(self) -> np.ndarray:
        return self.states[-1] if self.direction == "forward" else self.states[0]


_UNIT = 1.0 / 2.0**53


def _mac_key(key: StegoKey) -> bytes:
    # blake2b accepts at most 64 key bytes
    kb = key.key_bytes
    return kb if len(kb) <= 64 else hashlib.blake2b(kb).digest()


def _digest_words(key: StegoKey, index: int) -> int:
    h = hashlib.blake2b(_mac_key(key), digest_size=8)
    h.update(key.counter_domain.encode("utf-8"))
    h.update(b"\x00")
    h.update(int(index).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def keyed_uniform(key: StegoKey, index: int) -> float:
    """Deterministic uniform draw in (0, 1) addressed by ``(key, domain, index)``.

    The top 53 bits of a keyed BLAKE2b digest are mapped to the bin centre
    ``(k + 0.5) / 2**53``, so the result is never exactly 0 and inverse-CDF
    transforms stay finite.
    """
    if not isinstance(key, StegoKey):
        raise ConfigError("keyed_uniform needs a StegoKey")
    k = _digest_words(key, index) >> 11
    return (k + 0.5) * _UNIT


def keyed_uniforms(key: StegoKey, n: int, offset: int = 0) -> np.ndarray:
    """Vector of ``keyed_uniform(key, i)`` for ``i`` in ``offset .. offset + n - 1``."""
    base = hashlib.blake2b(_mac_key(key), digest_size=8)
    base.update(key.counter_domain.encode("utf-8"))
    base.update(b"\x00")
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        h = base.copy()
        h.update((offset + i).to_bytes(8, "little", signed=True))
        out[i] = ((int.from_bytes(h.digest(), "little") >> 11) + 0.5) * _UNIT
    return out


def keyed_rng(key: StegoKey) -> np.random.Generator:
    """A numpy Generator seeded from the key and its domain (bulk noise only)."""
    h = hashlib.blake2b(_mac_key(key), digest_size=32)
    h.update(b"rng\x00" + key.counter_domain.encode("utf-8"))
    words = np.frombuffer(h.digest(), dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence(words.tolist()))


# latent file format
MAGIC = b"FSTG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQB")
_SHAPE = struct.Struct("<QQ")


def encode_latent(vector: LatentVector) -> bytes:
    has_shape = vector.shape_hint is not None
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, vector.dim, int(has_shape))]
    if has_shape:
        parts.append(_SHAPE.pack(*vector.shape_hint))
    parts.append(vector.data.astype("<f8").tobytes())
    return b"".join(parts)


def decode_latent(buf: bytes, offset: int = 0) -> tuple[LatentVector, int]:
    """Parse one latent record from ``buf``; returns the vector and the next offset."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated latent header")
    magic, version, dim, has_shape = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported latent format version {version}")
    if has_shape not in (0, 1):
        raise FormatError("corrupt shape flag")
    offset += _HEADER.size
    shape = None
    if has_shape:
        if len(buf) - offset < _SHAPE.size:
            raise FormatError("truncated shape record")
        shape = _SHAPE.unpack_from(buf, offset)
        offset += _SHAPE.size
    nbytes = 8 * dim
    if dim < 1 or len(buf) - offset < nbytes:
        raise FormatError("truncated latent payload")
    data = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError("latent file contains non-finite scalars")
    try:
        vec = LatentVector(data, shape)
    except ShapeError as exc:
        raise FormatError(str(exc)) from exc
    return vec, offset + nbytes


def write_latent(path, vector: LatentVector) -> None:
    Path(path).write_bytes(encode_latent(vector))


def read_latent(path) -> LatentVector:
    buf = Path(path).read_bytes()
    vec, end = decode_latent(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after latent payload")
    return vec


_STEP = struct.Struct("<I")


def write_trajectory(path, traj: TrajectoryRecord, shape_hint=None, sample: int | None = None) -> None:
    """Dump one trajectory as ``(step index, latent record)`` pairs, node order."""
    states = traj.states if sample is None else traj.states[:, sample]
    if states.ndim != 2:
        raise ShapeError("select a single sample to dump a batched trajectory")
    with open(path, "wb") as fh:
        for n, state in enumerate(states):
            fh.write(_STEP.pack(n))
            fh.write(encode_latent(LatentVector(state, shape_hint)))


def read_trajectory(path) -> list[tuple[int, LatentVector]]:
    buf = Path(path).read_bytes()
    out, offset = [], 0
    while offset < len(buf):
        if len(buf) - offset < _STEP.size:
            raise FormatError("truncated step header")
        (step,) = _STEP.unpack_from(buf, offset)
        vec, offset = decode_latent(buf, offset + _STEP.size)
        out.append((step, vec))
    return out
