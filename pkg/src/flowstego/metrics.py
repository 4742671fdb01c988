"""Extraction accuracy, inversion error, straightness, detection error and
distribution distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from .core import ConfigError, Message, ShapeError, TrajectoryRecord


def _bits(m):
    return m.bits if isinstance(m, Message) else np.asarray(m)


def extraction_accuracy(m, m_hat) -> float | np.ndarray:
    """``1 - hamming(m, m_hat) / L``; batched bit arrays give one value per row."""
    a, b = _bits(m), _bits(m_hat)
    if a.shape != b.shape:
        raise ShapeError(f"message shapes differ: {a.shape} vs {b.shape}")
    acc = 1.0 - np.mean(a != b, axis=-1)
    return float(acc) if np.ndim(acc) == 0 else acc


@dataclass(frozen=True)
class InversionError:
    l2: np.ndarray
    linf: np.ndarray
    per_dim: np.ndarray


def inversion_error(x0, x0_hat) -> InversionError:
    a = np.asarray(x0, dtype=np.float64)
    b = np.asarray(x0_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"latent shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(b - a)
    linf = diff.max(axis=-1)
    # scale by the max so tiny or huge errors do not under/overflow when squared
    m = np.where(linf > 0, linf, 1.0)
    l2 = m * np.linalg.norm(diff / m[..., None], axis=-1)
    return InversionError(l2, linf, diff)


def straightness(traj: TrajectoryRecord) -> np.ndarray | float:
    """Mean normalized distance of interior nodes from the start-end chord.

    Returns 0 for trajectories whose endpoints coincide.
    """
    if traj.grid.n_steps < 2:
        raise ConfigError("straightness needs at least two steps")
    s = traj.states
    t = traj.grid.nodes[1:-1].reshape((-1,) + (1,) * (s.ndim - 1))
    chord = (1 - t) * s[0] + t * s[-1]
    dev = np.linalg.norm(s[1:-1] - chord, axis=-1).mean(axis=0)
    length = np.linalg.norm(s[-1] - s[0], axis=-1)
    out = np.divide(dev, length, out=np.zeros_like(dev), where=length > 0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class DetectionResult:
    p_e: float
    p_fa: float
    p_md: float
    threshold: float
    direction: np.ndarray


def split_indices(n: int, ratio=(8, 1, 1), rng=None):
    """Shuffle ``range(n)`` and cut it into train/validation/test by ``ratio``."""
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.permutation(n)
    r = np.asarray(ratio, dtype=np.float64)
    a = int(round(n * r[0] / r.sum()))
    b = a + int(round(n * r[1] / r.sum()))
    return idx[:a], idx[a:b], idx[b:]


def detection_error(cover, stego, split=(8, 1, 1), seed: int = 0) -> DetectionResult:
    """P_E of a linear cover-vs-stego detector.

    The detector projects onto the whitened mean difference of the training
    split, picks the threshold minimizing P_E on the validation split and is
    scored on the test split. Splits are drawn per class.
    """
    cover = np.asarray(cover, dtype=np.float64)
    stego = np.asarray(stego, dtype=np.float64)
    n_c, n_s = len(cover), len(stego)
    if abs(n_c - n_s) > 0.1 * max(n_c, n_s):
        raise ConfigError(f"class sizes {n_c} and {n_s} differ by more than 10%")
    rng = np.random.default_rng(seed)
    c_tr, c_va, c_te = (cover[i] for i in split_indices(n_c, split, rng))
    s_tr, s_va, s_te = (stego[i] for i in split_indices(n_s, split, rng))
    if min(len(c_va), len(c_te), len(s_va), len(s_te)) == 0:
        raise ConfigError("validation and test splits must be non-empty")

    pooled = np.concatenate([c_tr - c_tr.mean(0), s_tr - s_tr.mean(0)])
    cov = pooled.T @ pooled / max(len(pooled) - 2, 1)
    cov += 1e-6 * np.trace(cov) / cov.shape[0] * np.eye(cov.shape[0])
    direction = linalg.solve(cov, s_tr.mean(0) - c_tr.mean(0), assume_a="pos")

    def rates(thr, c, s):
        return np.mean(c @ direction > thr), np.mean(s @ direction <= thr)

    scores = np.sort(np.concatenate([c_va, s_va]) @ direction)
    cands = np.concatenate([[scores[0] - 1.0], (scores[1:] + scores[:-1]) / 2, [scores[-1] + 1.0]])
    pe = [sum(rates(thr, c_va, s_va)) / 2 for thr in cands]
    thr = float(cands[int(np.argmin(pe))])
    p_fa, p_md = rates(thr, c_te, s_te)
    return DetectionResult(float((p_fa + p_md) / 2), float(p_fa), float(p_md), thr, direction)


@dataclass(frozen=True)
class Distance:
    value: float
    regularized: bool = False


def _check_sets(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("distance inputs must be (n, d) arrays of equal d")
    if len(a) < 100 or len(b) < 100:
        raise ConfigError("distribution distances need at least 100 samples per set")
    return a, b


def frechet_distance(a, b) -> Distance:
    """Squared Frechet distance between Gaussian fits of two latent sets.

    A stand-in for FID that skips the Inception embedding. Singular
    covariances get a 1e-6 ridge and the result is flagged.
    """
    a, b = _check_sets(a, b)
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    regularized = False
    if min(np.linalg.eigvalsh(ca).min(), np.linalg.eigvalsh(cb).min()) <= 1e-12:
        eye = 1e-6 * np.eye(ca.shape[0])
        ca, cb = ca + eye, cb + eye
        regularized = True
    covmean = linalg.sqrtm(ca @ cb)
    covmean = np.real(covmean)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2 * np.trace(covmean))
    return Distance(max(value, 0.0), regularized)


def energy_distance(a, b) -> Distance:
    """Energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic form)."""
    a, b = _check_sets(a, b)
    value = 2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    return Distance(max(float(value), 0.0))
