"""Velocity fields: analytic rectified-flow fields, VP probability flow, guidance.

Time runs from t = 0 (the message-bearing latent, standard normal) to t = 1
(the image-side latent). Every field is evaluated as ``field(x, t, cond)``
where ``x`` has shape ``(..., m * dim)``; fields with an intrinsic dimension
``dim`` act independently on each consecutive block of ``dim`` coordinates,
so a 2-D field transports a 256-dim latent as 128 independent points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import ConfigError, DomainError, ShapeError


class VelocityField:
    """Base class. Subclasses implement ``_eval`` on arrays of shape (..., dim)."""

    dim: int = 1
    lipschitz_bound: float | None = None

    def __call__(self, x, t, cond=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t = {t} outside [0, 1]")
        if x.shape[-1] == self.dim:
            return self._eval(x, t, cond)
        if x.shape[-1] % self.dim:
            raise ShapeError(f"latent dim {x.shape[-1]} is not a multiple of field dim {self.dim}")
        xp = x.reshape(x.shape[:-1] + (-1, self.dim))
        return self._eval(xp, t, cond).reshape(x.shape)

    def _eval(self, x, t, cond):
        raise NotImplementedError


def evaluate(field: VelocityField, x, t, cond=None, w: float = 1.0) -> np.ndarray:
    """Guided evaluation ``v(x, t | None) + w (v(x, t | cond) - v(x, t | None))``.

    ``w == 1`` or ``cond is None`` returns the plain conditional evaluation
    without touching the unconditional branch.
    """
    v_cond = field(x, t, cond)
    if cond is None or w == 1.0:
        return v_cond
    v_unc = field(x, t, None)
    return v_unc + w * (v_cond - v_unc)


class ConstantField(VelocityField):
    def __init__(self, delta):
        self.delta = np.array(delta, dtype=np.float64).reshape(-1)
        self.dim = self.delta.size
        self.lipschitz_bound = 0.0

    def _eval(self, x, t, cond):
        return np.broadcast_to(self.delta, x.shape).copy()


def linear_coupling_field(delta) -> ConstantField:
    """The perfectly straight field of a deterministic coupling ``X1 = X0 + delta``."""
    return ConstantField(delta)


class LinearField(VelocityField):
    """``v(x) = a * x``; elementwise, dimension free."""

    def __init__(self, a: float):
        self.a = float(a)
        self.dim = 1
        self.lipschitz_bound = abs(self.a)

    def __call__(self, x, t, cond=None):
        if not 0.0 <= float(t) <= 1.0:
            raise DomainError(f"t = {t} outside [0, 1]")
        return self.a * np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class GaussianEndpoints:
    mu0: np.ndarray
    sigma0: np.ndarray
    mu1: np.ndarray
    sigma1: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (self.mu0, self.sigma0, self.mu1, self.sigma1)]
        arrs = np.broadcast_arrays(*arrs)
        if np.any(arrs[1] <= 0) or np.any(arrs[3] <= 0):
            raise ConfigError("endpoint standard deviations must be positive")
        for name, a in zip(("mu0", "sigma0", "mu1", "sigma1"), arrs):
            object.__setattr__(self, name, np.array(a))

    @property
    def dim(self) -> int:
        return self.mu0.size


class RFGaussianField(VelocityField):
    """Exact marginal field ``E[X1 - X0 | X_t = x]`` for independent Gaussian endpoints."""

    def __init__(self, ep: GaussianEndpoints):
        self.ep = ep
        self.dim = ep.dim
        self.lipschitz_bound = float(np.max(self._coef_bound()))

    def coefficient(self, t: float) -> np.ndarray:
        a, b = self.ep.sigma0**2, self.ep.sigma1**2
        return (t * b - (1 - t) * a) / ((1 - t) ** 2 * a + t**2 * b)

    def mean(self, t: float) -> np.ndarray:
        return (1 - t) * self.ep.mu0 + t * self.ep.mu1

    def flow_map(self, x0, t: float) -> np.ndarray:
        """Closed-form solution of the ODE started at ``x0``."""
        ep = self.ep
        s = np.sqrt((1 - t) ** 2 * ep.sigma0**2 + t**2 * ep.sigma1**2)
        return self.mean(t) + s / ep.sigma0 * (np.asarray(x0) - ep.mu0)

    def _coef_bound(self) -> np.ndarray:
        # |coef| is extremal at t in {0, 1, (a +- sqrt(ab)) / (a + b)}
        a, b = self.ep.sigma0**2, self.ep.sigma1**2
        r = np.sqrt(a * b)
        cands = [np.zeros_like(a), np.ones_like(a), (a + r) / (a + b), (a - r) / (a + b)]
        best = np.zeros_like(a)
        for t in cands:
            t = np.clip(t, 0.0, 1.0)
            c = (t * b - (1 - t) * a) / ((1 - t) ** 2 * a + t**2 * b)
            best = np.maximum(best, np.abs(c))
        return best

    def _eval(self, x, t, cond):
        ep = self.ep
        return (ep.mu1 - ep.mu0) + self.coefficient(t) * (x - self.mean(t))


def rf_gaussian_field(ep: GaussianEndpoints) -> RFGaussianField:
    return RFGaussianField(ep)


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture; ``labels`` tags each component with a class."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sd = np.asarray(self.stds, dtype=np.float64).reshape(-1)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if np.any(sd <= 0):
            raise ConfigError("component stds must be positive")
        if not (len(w) == len(mu) == len(sd)):
            raise ConfigError("weights, means and stds must have one entry per component")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.size != w.size:
                raise ConfigError("one label per component required")
            object.__setattr__(self, "labels", lab)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def classes(self) -> list[int]:
        return [] if self.labels is None else sorted(set(self.labels.tolist()))

    def restrict(self, cond) -> "GmmSpec":
        """Label-restricted mixture; ``cond=None`` returns ``self``."""
        if cond is None:
            return self
        if self.labels is None:
            raise ConfigError("mixture has no labels to condition on")
        keep = self.labels == int(cond)
        if not keep.any():
            raise ConfigError(f"no component carries label {cond}")
        w = self.weights[keep]
        return GmmSpec(w / w.sum(), self.means[keep], self.stds[keep], self.labels[keep])

    def sample(self, n: int, rng: np.random.Generator, cond=None, return_labels=False):
        g = self.restrict(cond)
        comp = rng.choice(len(g.weights), size=n, p=g.weights)
        x = g.means[comp] + g.stds[comp, None] * rng.standard_normal((n, g.dim))
        if return_labels:
            return x, (None if g.labels is None else g.labels[comp])
        return x

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSpec":
        return cls(d["weights"], d["means"], d["stds"], d.get("labels"))

    def to_dict(self) -> dict:
        out = {"weights": self.weights.tolist(), "means": self.means.tolist(), "stds": self.stds.tolist()}
        if self.labels is not None:
            out["labels"] = self.labels.tolist()
        return out


def _gaussian_responsibilities(x, weights, means, variances):
    """Posterior component weights for isotropic components; x is (..., dim)."""
    dim = means.shape[1]
    sq = np.sum((x[..., None, :] - means) ** 2, axis=-1)
    logp = np.log(weights) - 0.5 * dim * np.log(2 * np.pi * variances) - 0.5 * sq / variances
    return np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))


class RFGmmField(VelocityField):
    """Exact independent-coupling rectified-flow field from N(0, prior_std^2 I) to a GMM.

    This is the marginal field a 1-rectified flow converges to; its
    trajectories are curved wherever mixture components compete.
    """

    def __init__(self, gmm: GmmSpec, prior_std: float = 1.0):
        self.gmm = gmm
        self.prior_std = float(prior_std)
        self.dim = gmm.dim

    def _parts(self, x, t, cond):
        g = self.gmm.restrict(cond)
        a, b = self.prior_std**2, g.stds**2
        var = (1 - t) ** 2 * a + t**2 * b
        m = t * g.means
        r = _gaussian_responsibilities(x, g.weights, m, var)
        coef = (t * b - (1 - t) * a) / var
        comp_v = g.means + coef[:, None] * (x[..., None, :] - m)
        return r, comp_v

    def responsibilities(self, x, t, cond=None):
        return self._parts(np.asarray(x, dtype=np.float64), float(t), cond)[0]

    def _eval(self, x, t, cond):
        r, comp_v = self._parts(x, t, cond)
        return np.einsum("...k,...kd->...d", r, comp_v)


@dataclass(frozen=True)
class VPSchedule:
    """Linear-beta variance-preserving schedule in diffusion time ``s`` (data at s = 0).

    The generative time ``t`` maps affinely onto ``s`` in ``[eps, 1 - eps]``
    with t = 0 at the noise end.
    """

    beta_min: float = 0.1
    beta_max: float = 8.0
    eps: float = 1e-3

    def __post_init__(self):
        if not (0 < self.eps < 0.5) or self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ConfigError("invalid VP schedule")

    def beta(self, s):
        return self.beta_min + s * (self.beta_max - self.beta_min)

    def log_alpha(self, s):
        return -0.5 * (self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s**2)

    def alpha(self, s):
        return np.exp(self.log_alpha(s))

    def sigma(self, s):
        return np.sqrt(-np.expm1(2 * self.log_alpha(s)))

    @property
    def span(self) -> float:
        return 1.0 - 2.0 * self.eps

    def s_of_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise DomainError("generative time outside [0, 1]")
        s = (1.0 - self.eps) - t * self.span
        return float(s) if s.ndim == 0 else s

    def check_s(self, s: float) -> None:
        if not (self.eps - 1e-12 <= s <= 1.0 - self.eps + 1e-12):
            raise DomainError(f"diffusion time {s} outside clamped range [{self.eps}, {1 - self.eps}]")


class VPScoreField(VelocityField):
    """Probability-flow velocity of a GMM diffused by a VP schedule, in generative time.

    ``score`` and ``eps`` are exposed in diffusion time for the DDIM/DDPM samplers.
    """

    def __init__(self, gmm: GmmSpec, schedule: VPSchedule | None = None):
        self.gmm = gmm
        self.schedule = schedule or VPSchedule()
        self.dim = gmm.dim

    def _diffused(self, s, cond):
        g = self.gmm.restrict(cond)
        al, sg = self.schedule.alpha(s), self.schedule.sigma(s)
        return g, al * g.means, al**2 * g.stds**2 + sg**2

    def responsibilities(self, x, s, cond=None):
        g, m, var = self._diffused(s, cond)
        return _gaussian_responsibilities(np.asarray(x, dtype=np.float64), g.weights, m, var)

    def _score(self, x, s, cond):
        g, m, var = self._diffused(s, cond)
        r = _gaussian_responsibilities(x, g.weights, m, var)
        comp = -(x[..., None, :] - m) / var[:, None]
        return np.einsum("...k,...kd->...d", r, comp)

    def _patched(self, fn, x, s, cond):
        x = np.asarray(x, dtype=np.float64)
        self.schedule.check_s(s)
        if x.shape[-1] % self.dim:
            raise ShapeError(f"latent dim {x.shape[-1]} is not a multiple of field dim {self.dim}")
        xp = x.reshape(x.shape[:-1] + (-1, self.dim))
        return fn(xp, s, cond).reshape(x.shape)

    def score(self, x, s, cond=None):
        return self._patched(self._score, x, float(s), cond)

    def eps(self, x, s, cond=None):
        """Noise prediction ``-sigma(s) * score``."""
        return -self.schedule.sigma(float(s)) * self.score(x, s, cond)

    def _eval(self, x, t, cond):
        sch = self.schedule
        s = sch.s_of_t(t)
        # dx/ds = -beta/2 (x + score); dt = -ds / span
        return 0.5 * sch.span * sch.beta(s) * (x + self._score(x, s, cond))


def vp_score_field(gmm: GmmSpec, schedule: VPSchedule | None = None) -> VPScoreField:
    return VPScoreField(gmm, schedule)


class GuidedField(VelocityField):
    def __init__(self, cond: VelocityField, uncond: VelocityField, w: float):
        if cond.dim != uncond.dim:
            raise ShapeError("guided field components must share a dimension")
        self.cond, self.uncond, self.w = cond, uncond, float(w)
        self.dim = cond.dim
        lc, lu = cond.lipschitz_bound, uncond.lipschitz_bound
        if lc is not None and lu is not None:
            self.lipschitz_bound = abs(self.w) * lc + abs(1 - self.w) * lu

    def __call__(self, x, t, cond=None):
        vc = self.cond(x, t, cond)
        if self.w == 1.0:
            return vc
        vu = self.uncond(x, t, None)
        return vu + self.w * (vc - vu)


def guided_field(cond: VelocityField, uncond: VelocityField, w: float) -> GuidedField:
    return GuidedField(cond, uncond, w)
