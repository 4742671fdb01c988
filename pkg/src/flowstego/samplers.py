"""Forward/inverse Euler transport, path-consistency diagnostics, DDIM and DDPM.

All integrators take latents of shape ``(d,)`` or ``(batch, d)`` and return a
:class:`TrajectoryRecord` whose ``states[n]`` is the state at grid node ``t_n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ConfigError, IntegrationError, StegoKey, TimeGrid, TrajectoryRecord, keyed_rng
from .flows import VelocityField, VPSchedule, evaluate


class SamplerKind(str, Enum):
    EULER_RF = "euler_rf"
    DDIM = "ddim"
    DDPM = "ddpm"


def _check_finite(x, step, what):
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite {what} at step {step}")


def euler_forward(x0, field: VelocityField, grid: TimeGrid, cond=None, w: float = 1.0) -> TrajectoryRecord:
    x = np.array(x0, dtype=np.float64)
    _check_finite(x, 0, "initial state")
    dt, nodes = grid.dt, grid.nodes
    states = np.empty((grid.n_steps + 1,) + x.shape)
    vels = np.empty((grid.n_steps,) + x.shape)
    states[0] = x
    for n in range(grid.n_steps):
        v = evaluate(field, x, nodes[n], cond, w)
        _check_finite(v, n, "velocity")
        x = x + dt * v
        _check_finite(x, n + 1, "state")
        vels[n] = v
        states[n + 1] = x
    return TrajectoryRecord(states, vels, grid, "forward")


def euler_inverse(xT, field: VelocityField, grid: TimeGrid, cond=None, w: float = 1.0) -> TrajectoryRecord:
    """Time-reversed Euler: ``x_n = x_{n+1} - dt * v(x_{n+1}, t_{n+1})``."""
    x = np.array(xT, dtype=np.float64)
    _check_finite(x, grid.n_steps, "terminal state")
    dt, nodes = grid.dt, grid.nodes
    states = np.empty((grid.n_steps + 1,) + x.shape)
    vels = np.empty((grid.n_steps,) + x.shape)
    states[-1] = x
    for n in range(grid.n_steps - 1, -1, -1):
        v = evaluate(field, x, nodes[n + 1], cond, w)
        _check_finite(v, n, "velocity")
        x = x - dt * v
        _check_finite(x, n, "state")
        vels[n] = v
        states[n] = x
    return TrajectoryRecord(states, vels, grid, "inverse")


def replay_forward(x0, velocities, grid: TimeGrid) -> np.ndarray:
    """Re-run the forward Euler recursion with recorded velocities."""
    x = np.array(x0, dtype=np.float64)
    out = [x]
    for v in velocities:
        x = x + grid.dt * v
        out.append(x)
    return np.stack(out)


@dataclass(frozen=True)
class PcliResidual:
    residuals: np.ndarray  # (N, *batch)
    max: np.ndarray
    mean: np.ndarray


def pcli_residual(traj: TrajectoryRecord, field: VelocityField, cond=None, w: float = 1.0) -> PcliResidual:
    """Per-step gap ``||v(x_n, t_n) - v(x_{n+1}, t_{n+1})||`` along a forward run.

    Zero residuals mean forward and reverse Euler updates coincide step by
    step, so the reverse pass retraces the forward one exactly.
    """
    if traj.direction != "forward":
        raise ConfigError("pcli_residual expects a forward trajectory")
    nodes = traj.grid.nodes
    r = np.empty((traj.grid.n_steps,) + traj.states.shape[1:-1])
    for n in range(traj.grid.n_steps):
        v_next = evaluate(field, traj.states[n + 1], nodes[n + 1], cond, w)
        r[n] = np.linalg.norm(traj.velocities[n] - v_next, axis=-1)
    return PcliResidual(r, r.max(axis=0), r.mean(axis=0))


def roundtrip_bound(residual: PcliResidual, grid: TimeGrid, lipschitz: float) -> np.ndarray:
    """``N * dt * exp(L) * max_n r_n``: bound on the noiseless Euler round-trip error."""
    return grid.n_steps * grid.dt * np.exp(lipschitz * grid.t_end) * residual.max


@dataclass(frozen=True)
class ErrorReport:
    local: np.ndarray  # per-step subject/oracle gap, (N, *batch)
    consistency: np.ndarray  # oracle path-consistency residual, (N, *batch)
    measured: np.ndarray  # ||x0_hat - x0||
    bound: np.ndarray
    lipschitz: float

    @property
    def holds(self) -> bool:
        return bool(np.all(self.measured <= self.bound * (1 + 1e-12) + 1e-15))


def local_and_global_error(
    x0,
    subject: VelocityField,
    oracle: VelocityField,
    grid: TimeGrid,
    lipschitz: float | None = None,
    cond=None,
) -> ErrorReport:
    """Accumulated inversion error of ``subject`` against an analytic ``oracle``.

    The sender transports ``x0`` with the oracle; the receiver inverts with the
    subject. Per step the local error is ``delta_n = ||s(x, t) - o(x, t)||`` at
    the receiver's state ``(x_hat_{n+1}, t_{n+1})`` and the oracle's own path
    residual ``r_n`` is recorded. Then

        ||x0_hat - x0|| <= exp(L T) * sum_n dt * (delta_n + r_n)

    with ``L`` a Lipschitz constant of the oracle in ``x``.
    """
    if lipschitz is None:
        lipschitz = oracle.lipschitz_bound
    if lipschitz is None:
        raise ConfigError("oracle has no declared Lipschitz bound; pass one explicitly")
    fwd = euler_forward(x0, oracle, grid, cond)
    inv = euler_inverse(fwd.end, subject, grid, cond)
    nodes = grid.nodes
    local = np.empty((grid.n_steps,) + fwd.states.shape[1:-1])
    for n in range(grid.n_steps):
        o = oracle(inv.states[n + 1], nodes[n + 1], cond)
        local[n] = np.linalg.norm(inv.velocities[n] - o, axis=-1)
    cons = pcli_residual(fwd, oracle, cond).residuals
    measured = np.linalg.norm(inv.end - fwd.start, axis=-1)
    bound = np.exp(lipschitz * grid.t_end) * grid.dt * (local + cons).sum(axis=0)
    return ErrorReport(local, cons, measured, bound, float(lipschitz))


# --- VP-schedule samplers -------------------------------------------------


def _eps_model(model):
    fn = getattr(model, "eps", model)
    if not callable(fn):
        raise ConfigError("DDIM/DDPM need a noise predictor eps(x, s, cond)")
    return fn


def _diffusion_times(schedule: VPSchedule, grid: TimeGrid) -> np.ndarray:
    s = schedule.s_of_t(grid.nodes)
    for v in (s[0], s[-1]):
        schedule.check_s(v)
    return s


def _ddim_step(x, eps, s_from, s_to, schedule, eta=0.0, z=None):
    a_f, a_t = schedule.alpha(s_from), schedule.alpha(s_to)
    sg_f, sg_t = schedule.sigma(s_from), schedule.sigma(s_to)
    x0_pred = (x - sg_f * eps) / a_f
    if eta == 0.0:
        return a_t * x0_pred + sg_t * eps
    # ancestral noise level of the generalized DDIM family; eta = 1 is DDPM
    c = eta * np.sqrt((sg_t**2 / sg_f**2) * (1.0 - (a_f / a_t) ** 2))
    return a_t * x0_pred + np.sqrt(sg_t**2 - c**2) * eps + c * z


def ddpm_forward(
    x,
    model,
    schedule: VPSchedule,
    grid: TimeGrid,
    seed=None,
    cond=None,
    w: float = 1.0,
    eta: float = 1.0,
) -> TrajectoryRecord:
    """Generate from noise (t = 0) to data (t = 1) with the DDIM(eta) recursion.

    ``eta = 1`` is ancestral DDPM sampling with keyed noise; ``eta = 0`` is the
    deterministic DDIM sampler. ``velocities`` records the equivalent average
    velocity ``(x_{n+1} - x_n) / dt`` of every step.
    """
    eps_fn = _eps_model(model)
    s = _diffusion_times(schedule, grid)
    x = np.array(x, dtype=np.float64)
    _check_finite(x, 0, "initial state")
    if eta != 0.0:
        if seed is None:
            raise ConfigError("stochastic sampling needs a seed")
        rng = keyed_rng(seed if isinstance(seed, StegoKey) else StegoKey.derive("ddpm", seed))
    states = np.empty((grid.n_steps + 1,) + x.shape)
    vels = np.empty((grid.n_steps,) + x.shape)
    states[0] = x
    for n in range(grid.n_steps):
        eps = _guided_eps(eps_fn, x, s[n], cond, w)
        z = rng.standard_normal(x.shape) if eta != 0.0 else None
        x_new = _ddim_step(x, eps, s[n], s[n + 1], schedule, eta, z)
        _check_finite(x_new, n + 1, "state")
        vels[n] = (x_new - x) / grid.dt
        states[n + 1] = x = x_new
    return TrajectoryRecord(states, vels, grid, "forward")


def ddim_forward(x, model, schedule: VPSchedule, grid: TimeGrid, cond=None, w: float = 1.0) -> TrajectoryRecord:
    return ddpm_forward(x, model, schedule, grid, cond=cond, w=w, eta=0.0)


def ddim_inverse(xT, model, schedule: VPSchedule, grid: TimeGrid, cond=None, w: float = 1.0) -> TrajectoryRecord:
    """Naive DDIM inversion: each step reuses the noise predicted at its known endpoint."""
    eps_fn = _eps_model(model)
    s = _diffusion_times(schedule, grid)
    x = np.array(xT, dtype=np.float64)
    _check_finite(x, grid.n_steps, "terminal state")
    states = np.empty((grid.n_steps + 1,) + x.shape)
    vels = np.empty((grid.n_steps,) + x.shape)
    states[-1] = x
    for n in range(grid.n_steps - 1, -1, -1):
        eps = _guided_eps(eps_fn, x, s[n + 1], cond, w)
        x_new = _ddim_step(x, eps, s[n + 1], s[n], schedule)
        _check_finite(x_new, n, "state")
        vels[n] = (x - x_new) / grid.dt
        states[n] = x = x_new
    return TrajectoryRecord(states, vels, grid, "inverse")


def _guided_eps(eps_fn, x, s, cond, w):
    e_cond = eps_fn(x, s, cond)
    if cond is None or w == 1.0:
        return e_cond
    e_unc = eps_fn(x, s, None)
    return e_unc + w * (e_cond - e_unc)
