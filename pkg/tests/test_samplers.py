import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowstego.core import ConfigError, IntegrationError, TimeGrid
from flowstego.flows import (
    ConstantField,
    GaussianEndpoints,
    GmmSpec,
    LinearField,
    VelocityField,
    VPSchedule,
    rf_gaussian_field,
    vp_score_field,
)
from flowstego.nn import MlpField, TrainConfig, independent_pairs, train_rectified_flow
from flowstego.samplers import (
    ddim_forward,
    ddim_inverse,
    ddpm_forward,
    euler_forward,
    euler_inverse,
    local_and_global_error,
    pcli_residual,
    replay_forward,
    roundtrip_bound,
)


class Shifted(VelocityField):
    """``field + offset``: a constructed imperfect model of ``field``."""

    def __init__(self, field, offset):
        self.field, self.offset, self.dim = field, offset, field.dim

    def _eval(self, x, t, cond):
        return self.field(x, t, cond) + self.offset


class ConstantEps:
    def __init__(self, e):
        self.e = np.asarray(e, dtype=float)

    def eps(self, x, s, cond=None):
        return np.broadcast_to(self.e, np.shape(x)).copy()


def _roundtrip(x0, field, n):
    fwd = euler_forward(x0, field, TimeGrid(n))
    return fwd, euler_inverse(fwd.end, field, TimeGrid(n))


@pytest.mark.parametrize("n", [1, 7, 20, 100])
def test_constant_field_round_trip_is_exact(n, rng):
    c = rng.standard_normal(64)
    x0 = rng.standard_normal(64)
    fwd, inv = _roundtrip(x0, ConstantField(c), n)
    np.testing.assert_allclose(fwd.end, x0 + c, atol=1e-12)
    assert np.max(np.abs(inv.end - x0)) < 1e-12
    assert np.all(pcli_residual(fwd, ConstantField(c)).residuals == 0)


def test_linear_field_compound_growth():
    fwd, inv = _roundtrip(np.array([1.0]), LinearField(1.0), 20)
    assert fwd.end[0] == pytest.approx(1.05**20, rel=1e-13)
    assert fwd.end[0] == pytest.approx(2.6533, abs=5e-5)
    assert inv.end[0] == pytest.approx((1 - 0.05**2) ** 20, rel=1e-13)
    assert 1 - inv.end[0] == pytest.approx(0.0488, abs=5e-5)


def test_euler_first_order_ratios():
    ns = (10, 20, 40, 80, 160)
    fwd_err = [abs(euler_forward(np.array([1.0]), LinearField(1.0), TimeGrid(n)).end[0] - np.e) for n in ns]
    rt_err = [abs(_roundtrip(np.array([1.0]), LinearField(1.0), n)[1].end[0] - 1.0) for n in ns]
    for errs in (fwd_err, rt_err):
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios >= 1.8) & (ratios <= 2.2))


def test_forward_accepts_batches(rng):
    f = rf_gaussian_field(GaussianEndpoints(0.0, 1.0, 2.0, 0.5))
    x = rng.standard_normal((5, 3))
    batched = euler_forward(x, f, TimeGrid(10)).end
    single = np.stack([euler_forward(r, f, TimeGrid(10)).end for r in x])
    np.testing.assert_allclose(batched, single, rtol=0, atol=1e-15)


def test_pcli_on_gaussian_field_matches_two_point_evaluation():
    f = rf_gaussian_field(GaussianEndpoints(0.0, 1.0, 0.0, 1.0))
    grid = TimeGrid(20)
    traj = euler_forward(np.array([1.0]), f, grid)
    res = pcli_residual(traj, f)
    assert np.all(res.residuals > 0)
    direct = [abs(f(traj.states[n], grid.nodes[n])[0] - f(traj.states[n + 1], grid.nodes[n + 1])[0])
              for n in range(20)]
    assert float(res.max) == pytest.approx(max(direct), rel=1e-14)
    assert float(res.mean) == pytest.approx(np.mean(direct), rel=1e-14)


def test_pcli_needs_forward_trajectory():
    f = ConstantField([1.0])
    inv = euler_inverse(np.zeros(1), f, TimeGrid(3))
    with pytest.raises(ConfigError):
        pcli_residual(inv, f)


def test_replay_and_per_step_reverse_identity(rng):
    f = rf_gaussian_field(GaussianEndpoints([0.0, 1.0], 1.0, [2.0, -1.0], 0.4))
    grid = TimeGrid(12)
    fwd = euler_forward(rng.standard_normal(2), f, grid)
    assert replay_forward(fwd.start, fwd.velocities, grid).tobytes() == fwd.states.tobytes()
    inv = euler_inverse(fwd.end, f, grid)
    for n in range(grid.n_steps):
        v = f(inv.states[n + 1], grid.nodes[n + 1])
        assert np.array_equal(inv.states[n + 1] - grid.dt * v, inv.states[n])


@settings(max_examples=60, deadline=None)
@given(
    st.floats(-2, 2), st.floats(0.2, 2), st.floats(-2, 2), st.floats(0.2, 2),
    st.floats(-3, 3), st.integers(1, 60),
)
def test_round_trip_bounded_by_pcli(m0, s0, m1, s1, x0, n):
    f = rf_gaussian_field(GaussianEndpoints(m0, s0, m1, s1))
    grid = TimeGrid(n)
    fwd = euler_forward(np.array([x0]), f, grid)
    err = abs(euler_inverse(fwd.end, f, grid).end[0] - x0)
    bound = float(roundtrip_bound(pcli_residual(fwd, f), grid, f.lipschitz_bound))
    assert err <= bound * (1 + 1e-9) + 1e-14


def test_error_bound_exact_oracle(rng):
    f = rf_gaussian_field(GaussianEndpoints(0.0, 1.0, 1.0, 0.5))
    rep = local_and_global_error(rng.standard_normal((32, 1)), f, f, TimeGrid(20))
    assert np.all(rep.local == 0)
    assert rep.holds


def test_error_bound_constant_perturbation(rng):
    f = rf_gaussian_field(GaussianEndpoints(0.0, 1.0, 1.0, 0.5))
    rep = local_and_global_error(rng.standard_normal((64, 1)), Shifted(f, 1e-3), f, TimeGrid(20))
    np.testing.assert_allclose(rep.local, 1e-3, rtol=1e-9)
    assert rep.holds


def test_error_bound_needs_lipschitz():
    with pytest.raises(ConfigError):
        local_and_global_error(np.zeros(1), LinearField(1.0), Shifted(LinearField(1.0), 0.0), TimeGrid(4))


@pytest.mark.slow
def test_error_bound_trained_mlp():
    ep = GaussianEndpoints([0.0, 0.0], 1.0, [1.5, -0.5], 0.6)
    pairs = independent_pairs(lambda n, r: r.standard_normal((n, 2)),
                              lambda n, r: ep.mu1 + ep.sigma1 * r.standard_normal((n, 2)))
    net = train_rectified_flow(pairs, TrainConfig(n_iters=1500, hidden=(32, 32), seed=2), dim=2)
    x0 = np.random.default_rng(3).standard_normal((256, 2))
    rep = local_and_global_error(x0, MlpField(net), rf_gaussian_field(ep), TimeGrid(20))
    assert rep.measured.shape == (256,)
    assert rep.holds


@pytest.mark.parametrize("ep", [
    GaussianEndpoints(0.0, 1.0, 0.0, 1.0),
    GaussianEndpoints(0.0, 1.0, 2.0, 0.3),
    GaussianEndpoints(1.0, 0.5, -1.0, 1.5),
])
def test_round_trip_error_decreases_with_steps(ep, rng):
    f = rf_gaussian_field(ep)
    x0 = rng.standard_normal((64, 1))
    errs = [np.linalg.norm(_roundtrip(x0, f, n)[1].end - x0) for n in (5, 10, 20, 40, 80)]
    assert all(b <= 1.05 * a for a, b in zip(errs, errs[1:]))


def test_ddim_tracks_probability_flow_euler(rng):
    gmm = GmmSpec([1.0], [[1.0, -0.5]], [0.6])
    sch = VPSchedule()
    field = vp_score_field(gmm, sch)
    x = rng.standard_normal((16, 2))
    for n in (20, 50):
        grid = TimeGrid(n)
        d = ddim_forward(x, field, sch, grid).states
        e = euler_forward(x, field, grid).states
        assert np.max(np.abs(d - e)) < 5 * grid.dt


def test_ddim_round_trip_worse_than_rf():
    mean, std = np.array([1.0, -0.5]), 0.6
    x0 = np.random.default_rng(5).standard_normal((256, 2))
    grid = TimeGrid(20)
    rf = rf_gaussian_field(GaussianEndpoints([0.0, 0.0], 1.0, mean, std))
    rf_err = np.linalg.norm(_roundtrip(x0, rf, 20)[1].end - x0, axis=-1)
    sch = VPSchedule()
    vp = vp_score_field(GmmSpec([1.0], [mean], [std]), sch)
    xt = ddim_forward(x0, vp, sch, grid).end
    ddim_err = np.linalg.norm(ddim_inverse(xt, vp, sch, grid).end - x0, axis=-1)
    assert np.median(ddim_err) > np.median(rf_err)


def test_ddim_single_step_with_constant_noise_is_exact(rng):
    sch = VPSchedule()
    model = ConstantEps(rng.standard_normal(4))
    x = rng.standard_normal(4)
    xt = ddim_forward(x, model, sch, TimeGrid(1)).end
    np.testing.assert_allclose(ddim_inverse(xt, model, sch, TimeGrid(1)).end, x, atol=1e-12)


def test_ddpm_with_zero_noise_is_ddim(rng):
    sch = VPSchedule()
    field = vp_score_field(GmmSpec([0.5, 0.5], [[1.0], [-1.0]], [0.3, 0.3]), sch)
    x = rng.standard_normal((8, 1))
    a = ddpm_forward(x, field, sch, TimeGrid(15), eta=0.0)
    b = ddim_forward(x, field, sch, TimeGrid(15))
    assert a.states.tobytes() == b.states.tobytes()


def test_ddpm_keyed_noise_is_deterministic(rng):
    sch = VPSchedule()
    field = vp_score_field(GmmSpec([1.0], [[0.5]], [0.4]), sch)
    x = rng.standard_normal((8, 1))
    a = ddpm_forward(x, field, sch, TimeGrid(10), seed=3).states
    assert a.tobytes() == ddpm_forward(x, field, sch, TimeGrid(10), seed=3).states.tobytes()
    assert not np.array_equal(a, ddpm_forward(x, field, sch, TimeGrid(10), seed=4).states)
    with pytest.raises(ConfigError):
        ddpm_forward(x, field, sch, TimeGrid(10))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_names_the_step():
    with pytest.raises(IntegrationError, match="step 0"):
        euler_forward(np.array([np.nan]), ConstantField([1.0]), TimeGrid(3))
    with pytest.raises(IntegrationError):
        euler_forward(np.array([1.0]), LinearField(1e308), TimeGrid(3))
    with pytest.raises(ConfigError):
        ddim_forward(np.zeros(1), object(), VPSchedule(), TimeGrid(2))
