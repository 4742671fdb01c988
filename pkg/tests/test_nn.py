import numpy as np
import pytest

from _oracles import finite_difference_check
from flowstego.core import ConfigError, FormatError, ShapeError, TimeGrid
from flowstego.flows import GaussianEndpoints, rf_gaussian_field
from flowstego.nn import (
    Mlp,
    MlpField,
    TrainConfig,
    TrainingDivergence,
    coupled_pairs,
    independent_pairs,
    load_checkpoint,
    mlp_forward,
    mlp_grad,
    reflow,
    save_checkpoint,
    time_features,
    train_rectified_flow,
)


def _gauss(n, rng):
    return rng.standard_normal((n, 1))


def test_zero_net_outputs_zero(rng):
    net = Mlp.init(3, (8, 8), seed=1)
    for w, b in zip(net.weights, net.biases):
        w[:] = 0
        b[:] = 0
    np.testing.assert_array_equal(mlp_forward(net, rng.standard_normal((5, 3)), 0.3), np.zeros((5, 3)))


def test_single_linear_layer(rng):
    net = Mlp.init(2, (), seed=2)
    x = rng.standard_normal((4, 2))
    t = 0.6
    xa = np.concatenate([x, np.broadcast_to(time_features(t), (4, 8))], axis=1)
    np.testing.assert_allclose(mlp_forward(net, x, t), xa @ net.weights[0] + net.biases[0], rtol=1e-14)
    assert net.layer_dims == [10, 2]


def test_forward_is_deterministic(rng):
    net = Mlp.init(2, seed=3)
    x = rng.standard_normal((7, 2))
    assert mlp_forward(net, x, 0.2).tobytes() == mlp_forward(net, x, 0.2).tobytes()


def test_dims_and_labels():
    net = Mlp.init(2, (4,), n_classes=3)
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros((1, 3)), 0.1, 0)
    with pytest.raises(ConfigError):
        mlp_forward(net, np.zeros((1, 2)), 0.1)
    with pytest.raises(ConfigError):
        mlp_forward(net, np.zeros((1, 2)), 0.1, 3)
    assert net.layer_dims == [2 + 8 + 3, 4, 2]


def test_gradient_matches_finite_differences(rng):
    net = Mlp.init(3, (5, 4), n_classes=2, seed=3, out_scale=1.0)
    x, t, y = rng.standard_normal((5, 3)), rng.random(5), rng.standard_normal((5, 3))
    assert finite_difference_check(net, x, t, y, rng.integers(0, 2, 5)) < 1e-6


def test_zero_gradient_at_target(rng):
    net = Mlp.init(2, (6,), seed=4)
    x, t = rng.standard_normal((8, 2)), rng.random(8)
    loss, grads = mlp_grad(net, x, t, mlp_forward(net, x, t))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_duplicated_batch_keeps_mean_gradient(rng):
    net = Mlp.init(2, (6,), seed=5)
    x, t, y = rng.standard_normal((8, 2)), rng.random(8), rng.standard_normal((8, 2))
    l1, g1 = mlp_grad(net, x, t, y)
    l2, g2 = mlp_grad(net, np.concatenate([x, x]), np.concatenate([t, t]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_initial_loss_matches_zero_net_expectation():
    # with a zero output layer the loss is E||X1 - X0||^2 = 2 per dimension
    net = Mlp.init(2, (16,), seed=6)
    net.weights[-1][:] = 0
    rng = np.random.default_rng(7)
    x0, x1 = rng.standard_normal((200_000, 2)), rng.standard_normal((200_000, 2))
    t = rng.random(200_000)
    xt = (1 - t)[:, None] * x0 + t[:, None] * x1
    loss, _ = mlp_grad(net, xt, t, x1 - x0)
    assert loss == pytest.approx(4.0, rel=0.01)


def test_train_deterministic_coupling():
    c = np.array([0.8, -0.5])
    pairs = independent_pairs(lambda n, r: r.standard_normal((n, 2)), lambda n, r: np.zeros((n, 2)))

    def shifted(n, rng):
        x0, _, _ = pairs(n, rng)
        return x0, x0 + c, None

    net = train_rectified_flow(shifted, TrainConfig(n_iters=1500, hidden=(32, 32), seed=1), dim=2)
    assert net.history[-1][1] < 1e-3
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 2))
    for t in (0.0, 0.3, 0.7, 1.0):
        assert np.max(np.abs(mlp_forward(net, x + t * c, t) - c)) < 0.05


def test_train_matches_closed_form_gaussian_field():
    pairs = independent_pairs(_gauss, _gauss)
    net = train_rectified_flow(pairs, TrainConfig(n_iters=3000, hidden=(32, 32), seed=3), dim=1)
    ref = rf_gaussian_field(GaussianEndpoints(0.0, 1.0, 0.0, 1.0))
    x = np.linspace(-1.5, 1.5, 7)[:, None]
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        assert np.max(np.abs(mlp_forward(net, x, t) - ref(x, t))) < 0.1


def test_training_is_bit_reproducible():
    pairs = independent_pairs(_gauss, lambda n, r: 2.0 + 0.5 * r.standard_normal((n, 1)))
    cfg = TrainConfig(n_iters=200, hidden=(8,), seed=9)
    a = train_rectified_flow(pairs, cfg, dim=1)
    b = train_rectified_flow(pairs, cfg, dim=1)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.params, b.params))
    assert a.history == b.history


def test_sgd_optimizer_reduces_loss():
    pairs = independent_pairs(_gauss, lambda n, r: 2.0 + 0.5 * r.standard_normal((n, 1)))
    net = train_rectified_flow(pairs, TrainConfig(n_iters=600, hidden=(16,), optimizer="sgd",
                                                  learning_rate=0.05, eval_every=100), dim=1)
    assert net.history[-1][1] < net.history[0][1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard():
    pairs = independent_pairs(_gauss, lambda n, r: 3.0 + r.standard_normal((n, 1)))
    with pytest.raises(TrainingDivergence):
        train_rectified_flow(pairs, TrainConfig(n_iters=2000, optimizer="sgd", learning_rate=50.0,
                                                lr_decay=False), dim=1)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        train_rectified_flow(independent_pairs(_gauss, _gauss), TrainConfig(n_iters=1))


def test_reflow_fixed_point_on_straight_coupling():
    c = np.array([1.0])

    def shifted(n, rng):
        x0 = rng.standard_normal((n, 1))
        return x0, x0 + c, None

    cfg = TrainConfig(n_iters=1500, hidden=(32, 32), seed=4)
    net1 = train_rectified_flow(shifted, cfg, dim=1)
    net2 = reflow(net1, _gauss, TimeGrid(20), TrainConfig(n_iters=500, hidden=(32, 32), seed=5,
                                                         learning_rate=1e-3), n_pairs=5000)
    x = np.linspace(-2, 2, 9)[:, None]
    for t in (0.0, 0.5, 1.0):
        assert np.max(np.abs(mlp_forward(net2, x, t) - mlp_forward(net1, x, t))) < 0.05


def test_coupled_pairs_resample_rows(rng):
    x0 = np.arange(10.0)[:, None]
    sample = coupled_pairs(x0, x0 + 100, np.arange(10))
    a, b, lab = sample(50, rng)
    np.testing.assert_array_equal(b - a, 100.0)
    np.testing.assert_array_equal(a[:, 0], lab)


def test_mlp_field_routing(rng):
    cond = Mlp.init(2, (4,), n_classes=2, seed=1)
    unc = Mlp.init(2, (4,), seed=2)
    f = MlpField(cond, unc)
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(f(x, 0.5, None), mlp_forward(unc, x.reshape(3, 2, 2), 0.5).reshape(3, 4))
    np.testing.assert_array_equal(f(x, 0.5, 1), mlp_forward(cond, x.reshape(3, 2, 2), 0.5, 1).reshape(3, 4))
    with pytest.raises(ConfigError):
        MlpField(cond, cond)


def test_checkpoint_round_trip(tmp_path):
    net = Mlp.init(2, (5, 3), n_classes=2, seed=8)
    p = tmp_path / "net.ck"
    save_checkpoint(p, net)
    back = load_checkpoint(p)
    assert back.layer_dims == net.layer_dims and back.n_classes == 2 and back.dim == 2
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.params, net.params))
    np.testing.assert_array_equal(back.time_freqs, net.time_freqs)


def test_checkpoint_corruption(tmp_path):
    net = Mlp.init(1, (3,), seed=8)
    p = tmp_path / "net.ck"
    save_checkpoint(p, net)
    buf = p.read_bytes()
    p.write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        load_checkpoint(p)
    p.write_bytes(buf[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(p)
    p.write_bytes(buf + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(p)
    p.write_bytes(buf[:-8] + np.array([np.nan]).tobytes())
    with pytest.raises(FormatError):
        load_checkpoint(p)
