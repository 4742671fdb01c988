"""Reference computations shared by unit and acceptance tests."""

import numpy as np

from flowstego.nn import Mlp, mlp_grad


def finite_difference_check(net: Mlp, x, t, target, labels=None, h=1e-3) -> float:
    """Worst elementwise relative error between backprop and finite differences.

    Uses the fourth-order central stencil: with a larger step its rounding
    error stays near 1e-13, small enough to resolve gradients of order 1e-5
    at a 1e-6 relative tolerance.
    """
    _, grads = mlp_grad(net, x, t, target, labels)
    worst = 0.0
    for p, g in zip(net.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = orig + step
                vals.append(mlp_grad(net, x, t, target, labels)[0])
            flat[i] = orig
            fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8))
    return worst


def gradient_matrix(hidden_counts=(1, 2, 3), widths=(4, 16), seed=0):
    """Yield (label, worst relative error) for every layer shape in the test matrix."""
    rng = np.random.default_rng(seed)
    for depth in hidden_counts:
        for width in widths:
            for n_classes in (0, 2):
                net = Mlp.init(2, (width,) * depth, n_classes=n_classes, seed=int(rng.integers(1 << 30)),
                               out_scale=1.0)
                for b in net.biases:
                    b[:] = 0.1 * rng.standard_normal(b.shape)
                x = rng.standard_normal((6, 2))
                t = rng.random(6)
                y = rng.standard_normal((6, 2))
                labels = rng.integers(0, 2, 6) if n_classes else None
                yield f"{depth}x{width}/classes={n_classes}", finite_difference_check(net, x, t, y, labels)
