import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flowstego.core import CapacityError, ConfigError, Message, StegoKey
from flowstego.mapping import (
    MappingParams,
    embed_message,
    extract_message,
    keyed_normals,
    keyed_permutation,
    sign_embed,
    tolerance_radius,
)
from flowstego.metrics import extraction_accuracy

KEY = StegoKey(b"mapping-test-key-0001")


def _key(i):
    return StegoKey.derive("mapping", i)


def test_sign_rule_single():
    np.testing.assert_array_equal(sign_embed([1], [0.7], [0]), [0.7])


def test_sign_rule_identity_permutation():
    np.testing.assert_array_equal(sign_embed([0, 1], [1.2, 0.3], [0, 1]), [-1.2, 0.3])


def test_extract_sign_rule():
    params = MappingParams(2, permutation_seeded=False)
    assert extract_message([-0.01, 5.0], KEY, params).bits.tolist() == [0, 1]
    # an exact zero reads as 1
    assert extract_message([0.0, -0.0], KEY, params).bits.tolist() == [1, 1]


def test_embedded_coordinates_are_standard_normal():
    params = MappingParams(256)
    rng = np.random.default_rng(0)
    xs = [embed_message(Message(rng.integers(0, 2, 64)), _key(i), params).data for i in range(400)]
    coords = np.concatenate(xs)
    assert coords.size >= 100_000
    assert stats.kstest(coords, "norm").statistic < 0.01


def test_embedded_vs_keyed_noise_two_sample():
    params = MappingParams(64)
    rng = np.random.default_rng(1)
    stego = np.concatenate([embed_message(Message(rng.integers(0, 2, 64)), _key(i), params).data
                            for i in range(200)])
    cover = np.concatenate([keyed_normals(_key(10_000 + i), 64) for i in range(200)])
    assert stego.size >= 10_000
    assert stats.ks_2samp(stego, cover).pvalue > 0.01


def test_round_trip_exhaustive_l12():
    params = MappingParams(16)
    for bits in itertools.product((0, 1), repeat=12):
        m = Message(np.array(bits))
        assert np.array_equal(extract_message(embed_message(m, KEY, params), KEY, params, 12).bits, m.bits)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_round_trip_and_scale_invariance(length, seed, scale):
    params = MappingParams(200)
    bits = np.random.default_rng(seed).integers(0, 2, length)
    key = StegoKey.derive("prop", seed)
    x = embed_message(Message(bits), key, params).data
    assert np.array_equal(extract_message(x, key, params, length).bits, bits)
    assert np.array_equal(extract_message(scale * x, key, params, length).bits, bits)


def test_permutation_is_keyed_and_valid():
    params = MappingParams(100)
    p1 = keyed_permutation(KEY, params)
    p2 = keyed_permutation(StegoKey(b"another-key-00000"), params)
    assert sorted(p1.tolist()) == list(range(100))
    assert not np.array_equal(p1, p2)
    assert np.array_equal(keyed_permutation(KEY, MappingParams(100, permutation_seeded=False)), np.arange(100))


def test_capacity_and_dimension_errors():
    params = MappingParams(4)
    with pytest.raises(CapacityError):
        embed_message(Message(np.ones(5, dtype=int)), KEY, params)
    with pytest.raises(CapacityError):
        extract_message(np.ones(3), KEY, params)
    with pytest.raises(CapacityError):
        extract_message(np.ones(4), KEY, params, length=5)
    with pytest.raises(ConfigError):
        MappingParams(4, bits_per_dim=2)
    with pytest.raises(ConfigError):
        MappingParams(0)


def test_tolerance_radius_definition():
    params = MappingParams(2, permutation_seeded=False)
    assert tolerance_radius([0.7, -1.2], KEY, params) == 0.7
    assert tolerance_radius([2.5], KEY, MappingParams(1)) == 2.5
    # only message-carrying coordinates count
    assert tolerance_radius([0.7, -0.1], KEY, params, length=1) == 0.7


def test_perturbation_below_min_magnitude_is_harmless():
    params = MappingParams(64)
    rng = np.random.default_rng(3)
    m = Message(rng.integers(0, 2, 64))
    x = embed_message(m, KEY, params).data
    g = np.min(np.abs(x))
    for frac in np.linspace(-0.999, 0.999, 21):
        delta = frac * g * np.sign(rng.standard_normal(64))
        assert np.array_equal(extract_message(x + delta, KEY, params).bits, m.bits)


def test_tolerance_radius_is_tight():
    params = MappingParams(128)
    rng = np.random.default_rng(4)
    m = Message(rng.integers(0, 2, 40))
    x = embed_message(m, KEY, params).data
    r = tolerance_radius(x, KEY, params, 40)
    for _ in range(50):
        delta = rng.uniform(-1, 1, 128)
        delta *= 0.99 * r / np.abs(delta).max()
        assert extraction_accuracy(m, extract_message(x + delta, KEY, params, 40)) == 1.0
    idx = keyed_permutation(KEY, params)[:40]
    worst = idx[np.argmin(np.abs(x[idx]))]
    push = np.zeros(128)
    push[worst] = -1.01 * r * np.sign(x[worst])
    assert extraction_accuracy(m, extract_message(x + push, KEY, params, 40)) < 1.0


def test_bit_errors_grow_with_noise():
    params = MappingParams(64)
    rng = np.random.default_rng(5)
    trials = 1000
    bits = rng.integers(0, 2, (trials, 64))
    keys = [_key(20_000 + i) for i in range(trials)]
    x = np.stack([embed_message(Message(b), k, params).data for b, k in zip(bits, keys)])
    z = rng.standard_normal(x.shape)
    errors = []
    for sigma in (0.0, 0.01, 0.05, 0.1, 0.3, 1.0):
        dec = np.stack([extract_message(row, k, params).bits for row, k in zip(x + sigma * z, keys)])
        errors.append(int((dec != bits).sum()))
    assert errors[0] == 0
    assert all(a <= b for a, b in zip(errors, errors[1:]))
