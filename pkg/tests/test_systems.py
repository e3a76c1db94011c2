import filecmp
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difkit.dyn import TimeGrid, integrate
from difkit.systems import (COMMON_PARAMS, ENV_NAMES, PARAM_RANGES, SchemaError, SystemId, default_tc,
                            generate_dataset, invariant_vector_field, load_dataset, sample_params,
                            save_dataset, vector_field)

SYSTEMS = list(SystemId)


@pytest.mark.parametrize("system", SYSTEMS)
def test_parameter_draws_stay_in_ranges(system):
    rng = np.random.default_rng(0)
    draws = [sample_params(system, rng) for _ in range(10_000)]
    for name, (lo, hi) in PARAM_RANGES[system].items():
        v = np.array([p[name] for p in draws])
        assert v.min() >= lo and v.max() <= hi, name


def test_sir_initial_recovered_is_zero():
    rng = np.random.default_rng(5)
    assert all(sample_params("sir", rng).x0[2] == 0.0 for _ in range(200))


def test_param_streams_are_seeded():
    a = [sample_params("lotka_volterra", np.random.default_rng(9)) for _ in range(3)]
    b = [sample_params("lotka_volterra", np.random.default_rng(9)) for _ in range(3)]
    assert all(x.values == y.values and np.array_equal(x.x0, y.x0) for x, y in zip(a, b))


def test_pendulum_damped_hand_value():
    f = vector_field("pendulum", 0, {"alpha": 1.0, "rho": 0.2})
    np.testing.assert_allclose(f(np.array([math.pi / 2, -1.0])), [-1.0, -0.8], atol=1e-15)


def test_pendulum_powered_sign_zero():
    f = vector_field("pendulum", 1, {"alpha": 1.3, "rho": 0.3})
    x = np.array([0.4, 0.0])
    inv = invariant_vector_field("pendulum", {"alpha": 1.3})
    np.testing.assert_array_equal(f(x), inv(x))


def test_sir_origin_hand_value():
    f = vector_field("sir", 0, {"beta": 4.0, "gamma": 0.5})
    out = f(np.array([10.0, 5.0, 0.0]))
    np.testing.assert_allclose(out, [-40 / 3, 40 / 3 - 2.5, 2.5], rtol=1e-14)


def test_pendulum_invariant_hand_value():
    f = invariant_vector_field("pendulum", {"alpha": 1.5, "rho": 0.3})
    np.testing.assert_allclose(f(np.array([0.5, -0.2])), [-0.2, -2.25 * math.sin(0.5)], rtol=1e-15)


@given(s=st.floats(0.1, 10), i=st.floats(0.1, 10), r=st.floats(0, 10), beta=st.floats(4, 8))
def test_sir_invariant_has_no_recovery(s, i, r, beta):
    assert invariant_vector_field("sir", {"beta": beta})(np.array([s, i, r]))[2] == 0.0


def test_lv_invariant_at_zero_predators():
    p = {"alpha": 1.5, "beta": 0.1, "gamma": 0.6, "delta": 5e-4}
    out = invariant_vector_field("lotka_volterra", p)(np.array([1200.0, 0.0]))
    assert out[0] == pytest.approx(1.5 * 1200.0)


@pytest.mark.parametrize("system", SYSTEMS)
@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_batched_fields_match_single(system, seed):
    rng = np.random.default_rng(seed)
    ps = [sample_params(system, rng) for _ in range(4)]
    X = np.stack([p.x0 for p in ps]) + rng.uniform(0.0, 0.5, (4, len(ps[0].x0)))
    batch = {k: np.array([p[k] for p in ps]) for k in ps[0].values}
    for env in range(4):
        single = np.stack([vector_field(system, env, p)(x) for p, x in zip(ps, X)])
        np.testing.assert_allclose(vector_field(system, env, batch)(X), single, rtol=1e-14)


@pytest.mark.parametrize("system", SYSTEMS)
def test_invariant_field_ignores_environment_params(system):
    rng = np.random.default_rng(2)
    p = sample_params(system, rng)
    common = {k: p[k] for k in COMMON_PARAMS[system]}
    x = p.x0 + 0.3
    np.testing.assert_array_equal(invariant_vector_field(system, p)(x), invariant_vector_field(system, common)(x))


def test_pendulum_invariant_conserves_energy():
    rng = np.random.default_rng(11)
    for _ in range(10):
        p = sample_params("pendulum", rng)
        tr = integrate(invariant_vector_field("pendulum", p), p.x0, TimeGrid())
        th, om = tr.states
        E = 0.5 * om**2 + p["alpha"] ** 2 * (1 - np.cos(th))
        assert np.max(np.abs(E - E[0])) / abs(E[0]) < 1e-4


def test_sir_origin_conserves_population():
    rng = np.random.default_rng(12)
    for _ in range(10):
        p = sample_params("sir", rng)
        tr = integrate(vector_field("sir", 0, p), p.x0, TimeGrid())
        N = tr.states.sum(axis=0)
        assert np.max(np.abs(N - N[0])) / N[0] < 1e-6


def test_default_past_windows():
    assert default_tc("pendulum", 100) == 33
    assert default_tc("sir", 100) == 50
    assert default_tc("lotka_volterra", 100, 4) == 25


@pytest.mark.parametrize("system", SYSTEMS)
def test_small_dataset_structure(small_datasets, system):
    ds = small_datasets[system.value]
    assert ds.meta.n_train == 16 and ds.meta.n_test == 12
    for split, n in ((ds.train, 4), (ds.test, 3)):
        counts = np.bincount([s.env for s in split], minlength=4)
        assert counts.tolist() == [n] * 4
    for s in ds.test:
        assert np.array_equal(s.x_inv.states[:, 0], s.x.states[:, 0])
    assert np.all(ds.meta.norm_std > 0)
    assert len(ENV_NAMES[system]) == 4


def test_default_pendulum_dataset_counts(tmp_path):
    ds = generate_dataset("pendulum", seed=0, n_test_per_env=2)
    assert len(ds.train) == 800
    assert np.bincount([s.env for s in ds.train]).tolist() == [200] * 4


def test_environment_subset_and_noise():
    ds = generate_dataset("pendulum", seed=1, n_train_per_env=3, n_test_per_env=2, envs=[2, 0], noise_std=0.01)
    assert ds.meta.envs == (0, 2)
    assert sorted({s.env for s in ds.train}) == [0, 2]
    clean = generate_dataset("pendulum", seed=1, n_train_per_env=3, n_test_per_env=2, envs=[0, 2])
    for a, b in zip(ds.test, clean.test):
        assert np.array_equal(a.x.states[:, 0], b.x.states[:, 0])
        assert not np.array_equal(a.x.states, b.x.states)


def test_round_trip_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        save_dataset(generate_dataset("sir", seed=7, n_train_per_env=2, n_test_per_env=2), out)
    for name in ("meta.txt", "train.ndrec", "test.ndrec"):
        assert filecmp.cmp(a / name, b / name, shallow=False)
    ds = generate_dataset("sir", seed=7, n_train_per_env=2, n_test_per_env=2)
    back = load_dataset(a)
    assert back.meta.T_c == ds.meta.T_c and back.meta.system is ds.meta.system
    np.testing.assert_array_equal(back.meta.norm_std, ds.meta.norm_std)
    for s, t in zip(ds.train + ds.test, back.train + back.test):
        assert s.env == t.env and s.params.values == t.params.values
        np.testing.assert_array_equal(s.x.states, t.x.states)
        if s.x_inv is not None:
            np.testing.assert_array_equal(s.x_inv.states, t.x_inv.states)


def test_truncated_file_is_schema_error(tmp_path):
    save_dataset(generate_dataset("pendulum", seed=2, n_train_per_env=2, n_test_per_env=1), tmp_path)
    path = tmp_path / "train.ndrec"
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(SchemaError):
        load_dataset(tmp_path)


def test_zero_std_meta_rejected(tmp_path):
    save_dataset(generate_dataset("pendulum", seed=2, n_train_per_env=2, n_test_per_env=1), tmp_path)
    meta = tmp_path / "meta.txt"
    lines = [ln if not ln.startswith("norm_std=") else "norm_std=0,1" for ln in meta.read_text().splitlines()]
    meta.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="norm_std"):
        load_dataset(tmp_path)
