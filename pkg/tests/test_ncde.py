import numpy as np
import pytest

from cdesurv.controlpath import ObservationSeq, build_path
from cdesurv.errors import ConfigError, NumericDivergence, ShapeError
from cdesurv.ncde import EncoderParams, SolverConfig, build_schedule, encode, encode_batch, encode_many, latent_velocity


def random_path(rng, n=5, d=2, span=6.0, scheme="cubic_hermite_backward"):
    t = np.concatenate([[0.0], np.sort(rng.choice(np.arange(1, int(span) * 2 + 1) / 2.0, n - 1, replace=False))])
    return build_path(ObservationSeq(t, rng.normal(size=(n, d))), scheme)


def constant_field(params, rng):
    for w in params.f_theta.weights:
        w.data[...] = 0.0
    for b in params.f_theta.biases[:-1]:
        b.data[...] = 0.0
    params.f_theta.biases[-1].data[...] = rng.normal(size=params.f_theta.biases[-1].data.shape)
    return params.f_theta.out_scale * np.tanh(params.f_theta.biases[-1].data).reshape(params.latent_dim, params.channels)


def test_zero_field_keeps_initial_state(rng):
    p = EncoderParams(2, 3, rng, g_hidden=(8,), f_hidden=(8,))
    p.f_theta.weights[-1].data[...] = 0.0
    path = random_path(rng)
    tr = encode(path, p)
    z0 = p.g_phi.forward_numpy(path.knots[:1])[0]
    np.testing.assert_array_equal(tr.grid_states, np.tile(z0, (tr.grid_states.shape[0], 1)))
    np.testing.assert_array_equal(tr.grid_states[0], z0)


@pytest.mark.parametrize("method", ["rk4", "euler"])
@pytest.mark.parametrize("scheme", ["cubic_hermite_backward", "rectilinear"])
def test_constant_field_exact(method, scheme, rng):
    p = EncoderParams(2, 4, rng, g_hidden=(8,), f_hidden=(8,))
    F = constant_field(p, rng)
    path = random_path(rng, n=6, scheme=scheme)
    tr = encode(path, p, SolverConfig(method=method))
    x0 = path.value(0.0)
    expect = tr.grid_states[0] + (path.value(tr.grid_times) - x0) @ F.T
    assert np.max(np.abs(tr.grid_states - expect)) < 1e-10
    anchors = tr.grid_states[0] + (path.knots - x0) @ F.T
    assert np.max(np.abs(tr.anchor_states - anchors)) < 1e-10


def smooth_path(rng, amplitude=1.0, span=6):
    t = np.arange(span + 1.0)
    phase = rng.uniform(0.0, 6.0, size=2)
    return build_path(ObservationSeq(t, amplitude * np.sin(0.5 * t[:, None] + phase)))


def test_rk4_self_convergence(rng):
    p = EncoderParams(2, 3, rng, g_hidden=(8,), f_hidden=(8,))
    path = smooth_path(rng)
    ref = encode(path, p, SolverConfig(steps_per_hour=1024)).final_state
    errs = [np.max(np.abs(encode(path, p, SolverConfig(steps_per_hour=s)).final_state - ref)) for s in (2, 4, 8, 16)]
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    assert all(8 <= r <= 32 for r in ratios), (errs, ratios)


def test_refined_step_agreement(rng):
    p = EncoderParams(2, 3, rng, g_hidden=(8,), f_hidden=(8,), field_scale=0.5)
    path = smooth_path(rng, amplitude=0.5)
    a = encode(path, p, SolverConfig(steps_per_hour=4)).grid_states
    b = encode(path, p, SolverConfig(steps_per_hour=64)).grid_states
    assert np.max(np.abs(a - b)) < 1e-6


def test_euler_first_order(rng):
    p = EncoderParams(2, 3, rng, g_hidden=(8,), f_hidden=(8,))
    path = smooth_path(rng)
    ref = encode(path, p, SolverConfig(steps_per_hour=256)).final_state
    errs = [np.max(np.abs(encode(path, p, SolverConfig(method="euler", steps_per_hour=s)).final_state - ref))
            for s in (16, 32, 64)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(1.6 <= r <= 2.5 for r in ratios), (errs, ratios)


def test_anchors_are_schedule_points(rng):
    path = random_path(rng)
    sched = build_schedule(path, SolverConfig())
    for t in path.knot_times:
        assert np.any(sched == t)
    assert np.all(np.diff(sched) > 0)


def test_latent_velocity_matches_naive_loop(rng):
    p = EncoderParams(3, 4, rng, g_hidden=(8,), f_hidden=(8,))
    z = rng.normal(size=4)
    dx = rng.normal(size=4)
    F = p.field_matrix(z)[0]
    naive = np.zeros(4)
    for i in range(4):
        for j in range(4):
            naive[i] += F[i, j] * dx[j]
    np.testing.assert_allclose(latent_velocity(z, dx, p), naive, rtol=1e-13, atol=1e-15)
    e = np.zeros(4)
    e[2] = 1.0
    np.testing.assert_array_equal(latent_velocity(z, e, p), F[:, 2])
    np.testing.assert_array_equal(latent_velocity(z, np.zeros(4), p), np.zeros(4))
    with pytest.raises(ShapeError):
        latent_velocity(z, np.zeros(3), p)


def test_causality(rng):
    p = EncoderParams(2, 4, rng, g_hidden=(8,), f_hidden=(8,))
    for _ in range(10):
        n = int(rng.integers(3, 7))
        t = np.concatenate([[0.0], np.sort(rng.choice(np.arange(1, 20), n - 1, replace=False)).astype(float)])
        x = rng.normal(size=(n, 2))
        base = encode(build_path(ObservationSeq(t, x)), p)
        j = int(rng.integers(0, n - 1))
        x2 = x.copy()
        x2[j + 1:] += rng.normal(size=x2[j + 1:].shape)
        other = encode(build_path(ObservationSeq(t, x2)), p)
        upto = base.grid_times <= t[j]
        assert np.max(np.abs(base.grid_states[upto] - other.grid_states[upto])) == 0.0


def test_batch_matches_single(rng):
    p = EncoderParams(2, 3, rng, g_hidden=(8,), f_hidden=(8,))
    paths = [random_path(rng, n=int(rng.integers(1, 6))) for _ in range(5)]
    single = [encode(q, p) for q in paths]
    many = encode_many(paths, p)
    for a, b in zip(single, many):
        np.testing.assert_allclose(a.grid_states, b.grid_states, rtol=0, atol=1e-13)
        np.testing.assert_allclose(a.anchor_states, b.anchor_states, rtol=0, atol=1e-13)


def test_single_observation_patient(rng):
    p = EncoderParams(2, 3, rng, g_hidden=(8,), f_hidden=(8,))
    tr = encode(build_path(ObservationSeq([0.0], [[0.3, -0.2]])), p)
    assert tr.grid_states.shape == (1, 3) and tr.anchor_states.shape == (1, 3)


def test_divergence_reports_time(rng):
    p = EncoderParams(1, 2, rng, g_hidden=(4,), f_hidden=(4,), field_scale=1e300)
    path = build_path(ObservationSeq([0.0, 1.0, 2.0], [[1.0], [1e10], [-1e10]]))
    with pytest.raises(NumericDivergence) as info:
        encode(path, p)
    assert info.value.time is not None and 0.0 <= info.value.time <= 2.0


def test_solver_config_errors():
    with pytest.raises(ConfigError):
        SolverConfig(method="midpoint")
    with pytest.raises(ConfigError):
        SolverConfig(steps_per_hour=0)


def test_encode_batch_gradients_reach_both_networks(rng):
    from cdesurv import tensor as T

    p = EncoderParams(2, 3, rng, g_hidden=(4,), f_hidden=(4,))
    enc = encode_batch([random_path(rng), random_path(rng)], p)
    T.backward(T.reduce_sum(T.square(enc.final_states())))
    assert all(np.any(t.grad != 0) for _, t in p.parameters() if t.name.endswith("w0"))
