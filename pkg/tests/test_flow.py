import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mscfm import autodiff as ad
from mscfm.flow import (Codebook, draw_noise, fm_loss, interpolate, joint_losses, make_batch,
                        mc_loss, rollout_targets, sample, sample_step_grid)
from mscfm.velocity import VelocityModel


def constant_field(k):
    return lambda x, o, t, d: np.broadcast_to(np.asarray(k, dtype=float), np.shape(x)).copy()


def linear_field(a):
    return lambda x, o, t, d: a * np.asarray(x)


def constant_model(value, x_dim):
    m = VelocityModel.init(x_dim, 0, (8, 8), n_freq=3, seed=0)
    p = m.layout.unflatten(m.params)
    p["b2"][:] = value
    return m.with_params(m.layout.flatten(p))


def small_model(x_dim=2, seed=0):
    m = VelocityModel.init(x_dim, 0, (16, 16), n_freq=3, seed=seed)
    return m.with_params(m.params + 0.1 * np.random.default_rng(seed).standard_normal(m.n_params))


# ------------------------------------------------------------ interpolate

def test_interpolate_endpoints_and_midpoint():
    x0, x1 = np.array([0.0, 0.0]), np.array([2.0, 4.0])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0).x_t, x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0).x_t, x1)
    p = interpolate(x0, x1, 0.5)
    np.testing.assert_array_equal(p.x_t, [1.0, 2.0])
    np.testing.assert_array_equal(p.v_true, [2.0, 4.0])


def test_interpolate_per_row_t():
    x0, x1 = np.zeros((3, 2)), np.ones((3, 2))
    p = interpolate(x0, x1, np.array([0.0, 0.25, 1.0]))
    np.testing.assert_array_equal(p.x_t[:, 0], [0.0, 0.25, 1.0])


def test_interpolate_shape_mismatch():
    with pytest.raises(ValueError):
        interpolate(np.zeros(2), np.zeros(3), 0.5)


# --------------------------------------------------------------- fm loss

def test_fm_loss_zero_when_model_outputs_displacement():
    x0 = np.zeros((4, 2))
    x1 = np.tile([1.5, -0.5], (4, 1))
    batch = make_batch(x1, None, np.random.default_rng(0), fraction=0.0, n=2)
    batch.fm = interpolate(x0, x1, np.linspace(0, 1, 4))
    assert float(fm_loss(constant_model([1.5, -0.5], 2), batch).value) == 0.0


def test_fm_loss_single_sample_arithmetic():
    batch = make_batch(np.array([[2.0]]), None, np.random.default_rng(0), fraction=0.0, n=2)
    batch.fm = interpolate(np.array([[0.0]]), np.array([[2.0]]), np.array([0.3]))
    assert float(fm_loss(constant_model(0.0, 1), batch).value) == 4.0


def test_fm_loss_matches_hand_computed_mean():
    rng = np.random.default_rng(5)
    model = small_model()
    batch = make_batch(rng.standard_normal((10, 2)), None, rng, fraction=0.0, n=2)
    loss = float(fm_loss(model, batch).value)
    pred = model.evaluate(batch.fm.x_t, None, batch.fm.t, 0.0)
    expect = np.mean(np.sum((pred - batch.fm.v_true) ** 2, axis=1))
    assert loss == pytest.approx(expect, rel=1e-13)


def test_fm_loss_empty_partition_is_zero_with_zero_gradient():
    model = small_model()
    batch = make_batch(np.ones((4, 2)), None, np.random.default_rng(0), fraction=1.0, n=2)
    loss = fm_loss(model, batch)
    assert float(loss.value) == 0.0
    np.testing.assert_array_equal(ad.backward(loss), np.zeros(model.n_params))


# --------------------------------------------------------------- rollout

@pytest.mark.parametrize("n", [2, 4, 8])
def test_constant_field_targets_equal_constant(n):
    k = np.array([0.7, -1.3])
    x = np.random.default_rng(0).standard_normal((5, 2))
    tg = rollout_targets(constant_field(k), x, None, np.zeros(5), np.full(5, 1 / 8), n)
    for kk in range(2, n + 1):
        np.testing.assert_allclose(tg.target(kk), np.tile(k, (5, 1)), rtol=1e-15)


def test_n2_is_shortcut_rule_bit_exact():
    field = small_model()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 2))
    t = np.full(6, 0.25)
    d = np.full(6, 0.125)
    tg = rollout_targets(field, x, None, t, d, 2)
    v0 = field(x, None, t, d)
    x_mid = x + v0 * d[:, None]
    v1 = field(x_mid, None, t + d, d)
    shortcut = (v0 + v1) / 2
    assert tg.target(2).tobytes() == shortcut.tobytes()


def test_linear_field_two_step_oracle():
    x = np.array([[1.0, -2.0]])
    d = 0.25
    tg = rollout_targets(linear_field(1.0), x, None, np.array([0.0]), np.array([d]), 2)
    np.testing.assert_allclose(tg.velocities[1], x * (1 + d), rtol=1e-15)
    np.testing.assert_allclose(tg.target(2), x * (1 + d / 2), rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(n=st.sampled_from([2, 4, 8]), seed=st.integers(0, 10_000))
def test_telescoping_identity(n, seed):
    rng = np.random.default_rng(seed)
    t, d = sample_step_grid(rng, n, 16)
    x = rng.standard_normal((16, 2))
    tg = rollout_targets(small_model(seed=seed % 7), x, None, t, d, n)
    for k in range(2, n + 1):
        lhs = k * d[:, None] * tg.target(k)
        rhs = np.sum(d[None, :, None] * tg.velocities[:k], axis=0)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-14, atol=1e-15)


def test_rollout_rejects_leaving_unit_interval():
    with pytest.raises(ValueError):
        rollout_targets(constant_field(1.0), np.zeros((1, 2)), None, np.array([0.5]), np.array([0.25]), 4)


# --------------------------------------------------------------- mc loss

def _cons_batch(x, t, d, n):
    batch = make_batch(np.zeros((len(x), x.shape[1])), None, np.random.default_rng(0), fraction=1.0, n=n)
    batch.cons_xt, batch.cons_t, batch.cons_d = x, t, d
    return batch


def test_mc_loss_zero_for_constant_model():
    model = constant_model([0.25, -0.5], 2)  # dyadic, so prefix means are exact
    x = np.random.default_rng(0).standard_normal((4, 2))
    batch = _cons_batch(x, np.zeros(4), np.full(4, 1 / 8), 4)
    tg = rollout_targets(model, x, None, batch.cons_t, batch.cons_d, 4)
    assert float(mc_loss(model, batch, tg).value) == 0.0


def test_mc_loss_single_entry_arithmetic():
    model = constant_model(1.0, 1)
    batch = _cons_batch(np.array([[0.0]]), np.array([0.0]), np.array([0.25]), 2)
    tg = rollout_targets(constant_field(0.5), batch.cons_xt, None, batch.cons_t, batch.cons_d, 2)
    assert float(mc_loss(model, batch, tg).value) == 0.25


def test_mc_loss_matches_hand_computed_mean_over_k():
    rng = np.random.default_rng(2)
    model = small_model()
    frozen = small_model(seed=3)
    t, d = sample_step_grid(rng, 4, 5)
    x = rng.standard_normal((5, 2))
    batch = _cons_batch(x, t, d, 4)
    tg = rollout_targets(frozen, x, None, t, d, 4)
    terms = [np.sum((model.evaluate(x, None, t, k * d) - tg.target(k)) ** 2, axis=1) for k in (2, 3, 4)]
    assert float(mc_loss(model, batch, tg).value) == pytest.approx(np.mean(terms), rel=1e-13)


def test_joint_losses_match_separate_losses():
    rng = np.random.default_rng(4)
    model = small_model()
    batch = make_batch(rng.standard_normal((16, 2)), None, rng, fraction=0.25, n=4)
    tg = rollout_targets(model.snapshot(), batch.cons_xt, None, batch.cons_t, batch.cons_d, 4)
    lf, lm = joint_losses(model, batch, tg)
    assert lf.tape is lm.tape
    sep_f, sep_m = fm_loss(model, batch), mc_loss(model, batch, tg)
    assert float(lf.value) == pytest.approx(float(sep_f.value), rel=1e-13)
    assert float(lm.value) == pytest.approx(float(sep_m.value), rel=1e-13)
    np.testing.assert_allclose(ad.backward(lf), ad.backward(sep_f), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(ad.backward(lm), ad.backward(sep_m), rtol=1e-10, atol=1e-14)


# --------------------------------------------------------------- batches

@settings(max_examples=40, deadline=None)
@given(n=st.sampled_from([2, 4, 8]), frac=st.floats(1 / 8, 1 / 4), B=st.integers(8, 128),
       seed=st.integers(0, 10_000))
def test_batch_invariants(n, frac, B, seed):
    rng = np.random.default_rng(seed)
    batch = make_batch(rng.standard_normal((B, 3)), None, rng, fraction=frac, n=n)
    assert batch.size == B
    assert len(batch.cons_xt) == round(frac * B)
    assert np.all(batch.cons_t + n * batch.cons_d <= 1.0)
    # d is dyadic and t sits on the d-grid
    j = -np.log2(batch.cons_d)
    np.testing.assert_array_equal(j, np.round(j))
    assert np.all((1 <= j) & (j <= 7))
    np.testing.assert_array_equal(batch.cons_t / batch.cons_d, np.round(batch.cons_t / batch.cons_d))


def test_consistency_noise_comes_from_codebook():
    cb = Codebook(4, 2, seed=0)
    rng = np.random.default_rng(0)
    x1 = rng.standard_normal((32, 2))
    batch = make_batch(x1, None, rng, fraction=0.25, n=2, codebook=cb)
    t = batch.cons_t[:, None]
    # x_t = (1 - t) x0 + t x1 with t <= 1/2, so x0 is recoverable
    x0 = (batch.cons_xt - t * x1[24:]) / (1 - t)
    dist = np.linalg.norm(x0[:, None] - cb.table[None], axis=-1).min(axis=1)
    assert dist.max() < 1e-12


# --------------------------------------------------------------- sampling

@pytest.mark.parametrize("N", [1, 2, 7, 32])
def test_constant_field_sampling_exact(N):
    x0 = np.array([[0.5, -1.0]])
    np.testing.assert_allclose(sample(constant_field([2.0, 3.0]), x0, steps=N), x0 + [2.0, 3.0], rtol=1e-14)


def test_negative_identity_field_one_step_lands_on_zero():
    x0 = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(sample(linear_field(-1.0), x0, steps=1), 0.0)


def test_negative_identity_field_four_steps():
    x0 = np.array([[1.0, -3.0, 0.2]])
    x = x0.copy()
    for _ in range(4):
        x = x - 0.25 * x
    np.testing.assert_array_equal(sample(linear_field(-1.0), x0, steps=4), x)
    np.testing.assert_allclose(x, x0 * 0.75 ** 4, rtol=1e-15)


def test_euler_error_decreases_with_steps():
    x0 = np.array([[1.0]])
    exact = np.exp(-1.0)
    errs = [abs(sample(linear_field(-1.0), x0, steps=N)[0, 0] - exact) for N in (1, 2, 4, 8, 16, 32)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_sample_rejects_zero_steps():
    with pytest.raises(ValueError):
        sample(constant_field(1.0), np.zeros((1, 1)), steps=0)


def test_step_conditioning_switch():
    seen = []

    def field(x, o, t, d):
        seen.append(d)
        return np.zeros_like(x)

    sample(field, np.zeros((1, 1)), steps=4)
    sample(field, np.zeros((1, 1)), steps=4, step_conditioned=False)
    assert seen == [0.25] * 4 + [0.0] * 4


# ---------------------------------------------------------------- noise

def test_single_entry_codebook():
    cb = Codebook(1, 3, seed=7)
    draws = draw_noise(cb, np.random.default_rng(0), 50)
    np.testing.assert_array_equal(draws, np.tile(cb.table[0], (50, 1)))


def test_codebook_uniform_frequencies():
    K, n = 16, 10_000
    cb = Codebook(K, 2, seed=0)
    draws = draw_noise(cb, np.random.default_rng(1), n)
    idx = np.argmin(np.linalg.norm(draws[:, None] - cb.table[None], axis=-1), axis=1)
    counts = np.bincount(idx, minlength=K)
    sigma = np.sqrt(n * (1 / K) * (1 - 1 / K))
    assert np.all(np.abs(counts - n / K) < 5 * sigma)


def test_codebook_is_immutable():
    cb = Codebook(4, 2)
    with pytest.raises(ValueError):
        cb.table[0, 0] = 1.0


def test_gaussian_noise_mean():
    draws = draw_noise(None, np.random.default_rng(0), 100_000, 3)
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
