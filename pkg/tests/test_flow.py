import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canopysr import autodiff as ad
from canopysr.autodiff import Tensor
from canopysr.autoencoder import PatchAutoencoder
from canopysr.errors import ConfigError, DimensionError, NumericalError, RangeError, UsageError
from canopysr.flow import (
    FlowSample,
    FlowTrainConfig,
    LatentScaler,
    MLPVelocity,
    PairedLatentSampler,
    build_state_pair,
    canonical_bytes,
    conditioned_noise,
    fit_velocity,
    fm_loss,
    interpolate,
    noise_key,
    train_flow,
)
from canopysr.uvit import UViT, UViTConfig
from toy import TARGET_MEAN, VAR, run_toy_transport


def _cond(seed=0, shape=(4, 8, 8)):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def test_noise_is_a_function_of_the_input():
    c = _cond()
    assert conditioned_noise(c).tobytes() == conditioned_noise(c.copy()).tobytes()
    d = c.copy()
    d[2, 3, 4] = np.nextafter(d[2, 3, 4], np.float32(np.inf))
    assert noise_key(d) != noise_key(c)
    assert not np.array_equal(conditioned_noise(d), conditioned_noise(c))


def test_noise_key_sees_shape():
    flat = np.zeros((1, 4, 4), np.float32)
    assert canonical_bytes(flat)[12:] == canonical_bytes(flat.reshape(1, 2, 8))[12:]
    assert noise_key(flat) != noise_key(flat.reshape(1, 2, 8))


def test_noise_moments():
    n = conditioned_noise(_cond(3, (4, 50, 50)))
    assert n.size == 10_000
    assert abs(n.mean()) < 0.05 and abs(n.var() - 1) < 0.1


def test_noise_rejects_bad_input():
    with pytest.raises(DimensionError):
        conditioned_noise(np.zeros((4, 4)))
    bad = _cond()
    bad[0, 0, 0] = np.nan
    with pytest.raises(RangeError):
        conditioned_noise(bad)


def test_state_pair_construction():
    cond, target = _cond(1), _cond(2)
    z0, z1 = build_state_pair(cond, target)
    assert z0.shape == z1.shape == (8, 8, 8)
    assert np.array_equal(z0[:4], z1[:4]) and np.array_equal(z0[:4], cond)
    assert np.array_equal(z1[4:], target)
    assert np.array_equal(z0[4:], conditioned_noise(cond, 4))
    assert not (z1 - z0)[:4].any()
    with pytest.raises(DimensionError):
        build_state_pair(cond, np.zeros((4, 4, 8), np.float32))


def test_interpolate_examples():
    z0, z1 = _cond(1), _cond(2)
    assert np.array_equal(interpolate(z0, z1, 0.0), z0)
    assert np.array_equal(interpolate(z0, z1, 1.0), z1)
    assert interpolate(np.array([0.0]), np.array([4.0]), 0.5).tolist() == [2.0]
    with pytest.raises(RangeError):
        interpolate(z0, z1, 1.5)
    with pytest.raises(DimensionError):
        interpolate(z0, z1[:2], 0.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_path_has_constant_velocity(s, u, seed):
    if u - s < 1e-3:
        s, u = min(s, u), max(s, u) + 1e-3
        if u > 1:
            s, u = 1 - 2e-3, 1.0
    z0 = np.random.default_rng(seed).standard_normal((3, 2, 2))
    z1 = np.random.default_rng(seed + 1).standard_normal((3, 2, 2))
    slope = (interpolate(z0, z1, u) - interpolate(z0, z1, s)) / (u - s)
    np.testing.assert_allclose(slope, z1 - z0, rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_samples_have_zero_conditioning_velocity(seed):
    rng = np.random.default_rng(seed)
    pairs = [build_state_pair(_cond(seed + k, (2, 3, 3)), rng.standard_normal((2, 3, 3))) for k in range(3)]
    s = FlowSample(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), rng.random(3))
    assert not s.v_target[:, :2].any()
    t = s.t.reshape(-1, 1, 1, 1)
    np.testing.assert_allclose(s.z_t, (1 - t) * s.z0 + t * s.z1, rtol=1e-6, atol=1e-6)


def test_fm_loss_examples():
    v = np.random.default_rng(0).standard_normal((2, 6, 3, 3))
    v[:, :2] = 0
    assert fm_loss(Tensor(v), v).item() == 0.0
    assert fm_loss(Tensor(np.zeros_like(v)), v).item() == pytest.approx(np.mean(v ** 2), rel=1e-12)
    masked = fm_loss(Tensor(np.zeros_like(v)), v, cond_channels=2, masked=True).item()
    assert masked == pytest.approx(np.mean(v[:, 2:] ** 2), rel=1e-12)
    with pytest.raises(DimensionError):
        fm_loss(Tensor(v[:, :5]), v)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_fm_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2))
    assert fm_loss(Tensor(a), b).item() >= 0


def test_latent_scaler_round_trip():
    lat = np.random.default_rng(0).normal(3.0, 2.0, size=(20, 4, 5, 5))
    sc = LatentScaler.fit(lat)
    z = sc.transform(lat)
    assert np.allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(sc.inverse_transform(z), lat, rtol=1e-5, atol=1e-5)
    back = LatentScaler.from_dict(sc.to_dict())
    assert np.array_equal(back.transform(lat), z)


def test_config_validation():
    with pytest.raises(ConfigError):
        FlowTrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        FlowTrainConfig(t_law="logit-normal")


def _tiny_setup(freeze=True):
    rng = np.random.default_rng(0)
    src = rng.normal(size=(6, 12, 4, 4)).astype(np.float32)
    tgt = rng.uniform(0, 1, size=(6, 1, 32, 32)).astype(np.float32)
    sae = PatchAutoencoder(in_channels=12, patch=2, latent_channels=2, hidden=8, steps=5, batch_size=8).fit(src)
    tae = PatchAutoencoder(in_channels=1, patch=16, latent_channels=2, hidden=8, steps=5, batch_size=8,
                           seed=1).fit(tgt)
    if freeze:
        sae.freeze()
        tae.freeze()
    ss = LatentScaler.fit(sae.transform(src))
    ts = LatentScaler.fit(tae.transform(tgt))
    return src, tgt, sae, tae, ss, ts


def _tiny_uvit():
    return UViT(UViTConfig(state_channels=4, grid=(2, 2), depth=2, heads=1, width=8, time_dim=4))


def test_unfrozen_autoencoder_is_rejected():
    src, tgt, sae, tae, ss, ts = _tiny_setup(freeze=False)
    with pytest.raises(UsageError):
        PairedLatentSampler(src, tgt, sae, tae, ss, ts)


def test_autoencoders_untouched_by_flow_training():
    src, tgt, sae, tae, ss, ts = _tiny_setup()
    before = (sae.digest(), tae.digest())
    sampler = PairedLatentSampler(src, tgt, sae, tae, ss, ts)
    curve = train_flow(_tiny_uvit(), sampler, FlowTrainConfig(batch_size=4, steps=100))
    assert len(curve.rows) == 100
    assert (sae.digest(), tae.digest()) == before


def test_fixed_seed_gives_identical_loss_sequence():
    src, tgt, sae, tae, ss, ts = _tiny_setup()
    runs = []
    for _ in range(2):
        model = _tiny_uvit()
        sampler = PairedLatentSampler(src, tgt, sae, tae, ss, ts)
        curve = train_flow(model, sampler, FlowTrainConfig(batch_size=4, steps=30, seed=7))
        runs.append((curve.losses.tobytes(), model.digest()))
    assert runs[0] == runs[1]


def test_sampler_pairs_stay_aligned_under_augmentation():
    src, tgt, sae, tae, ss, ts = _tiny_setup()
    sampler = PairedLatentSampler(src, tgt, sae, tae, ss, ts, augment=True)
    z0, z1 = sampler(np.random.default_rng(3), 5)
    assert z0.shape == z1.shape == (5, 4, 2, 2)
    assert np.array_equal(z0[:, :2], z1[:, :2])


def test_nan_loss_aborts_with_last_good_state():
    model = MLPVelocity(2, hidden=8)
    start = model.state_dict()

    def sampler(rng, n):
        z = rng.standard_normal((n, 2)).astype(np.float32)
        if sampler.calls == 3:
            z[0, 0] = np.nan
        sampler.calls += 1
        return z, z + 1

    sampler.calls = 0
    with pytest.raises(NumericalError) as info:
        fit_velocity(model, sampler, FlowTrainConfig(batch_size=8, steps=10, lr=1e-3))
    assert info.value.step == 3
    assert all(np.array_equal(model.state_dict()[k], info.value.last_good_state[k]) for k in start)
    assert all(np.all(np.isfinite(v)) for v in model.state_dict().values())


def test_masked_loss_ignores_conditioning_channels():
    v = np.zeros((1, 4, 2, 2), np.float32)
    pred = Tensor(np.zeros((1, 4, 2, 2)), requires_grad=True)
    pred.data[:, :2] = 5.0
    loss = fm_loss(pred, v, cond_channels=2, masked=True)
    assert loss.item() == 0.0
    loss.backward()
    assert not pred.grad.any()
    with ad.no_grad():
        assert fm_loss(Tensor(pred.data), v).item() > 0


def test_toy_transport_moves_the_mass():
    z1, _, curve = run_toy_transport(steps=1500)
    assert np.all(np.abs(z1.mean(0) - TARGET_MEAN) < 0.25)
    assert curve.window_means(500)[-1] < curve.window_means(500)[0]
    cov = np.cov(z1.T)
    assert np.all(np.abs(np.diag(cov) - VAR) < VAR)
