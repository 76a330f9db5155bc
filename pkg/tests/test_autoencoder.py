import numpy as np
import pytest
from sklearn.base import clone

from canopysr import autodiff as ad
from canopysr.autoencoder import PatchAutoencoder, patchify, unpatchify
from canopysr.errors import ConfigError, DimensionError, NumericalError, UsageError
from canopysr.io import decode_checkpoint, encode_checkpoint
from canopysr.scene import DatasetStats, denormalize_target


def _source(**kw):
    return PatchAutoencoder(in_channels=12, patch=2, **kw).initialize()


def test_desk_geometries_share_a_grid():
    src = _source(hidden=16)
    tgt = PatchAutoencoder(in_channels=1, patch=16, hidden=16).initialize()
    zs = src.transform(np.zeros((3, 12, 16, 16)))
    zt = tgt.transform(np.zeros((3, 1, 128, 128)))
    assert zs.shape == (3, 4, 8, 8) and zt.shape == (3, 4, 8, 8)
    assert tgt.decode(zt[0]).shape == (1, 128, 128)


def test_encoding_independent_of_batch_companions():
    # a narrow latent width is where a flat gemm changes with the row count
    src = _source(hidden=128)
    X = np.random.default_rng(2).uniform(-1, 1, (64, 12, 16, 16))
    full = src.transform(X)
    assert src.transform(X[5:6]).tobytes() == full[5:6].tobytes()
    assert src.transform(X[8:16]).tobytes() == full[8:16].tobytes()
    assert src.inverse_transform(full[:3]).tobytes() == src.inverse_transform(full)[:3].tobytes()


def test_indivisible_size_is_a_config_error():
    with pytest.raises(ConfigError):
        _source(hidden=8).transform(np.zeros((1, 12, 15, 16)))
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 1, 10, 10)), 3)


def test_patchify_round_trip():
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 12))
    p = patchify(x, 4)
    assert p.shape == (2, 2, 3, 48)
    assert np.array_equal(p[1, 0, 2], x[1, :, 0:4, 8:12].ravel())
    assert np.array_equal(unpatchify(p, 3, 4), x)


def test_zero_passes_through_untrained_weights():
    ae = _source(hidden=8)
    assert not ae.encode(np.zeros((12, 16, 16))).any()
    assert not ae.decode(np.zeros((4, 8, 8))).any()


def test_decode_shape_mismatch():
    ae = _source(hidden=8)
    with pytest.raises(DimensionError):
        ae.decode(np.zeros((3, 8, 8)))
    with pytest.raises(DimensionError):
        ae.transform(np.zeros((1, 11, 16, 16)))


def _fields(n=40, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    out = []
    for _ in range(n):
        a, b, c = rng.uniform(0, 1, 3)
        out.append(0.5 * (a * np.sin(3 * xx + b) + c * yy) + 0.25)
    return np.stack(out)[:, None].astype(np.float32)


def test_training_reduces_reconstruction_error():
    X = _fields()
    ae = PatchAutoencoder(in_channels=1, patch=4, latent_channels=4, hidden=32, steps=300,
                          batch_size=64, lr=3e-3)
    before = ae.initialize().reconstruction_rmse(X)
    ae.fit(X)
    after = ae.reconstruction_rmse(X)
    assert after < 0.5 * before
    losses = ae.curve_.losses
    assert len(losses) == 300 and np.all(np.isfinite(losses))
    assert not ae.frozen


def test_fit_is_deterministic():
    X = _fields(10)
    kw = dict(in_channels=1, patch=4, hidden=16, steps=20, batch_size=32)
    a, b = PatchAutoencoder(**kw).fit(X), PatchAutoencoder(**kw).fit(X)
    assert a.digest() == b.digest()
    assert a.curve_.losses.tolist() == b.curve_.losses.tolist()


def test_freeze_blocks_further_updates():
    ae = _source(hidden=8).freeze()
    with pytest.raises(UsageError):
        ad.AdamW(ae.net_.named_parameters())


def test_checkpoint_round_trip_preserves_digest_and_outputs():
    X = _fields(8)
    ae = PatchAutoencoder(in_channels=1, patch=4, hidden=16, steps=10, batch_size=16).fit(X).freeze()
    ck = decode_checkpoint(encode_checkpoint(ae.to_checkpoint(stats_digest="abc")))
    assert ck.frozen and ck.metadata["steps"] == 10 and ck.metadata["stats_digest"] == "abc"
    back = PatchAutoencoder.from_checkpoint(ck)
    assert back.frozen and back.digest() == ae.digest()
    assert np.array_equal(back.transform(X), ae.transform(X))
    with pytest.raises(UsageError):
        PatchAutoencoder.from_checkpoint(type(ck)(ck.params, False, {"kind": "uvit-flow"}))


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_aborts_with_last_good_state():
    X = _fields(8)
    X[0, 0, 0, 0] = np.float32(3e38)
    ae = PatchAutoencoder(in_channels=1, patch=4, hidden=8, steps=50, batch_size=64, lr=1e-3)
    with pytest.raises(NumericalError) as info:
        ae.fit(X)
    state = info.value.last_good_state
    assert all(np.all(np.isfinite(v)) for v in state.values())


def test_decoded_heights_clamp_into_range():
    ae = PatchAutoencoder(in_channels=1, patch=16, hidden=8, seed=3).initialize()
    z = np.random.default_rng(0).normal(scale=50, size=(4, 8, 8)).astype(np.float32)
    stats = DatasetStats(np.zeros(12), np.ones(12))
    h = denormalize_target(ae.decode(z), stats)
    assert h.min() >= 0 and h.max() <= 120


def test_sklearn_clone_keeps_hyperparameters():
    ae = PatchAutoencoder(in_channels=12, patch=2, hidden=7)
    c = clone(ae)
    assert c.get_params() == ae.get_params() and not hasattr(c, "net_")
