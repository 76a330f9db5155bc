import numpy as np
import pytest

from canopysr import autodiff as ad
from canopysr.autodiff import Tensor, gradcheck
from canopysr.errors import ConfigError, DimensionError, RangeError
from canopysr.uvit import UViT, UViTConfig, sinusoidal_embedding

SMALL = UViTConfig(state_channels=3, grid=(3, 3), depth=4, heads=2, width=16, time_dim=8, seed=1)


def _state(cfg, b=2, seed=0):
    return np.random.default_rng(seed).standard_normal((b, cfg.state_channels, *cfg.grid)).astype(np.float32)


@pytest.mark.parametrize("kw", [dict(depth=3), dict(width=10, heads=4), dict(time_dim=7), dict(patch=2)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        UViTConfig(**kw)


def test_sinusoid_at_zero_alternates():
    e = sinusoidal_embedding(0.0, 16)[0]
    assert e.tolist() == [0.0, 1.0] * 8


def test_time_embedding_range_and_determinism():
    model = UViT(SMALL)
    a, b = model.time_embed([0.37]).data, model.time_embed([0.37]).data
    assert a.tobytes() == b.tobytes()
    assert np.linalg.norm(model.time_embed([0.1]).data - model.time_embed([0.9]).data) > 0
    for bad in (-0.01, 1.01, np.nan):
        with pytest.raises(RangeError):
            sinusoidal_embedding(bad, 8)


def test_time_embedding_injective_on_fine_grid():
    t = np.round(np.arange(1001) * 1e-3, 3)
    model = UViT(UViTConfig())
    for emb in (sinusoidal_embedding(t, 64), model.time_embed(t).data.astype(np.float64)):
        sq = (emb ** 2).sum(1)
        d2 = sq[:, None] + sq[None] - 2 * emb @ emb.T
        np.fill_diagonal(d2, np.inf)
        i, j = np.unravel_index(np.argmin(d2), d2.shape)
        assert np.any(emb[i] != emb[j])


@pytest.mark.parametrize("cfg", [SMALL, UViTConfig(), UViTConfig(state_channels=5, grid=(2, 4), depth=2,
                                                                 heads=1, width=8, time_dim=4)])
def test_output_shape_matches_state(cfg):
    model = UViT(cfg)
    z = _state(cfg, 3)
    assert model.velocity(z, 0.5).shape == z.shape
    assert model.velocity(z[0], 0.5).shape == z[0].shape


def test_shape_mismatch_is_dimension_error():
    model = UViT(SMALL)
    with pytest.raises(DimensionError):
        model.velocity(np.zeros((1, 4, 3, 3)), 0.5)
    with pytest.raises(DimensionError):
        model.velocity(np.zeros((1, 3, 3, 2)), 0.5)


def test_zero_head_gives_zero_output():
    model = UViT(SMALL)
    model.head.weight.data[...] = 0
    model.head.bias.data[...] = 0
    out = model.velocity(_state(SMALL, 4) * 100, np.array([0.0, 0.3, 0.7, 1.0]))
    assert not out.any()


def test_forward_is_deterministic():
    z = _state(SMALL, 3)
    a = UViT(SMALL).velocity(z, [0.1, 0.5, 0.9])
    b = UViT(SMALL).velocity(z, [0.1, 0.5, 0.9])
    assert a.tobytes() == b.tobytes()


def test_output_independent_of_batch_companions():
    model = UViT(SMALL)
    z = _state(SMALL, 20, seed=5)
    full = model.velocity(z, 0.25)
    for i in (0, 7, 19):
        assert model.velocity(z[i:i + 1], 0.25).tobytes() == full[i:i + 1].tobytes()
    assert model.velocity(z[3:9], 0.25).tobytes() == full[3:9].tobytes()


def test_desk_width_output_independent_of_batch_size():
    cfg = UViTConfig()
    model = UViT(cfg)
    z = _state(cfg, 64, seed=6)
    full = model.velocity(z, 0.6)
    assert model.velocity(z[:8], 0.6).tobytes() == full[:8].tobytes()
    assert model.velocity(z[40:41], 0.6).tobytes() == full[40:41].tobytes()


def test_long_skips_are_live():
    model = UViT(SMALL)
    z = Tensor(_state(SMALL, 2))
    with ad.no_grad():
        plain = model(z, 0.4).data
        seen = []
        model(z, 0.4, skip_hook=lambda i, x: seen.append(i) or x)
        cut = model(z, 0.4, skip_hook=lambda i, x: ad.scale(x, 0.0)).data
    assert seen == [0, 1]
    assert np.max(np.abs(cut - plain)) > 1e-3


def test_full_model_gradients_match_finite_differences():
    cfg = UViTConfig(state_channels=3, grid=(2, 2), depth=2, heads=2, width=8, time_dim=8, seed=4)
    model = UViT(cfg).astype(np.float64)
    rng = np.random.default_rng(9)
    z = Tensor(rng.standard_normal((2, 3, 2, 2)))
    target = Tensor(rng.standard_normal((2, 3, 2, 2)))
    t = np.array([0.2, 0.6])

    def loss():
        return ad.mse(model(z, t), target)

    params = list(model.named_parameters())
    assert {n.split(".")[0] for n, _ in params} >= {"embed", "pos", "time_mlp", "blocks", "fuse", "head"}
    for name, p in params:
        res = gradcheck(loss, [p], name=name, rtol=1e-4, max_points=10, rng=rng)
        assert res.n_checked >= min(10, p.data.size)
        assert res.passed, (name, res.max_rel_error)
