import numpy as np
import pytest

from lcd_forge import tensor as T
from lcd_forge.denoiser import DenoiserConfig, TemporalUNet, timestep_embedding
from lcd_forge.gradcheck import grad_check_params

TINY = DenoiserConfig(horizon=4, latent_dim=3, embed_dim=8, model_dim=8, groups=2, context_tokens=2)


def test_step_embedding_at_zero():
    e = timestep_embedding(0, 16)
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


def test_step_embedding_deterministic_and_distinct():
    assert np.array_equal(timestep_embedding(7, 32), timestep_embedding(7, 32))
    table = timestep_embedding(np.arange(1, 21), 64)
    gaps = [np.abs(table[i] - table[j]).max() for i in range(20) for j in range(i + 1, 20)]
    assert min(gaps) > 1e-3


def test_step_embedding_rejects_bad_input():
    with pytest.raises(ValueError):
        timestep_embedding(3, 7)
    with pytest.raises(ValueError):
        timestep_embedding(-1, 8)


def test_output_shape_and_finite(rng):
    net = TemporalUNet(DenoiserConfig(), rng)
    out = net(rng.standard_normal((2, 8, 32)), np.array([1, 20]), rng.standard_normal((2, 64)))
    assert out.shape == (2, 8, 32) and np.all(np.isfinite(out.data))
    assert all(np.all(np.isfinite(p.data)) for p in net.params.values())


def test_parameter_count_stable():
    a = TemporalUNet(DenoiserConfig(), np.random.default_rng(0)).num_parameters()
    b = TemporalUNet(DenoiserConfig(), np.random.default_rng(1)).num_parameters()
    assert a == b > 0


def test_zero_output_projection_gives_zero(rng):
    net = TemporalUNet(TINY, rng)
    net.params["final.out.w"].data[:] = 0
    net.params["final.out.b"].data[:] = 0
    out = net(rng.standard_normal((3, 4, 3)) * 5, np.array([1, 4, 9]), rng.standard_normal((3, 8)))
    assert np.all(out.data == 0)


def test_no_cross_batch_leakage(rng):
    net = TemporalUNet(TINY, rng)
    plan = rng.standard_normal((1, 4, 3))
    cond = rng.standard_normal((1, 8))
    pair = net(np.concatenate([plan, plan]), np.array([5, 5]), np.concatenate([cond, cond])).data
    np.testing.assert_allclose(pair[0], pair[1], rtol=0, atol=1e-12)
    other = net(np.concatenate([plan, rng.standard_normal((1, 4, 3))]), np.array([5, 9]),
                np.concatenate([cond, rng.standard_normal((1, 8))])).data
    np.testing.assert_allclose(other[0], pair[0], rtol=1e-10, atol=1e-12)


def test_condition_changes_output(rng):
    net = TemporalUNet(TINY, rng)
    plan = rng.standard_normal((1, 4, 3))
    a = net(plan, 3, rng.standard_normal((1, 8))).data
    b = net(plan, 3, rng.standard_normal((1, 8))).data
    assert np.abs(a - b).max() > 1e-6


def test_shape_errors(rng):
    net = TemporalUNet(TINY, rng)
    with pytest.raises(T.ShapeError):
        net(np.zeros((1, 5, 3)), 1, np.zeros((1, 8)))
    with pytest.raises(T.ShapeError):
        net(np.zeros((1, 4, 3)), 1, np.zeros((1, 9)))


@pytest.mark.parametrize("kw", [dict(horizon=6, dim_mults=(1, 2, 4)), dict(groups=3), dict(embed_dim=10, context_tokens=4),
                                dict(model_dim=9, groups=1)])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        TemporalUNet(DenoiserConfig(**kw), np.random.default_rng(0))


def test_output_norm_gradient_on_sampled_params(rng):
    net = TemporalUNet(TINY, rng)
    plan = rng.standard_normal((2, 4, 3))
    cond = rng.standard_normal((2, 8))
    err, where = grad_check_params(lambda: net(plan, np.array([2, 7]), cond).square().sum(), net.params,
                                   fraction=0.01, eps=1e-6, rng=np.random.default_rng(3), min_per_param=1)
    assert err < 1e-3, where


def test_config_round_trip():
    cfg = DenoiserConfig(dim_mults=(1, 2, 4), horizon=8)
    assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg
