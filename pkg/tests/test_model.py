import math

import numpy as np
import pytest
from scipy import special

from fevit import model as model_module
from fevit.autodiff import Tensor, backward, cross_entropy, grad_check, is_grad_enabled, precision
from fevit.errors import ConfigError, InterpolationError, MissingGroupError, ShapeError, TemporalLengthError
from fevit.model import (
    PRESETS,
    FactorisedEncoder,
    FEModelConfig,
    ParamStore,
    adapter_apply,
    block_param_count,
    count_params,
    encoder_block,
    forward,
    init_adapter,
    init_params,
    init_spatial,
    interpolate_temporal_posemb,
    patch_embed,
    preset_config,
    spatial_encode,
    temporal_encode,
)


@pytest.fixture
def f64():
    with precision('f64'):
        yield


def random_video(shape, seed=0):
    return np.random.default_rng(seed).uniform(size=shape)


def randomize(store: ParamStore, seed=0, scale=0.3):
    """Replace every record by larger random values so that no layer is near its identity."""
    rng = np.random.default_rng(seed)
    for name in store.names():
        store.replace(name, rng.normal(0.0, scale, store[name].shape))
    return store


class TestConfig:
    def test_desk_defaults(self):
        config = FEModelConfig()
        assert (config.image_size, config.patch_size, config.hidden, config.heads) == (32, 8, 64, 4)
        assert (config.spatial_depth, config.temporal_depth, config.mlp_dim) == (4, 2, 256)
        assert config.adapter_hidden == 64
        assert config.num_patches == 16
        assert config.num_tokens == 17

    @pytest.mark.parametrize('changes', [dict(patch_size=7), dict(heads=5), dict(num_frames=0), dict(hidden=0)])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            FEModelConfig(**changes)

    def test_dict_roundtrip(self):
        config = FEModelConfig(num_frames=16, adapter_hidden=32)
        assert FEModelConfig.from_dict(config.to_dict()) == config

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            FEModelConfig.from_dict(dict(hidden=64, depth=3))

    @pytest.mark.parametrize('name,heads,depth,hidden,mlp', [
        ('B', 12, 12, 768, 3072),
        ('L', 16, 24, 1024, 4096),
        ('H', 16, 32, 1280, 5120),
        ('g', 16, 40, 1408, 6144),
    ])
    def test_presets(self, name, heads, depth, hidden, mlp):
        config = preset_config(name)
        assert (config.heads, config.spatial_depth, config.hidden, config.mlp_dim) == (heads, depth, hidden, mlp)
        assert config.variant_name == name

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_config('XL')


class TestParamStore:
    def test_groups(self):
        store = init_params(FEModelConfig(), 'sfa')
        assert set(store.groups) == {'spatial', 'temporal', 'adapter', 'head'}
        assert store.group_of('temporal/posemb') == 'temporal'
        assert all(name.startswith(group + '/') for name, group in store.group_map().items())

    def test_mean_pool_has_no_temporal_group(self):
        store = init_params(FEModelConfig(), 'mean_pool')
        assert not store.has_group('temporal')
        assert not store.has_group('adapter')

    def test_freeze(self):
        store = init_params(FEModelConfig(), 'sfa')
        store.set_frozen('spatial')
        assert store.frozen_groups() == ['spatial']
        assert not any(t.requires_grad for t in store.tensors('spatial').values())
        assert all(t.requires_grad for t in store.tensors('temporal').values())

    def test_add_wrong_group(self):
        store = ParamStore()
        with pytest.raises(ConfigError):
            store.add('spatial', 'temporal/cls', Tensor(np.zeros(3)))
        with pytest.raises(ConfigError):
            store.add('decoder', 'decoder/cls', Tensor(np.zeros(3)))

    def test_duplicate_record(self):
        store = ParamStore()
        store.add('head', 'head/bias', Tensor(np.zeros(3)))
        with pytest.raises(ConfigError):
            store.add('head', 'head/bias', Tensor(np.zeros(3)))

    def test_add_to_frozen_group(self):
        store = ParamStore()
        store.set_frozen('head')
        store.add('head', 'head/bias', Tensor(np.zeros(3), requires_grad=True))
        assert not store['head/bias'].requires_grad

    def test_copy_is_independent(self):
        store = init_params(FEModelConfig())
        other = store.copy()
        other['head/bias'].data[0] = 1.0
        assert store['head/bias'].data[0] == 0.0

    def test_init_is_seeded(self):
        a, b = init_params(FEModelConfig(), seed=3), init_params(FEModelConfig(), seed=3)
        c = init_params(FEModelConfig(), seed=4)
        assert all(np.array_equal(a[name].data, b[name].data) for name in a.names())
        assert not np.array_equal(a['spatial/cls'].data, c['spatial/cls'].data)

    def test_truncated_init(self):
        kernel = init_params(FEModelConfig())['spatial/embedding/kernel'].data
        assert np.all(np.abs(kernel) <= 0.04 + 1e-7)


class TestCountParams:
    def test_block_closed_form(self):
        d, m = 64, 256
        assert block_param_count(d, m) == 4 * d * d + 4 * d + 2 * d * m + d + m + 4 * d

    def test_adapter(self):
        assert count_params(FEModelConfig(), 'sfa')['adapter'] == 8320

    @pytest.mark.parametrize('mode', ['baseline', 'sfa', 'mean_pool'])
    def test_matches_allocation(self, mode):
        config = FEModelConfig()
        store = init_params(config, mode)
        counts = count_params(config, mode)
        assert set(counts) == set(store.groups)
        for group, count in counts.items():
            assert count == store.num_elements(group)

    @pytest.mark.slow
    @pytest.mark.parametrize('name', sorted(PRESETS))
    def test_preset_matches_allocation(self, name):
        # Shallow stand-ins with the preset widths keep allocation small
        config = preset_config(name, spatial_depth=1, temporal_depth=1, num_frames=4, image_size=32)
        store = init_params(config, 'sfa')
        assert sum(count_params(config, 'sfa').values()) == store.num_elements()


class TestPatchEmbed:
    def test_shape(self):
        config = FEModelConfig(num_frames=2)
        tokens = patch_embed(random_video((3, 2, 32, 32, 3)), init_params(config), config)
        assert tokens.shape == (3, 2, 17, 64)

    def test_identical_frames(self):
        config = FEModelConfig(num_frames=2)
        frame = random_video((1, 1, 32, 32, 3))
        tokens = patch_embed(np.concatenate([frame, frame], axis=1), init_params(config), config)
        assert np.array_equal(tokens.data[0, 0], tokens.data[0, 1])

    def test_zero_video(self):
        config = FEModelConfig(num_frames=1)
        store = init_params(config)
        store.replace('spatial/posemb', np.zeros((17, 64)))
        store.replace('spatial/embedding/bias', np.full(64, 0.5))
        tokens = patch_embed(np.zeros((1, 1, 32, 32, 3)), store, config).data[0, 0]
        np.testing.assert_array_equal(tokens[0], store['spatial/cls'].data)
        np.testing.assert_array_equal(tokens[1:], np.full((16, 64), 0.5, dtype=np.float32))

    @pytest.mark.parametrize('shape', [(1, 2, 16, 32, 3), (1, 2, 32, 32, 1), (1, 3, 32, 32, 3), (2, 32, 32, 3)])
    def test_shape_mismatch(self, shape):
        config = FEModelConfig(num_frames=2)
        with pytest.raises(ShapeError):
            patch_embed(np.zeros(shape), init_params(config), config)


class TestSpatialEncode:
    def test_frame_permutation(self, f64):
        config = FEModelConfig(num_frames=4)
        store = init_params(config)
        tokens = patch_embed(random_video((1, 4, 32, 32, 3)), store, config)
        permutation = [2, 0, 3, 1]
        out = spatial_encode(tokens, store, config).data
        permuted = spatial_encode(tokens[:, permutation], store, config).data
        np.testing.assert_allclose(permuted, out[:, permutation], rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize('name', ['f32', 'f64'])
    def test_identical_frames(self, name):
        with precision(name):
            config = FEModelConfig(num_frames=2)
            store = init_params(config)
            frame = random_video((1, 1, 32, 32, 3))
            out = spatial_encode(patch_embed(np.concatenate([frame, frame], axis=1), store, config), store,
                                 config).data
        np.testing.assert_array_equal(out[0, 0], out[0, 1])

    def test_single_block_reference(self, f64):
        d, heads, m = 8, 2, 16
        config = FEModelConfig(hidden=d, heads=heads, mlp_dim=m, spatial_depth=1)
        store = ParamStore()
        init_spatial(store, config, seed=0)
        randomize(store)
        x = np.random.default_rng(1).normal(size=(1, 3, d))
        out = encoder_block(Tensor(x), store, 'spatial/block0', heads).data

        p = {name: t.data for name, t in store.items()}
        prefix = 'spatial/block0'

        def ln(v, name):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu)**2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-6) * p[f'{name}/scale'] + p[f'{name}/bias']

        def dense(v, name):
            return v @ p[f'{name}/kernel'] + p[f'{name}/bias']

        tokens = x[0]
        h = ln(tokens, f'{prefix}/ln1')
        q, k, v = (dense(h, f'{prefix}/attn/{proj}') for proj in ('query', 'key', 'value'))
        head_dim = d // heads
        context = np.zeros_like(tokens)
        for i in range(heads):
            cols = slice(i * head_dim, (i + 1) * head_dim)
            scores = q[:, cols] @ k[:, cols].T / math.sqrt(head_dim)
            weights = np.exp(scores - scores.max(-1, keepdims=True))
            weights /= weights.sum(-1, keepdims=True)
            context[:, cols] = weights @ v[:, cols]
        y = tokens + dense(context, f'{prefix}/attn/out')
        hidden = dense(ln(y, f'{prefix}/ln2'), f'{prefix}/mlp/fc1')
        hidden = hidden * 0.5 * (1.0 + special.erf(hidden / math.sqrt(2.0)))
        expected = y + dense(hidden, f'{prefix}/mlp/fc2')
        np.testing.assert_allclose(out[0], expected, rtol=1e-10, atol=1e-12)


class TestAdapter:
    def test_identity_init(self):
        store = ParamStore()
        init_adapter(store, FEModelConfig(), seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 64)))
        assert np.array_equal(adapter_apply(x, store).data, x.data)

    def test_zero_first_layer(self):
        store = ParamStore()
        init_adapter(store, FEModelConfig(), seed=0)
        store.replace('adapter/fc1/kernel', np.zeros((64, 64)))
        store.replace('adapter/fc2/kernel', np.random.default_rng(0).normal(size=(64, 64)))
        x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 64)))
        assert np.array_equal(adapter_apply(x, store).data, x.data)

    def test_grad_check(self, f64):
        config = FEModelConfig(hidden=8, heads=2, adapter_hidden=6)
        store = ParamStore()
        init_adapter(store, config, seed=0)
        randomize(store)
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 8)))
        w = np.random.default_rng(3).normal(size=(2, 3, 8))
        tensors = [store[name] for name in store.names()]
        report = grad_check(lambda *_: (adapter_apply(x, store) * Tensor(w)).sum(), tensors)
        assert report.passed, report.errors


class TestTemporalEncode:
    def test_zero_depth(self, f64):
        config = FEModelConfig(num_frames=3, temporal_depth=0)
        store = randomize(init_params(config))
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 64)))
        out = temporal_encode(x, store, config).data
        cls = store['temporal/cls'].data
        normed = (cls - cls.mean()) / np.sqrt(cls.var() + 1e-6)
        expected = normed * store['temporal/encoder_norm/scale'].data + store['temporal/encoder_norm/bias'].data
        np.testing.assert_allclose(out, np.stack([expected, expected]), rtol=1e-10, atol=1e-12)

    def test_zeroed_blocks_ignore_frames(self, f64):
        config = FEModelConfig(num_frames=3)
        store = randomize(init_params(config))
        for name in store.names():
            if name.startswith('temporal/block') and ('/out/' in name or '/mlp/fc2/' in name):
                store.replace(name, np.zeros(store[name].shape))
        rng = np.random.default_rng(0)
        a = temporal_encode(Tensor(rng.normal(size=(1, 3, 64))), store, config).data
        b = temporal_encode(Tensor(rng.normal(size=(1, 3, 64))), store, config).data
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_length_mismatch(self):
        config = FEModelConfig(num_frames=4)
        store = init_params(config)
        with pytest.raises(TemporalLengthError):
            temporal_encode(Tensor(np.zeros((1, 5, 64))), store, config)

    def test_grad_check(self, f64):
        config = FEModelConfig(num_frames=4, hidden=16, heads=2, mlp_dim=32)
        store = randomize(init_params(config), scale=0.2)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 4, 16)), requires_grad=True, name='x')
        w = Tensor(np.random.default_rng(5).normal(size=(1, 16)))
        tensors = [x] + [t for name, t in store.items() if name.startswith('temporal/')]
        report = grad_check(lambda *_: (temporal_encode(x, store, config) * w).sum(), tensors, samples_per_input=4)
        assert report.passed, report.errors


class TestForward:
    def test_identity_adapter_matches_baseline(self):
        config = FEModelConfig(num_frames=4)
        store = init_params(config, 'sfa', seed=1)
        video = random_video((2, 4, 32, 32, 3))
        assert np.array_equal(forward(video, store, config, 'sfa').data, forward(video, store, config, 'baseline').data)

    @pytest.mark.parametrize('frozen', [True, False])
    def test_frozen_spatial_records_no_graph(self, monkeypatch, frozen):
        config = FEModelConfig(num_frames=2)
        store = init_params(config, 'sfa')
        if frozen:
            store.set_frozen('spatial')
        grad_enabled = []

        def recording_spatial_encode(*args):
            grad_enabled.append(is_grad_enabled())
            return spatial_encode(*args)

        monkeypatch.setattr(model_module, 'spatial_encode', recording_spatial_encode)
        logits = forward(random_video((2, 2, 32, 32, 3)), store, config, 'sfa')
        assert grad_enabled == [not frozen]
        backward(cross_entropy(logits, np.array([0, 1])))
        assert store['temporal/cls'].grad is not None
        assert (store['spatial/cls'].grad is None) == frozen

    @pytest.mark.parametrize('name', ['f32', 'f64'])
    def test_identical_clips(self, name):
        with precision(name):
            config = FEModelConfig(num_frames=2)
            clip = random_video((1, 2, 32, 32, 3))
            logits = forward(np.concatenate([clip, clip]), init_params(config), config).data
        np.testing.assert_array_equal(logits[0], logits[1])

    def test_deterministic(self):
        config = FEModelConfig()
        video = np.zeros((1, 8, 32, 32, 3))
        first = forward(video, init_params(config, seed=0), config).data
        second = forward(video, init_params(config, seed=0), config).data
        assert first.shape == (1, 8)
        assert np.array_equal(first, second)

    def test_missing_adapter(self):
        config = FEModelConfig(num_frames=2)
        with pytest.raises(MissingGroupError):
            forward(np.zeros((1, 2, 32, 32, 3)), init_params(config, 'baseline'), config, 'sfa')

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            FactorisedEncoder(FEModelConfig(), 'tubelet')

    def test_mean_pool_is_order_invariant(self, f64):
        config = FEModelConfig(num_frames=4)
        store = init_params(config, 'mean_pool')
        video = random_video((1, 4, 32, 32, 3))
        a = forward(video, store, config, 'mean_pool').data
        b = forward(video[:, ::-1], store, config, 'mean_pool').data
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_encoder_callable(self):
        model = FactorisedEncoder(FEModelConfig(num_frames=2), 'sfa')
        store = model.init_params(seed=0)
        logits = model(random_video((2, 2, 32, 32, 3)), store)
        assert logits.shape == (2, 8)
        assert model.with_frames(16).config.num_frames == 16

    def test_loss_backward_reaches_trainable_groups(self):
        config = FEModelConfig(num_frames=2)
        store = init_params(config, 'sfa')
        store.set_frozen('spatial')
        loss = cross_entropy(forward(random_video((2, 2, 32, 32, 3)), store, config, 'sfa'), [1, 5])
        loss.backward()
        assert all(t.grad is None for t in store.tensors('spatial').values())
        assert all(t.grad is not None for g in ('temporal', 'adapter', 'head') for t in store.tensors(g).values())


class TestInterpolation:
    def test_same_length(self):
        table = np.random.default_rng(0).normal(size=(4, 8)).astype(np.float32)
        assert np.array_equal(interpolate_temporal_posemb(table, 4).data, table)

    def test_midpoint(self, f64):
        v, w = np.arange(4.0), np.arange(4.0) * -2.0 + 1.0
        out = interpolate_temporal_posemb(np.stack([v, w]), 3).data
        np.testing.assert_allclose(out, np.stack([v, (v + w) / 2, w]))

    def test_matches_scalar_interpolation(self):
        table = np.random.default_rng(1).normal(size=(4, 5))
        out = interpolate_temporal_posemb(table, 7).data
        positions = np.linspace(0.0, 3.0, 7)
        for j in range(5):
            np.testing.assert_allclose(out[:, j], np.interp(positions, np.arange(4), table[:, j]), atol=1e-6)

    def test_endpoints_kept(self):
        table = np.random.default_rng(2).normal(size=(8, 3))
        out = interpolate_temporal_posemb(table, 16).data
        np.testing.assert_allclose(out[0], table[0], atol=1e-6)
        np.testing.assert_allclose(out[-1], table[-1], atol=1e-6)

    def test_single_entry(self):
        with pytest.raises(InterpolationError):
            interpolate_temporal_posemb(np.zeros((1, 4)), 3)

    def test_non_positive_target(self):
        with pytest.raises(InterpolationError):
            interpolate_temporal_posemb(np.zeros((4, 4)), 0)
