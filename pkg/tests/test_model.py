from dataclasses import dataclass, replace

import numpy as np
import pytest

from sampnet.datamodel import FeatureSource, ModelConfig
from sampnet.errors import ValidationError
from sampnet.losses import LossConfig, total_loss, total_loss_grad
from sampnet.model import (
    ModelParams, init_params, is_backbone, model_backward, model_forward, param_shapes, partition_avg_pool,
    pattern_layout,
)
from sampnet.stem import stem_output_size, toy_stem_forward

from tests.gradcheck import check_gradients


@dataclass
class Sample:
    inputs: np.ndarray
    grid: np.ndarray
    y: np.ndarray
    beta: np.ndarray
    attributes: np.ndarray


def make_sample(config: ModelConfig, rng: np.random.Generator, n: int = 3) -> Sample:
    if config.feature_source is FeatureSource.TOY_STEM:
        inputs = rng.uniform(0.0, 1.0, size=(n, config.image_channels, config.image_size, config.image_size))
    else:
        inputs = rng.uniform(0.0, 1.0, size=(n, config.channels, config.height, config.width))
    return Sample(
        inputs=inputs,
        grid=rng.uniform(0.0, 1.0, size=(n, config.saliency_height, config.saliency_width)),
        y=rng.dirichlet(np.ones(5), size=n),
        beta=rng.uniform(0.5, 2.0, size=n),
        attributes=rng.uniform(-1.0, 1.0, size=(n, 5)),
    )


def gradient_errors(params: ModelParams,
                    sample: Sample,
                    rng: np.random.Generator,
                    *,
                    eps: float = 1e-4,
                    dropout: float = 0.0,
                    ) -> dict[str, float]:
    loss_config = LossConfig(lambda_=0.1)

    def forward():
        # a fresh generator per call replays the same dropout masks
        dropout_rng = np.random.default_rng(11) if dropout else None
        return model_forward(params, sample.inputs, sample.grid, dropout=dropout, rng=dropout_rng)

    def loss() -> float:
        outputs, _ = forward()
        return total_loss(
            sample.y, outputs.distribution, sample.beta, outputs.attributes, sample.attributes, loss_config,
        ).total

    def signs() -> np.ndarray:
        _, cache = forward()
        pre_activations = [pattern.pre_activation for pattern in cache.samp.patterns]
        if cache.stem is not None:
            pre_activations.extend(cache.stem.pre_activations)
        return np.concatenate([np.ravel(z > 0) for z in pre_activations])

    outputs, cache = forward()
    grad_distribution, grad_attributes = total_loss_grad(
        sample.y, outputs.distribution, sample.beta, outputs.attributes, sample.attributes, loss_config,
    )
    gradients = model_backward(cache, params, grad_distribution, grad_attributes)
    arrays = {**params.tensors, 'inputs': sample.inputs, 'grid': sample.grid}
    analytic = {**gradients.params, 'inputs': gradients.inputs, 'grid': gradients.grid}
    return check_gradients(loss, arrays, analytic, rng, eps=eps, signs=signs)


class TestGradients:
    def test_full_model(self, small_config, rng):
        params = init_params(small_config, rng)
        errors = gradient_errors(params, make_sample(small_config, rng), rng)
        assert set(errors) == set(params) | {'inputs', 'grid'}
        for name, error in errors.items():
            assert error < 1e-4, name

    def test_with_dropout_masks(self, small_config, rng):
        params = init_params(small_config, rng)
        errors = gradient_errors(params, make_sample(small_config, rng), rng, dropout=0.3)
        for name, error in errors.items():
            assert error < 1e-4, name

    @pytest.mark.parametrize('changes', [
        {'use_saliency': False},
        {'use_pattern_weights': False},
        {'use_attention_fusion': False},
        {'use_attribute_branch': False},
        {'patterns': (8,)},
        {'patterns': (3, 5, 7)},
    ])
    def test_ablations(self, small_config, rng, changes):
        config = replace(small_config, **changes)
        params = init_params(config, rng)
        for name, error in gradient_errors(params, make_sample(config, rng), rng).items():
            assert error < 1e-4, name

    def test_through_toy_stem(self, rng):
        # 72 px images end on a 3 x 3 grid; a small step keeps most stem entries away from ReLU kinks
        config = ModelConfig(channels=8, height=3, width=3, c_prime=16,
                             feature_source=FeatureSource.TOY_STEM, image_size=72).validate()
        params = init_params(config, rng)
        errors = gradient_errors(params, make_sample(config, rng, n=2), rng, eps=1e-6)
        assert {name for name in errors if is_backbone(name)} == {f'stem.{layer}.{kind}' for layer in range(1, 6) for kind in 'wb'}
        for name, error in errors.items():
            assert error < 1e-4, name


def test_gradient_check_skips_relu_kinks(rng):
    x = np.array([1e-6, 0.5, -0.3, 2.0])
    analytic = {'x': (x > 0).astype(np.float64)}

    def loss() -> float:
        return float(np.sum(np.maximum(x, 0.0)))

    blind = check_gradients(loss, {'x': x}, analytic, rng, per_tensor=4)
    assert blind['x'] > 0.1
    aware = check_gradients(loss, {'x': x}, analytic, rng, per_tensor=4, signs=lambda: x > 0)
    assert aware['x'] < 1e-9
    np.testing.assert_array_equal(x, [1e-6, 0.5, -0.3, 2.0])


class TestStructure:
    def test_saliency_toggle_changes_projection_inputs(self, small_config):
        with_saliency = param_shapes(small_config)
        without = param_shapes(replace(small_config, use_saliency=False))
        for p in small_config.patterns:
            assert with_saliency[f'samp.proj.{p}.w'][0] - without[f'samp.proj.{p}.w'][0] == 3136
        assert pattern_layout(small_config, 8).input_dim == 3136 + 9 * small_config.channels

    def test_parameter_counts(self, small_config, rng):
        full = init_params(small_config, rng).count()
        without_saliency = init_params(replace(small_config, use_saliency=False), rng).count()
        assert full - without_saliency == 8 * 3136 * small_config.c_prime

    def test_pattern_weights_toggle_removes_gate(self, small_config, rng):
        shapes = param_shapes(replace(small_config, use_pattern_weights=False))
        assert not any(name.startswith('samp.gate') for name in shapes)
        assert 'samp.gate.w' in param_shapes(small_config)

        config = replace(small_config, use_pattern_weights=False)
        sample = make_sample(config, rng)
        outputs, _ = model_forward(init_params(config, rng), sample.inputs, sample.grid)
        np.testing.assert_allclose(outputs.pattern_weights, 0.125)

    def test_attention_fusion_toggle(self, small_config, rng):
        config = replace(small_config, use_attention_fusion=False)
        assert 'aaff.attn.w' not in param_shapes(config)
        sample = make_sample(config, rng)
        outputs, _ = model_forward(init_params(config, rng), sample.inputs, sample.grid)
        np.testing.assert_array_equal(outputs.attention, 1.0)

    def test_attribute_branch_toggle(self, small_config, rng):
        config = replace(small_config, use_attribute_branch=False)
        assert 'head.attr.w' not in param_shapes(config)
        sample = make_sample(config, rng)
        outputs, _ = model_forward(init_params(config, rng), sample.inputs, sample.grid)
        assert outputs.attributes is None

    def test_zero_gate_gives_uniform_weights(self, small_config, rng):
        params = init_params(small_config, rng)
        params.tensors['samp.gate.w'][:] = 0.0
        sample = make_sample(small_config, rng)
        outputs, _ = model_forward(params, sample.inputs, sample.grid)
        np.testing.assert_allclose(outputs.pattern_weights, 0.125)

    def test_single_pattern_weight_is_one(self, small_config, rng):
        config = replace(small_config, patterns=(8,))
        sample = make_sample(config, rng)
        outputs, _ = model_forward(init_params(config, rng), sample.inputs, sample.grid)
        np.testing.assert_allclose(outputs.pattern_weights, 1.0)


class TestForward:
    def test_outputs(self, small_config, rng):
        sample = make_sample(small_config, rng, n=4)
        outputs, _ = model_forward(init_params(small_config, rng), sample.inputs, sample.grid)
        assert outputs.distribution.shape == (4, 5)
        np.testing.assert_allclose(outputs.distribution.sum(axis=1), 1.0)
        assert np.all(outputs.distribution > 0)
        assert outputs.attributes.shape == (4, 5)
        assert outputs.pattern_weights.shape == (4, 8)
        np.testing.assert_allclose(outputs.pattern_weights.sum(axis=1), 1.0)
        assert np.all((outputs.attention > 0) & (outputs.attention < 1))

    def test_deterministic_without_dropout(self, small_config, rng):
        params = init_params(small_config, rng)
        sample = make_sample(small_config, rng)
        first, _ = model_forward(params, sample.inputs, sample.grid)
        second, _ = model_forward(params, sample.inputs, sample.grid)
        np.testing.assert_array_equal(first.distribution, second.distribution)

    def test_grid_ignored_without_saliency(self, small_config, rng):
        config = replace(small_config, use_saliency=False)
        params = init_params(config, rng)
        sample = make_sample(config, rng)
        other_grid = rng.uniform(0.0, 1.0, size=sample.grid.shape)
        first, _ = model_forward(params, sample.inputs, sample.grid)
        second, _ = model_forward(params, sample.inputs, other_grid)
        np.testing.assert_array_equal(first.distribution, second.distribution)
        np.testing.assert_array_equal(first.attributes, second.attributes)
        np.testing.assert_array_equal(first.pattern_weights, second.pattern_weights)

    def test_dropout_needs_generator(self, small_config, rng):
        params = init_params(small_config, rng)
        sample = make_sample(small_config, rng)
        plain, _ = model_forward(params, sample.inputs, sample.grid, dropout=0.5)
        dropped, _ = model_forward(params, sample.inputs, sample.grid, dropout=0.5, rng=np.random.default_rng(0))
        reference, _ = model_forward(params, sample.inputs, sample.grid)
        np.testing.assert_array_equal(plain.distribution, reference.distribution)
        assert not np.allclose(dropped.distribution, reference.distribution)

    def test_shape_errors(self, small_config, rng):
        params = init_params(small_config, rng)
        sample = make_sample(small_config, rng)
        with pytest.raises(ValidationError):
            model_forward(params, sample.inputs[:, :4], sample.grid)
        with pytest.raises(ValidationError):
            model_forward(params, sample.inputs, sample.grid[:, :28])
        with pytest.raises(ValidationError):
            model_forward(params, sample.inputs, sample.grid[:2])

    def test_params_check_shapes(self, small_config, rng):
        tensors = dict(init_params(small_config, rng))
        tensors['head.dist.b'] = np.zeros(4)
        with pytest.raises(ValidationError):
            ModelParams(small_config, tensors)
        del tensors['head.dist.b']
        with pytest.raises(ValidationError):
            ModelParams(small_config, tensors)


def test_partition_avg_pool():
    features = np.arange(2 * 3 * 3, dtype=np.float64).reshape(1, 2, 3, 3)
    np.testing.assert_allclose(partition_avg_pool(features, np.array([0, 4, 8])), [[4.0, 13.0]])
    with pytest.raises(ValidationError):
        partition_avg_pool(features, np.array([], dtype=np.int64))


class TestToyStem:
    def test_output_size(self):
        assert stem_output_size(224) == 7
        assert stem_output_size(72) == 3

    def test_forward_at_224(self, rng):
        config = ModelConfig(channels=8, c_prime=16, feature_source=FeatureSource.TOY_STEM).validate()
        params = init_params(config, rng)
        features, _ = toy_stem_forward(rng.uniform(size=(1, 3, 224, 224)), params, config)
        assert features.shape == (1, 8, 7, 7)
        assert np.all(features >= 0)

    def test_rejects_wrong_image_size(self, rng):
        config = ModelConfig(channels=8, c_prime=16, feature_source=FeatureSource.TOY_STEM).validate()
        with pytest.raises(ValidationError):
            toy_stem_forward(rng.uniform(size=(1, 3, 112, 112)), init_params(config, rng), config)
