import json
import logging
from pathlib import Path
from dataclasses import replace

import numpy as np
import pytest

from sampnet.bias import bin_entropy, filter_and_split, prediction_bin_table
from sampnet.config import TrainConfig
from sampnet.datamodel import FeatureSource, ModelConfig, SynthFamily, SynthSpec
from sampnet.dataset import CompositionDataset, load_arrays, write_betas
from sampnet.errors import NumericError, ValidationError
from sampnet.fileformats import checkpoint_from_params
from sampnet.losses import LossConfig
from sampnet.model import ModelParams, init_params
from sampnet.synth import read_synth_spec, synth_generate
from sampnet.trainer import (
    OptimizerState, adam_step, evaluate, format_training_log, parameter_group, predict, train, write_training_log,
)

DATA = Path(__file__).resolve().parent.parent / 'data'


def quick_config(model: ModelConfig, **overrides) -> TrainConfig:
    settings = dict(
        batch_size=3, lr_head=1e-3, lr_backbone=1e-3, dropout=0.0, max_epochs=3,
        loss=LossConfig(use_weighted_emd=False), model=model,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


def zero_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    params = init_params(config, rng)
    return ModelParams(config, {name: np.zeros_like(tensor) for name, tensor in params.items()})


class TestAdam:
    def test_first_step_moves_by_learning_rate(self, small_config, rng):
        config = quick_config(small_config, lr_head=0.1, weight_decay=0.0)
        params = zero_params(small_config, rng)
        grads = {name: np.ones_like(tensor) for name, tensor in params.items()}
        updated, state = adam_step(params, grads, OptimizerState.initial(params, config), config)
        assert state.step == 1
        for tensor in updated.values():
            np.testing.assert_allclose(tensor, -0.1, rtol=1e-6)

    def test_zero_gradient_keeps_params(self, small_config, rng):
        config = quick_config(small_config, weight_decay=0.0)
        params = init_params(small_config, rng)
        grads = {name: np.zeros_like(tensor) for name, tensor in params.items()}
        updated, state = adam_step(params, grads, OptimizerState.initial(params, config), config)
        assert state.step == 1
        for name, tensor in params.items():
            np.testing.assert_array_equal(updated[name], tensor)

    def test_groups(self, stem_config, rng):
        config = quick_config(stem_config, lr_head=0.1, lr_backbone=0.01, weight_decay=0.0)
        params = zero_params(stem_config, rng)
        grads = {name: np.ones_like(tensor) for name, tensor in params.items()}
        updated, _ = adam_step(params, grads, OptimizerState.initial(params, config), config)
        for name, tensor in updated.items():
            expected = -0.01 if parameter_group(name) == 'backbone' else -0.1
            np.testing.assert_allclose(tensor, expected, rtol=1e-6)
        assert {parameter_group(name) for name in params} == {'backbone', 'head'}

    def test_weight_decay_is_coupled(self, small_config, rng):
        config = quick_config(small_config, lr_head=0.1, weight_decay=0.5)
        params = init_params(small_config, rng)
        grads = {name: -0.5 * tensor for name, tensor in params.items()}
        updated, _ = adam_step(params, grads, OptimizerState.initial(params, config), config)
        for name, tensor in params.items():
            np.testing.assert_array_equal(updated[name], tensor)

    def test_decay(self, small_config, rng):
        config = quick_config(small_config, lr_head=0.1, lr_backbone=0.01)
        state = OptimizerState.initial(init_params(small_config, rng), config).decayed(0.1)
        assert state.learning_rates == pytest.approx({'head': 0.01, 'backbone': 0.001})

    def test_non_finite_gradient(self, small_config, rng):
        config = quick_config(small_config)
        params = init_params(small_config, rng)
        grads = {name: np.zeros_like(tensor) for name, tensor in params.items()}
        grads['head.dist.w'] = np.full_like(grads['head.dist.w'], np.nan)
        with pytest.raises(NumericError) as info:
            adam_step(params, grads, OptimizerState.initial(params, config), config)
        assert info.value.tensor == 'head.dist.w'

    def test_mismatched_gradients(self, small_config, rng):
        config = quick_config(small_config)
        params = init_params(small_config, rng)
        with pytest.raises(ValidationError):
            adam_step(params, {}, OptimizerState.initial(params, config), config)


class TestTrain:
    def test_records(self, feature_dir, small_config):
        result = train(CompositionDataset.from_directory(feature_dir), quick_config(small_config))
        assert [record.epoch for record in result.records] == [1, 2, 3]
        for record in result.records:
            assert record.total == pytest.approx(record.wemd + 0.1 * record.atts)
            assert record.lr_head == 1e-3
        assert result.final.meta['epoch'] == 3
        totals = [record.total for record in result.records]
        assert result.best.meta['total'] in totals
        assert result.best.meta['total'] <= totals[0]

    def test_deterministic(self, feature_dir, small_config):
        dataset = CompositionDataset.from_directory(feature_dir)
        config = quick_config(small_config, dropout=0.5)
        first = train(dataset, config)
        second = train(dataset, config)
        assert first.records == second.records
        for name, tensor in first.params.items():
            np.testing.assert_array_equal(second.params[name], tensor)

    def test_seed_changes_run(self, feature_dir, small_config):
        dataset = CompositionDataset.from_directory(feature_dir)
        first = train(dataset, quick_config(small_config, seed=1))
        second = train(dataset, quick_config(small_config, seed=2))
        assert first.records != second.records

    def test_unit_betas_match_unweighted(self, feature_dir, small_config):
        dataset = CompositionDataset.from_directory(feature_dir)
        write_betas({image.image_id: 1.0 for image in dataset.images}, feature_dir / 'betas.csv')
        weighted = train(
            CompositionDataset.from_directory(feature_dir),
            quick_config(small_config, loss=LossConfig(use_weighted_emd=True)),
        )
        plain = train(dataset, quick_config(small_config))
        assert weighted.records == plain.records

    def test_weighted_needs_betas(self, feature_dir, small_config):
        config = quick_config(small_config, loss=LossConfig(use_weighted_emd=True))
        with pytest.raises(ValidationError):
            train(CompositionDataset.from_directory(feature_dir), config)

    def test_plateau_decays_once_per_patience(self, feature_dir, small_config):
        # only the first epoch can count as an improvement
        config = quick_config(small_config, max_epochs=5, patience=2, plateau_tolerance=1e9)
        records = train(CompositionDataset.from_directory(feature_dir), config).records
        assert [record.lr_head for record in records] == pytest.approx([1e-3, 1e-3, 1e-3, 1e-4, 1e-4])
        assert [record.lr_backbone for record in records] == pytest.approx([1e-3, 1e-3, 1e-3, 1e-4, 1e-4])

    def test_max_train_samples(self, feature_dir, small_config, caplog):
        config = quick_config(small_config, max_train_samples=5, max_epochs=1)
        with caplog.at_level(logging.INFO, logger='sampnet.trainer'):
            train(CompositionDataset.from_directory(feature_dir), config)
        assert 'first 5 samples' in caplog.text

    def test_arrays_for_other_config(self, feature_dir, small_config):
        arrays = load_arrays(CompositionDataset.from_directory(feature_dir), small_config)
        with pytest.raises(ValidationError):
            train(arrays, quick_config(replace(small_config, c_prime=8)))

    def test_empty_dataset(self, tmp_path, small_config):
        (tmp_path / 'annotations.tsv').write_text('')
        with pytest.raises(ValidationError):
            train(CompositionDataset.from_directory(tmp_path), quick_config(small_config))

    def test_training_log(self, feature_dir, small_config, tmp_path):
        result = train(CompositionDataset.from_directory(feature_dir), quick_config(small_config, max_epochs=2))
        write_training_log(result.records, tmp_path / 'log.jsonl')
        lines = (tmp_path / 'log.jsonl').read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert set(first) == {'epoch', 'wemd', 'atts', 'total', 'lr_head', 'lr_backbone'}
        assert format_training_log(result.records) == (tmp_path / 'log.jsonl').read_text()


class TestEvaluate:
    def test_report(self, feature_dir, small_config, rng):
        checkpoint = checkpoint_from_params(small_config, init_params(small_config, rng), {'r': 2.0})
        dataset = CompositionDataset.from_directory(feature_dir)
        result = evaluate(checkpoint, dataset)
        report = result.report
        assert report.count == 8
        assert report.emd_r == 2.0
        assert report.mse >= 0
        assert 0 <= report.emd <= 1
        assert -1 <= report.srcc <= 1 and -1 <= report.lcc <= 1
        assert report.config_digest == small_config.digest()
        assert evaluate(checkpoint, dataset).report == report

    def test_predictions(self, feature_dir, small_config, rng):
        params = init_params(small_config, rng)
        arrays = load_arrays(CompositionDataset.from_directory(feature_dir), small_config)
        predictions = predict(params, arrays, batch_size=3)
        assert predictions.distributions.shape == (8, 5)
        np.testing.assert_allclose(predictions.distributions.sum(axis=1), 1.0)
        assert predictions.pattern_weights.shape == (8, 8)
        assert predictions.attributes.shape == (8, 5)
        assert np.all((predictions.mean_scores >= 1) & (predictions.mean_scores <= 5))
        whole = predict(params, arrays, batch_size=64)
        np.testing.assert_allclose(whole.distributions, predictions.distributions, rtol=1e-9)

    def test_predictions_frame(self, feature_dir, small_config, rng):
        checkpoint = checkpoint_from_params(small_config, init_params(small_config, rng))
        dataset = CompositionDataset.from_directory(feature_dir)
        result = evaluate(checkpoint, dataset)
        ground_truth = np.stack([image.distribution.probs for image in dataset.images])
        frame = result.predictions_frame(ground_truth)
        assert frame.columns == [
            'image_id', 'predicted_mean', 'ground_truth_mean', 'p1', 'p2', 'p3', 'p4', 'p5',
            'rule_of_thirds', 'balancing_elements', 'object_emphasis', 'symmetry', 'repetition',
        ]
        assert frame['ground_truth_mean'].to_list() == pytest.approx([image.mean_score for image in dataset.images])

    def test_digest_mismatch(self, feature_dir, small_config, rng):
        other = replace(small_config, c_prime=8)
        checkpoint = checkpoint_from_params(other, init_params(other, rng))
        arrays = load_arrays(CompositionDataset.from_directory(feature_dir), small_config)
        with pytest.raises(ValidationError):
            evaluate(checkpoint, arrays)


def toy_dataset(tmp_path, spec: SynthSpec, seed: int = 0) -> CompositionDataset:
    synth_generate(spec, seed, tmp_path / 'synth')
    return CompositionDataset.from_directory(tmp_path / 'synth')


@pytest.mark.slow
def test_overfits_small_set(tmp_path):
    families = tuple(SynthFamily(name, 8) for name in ('thirds-aligned', 'centered', 'off-balance', 'symmetric-pair'))
    dataset = toy_dataset(tmp_path, SynthSpec(families=families, image_size=224))
    model = ModelConfig(channels=8, height=7, width=7, c_prime=16, feature_source=FeatureSource.TOY_STEM, image_size=224)
    config = quick_config(
        model, batch_size=8, lr_head=1e-3, lr_backbone=1e-3, weight_decay=0.0, max_epochs=300,
    )
    result = train(dataset, config)
    assert result.records[-1].total < 0.02
    assert evaluate(result.final, dataset).report.srcc >= 0.95


@pytest.mark.slow
def test_learns_composition_families(tmp_path):
    spec = read_synth_spec(DATA / 'synth_default.json')
    dataset = toy_dataset(tmp_path, spec)
    order = np.random.default_rng(0).permutation(len(dataset))
    train_set, test_set = dataset.take(order[:500]), dataset.take(order[500:])
    model = ModelConfig(channels=16, height=7, width=7, c_prime=32, feature_source=FeatureSource.TOY_STEM)
    config = quick_config(model, batch_size=16, max_epochs=30, dropout=0.5)
    result = train(train_set, config)
    assert evaluate(result.best, test_set).report.srcc >= 0.6


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_weighted_emd_spreads_biased_category(tmp_path, stem_config, seed):
    spec = read_synth_spec(DATA / 'synth_biased.json')
    spec = replace(spec, families=tuple(replace(family, count=40) for family in spec.families), image_size=72)
    dataset = toy_dataset(tmp_path, spec, seed)
    train_images, _, report = filter_and_split(list(dataset.images), seed, test_fraction=0.0)
    train_set = CompositionDataset(dataset.root, tuple(train_images), report.betas())
    category = spec.planted_bias.category

    entropies = {}
    for weighted in (False, True):
        config = quick_config(
            stem_config, batch_size=8, max_epochs=40, seed=seed, loss=LossConfig(use_weighted_emd=weighted),
        )
        result = train(train_set, config)
        arrays = load_arrays(train_set, stem_config)
        predicted = predict(result.params, arrays).mean_scores
        entropies[weighted] = bin_entropy(prediction_bin_table(train_images, predicted), category)
    assert entropies[True] > entropies[False]

