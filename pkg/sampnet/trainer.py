from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import Iterable, Literal, Mapping

import numpy as np
import polars as pl

from sampnet.config import TrainConfig
from sampnet.consts import ATTRIBUTE_NAMES, NUM_SCORES
from sampnet.datamodel import expectation
from sampnet.dataset import CompositionDataset, DatasetArrays, load_arrays
from sampnet.errors import NumericError, ValidationError
from sampnet.fileformats import Checkpoint, checkpoint_from_params
from sampnet.inner_types import TrackerFactory, default_tracker
from sampnet.losses import emd_loss, total_loss, total_loss_grad
from sampnet.model import ModelParams, init_params, is_backbone, model_backward, model_forward
from sampnet.stats import MetricsReport, lcc, mse, srcc
from sampnet.utils import atomic_open


log = getLogger(__name__)
Group = Literal['backbone', 'head']


def parameter_group(name: str) -> Group:
    return 'backbone' if is_backbone(name) else 'head'


@dataclass
class OptimizerState:
    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    learning_rates: dict[Group, float]

    @classmethod
    def initial(cls, params: Mapping[str, np.ndarray], config: TrainConfig) -> OptimizerState:
        return cls(
            step=0,
            first_moment={name: np.zeros_like(tensor) for name, tensor in params.items()},
            second_moment={name: np.zeros_like(tensor) for name, tensor in params.items()},
            learning_rates={'backbone': config.lr_backbone, 'head': config.lr_head},
        )

    def decayed(self, factor: float) -> OptimizerState:
        rates = {group: rate * factor for group, rate in self.learning_rates.items()}
        return replace(self, learning_rates=rates)


def adam_step(params: ModelParams,
              grads: Mapping[str, np.ndarray],
              state: OptimizerState,
              config: TrainConfig,
              ) -> tuple[ModelParams, OptimizerState]:
    """
    One bias-corrected Adam update; weight decay enters as an L2 term on the gradient.
    """
    if set(grads) != set(params):
        raise ValidationError("Gradients and parameters name different tensors")
    step = state.step + 1
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    first_correction = 1.0 - beta1 ** step
    second_correction = 1.0 - beta2 ** step
    tensors, first, second = {}, {}, {}
    for name, theta in params.items():
        grad = grads[name]
        if grad.shape != theta.shape:
            raise ValidationError(f"Gradient of '{name}' has shape {grad.shape}, expected {theta.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Non-finite gradient in tensor '{name}' at step {step}", tensor=name)
        grad = grad + config.weight_decay * theta
        first[name] = beta1 * state.first_moment[name] + (1.0 - beta1) * grad
        second[name] = beta2 * state.second_moment[name] + (1.0 - beta2) * grad * grad
        m_hat = first[name] / first_correction
        v_hat = second[name] / second_correction
        rate = state.learning_rates[parameter_group(name)]
        tensors[name] = theta - rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    new_state = OptimizerState(step, first, second, dict(state.learning_rates))
    return ModelParams(params.config, tensors), new_state


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    wemd: float
    atts: float
    total: float
    lr_head: float
    lr_backbone: float


@dataclass
class TrainingResult:
    final: Checkpoint
    best: Checkpoint
    records: list[EpochRecord]
    params: ModelParams


def _as_arrays(data: CompositionDataset | DatasetArrays,
               config: TrainConfig,
               tracker: TrackerFactory,
               ) -> DatasetArrays:
    if isinstance(data, DatasetArrays):
        if data.config != config.model:
            raise ValidationError("Dataset arrays were loaded for a different model config")
        if config.loss.use_weighted_emd and not np.all(data.betas > 0):
            raise ValidationError("Weighted EMD needs positive beta weights for every sample")
        return data
    return load_arrays(data, config.model, require_betas=config.loss.use_weighted_emd, tracker=tracker)


def _checkpoint(params: ModelParams, config: TrainConfig, epoch: int, total: float) -> Checkpoint:
    return checkpoint_from_params(
        config.model, params.copy(), {'epoch': epoch, 'total': total, 'seed': config.seed, 'r': config.loss.r},
    )


def _weighted_sum(values: list[float], weights: list[int]) -> float:
    total = 0.0
    for value, weight in zip(values, weights):
        total += value * weight
    return total


def train(data: CompositionDataset | DatasetArrays,
          config: TrainConfig,
          *,
          tracker: TrackerFactory = default_tracker,
          ) -> TrainingResult:
    config.validate()
    arrays = _as_arrays(data, config, tracker)
    if not len(arrays):
        raise ValidationError("Cannot train on an empty dataset")
    init_seed, subset_seed, shuffle_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(4)
    if config.max_train_samples is not None and config.max_train_samples < len(arrays):
        order = np.random.default_rng(subset_seed).permutation(len(arrays))
        arrays = arrays.take(order[:config.max_train_samples])
        log.info("Training on the first %s samples of a seeded shuffle", len(arrays))

    params = init_params(config.model, np.random.default_rng(init_seed))
    state = OptimizerState.initial(params, config)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    log.info("Training %s parameters on %s samples", params.count(), len(arrays))

    records: list[EpochRecord] = []
    best_total = np.inf
    best: Checkpoint | None = None
    stalled = 0
    n = len(arrays)
    with tracker(total=config.max_epochs, desc="epochs", unit="epoch") as progress:
        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            rates = dict(state.learning_rates)
            order = shuffle_rng.permutation(n)
            wemd_values, atts_values, sizes = [], [], []
            for start in range(0, n, config.batch_size):
                batch = arrays.batch(order[start:start + config.batch_size])
                betas = batch.betas if config.loss.use_weighted_emd else np.ones(len(batch.betas))
                outputs, cache = model_forward(
                    params, batch.inputs, batch.grids, dropout=config.dropout, rng=dropout_rng,
                )
                gt_attributes = batch.attributes if outputs.attributes is not None else None
                breakdown = total_loss(
                    batch.distributions, outputs.distribution, betas, outputs.attributes, gt_attributes, config.loss,
                )
                if not np.isfinite(breakdown.total):
                    raise NumericError(f"Loss became non-finite in epoch {epoch}", tensor='loss')
                grad_distribution, grad_attributes = total_loss_grad(
                    batch.distributions, outputs.distribution, betas, outputs.attributes, gt_attributes, config.loss,
                )
                gradients = model_backward(cache, params, grad_distribution, grad_attributes)
                params, state = adam_step(params, gradients.params, state, config)
                wemd_values.append(breakdown.wemd)
                atts_values.append(breakdown.atts)
                sizes.append(len(batch.betas))
                log.debug("epoch %s batch at %s: total %.6f", epoch, start, breakdown.total)

            wemd = _weighted_sum(wemd_values, sizes) / n
            atts = _weighted_sum(atts_values, sizes) / n
            record = EpochRecord(
                epoch=epoch, wemd=wemd, atts=atts, total=wemd + config.loss.lambda_ * atts,
                lr_head=rates['head'], lr_backbone=rates['backbone'],
            )
            records.append(record)
            log.info(
                "epoch %s: wemd %.6f atts %.6f total %.6f (%.2fs)",
                epoch, record.wemd, record.atts, record.total, time.perf_counter() - started,
            )

            if record.total < best_total - config.plateau_tolerance:
                best_total = record.total
                best = _checkpoint(params, config, epoch, record.total)
                stalled = 0
            else:
                stalled += 1
                if stalled >= config.patience:
                    state = state.decayed(config.decay_factor)
                    stalled = 0
                    log.info(
                        "Train loss plateaued for %s epochs, learning rates now head %g backbone %g",
                        config.patience, state.learning_rates['head'], state.learning_rates['backbone'],
                    )
            progress.update()

    final = _checkpoint(params, config, config.max_epochs, records[-1].total)
    return TrainingResult(final=final, best=best or final, records=records, params=params)


def format_training_log(records: Iterable[EpochRecord]) -> str:
    return ''.join(json.dumps(asdict(record)) + '\n' for record in records)


def write_training_log(records: Iterable[EpochRecord], path: Path | str) -> None:
    with atomic_open(path) as file:
        file.write(format_training_log(records))


@dataclass(frozen=True, eq=False)
class Predictions:
    image_ids: tuple[str, ...]
    distributions: np.ndarray
    attributes: np.ndarray | None
    pattern_weights: np.ndarray
    attention: np.ndarray

    @property
    def mean_scores(self) -> np.ndarray:
        return np.array([expectation(row) for row in self.distributions])


def predict(params: ModelParams, arrays: DatasetArrays, *, batch_size: int = 64) -> Predictions:
    """
    Deterministic forward pass over the whole dataset, dropout off.
    """
    distributions, attributes, weights, attention = [], [], [], []
    for start in range(0, len(arrays), batch_size):
        batch = arrays.batch(np.arange(start, min(start + batch_size, len(arrays))))
        outputs, _ = model_forward(params, batch.inputs, batch.grids)
        distributions.append(outputs.distribution)
        weights.append(outputs.pattern_weights)
        attention.append(outputs.attention)
        if outputs.attributes is not None:
            attributes.append(outputs.attributes)
    return Predictions(
        image_ids=arrays.image_ids,
        distributions=np.concatenate(distributions),
        attributes=np.concatenate(attributes) if attributes else None,
        pattern_weights=np.concatenate(weights),
        attention=np.concatenate(attention),
    )


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    report: MetricsReport
    predictions: Predictions

    def predictions_frame(self, ground_truth: np.ndarray) -> pl.DataFrame:
        data: dict[str, list] = {
            'image_id': list(self.predictions.image_ids),
            'predicted_mean': self.predictions.mean_scores.tolist(),
            'ground_truth_mean': [expectation(row) for row in ground_truth],
        }
        for score in range(NUM_SCORES):
            data[f'p{score + 1}'] = self.predictions.distributions[:, score].tolist()
        if self.predictions.attributes is not None:
            for index, name in enumerate(ATTRIBUTE_NAMES):
                data[name] = self.predictions.attributes[:, index].tolist()
        return pl.DataFrame(data)


def params_from_checkpoint(checkpoint: Checkpoint) -> ModelParams:
    return ModelParams(checkpoint.config, checkpoint.tensors)


def evaluate(checkpoint: Checkpoint,
             data: CompositionDataset | DatasetArrays,
             *,
             r: float | None = None,
             tracker: TrackerFactory = default_tracker,
             ) -> EvaluationResult:
    params = params_from_checkpoint(checkpoint)
    if isinstance(data, DatasetArrays):
        if data.config.digest() != checkpoint.digest:
            raise ValidationError(
                f"Dataset arrays were loaded for config {data.config.digest()[:12]}, "
                f"checkpoint has {checkpoint.digest[:12]}"
            )
        arrays = data
    else:
        arrays = load_arrays(data, checkpoint.config, tracker=tracker)
    exponent = float(r if r is not None else checkpoint.meta.get('r', 2.0))
    predictions = predict(params, arrays)
    predicted_means = predictions.mean_scores
    true_means = np.array([expectation(row) for row in arrays.distributions])
    emd_values = np.atleast_1d(emd_loss(arrays.distributions, predictions.distributions, exponent))
    report = MetricsReport(
        mse=mse(predicted_means, true_means),
        emd=float(np.mean(emd_values)),
        emd_r=exponent,
        srcc=srcc(predicted_means, true_means),
        lcc=lcc(predicted_means, true_means),
        count=len(arrays),
        config_digest=checkpoint.digest,
    )
    log.info("Evaluated %s images: MSE %.4f EMD %.4f SRCC %.4f LCC %.4f",
             report.count, report.mse, report.emd, report.srcc, report.lcc)
    return EvaluationResult(report, predictions)
