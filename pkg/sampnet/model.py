"""
Multi-pattern pooling network with hand-derived reverse mode.

All batched arrays carry the sample axis first: features N x C x H x W,
saliency grids N x H_sal x W_sal, vectors N x D. Linear weights are stored
input-major (fan_in x fan_out) so a layer is ``x @ w + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from logging import getLogger
from typing import Iterator, Mapping

import numpy as np

from sampnet.consts import NUM_ATTRIBUTES, NUM_SCORES
from sampnet.datamodel import FeatureSource, ModelConfig
from sampnet.errors import ValidationError
from sampnet.patterns import all_partition_cells, pattern_mask
from sampnet.stem import StemCache, stem_param_shapes, toy_stem_backward, toy_stem_forward


log = getLogger(__name__)


# -- parameters ---------------------------------------------------------------

@dataclass(frozen=True)
class PatternLayout:
    pattern_id: int
    feature_cells: tuple[np.ndarray, ...]
    saliency_cells: tuple[np.ndarray, ...]
    use_saliency: bool
    channels: int

    @property
    def num_partitions(self) -> int:
        return len(self.feature_cells)

    @property
    def input_dim(self) -> int:
        saliency = sum(len(cells) for cells in self.saliency_cells) if self.use_saliency else 0
        return saliency + self.num_partitions * self.channels


@lru_cache(maxsize=None)
def _layout(p: int, height: int, width: int, sal_height: int, sal_width: int,
            use_saliency: bool, channels: int) -> PatternLayout:
    feature_cells = all_partition_cells(pattern_mask(p, height, width))
    saliency_cells = all_partition_cells(pattern_mask(p, sal_height, sal_width))
    if len(feature_cells) != len(saliency_cells):
        raise ValidationError(f"Pattern {p} partition counts differ between feature and saliency grids")
    return PatternLayout(p, tuple(feature_cells), tuple(saliency_cells), use_saliency, channels)


def pattern_layout(config: ModelConfig, p: int) -> PatternLayout:
    return _layout(p, config.height, config.width, config.saliency_height, config.saliency_width,
                   config.use_saliency, config.channels)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    config.validate()
    shapes: dict[str, tuple[int, ...]] = {}
    if config.feature_source is FeatureSource.TOY_STEM:
        shapes.update(stem_param_shapes(config))
    for p in config.patterns:
        shapes[f'samp.proj.{p}.w'] = (pattern_layout(config, p).input_dim, config.c_prime)
        shapes[f'samp.proj.{p}.b'] = (config.c_prime,)
    if config.use_pattern_weights:
        shapes['samp.gate.w'] = (config.channels, config.num_patterns)
        shapes['samp.gate.b'] = (config.num_patterns,)
    shapes['aaff.comp.w'] = (config.c_prime, config.half)
    shapes['aaff.comp.b'] = (config.half,)
    shapes['aaff.atts.w'] = (config.c_prime, config.half)
    shapes['aaff.atts.b'] = (config.half,)
    if config.use_attention_fusion:
        shapes['aaff.attn.w'] = (config.c_prime, 2)
        shapes['aaff.attn.b'] = (2,)
    shapes['head.dist.w'] = (config.c_prime, NUM_SCORES)
    shapes['head.dist.b'] = (NUM_SCORES,)
    if config.use_attribute_branch:
        shapes['head.attr.w'] = (config.half, NUM_ATTRIBUTES)
        shapes['head.attr.b'] = (NUM_ATTRIBUTES,)
    return shapes


@dataclass
class ModelParams(Mapping[str, np.ndarray]):
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ValidationError(f"Missing tensor '{name}'")
            if self.tensors[name].shape != shape:
                raise ValidationError(f"Tensor '{name}' has shape {self.tensors[name].shape}, expected {shape}")
        unexpected = set(self.tensors) - set(expected)
        if unexpected:
            raise ValidationError(f"Unexpected tensors: {', '.join(sorted(unexpected))}")
        self.tensors = {name: np.asarray(self.tensors[name], dtype=np.float64) for name in expected}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def count(self) -> int:
        return sum(tensor.size for tensor in self.tensors.values())

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {name: tensor.copy() for name, tensor in self.tensors.items()})


def is_backbone(name: str) -> bool:
    return name.startswith('stem.')


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith('.b'):
            tensors[name] = np.zeros(shape)
        elif is_backbone(name):
            fan_in = shape[1] * shape[2] * shape[3]
            limit = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(config, tensors)


# -- building blocks ----------------------------------------------------------

@dataclass
class LinearCache:
    inputs: np.ndarray
    mask: np.ndarray | None


def _dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray | None]:
    if rng is None or rate <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   rate: float = 0.0, rng: np.random.Generator | None = None,
                   ) -> tuple[np.ndarray, LinearCache]:
    dropped, mask = _dropout(x, rate, rng)
    return dropped @ weight + bias, LinearCache(dropped, mask)


def linear_backward(grad_out: np.ndarray, cache: LinearCache, weight: np.ndarray,
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_weight = cache.inputs.T @ grad_out
    grad_bias = grad_out.sum(axis=0)
    grad_in = grad_out @ weight.T
    if cache.mask is not None:
        grad_in = grad_in * cache.mask
    return grad_in, grad_weight, grad_bias


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def softmax_backward(grad_probs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def partition_avg_pool(features: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """
    Channel-wise mean of ``features`` (..., C, H, W) over the listed flat cells.
    """
    if len(cells) == 0:
        raise ValidationError("Cannot pool over an empty partition")
    flat = features.reshape(*features.shape[:-2], -1)
    if cells.max() >= flat.shape[-1] or cells.min() < 0:
        raise ValidationError("Partition cells fall outside the feature grid")
    return flat[..., cells].mean(axis=-1)


def partition_saliency_vector(grid: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """
    Saliency values of ``grid`` (..., H_sal, W_sal) at ``cells``, in row-major order.
    """
    flat = grid.reshape(*grid.shape[:-2], -1)
    if len(cells) and (cells.max() >= flat.shape[-1] or cells.min() < 0):
        raise ValidationError("Partition cells fall outside the saliency grid")
    return flat[..., cells]


# -- SAMP ---------------------------------------------------------------------

@dataclass
class PatternCache:
    layout: PatternLayout
    linear: LinearCache
    pre_activation: np.ndarray
    output: np.ndarray


def pattern_feature(features: np.ndarray,
                    grid: np.ndarray,
                    p: int,
                    params: ModelParams,
                    *,
                    dropout: float = 0.0,
                    rng: np.random.Generator | None = None,
                    ) -> tuple[np.ndarray, PatternCache]:
    config = params.config
    layout = pattern_layout(config, p)
    pieces = []
    for feature_cells, saliency_cells in zip(layout.feature_cells, layout.saliency_cells):
        if config.use_saliency:
            pieces.append(partition_saliency_vector(grid, saliency_cells))
        pieces.append(partition_avg_pool(features, feature_cells))
    stacked = np.concatenate(pieces, axis=-1)
    weight = params[f'samp.proj.{p}.w']
    if stacked.shape[-1] != weight.shape[0]:
        raise ValidationError(f"Pattern {p} input has {stacked.shape[-1]} values, projection expects {weight.shape[0]}")
    z, linear = linear_forward(stacked, weight, params[f'samp.proj.{p}.b'], dropout, rng)
    out = np.maximum(z, 0.0)
    return out, PatternCache(layout, linear, z, out)


def pattern_feature_backward(grad_out: np.ndarray,
                             cache: PatternCache,
                             params: ModelParams,
                             grad_features: np.ndarray,
                             grad_grid: np.ndarray,
                             grads: dict[str, np.ndarray],
                             ) -> None:
    p = cache.layout.pattern_id
    grad_z = grad_out * (cache.pre_activation > 0)
    grad_in, grads[f'samp.proj.{p}.w'], grads[f'samp.proj.{p}.b'] = linear_backward(
        grad_z, cache.linear, params[f'samp.proj.{p}.w'],
    )
    n = grad_in.shape[0]
    flat_features = grad_features.reshape(n, grad_features.shape[1], -1)
    flat_grid = grad_grid.reshape(n, -1)
    channels = cache.layout.channels
    offset = 0
    for feature_cells, saliency_cells in zip(cache.layout.feature_cells, cache.layout.saliency_cells):
        if cache.layout.use_saliency:
            flat_grid[:, saliency_cells] += grad_in[:, offset:offset + len(saliency_cells)]
            offset += len(saliency_cells)
        grad_theta = grad_in[:, offset:offset + channels]
        flat_features[:, :, feature_cells] += (grad_theta / len(feature_cells))[:, :, None]
        offset += channels


@dataclass
class GateCache:
    linear: LinearCache
    weights: np.ndarray


def pattern_weights(features: np.ndarray,
                    params: ModelParams,
                    *,
                    dropout: float = 0.0,
                    rng: np.random.Generator | None = None,
                    ) -> tuple[np.ndarray, GateCache | None]:
    config = params.config
    n = features.shape[0]
    if not config.use_pattern_weights:
        return np.full((n, config.num_patterns), 1.0 / config.num_patterns), None
    pooled = features.mean(axis=(2, 3))
    logits, linear = linear_forward(pooled, params['samp.gate.w'], params['samp.gate.b'], dropout, rng)
    weights = softmax(logits)
    return weights, GateCache(linear, weights)


@dataclass
class SampCache:
    patterns: list[PatternCache]
    gate: GateCache | None
    weights: np.ndarray
    pattern_outputs: np.ndarray


def samp_forward(features: np.ndarray,
                 grid: np.ndarray,
                 params: ModelParams,
                 *,
                 dropout: float = 0.0,
                 rng: np.random.Generator | None = None,
                 ) -> tuple[np.ndarray, SampCache]:
    config = params.config
    outputs = []
    caches = []
    for p in config.patterns:
        out, cache = pattern_feature(features, grid, p, params, dropout=dropout, rng=rng)
        outputs.append(out)
        caches.append(cache)
    stacked = np.stack(outputs, axis=1)
    weights, gate = pattern_weights(features, params, dropout=dropout, rng=rng)
    aggregated = np.einsum('np,npd->nd', weights, stacked)
    return aggregated, SampCache(caches, gate, weights, stacked)


def samp_backward(grad_samp: np.ndarray,
                  cache: SampCache,
                  params: ModelParams,
                  grad_features: np.ndarray,
                  grad_grid: np.ndarray,
                  grads: dict[str, np.ndarray],
                  ) -> None:
    for index, pattern_cache in enumerate(cache.patterns):
        grad_pattern = cache.weights[:, index:index + 1] * grad_samp
        pattern_feature_backward(grad_pattern, pattern_cache, params, grad_features, grad_grid, grads)
    if cache.gate is None:
        return
    grad_weights = np.einsum('nd,npd->np', grad_samp, cache.pattern_outputs)
    grad_logits = softmax_backward(grad_weights, cache.gate.weights)
    grad_pooled, grads['samp.gate.w'], grads['samp.gate.b'] = linear_backward(
        grad_logits, cache.gate.linear, params['samp.gate.w'],
    )
    height, width = grad_features.shape[2:]
    grad_features += grad_pooled[:, :, None, None] / (height * width)


# -- AAFF and heads -----------------------------------------------------------

@dataclass
class AaffCache:
    comp: LinearCache
    atts: LinearCache
    attn: LinearCache | None
    f_comp: np.ndarray
    f_atts: np.ndarray
    attention: np.ndarray


def aaff_forward(f_samp: np.ndarray,
                 params: ModelParams,
                 *,
                 dropout: float = 0.0,
                 rng: np.random.Generator | None = None,
                 ) -> tuple[np.ndarray, np.ndarray, AaffCache]:
    """
    Splits the aggregated pattern feature into composition and attribute
    halves and fuses them as [e1 * f_comp, e2 * f_atts].
    """
    config = params.config
    if f_samp.shape[-1] != config.c_prime:
        raise ValidationError(f"Aggregated feature has {f_samp.shape[-1]} values, expected {config.c_prime}")
    f_comp, comp = linear_forward(f_samp, params['aaff.comp.w'], params['aaff.comp.b'], dropout, rng)
    f_atts, atts = linear_forward(f_samp, params['aaff.atts.w'], params['aaff.atts.b'], dropout, rng)
    attn: LinearCache | None = None
    if config.use_attention_fusion:
        joined = np.concatenate([f_comp, f_atts], axis=-1)
        logits, attn = linear_forward(joined, params['aaff.attn.w'], params['aaff.attn.b'], dropout, rng)
        attention = sigmoid(logits)
    else:
        attention = np.ones((f_samp.shape[0], 2))
    fused = np.concatenate([attention[:, :1] * f_comp, attention[:, 1:] * f_atts], axis=-1)
    return fused, f_atts, AaffCache(comp, atts, attn, f_comp, f_atts, attention)


def aaff_backward(grad_fused: np.ndarray,
                  grad_atts_extra: np.ndarray | None,
                  cache: AaffCache,
                  params: ModelParams,
                  grads: dict[str, np.ndarray],
                  ) -> np.ndarray:
    half = params.config.half
    e1 = cache.attention[:, :1]
    e2 = cache.attention[:, 1:]
    grad_comp = grad_fused[:, :half] * e1
    grad_atts = grad_fused[:, half:] * e2
    if grad_atts_extra is not None:
        grad_atts = grad_atts + grad_atts_extra
    if cache.attn is not None:
        grad_attention = np.stack([
            (grad_fused[:, :half] * cache.f_comp).sum(axis=1),
            (grad_fused[:, half:] * cache.f_atts).sum(axis=1),
        ], axis=1)
        grad_logits = grad_attention * cache.attention * (1.0 - cache.attention)
        grad_joined, grads['aaff.attn.w'], grads['aaff.attn.b'] = linear_backward(
            grad_logits, cache.attn, params['aaff.attn.w'],
        )
        grad_comp = grad_comp + grad_joined[:, :half]
        grad_atts = grad_atts + grad_joined[:, half:]
    grad_samp_comp, grads['aaff.comp.w'], grads['aaff.comp.b'] = linear_backward(
        grad_comp, cache.comp, params['aaff.comp.w'],
    )
    grad_samp_atts, grads['aaff.atts.w'], grads['aaff.atts.b'] = linear_backward(
        grad_atts, cache.atts, params['aaff.atts.w'],
    )
    return grad_samp_comp + grad_samp_atts


@dataclass
class HeadCache:
    linear: LinearCache
    output: np.ndarray


def predict_distribution(fused: np.ndarray,
                         params: ModelParams,
                         *,
                         dropout: float = 0.0,
                         rng: np.random.Generator | None = None,
                         ) -> tuple[np.ndarray, HeadCache]:
    logits, linear = linear_forward(fused, params['head.dist.w'], params['head.dist.b'], dropout, rng)
    probs = softmax(logits)
    return probs, HeadCache(linear, probs)


def predict_attributes(f_atts: np.ndarray,
                       params: ModelParams,
                       *,
                       dropout: float = 0.0,
                       rng: np.random.Generator | None = None,
                       ) -> tuple[np.ndarray, HeadCache]:
    if not params.config.use_attribute_branch:
        raise ValidationError("Attribute branch is disabled in this model config")
    out, linear = linear_forward(f_atts, params['head.attr.w'], params['head.attr.b'], dropout, rng)
    return out, HeadCache(linear, out)


# -- whole graph --------------------------------------------------------------

@dataclass
class ModelOutputs:
    distribution: np.ndarray
    attributes: np.ndarray | None
    pattern_weights: np.ndarray
    attention: np.ndarray
    features: np.ndarray


@dataclass
class ForwardCache:
    config: ModelConfig
    inputs: np.ndarray
    grid: np.ndarray
    stem: StemCache | None
    samp: SampCache
    aaff: AaffCache
    dist: HeadCache
    attr: HeadCache | None


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    inputs: np.ndarray
    grid: np.ndarray = field(repr=False)


def model_forward(params: ModelParams,
                  inputs: np.ndarray,
                  grid: np.ndarray,
                  *,
                  dropout: float = 0.0,
                  rng: np.random.Generator | None = None,
                  ) -> tuple[ModelOutputs, ForwardCache]:
    """
    ``inputs`` holds precomputed features (N, C, H, W) or, with the toy stem,
    images (N, channels, size, size) in [0, 1]. Dropout is active only when
    ``rng`` is given.
    """
    config = params.config
    stem_cache: StemCache | None = None
    if config.feature_source is FeatureSource.TOY_STEM:
        features, stem_cache = toy_stem_forward(inputs, params, config)
    else:
        features = np.asarray(inputs, dtype=np.float64)
    expected_features = (config.channels, config.height, config.width)
    if features.ndim != 4 or features.shape[1:] != expected_features:
        raise ValidationError(f"Features of shape {features.shape[1:]} do not match config {expected_features}")
    expected_grid = (config.saliency_height, config.saliency_width)
    if grid.ndim != 3 or grid.shape[1:] != expected_grid or grid.shape[0] != features.shape[0]:
        raise ValidationError(f"Saliency grids of shape {grid.shape} do not match config {expected_grid}")

    f_samp, samp = samp_forward(features, grid, params, dropout=dropout, rng=rng)
    fused, f_atts, aaff = aaff_forward(f_samp, params, dropout=dropout, rng=rng)
    distribution, dist = predict_distribution(fused, params, dropout=dropout, rng=rng)
    attributes: np.ndarray | None = None
    attr: HeadCache | None = None
    if config.use_attribute_branch:
        attributes, attr = predict_attributes(f_atts, params, dropout=dropout, rng=rng)

    outputs = ModelOutputs(distribution, attributes, samp.weights, aaff.attention, features)
    cache = ForwardCache(config, inputs, grid, stem_cache, samp, aaff, dist, attr)
    return outputs, cache


def model_backward(cache: ForwardCache,
                   params: ModelParams,
                   grad_distribution: np.ndarray,
                   grad_attributes: np.ndarray | None = None,
                   ) -> Gradients:
    if cache.config != params.config:
        raise ValidationError("Forward cache was produced by a different model config")
    grads: dict[str, np.ndarray] = {}
    grad_logits = softmax_backward(grad_distribution, cache.dist.output)
    grad_fused, grads['head.dist.w'], grads['head.dist.b'] = linear_backward(
        grad_logits, cache.dist.linear, params['head.dist.w'],
    )
    grad_atts_extra: np.ndarray | None = None
    if cache.attr is not None:
        if grad_attributes is None:
            grad_attributes = np.zeros_like(cache.attr.output)
        grad_atts_extra, grads['head.attr.w'], grads['head.attr.b'] = linear_backward(
            grad_attributes, cache.attr.linear, params['head.attr.w'],
        )
    grad_samp = aaff_backward(grad_fused, grad_atts_extra, cache.aaff, params, grads)

    features = cache.samp.pattern_outputs
    n = features.shape[0]
    config = cache.config
    grad_features = np.zeros((n, config.channels, config.height, config.width))
    grad_grid = np.zeros_like(cache.grid, dtype=np.float64)
    samp_backward(grad_samp, cache.samp, params, grad_features, grad_grid, grads)

    grad_inputs = grad_features
    if cache.stem is not None:
        grad_inputs, stem_grads = toy_stem_backward(grad_features, cache.stem, params)
        grads.update(stem_grads)
    ordered = {name: grads[name] for name in params}
    return Gradients(ordered, grad_inputs, grad_grid)
