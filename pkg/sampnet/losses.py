from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sampnet.errors import ValidationError


@dataclass(frozen=True)
class LossConfig:
    r: float = 2.0
    lambda_: float = 0.1
    use_weighted_emd: bool = True

    def validate(self) -> LossConfig:
        if not self.r >= 1:
            raise ValidationError(f"EMD exponent r must be at least 1, got {self.r}")
        if not self.lambda_ >= 0:
            raise ValidationError(f"Attribute trade-off lambda must be non-negative, got {self.lambda_}")
        return self


@dataclass(frozen=True)
class LossBreakdown:
    wemd: float
    atts: float
    total: float


def _check_distributions(*distributions: np.ndarray, validate: bool = True) -> None:
    if not validate:
        return
    for distribution in distributions:
        if not np.all(np.isfinite(distribution)) or np.any(distribution < 0):
            raise ValidationError("Score distributions must be finite and non-negative")
        if np.any(np.abs(distribution.sum(axis=-1) - 1.0) > 1e-6):
            raise ValidationError("Score distributions must sum to 1")
    shapes = {distribution.shape for distribution in distributions}
    if len(shapes) != 1:
        raise ValidationError(f"Score distributions have mismatched shapes: {sorted(shapes)}")


def _cdf_gap(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    return np.cumsum(y, axis=-1) - np.cumsum(yhat, axis=-1)


def emd_loss(y: np.ndarray, yhat: np.ndarray, r: float = 2.0, *, validate: bool = True) -> np.ndarray | float:
    """
    Normalized EMD between score distributions along the last axis:
    (mean_s |CDF_y(s) - CDF_yhat(s)|^r)^(1/r).
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    _check_distributions(y, yhat, validate=validate)
    gap = np.abs(_cdf_gap(y, yhat))
    loss = np.mean(gap ** r, axis=-1) ** (1.0 / r)
    return float(loss) if np.ndim(loss) == 0 else loss


def emd_grad(y: np.ndarray, yhat: np.ndarray, r: float = 2.0, *, validate: bool = True) -> np.ndarray:
    """
    Gradient of ``emd_loss`` with respect to ``yhat``; zero where the loss is zero.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    _check_distributions(y, yhat, validate=validate)
    size = y.shape[-1]
    gap = _cdf_gap(y, yhat)
    mean_power = np.mean(np.abs(gap) ** r, axis=-1, keepdims=True)
    positive = mean_power > 0
    scale = np.where(positive, np.power(np.where(positive, mean_power, 1.0), 1.0 / r - 1.0), 0.0)
    grad_gap = scale * np.abs(gap) ** (r - 1.0) * np.sign(gap) / size
    # d gap_s / d yhat_i = -1 for every s >= i
    return -np.flip(np.cumsum(np.flip(grad_gap, axis=-1), axis=-1), axis=-1)


def weighted_emd_loss(y: np.ndarray, yhat: np.ndarray, beta: np.ndarray | float, r: float = 2.0) -> np.ndarray | float:
    beta_array = np.asarray(beta, dtype=np.float64)
    if np.any(beta_array <= 0):
        raise ValidationError(f"Sample weights must be positive, got {beta}")
    loss = beta_array * emd_loss(y, yhat, r)
    return float(loss) if np.ndim(loss) == 0 else loss


def weighted_emd_grad(y: np.ndarray, yhat: np.ndarray, beta: np.ndarray | float, r: float = 2.0) -> np.ndarray:
    beta_array = np.asarray(beta, dtype=np.float64)
    if np.any(beta_array <= 0):
        raise ValidationError(f"Sample weights must be positive, got {beta}")
    return beta_array[..., None] * emd_grad(y, yhat, r)


def attribute_loss(pred: np.ndarray, gt: np.ndarray) -> np.ndarray | float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"Attribute shapes differ: {pred.shape} vs {gt.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise ValidationError("Attributes must be finite")
    loss = np.mean((pred - gt) ** 2, axis=-1)
    return float(loss) if np.ndim(loss) == 0 else loss


def attribute_grad(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return 2.0 * (pred - gt) / pred.shape[-1]


def _batch_mean(values: np.ndarray) -> float:
    # index-ascending summation keeps the reduction order fixed
    total = 0.0
    for value in np.atleast_1d(values):
        total += float(value)
    return total / np.atleast_1d(values).size


def total_loss(y: np.ndarray,
               yhat: np.ndarray,
               beta: np.ndarray | float,
               pred_attrs: np.ndarray | None,
               gt_attrs: np.ndarray | None,
               config: LossConfig,
               ) -> LossBreakdown:
    """
    Batch mean of beta * EMD + lambda * attribute MSE. The attribute term is
    dropped when ``pred_attrs`` is None (attribute branch disabled).
    """
    y = np.atleast_2d(y)
    yhat = np.atleast_2d(yhat)
    beta_array = np.broadcast_to(np.asarray(beta, dtype=np.float64), y.shape[:1])
    wemd = _batch_mean(np.atleast_1d(weighted_emd_loss(y, yhat, beta_array, config.r)))
    atts = 0.0
    if pred_attrs is not None and gt_attrs is not None:
        atts = _batch_mean(np.atleast_1d(attribute_loss(np.atleast_2d(pred_attrs), np.atleast_2d(gt_attrs))))
    return LossBreakdown(wemd=wemd, atts=atts, total=wemd + config.lambda_ * atts)


def total_loss_grad(y: np.ndarray,
                    yhat: np.ndarray,
                    beta: np.ndarray | float,
                    pred_attrs: np.ndarray | None,
                    gt_attrs: np.ndarray | None,
                    config: LossConfig,
                    ) -> tuple[np.ndarray, np.ndarray | None]:
    y = np.atleast_2d(y)
    yhat = np.atleast_2d(yhat)
    n = y.shape[0]
    beta_array = np.broadcast_to(np.asarray(beta, dtype=np.float64), (n,))
    grad_yhat = weighted_emd_grad(y, yhat, beta_array, config.r) / n
    grad_attrs: np.ndarray | None = None
    if pred_attrs is not None and gt_attrs is not None:
        grad_attrs = config.lambda_ * attribute_grad(np.atleast_2d(pred_attrs), np.atleast_2d(gt_attrs)) / n
    return grad_yhat, grad_attrs
