"""Loss, optimizer, schedule, augmentation, k-fold splitting and the fit loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .data_io import Sample, binarize_prediction, pad_to_multiple, preprocess, preprocess_image, unpad
from .layers import NO_DECAY_ROLES, Parameter
from .model.checkpoint import ModelWeights, apply_weights
from .model.network import MiniSeg
from .tensor import ops
from .tensor.core import Tensor, backward

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "mean_train_loss", "lr", "val_DSC", "val_mIoU")


class NumericError(RuntimeError):
    """Raised when a loss or gradient goes non-finite.

    ``last_good`` holds the weights from before the failing step.
    """

    def __init__(self, msg: str, last_good: Optional[ModelWeights] = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 80
    batch_size: int = 5
    poly_power: float = 0.9
    seed: int = 0
    crop_size: Optional[int] = 256
    flip_prob: float = 0.5
    head_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    class_weighting: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.initial_lr <= 0 or self.weight_decay < 0 or self.poly_power <= 0:
            raise ValueError("learning rate and poly power must be positive, weight decay non-negative")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.crop_size is not None and (self.crop_size <= 0 or self.crop_size % 16):
            raise ValueError(f"crop_size must be a positive multiple of 16, got {self.crop_size}")


# -- loss -------------------------------------------------------------------------

def deep_supervision_loss(
    logits: Sequence[Tensor],
    mask: np.ndarray,
    weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
    class_weighting: bool = False,
) -> Tensor:
    """Weighted sum over heads of the pixel-mean cross-entropy."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must contain only 0 and 1")
    cw = None
    if class_weighting:
        freq = np.bincount(mask.astype(np.int64).ravel(), minlength=2) / mask.size
        cw = np.where(freq > 0, 1.0 / np.maximum(freq, 1e-12), 0.0)
        cw = cw / cw[freq > 0].sum()
    terms = []
    for head, w in zip(logits, weights):
        if w == 0:
            continue
        ce = ops.cross_entropy(head, mask, cw)
        terms.append(ce if w == 1 else ops.scale(ce, w))
    if not terms:
        raise ValueError("all head weights are zero")
    return ops.add_scalars(terms)


# -- schedule / optimizer -------------------------------------------------------------

def poly_lr(iteration: int, max_iter: int, cfg: TrainConfig) -> float:
    if max_iter <= 0:
        return cfg.initial_lr
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return cfg.initial_lr * (1 - iteration / max_iter) ** cfg.poly_power


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay is applied straight to the weights (scaled by ``lr``) and skipped
    for BN affine parameters and PReLU slopes. Parameters without a gradient
    are treated as having a zero gradient.
    """
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for a {p.role} parameter of shape {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p in params:
        key = id(p)
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and getattr(p, "role", "kernel") not in NO_DECAY_ROLES:
            p.data -= (lr * weight_decay) * p.data
        p.data -= (lr * update).astype(p.data.dtype)


# -- augmentation ---------------------------------------------------------------------

def hflip(sample: Sample) -> Sample:
    return Sample(sample.id, sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy())


def augment(sample: Sample, rng: np.random.Generator, cfg: TrainConfig) -> Sample:
    """Random crop (shared offsets for image and mask) then horizontal flip."""
    h, w = sample.image.shape
    if sample.mask.shape != (h, w):
        raise ValueError(f"sample {sample.id}: image {sample.image.shape} and mask {sample.mask.shape} differ")
    out = sample
    if cfg.crop_size is not None:
        cs = cfg.crop_size
        if cs > h or cs > w:
            raise ValueError(f"crop {cs}x{cs} larger than image {h}x{w} (sample {sample.id})")
        top = int(rng.integers(0, h - cs + 1))
        left = int(rng.integers(0, w - cs + 1))
        out = Sample(
            sample.id,
            sample.image[top : top + cs, left : left + cs].copy(),
            sample.mask[top : top + cs, left : left + cs].copy(),
        )
    if rng.random() < cfg.flip_prob:
        out = hflip(out)
    return out


# -- cross-validation ---------------------------------------------------------------------

def kfold_split(sample_ids: Sequence[str], k: int = 5, seed: int = 0) -> List[Tuple[List[str], List[str]]]:
    """Shuffle once with ``seed`` and cut into ``k`` near-equal validation folds."""
    ids = list(sample_ids)
    if len(ids) < k:
        raise ValueError(f"need at least k={k} samples, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    out = []
    for f in folds:
        val = set(int(i) for i in f)
        out.append(([ids[i] for i in order if int(i) not in val], [ids[int(i)] for i in f]))
    return out


# -- fit -------------------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_train_loss: float
    lr: float
    val_DSC: float
    val_mIoU: float


def _batch(samples: Sequence[Sample]) -> Tuple[Tensor, np.ndarray]:
    x = np.stack([pad_to_multiple(preprocess_image(s.image))[0] for s in samples])
    y = np.stack([pad_to_multiple(s.mask)[0] for s in samples]).astype(np.int64)
    return Tensor(x), y


def evaluate(model: MiniSeg, samples: Sequence[Sample]) -> Tuple[float, float]:
    """Mean per-slice DSC and mIoU in inference mode."""
    if not samples:
        return float("nan"), float("nan")
    dsc, miou = [], []
    for s in samples:
        x, pad = preprocess(s)
        pred = unpad(binarize_prediction(model.forward(x, mode="infer").data[0]), pad)
        m = metrics.compute_metrics(metrics.confusion(pred, s.mask))
        dsc.append(m["DSC"])
        miou.append(m["mIoU"])
    return float(np.mean(dsc)), float(np.mean(miou))


def fit(
    model: MiniSeg,
    train_samples: Sequence[Sample],
    cfg: TrainConfig,
    val_samples: Sequence[Sample] = (),
    log_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> Tuple[ModelWeights, List[EpochLog]]:
    if not train_samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    head_weights = cfg.head_weights
    log: List[EpochLog] = []
    if log_path is not None:
        log_path = Path(log_path)
        if not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    it = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_samples))
        losses = []
        lr = cfg.initial_lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [augment(train_samples[i], rng, cfg) for i in idx]
            x, y = _batch(batch)
            last_good = ModelWeights.from_model(model)
            model.zero_grad()
            outs = model.forward(x, mode="train")
            loss = deep_supervision_loss(outs, y, head_weights[: len(outs)], cfg.class_weighting)
            if not np.isfinite(loss.item()):
                apply_weights(model, last_good)
                raise NumericError(f"loss became {loss.item()} at epoch {epoch}, step {b}", last_good)
            backward(loss, params)
            lr = poly_lr(it, max_iter, cfg)
            try:
                adam_step(params, state, lr, cfg.weight_decay)
            except NumericError as exc:
                apply_weights(model, last_good)
                exc.last_good = last_good
                raise
            it += 1
            losses.append(loss.item())
        val_dsc, val_miou = evaluate(model, val_samples)
        entry = EpochLog(epoch, float(np.mean(losses)), lr, val_dsc, val_miou)
        log.append(entry)
        logger.info("epoch %d loss %.5f lr %.3g val DSC %.4f", epoch, entry.mean_train_loss, lr, val_dsc)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(entry.mean_train_loss), repr(lr), repr(val_dsc), repr(val_miou)])
        if on_epoch is not None:
            on_epoch(entry)
    return ModelWeights.from_model(model), log
