""" Two-phase training: multi-label pre-training on the proxy set, then severity fine-tuning. """
from dataclasses import dataclass, field, replace
import math
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
from loguru import logger as log

from hybridca.core.autodiff import Graph, Tensor, backward
from hybridca.core.entity_model import Dataset
from hybridca.core.errors import ContractError, DimensionError, ParameterError
from hybridca.nn.model import Checkpoint, ModelSpec, forward_with, init
from hybridca.training.losses import bce_multilabel, smooth_l1
from hybridca.training.optimizers import AdamWState, SGDState, Weights, adamw_step, sgd_step

LossFn = Callable[[Tensor, Tensor], Tensor]
""" (target, prediction) -> scalar """


@dataclass(frozen=True)
class PretrainConfig:
    optimizer: Literal["adamw"] = "adamw"
    lr: float = 1e-6
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    val_fraction: float = 0.2
    """ Patient-grouped share of the proxy set held out for the per-class AUC table """

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError(f"Invalid epochs={self.epochs} batch_size={self.batch_size}")
        if not 0 <= self.val_fraction < 1:
            raise ParameterError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class FinetuneConfig:
    optimizer: Literal["sgd"] = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 3e-5
    epochs: int = 400
    lr_decay: float = 0.98
    lr_decay_every: int = 2
    dropout: float = 0.1
    loss_beta: float = 1.0
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ParameterError(
                f"Invalid epochs={self.epochs} batch_size={self.batch_size} lr_decay_every={self.lr_decay_every}"
            )
        if not 0 < self.lr_decay <= 1:
            raise ParameterError(f"lr_decay must be in (0, 1], got {self.lr_decay}")


@dataclass
class LossTrace:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    """ NaN for epochs without a validation set """

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": range(len(self.train_loss)),
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
            }
        )

    def write_csv(self, path: Path) -> Path:
        self.to_frame().to_csv(path, index=False)
        return path


def mean_trace(traces: list[LossTrace]) -> pd.DataFrame:
    """Epoch-wise mean over several traces of equal length (e.g. CV folds)."""
    frames = [trace.to_frame() for trace in traces]
    return pd.concat(frames).groupby("epoch", as_index=False).mean()


def lr_at(epoch: int, cfg: FinetuneConfig) -> float:
    """lr0 * decay ** floor(epoch / every)"""
    if epoch < 0:
        raise ParameterError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


#########################################################################
# LOOP
#########################################################################


def _check_geometry(spec: ModelSpec, dataset: Dataset):
    expected = (spec.backbone.in_channels, *spec.backbone.image_size)
    if len(dataset) and dataset.geometry != expected:
        raise DimensionError(f"Dataset geometry {dataset.geometry} does not match model input {expected}")


def _batched_loss(
    spec: ModelSpec, weights: Weights, images: np.ndarray, targets: np.ndarray, loss_fn: LossFn, batch_size: int
) -> float:
    params = {name: Tensor(value) for name, value in weights.items()}
    total = 0.0
    for start in range(0, len(images), batch_size):
        pred = forward_with(spec, params, Tensor(images[start : start + batch_size]))
        total += loss_fn(Tensor(targets[start : start + batch_size]), pred).item() * len(pred.data)
    return total / len(images)


def _fit(
    ckpt: Checkpoint,
    images: np.ndarray,
    targets: np.ndarray,
    loss_fn: LossFn,
    step_fn: Callable[[Weights, Weights, object, float], tuple[Weights, object]],
    state: object,
    epochs: int,
    batch_size: int,
    seed: int,
    lr_schedule: Callable[[int], float],
    dropout_rate: float,
    val: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[Weights, LossTrace]:
    spec = ckpt.spec
    weights = {name: value.copy() for name, value in ckpt.weights.items()}
    shuffle_rng = np.random.default_rng([seed, 0])
    dropout_rng = np.random.default_rng([seed, 1])
    trace = LossTrace()
    n = len(images)

    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        lr = lr_schedule(epoch)
        running = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            graph = Graph()
            params = {name: graph.leaf(value) for name, value in weights.items()}
            pred = forward_with(
                spec, params, Tensor(images[idx]), rng=dropout_rng, train_mode=True, dropout_rate=dropout_rate
            )
            loss = loss_fn(Tensor(targets[idx]), pred)
            grads = backward(loss)
            weights, state = step_fn(
                weights, {name: grads.wrt(leaf) for name, leaf in params.items()}, state, lr
            )
            running += loss.item() * len(idx)
            log.trace(f"epoch {epoch} batch {start // batch_size}: loss {loss.item():.6f}")
        trace.train_loss.append(running / n)
        val_loss = math.nan
        if val is not None and len(val[0]):
            val_loss = _batched_loss(spec, weights, val[0], val[1], loss_fn, batch_size)
        trace.val_loss.append(val_loss)
        log.debug(f"epoch {epoch}: lr {lr:.3e} train_loss {trace.train_loss[-1]:.6f} val_loss {val_loss:.6f}")
    if epochs:
        log.info(
            f"Finished {epochs} epochs: train_loss {trace.train_loss[0]:.6f} -> {trace.train_loss[-1]:.6f}"
        )
    return weights, trace


#########################################################################
# PHASES
#########################################################################


def pretrain(
    spec: ModelSpec,
    proxy: Dataset,
    cfg: PretrainConfig,
    val: Optional[Dataset] = None,
) -> tuple[Checkpoint, LossTrace]:
    """Multi-label pre-training with AdamW and binary cross-entropy.

    Starts from ``init(spec, cfg.seed)``; returns the checkpoint tagged ``pretrained``
    and the per-epoch loss trace (validation losses when ``val`` is given).
    """
    if spec.head_kind != "pretrain_15":
        raise ContractError(f"Pre-training needs a pretrain_15 head, got {spec.head_kind}")
    if proxy.kind != "proxy" or (val is not None and val.kind != "proxy"):
        raise ContractError("Pre-training needs proxy datasets")
    if not len(proxy):
        raise ContractError("Pre-training needs at least one proxy sample")
    _check_geometry(spec, proxy)
    log.info(f"Pre-training {spec.attention_kind} model on {len(proxy)} proxy samples for {cfg.epochs} epochs")

    def step(weights, grads, state, lr):
        return adamw_step(weights, grads, state, lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)

    start = init(spec, cfg.seed)
    weights, trace = _fit(
        start,
        proxy.images(),
        proxy.labels(),
        loss_fn=lambda target, pred: bce_multilabel(pred, target),
        step_fn=step,
        state=AdamWState(),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        lr_schedule=lambda epoch: cfg.lr,
        dropout_rate=spec.dropout,
        val=(val.images(), val.labels()) if val is not None and len(val) else None,
    )
    return Checkpoint(spec=spec, weights=weights, seed=cfg.seed, phase="pretrained"), trace


def finetune(
    ckpt: Checkpoint,
    target: Dataset,
    cfg: FinetuneConfig,
    val: Optional[Dataset] = None,
) -> tuple[Checkpoint, LossTrace]:
    """Severity fine-tuning with SGD, the step decay of ``lr_at`` and smooth L1.

    Targets are fitted in range-normalised units (see ``Dataset.normalized_labels``).
    """
    if ckpt.spec.head_kind != "severity_2":
        raise ContractError(
            f"Fine-tuning needs a checkpoint transplanted to severity_2, got {ckpt.spec.head_kind}"
        )
    if target.kind != "target" or (val is not None and val.kind != "target"):
        raise ContractError("Fine-tuning needs target datasets")
    if not len(target):
        raise ContractError("Fine-tuning needs at least one target sample")
    _check_geometry(ckpt.spec, target)
    log.info(f"Fine-tuning {ckpt.spec.attention_kind} model on {len(target)} samples for {cfg.epochs} epochs")

    def step(weights, grads, state, lr):
        return sgd_step(weights, grads, state, lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    weights, trace = _fit(
        ckpt,
        target.images(),
        target.normalized_labels(),
        loss_fn=lambda y, pred: smooth_l1(y, pred, cfg.loss_beta),
        step_fn=step,
        state=SGDState(),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        lr_schedule=lambda epoch: lr_at(epoch, cfg),
        dropout_rate=cfg.dropout,
        val=(val.images(), val.normalized_labels()) if val is not None and len(val) else None,
    )
    return replace(ckpt, weights=weights, phase="finetuned"), trace


def predict(ckpt: Checkpoint, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode outputs for [N, c, h, w] images, stacked to [N, n_out]."""
    params = ckpt.constants()
    outputs = [
        forward_with(ckpt.spec, params, Tensor(images[start : start + batch_size])).numpy()
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(outputs) if outputs else np.empty((0, ckpt.spec.n_outputs))


def predict_scores(ckpt: Checkpoint, dataset: Dataset) -> np.ndarray:
    """Severity predictions in score units."""
    return dataset.denormalize(predict(ckpt, dataset.images()))
