"""Joint contrastive + classification training, and the multi-stage alternative."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .augment import AugmentConfig, augment_batch
from .contrastive import KeyQueuePair, combined_loss, contrastive_pair_loss, contrastive_scores
from .model import DualModel, ema_update, momentum_at
from .numcore import SgdState, StepLrSchedule, lr_at, no_grad, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

# augmentation stream tags, part of every per-image seed
LABELLED, UNLABELLED, PRETRAIN = 0, 1, 2


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.01
    lr_milestones: tuple = (0.6, 0.8)
    lr_decay: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    temperature: float = 0.2
    contrastive_scale: float = 0.5
    queue_size: int = 256
    include_positive: bool = True
    momentum_start: float = 0.99
    momentum_end: float = 1.0
    use_strong_aug: bool = True
    mode: str = "joint"
    pretrain_epochs: Optional[int] = None
    finetune_epochs: Optional[int] = None
    reinit_each_cycle: bool = True
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.mode not in ("joint", "multi_stage"):
            raise ValueError("mode must be 'joint' or 'multi_stage'")
        if self.temperature <= 0 or self.contrastive_scale < 0:
            raise ValueError("temperature must be positive and contrastive_scale non-negative")
        if not 0 <= self.momentum_start <= self.momentum_end <= 1:
            raise ValueError("need 0 <= momentum_start <= momentum_end <= 1")

    @property
    def schedule(self) -> StepLrSchedule:
        return StepLrSchedule(self.learning_rate, tuple(self.lr_milestones), self.lr_decay)


@dataclass
class EpochRecord:
    epoch: int
    classification_loss: float
    contrastive_labelled: float
    contrastive_unlabelled: float
    learning_rate: float
    momentum: float
    stage: str = "joint"


@dataclass
class StageReport:
    epochs: list = field(default_factory=list)
    queues: Optional[KeyQueuePair] = None
    checkpoint: Optional[str] = None
    keys_enqueued: int = 0


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing batch smaller than 2 is dropped."""
    out = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if out and out[-1].stop - out[-1].start < 2:
        out.pop()
    return out


def _shuffle(seed: int, stream: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, stream, epoch])).permutation(n)


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"{what} became {value} at epoch {epoch}, step {step}; aborting stage")


class _Stepper:
    """One inference on a batch: losses, backward, optimizer, EMA, queue update."""

    def __init__(self, model: DualModel, cfg: TrainConfig, queues: KeyQueuePair, total_steps: int):
        self.model = model
        self.cfg = cfg
        self.queues = queues
        self.total_steps = max(total_steps, 1)
        self.step = 0
        self.opt = SgdState(cfg.learning_rate, cfg.sgd_momentum, cfg.weight_decay)
        self.params = model.parameters()
        self.momentum = cfg.momentum_start
        self.keys_enqueued = 0

    def _views(self, x, ids, keys):
        cfg = self.cfg
        weak = augment_batch(x, ids, cfg.seed, keys, strong=False, cfg=cfg.augment)
        if cfg.use_strong_aug:
            strong = augment_batch(x, ids, cfg.seed, keys, strong=True, cfg=cfg.augment)
        else:
            strong = augment_batch(x, ids, cfg.seed, keys + (1,), strong=False, cfg=cfg.augment)
        return weak, strong

    def run(self, x, ids, keys, labels=None, contrastive_weight=None) -> tuple[float, float]:
        """Returns (classification loss or nan, contrastive loss)."""
        cfg, model = self.cfg, self.model
        lam = cfg.contrastive_scale if contrastive_weight is None else contrastive_weight
        weak, strong = self._views(x, ids, keys)

        feats, q = model.query_forward(weak)
        if lam > 0:
            _, qs = model.query_forward(strong)
        else:
            # value only; keeps query batchnorm statistics identical to the
            # classification-only path
            with no_grad():
                _, qs = model.query_forward(strong, track=False)
        k = model.key_forward(weak)
        ks = model.key_forward(strong)
        con = contrastive_pair_loss(q, qs, k, ks, self.queues, cfg.temperature, cfg.include_positive)

        cls_value = float("nan")
        if labels is not None:
            cls = softmax_cross_entropy(model.classify(feats), labels)
            cls_value = float(cls.data)
            loss = combined_loss(cls, con, lam) if lam > 0 else cls
        else:
            loss = con * lam if lam > 0 else None

        if loss is not None:
            _check_finite(float(loss.data), "loss", keys[0], self.step)
            loss.backward()
            sgd_step([p for p in self.params if p.grad is not None], self.opt)
            for p in self.params:
                p.grad = None

        self.momentum = momentum_at(min(self.step, self.total_steps), self.total_steps,
                                    cfg.momentum_start, cfg.momentum_end)
        ema_update(model, self.momentum)
        self.queues.enqueue(k, ks)
        self.keys_enqueued += 2 * k.shape[0]
        self.step += 1
        return cls_value, float(con.data)


def _mean(values) -> float:
    return float(np.mean(values)) if values else float("nan")


def train_stage(
    model: DualModel,
    labelled_images: np.ndarray,
    labelled_labels,
    unlabelled_images: Optional[np.ndarray],
    cfg: TrainConfig,
    labelled_ids=None,
    unlabelled_ids=None,
    queues: Optional[KeyQueuePair] = None,
) -> tuple[DualModel, StageReport]:
    """Alternate labelled and unlabelled batches for ``cfg.epochs`` epochs.

    An epoch is one pass over the labelled set; the unlabelled subset is
    reshuffled every epoch and cycled to give one unlabelled batch after each
    labelled one. ``model`` is trained in place and returned.
    """
    n_l = len(labelled_images)
    if n_l == 0:
        raise TrainingError("labelled set is empty")
    if n_l < 2:
        raise TrainingError("labelled set needs at least 2 samples for batchnorm")
    if unlabelled_images is None:
        unlabelled_images = labelled_images[:0]
    n_u = len(unlabelled_images)
    l_ids = np.arange(n_l) if labelled_ids is None else np.asarray(labelled_ids)
    u_ids = np.arange(n_u) if unlabelled_ids is None else np.asarray(unlabelled_ids)
    labels = np.asarray(labelled_labels)

    if queues is None:
        queues = KeyQueuePair.create(cfg.queue_size, model.config.proj_dim, np.dtype(model.config.dtype))
    lab_batches = batch_slices(n_l, cfg.batch_size)
    use_unlabelled = n_u >= 2
    per_epoch = len(lab_batches) * (2 if use_unlabelled else 1)
    stepper = _Stepper(model, cfg, queues, cfg.epochs * per_epoch)
    report = StageReport(queues=queues)

    for epoch in range(cfg.epochs):
        stepper.opt.learning_rate = lr_at(cfg.schedule, epoch, cfg.epochs)
        perm_l = _shuffle(cfg.seed, LABELLED, epoch, n_l)
        perm_u = _shuffle(cfg.seed, UNLABELLED, epoch, n_u) if use_unlabelled else None
        cls_losses, con_l, con_u = [], [], []
        for b, sl in enumerate(lab_batches):
            idx = perm_l[sl]
            c, k = stepper.run(labelled_images[idx], l_ids[idx], (epoch, b, LABELLED), labels=labels[idx])
            cls_losses.append(c)
            con_l.append(k)
            if use_unlabelled:
                size = min(sl.stop - sl.start, n_u)
                uidx = perm_u[(b * cfg.batch_size + np.arange(size)) % n_u]
                _, k = stepper.run(unlabelled_images[uidx], u_ids[uidx], (epoch, b, UNLABELLED))
                con_u.append(k)
        rec = EpochRecord(epoch, _mean(cls_losses), _mean(con_l), _mean(con_u),
                          stepper.opt.learning_rate, stepper.momentum)
        report.epochs.append(rec)
        log.debug("epoch %d: %s", epoch, rec)
    report.keys_enqueued = stepper.keys_enqueued
    return model, report


def train_multi_stage(
    model: DualModel,
    all_images: np.ndarray,
    labelled_images: np.ndarray,
    labelled_labels,
    cfg: TrainConfig,
    all_ids=None,
    labelled_ids=None,
    queues: Optional[KeyQueuePair] = None,
) -> tuple[DualModel, StageReport]:
    """Contrastive pretraining on ``all_images`` (labels untouched), then
    cross-entropy fine-tuning of the query encoder and classifier."""
    n_l = len(labelled_images)
    if n_l < 2:
        raise TrainingError("labelled set needs at least 2 samples")
    pre_epochs = cfg.epochs if cfg.pretrain_epochs is None else cfg.pretrain_epochs
    fine_epochs = max(cfg.epochs // 2, 1) if cfg.finetune_epochs is None else cfg.finetune_epochs
    n_a = len(all_images)
    a_ids = np.arange(n_a) if all_ids is None else np.asarray(all_ids)
    l_ids = np.arange(n_l) if labelled_ids is None else np.asarray(labelled_ids)
    if queues is None:
        queues = KeyQueuePair.create(cfg.queue_size, model.config.proj_dim, np.dtype(model.config.dtype))
    report = StageReport(queues=queues)

    batches = batch_slices(n_a, cfg.batch_size)
    stepper = _Stepper(model, cfg, queues, pre_epochs * len(batches))
    for epoch in range(pre_epochs):
        stepper.opt.learning_rate = lr_at(cfg.schedule, epoch, pre_epochs)
        perm = _shuffle(cfg.seed, PRETRAIN, epoch, n_a)
        con = []
        for b, sl in enumerate(batches):
            idx = perm[sl]
            _, k = stepper.run(all_images[idx], a_ids[idx], (epoch, b, PRETRAIN), contrastive_weight=1.0)
            con.append(k)
        report.epochs.append(EpochRecord(epoch, float("nan"), float("nan"), _mean(con),
                                         stepper.opt.learning_rate, stepper.momentum, stage="pretrain"))
    report.keys_enqueued = stepper.keys_enqueued

    if fine_epochs > 0:
        opt = SgdState(cfg.learning_rate, cfg.sgd_momentum, cfg.weight_decay)
        params = model.encoder_classifier_parameters()
        lab_batches = batch_slices(n_l, cfg.batch_size)
        for epoch in range(fine_epochs):
            opt.learning_rate = lr_at(cfg.schedule, epoch, fine_epochs)
            perm = _shuffle(cfg.seed, LABELLED, epoch, n_l)
            losses = []
            for b, sl in enumerate(lab_batches):
                idx = perm[sl]
                x = augment_batch(labelled_images[idx], l_ids[idx], cfg.seed, (epoch, b, LABELLED),
                                  strong=False, cfg=cfg.augment)
                feats, _ = model.query_forward(x)
                loss = softmax_cross_entropy(model.classify(feats), np.asarray(labelled_labels[idx]))
                _check_finite(float(loss.data), "loss", epoch, b)
                loss.backward()
                sgd_step([p for p in params if p.grad is not None], opt)
                for p in model.parameters():
                    p.grad = None
                losses.append(float(loss.data))
            report.epochs.append(EpochRecord(epoch, _mean(losses), float("nan"), float("nan"),
                                             opt.learning_rate, float("nan"), stage="finetune"))
    return model, report


def select_unlabelled_training_subset(
    model: Optional[DualModel],
    queues: Optional[KeyQueuePair],
    pool_ids,
    pool_images: np.ndarray,
    size: int,
    mode: str,
    seed: int,
    cfg: Optional[TrainConfig] = None,
) -> np.ndarray:
    """Pick the unlabelled images that join training this cycle.

    ``lowest_loss`` keeps the ``size`` pool members with the smallest
    contrastive score (ties by ascending id) and falls back to a uniform
    draw when no trained model is available yet.
    """
    pool_ids = np.asarray(pool_ids)
    if size > len(pool_ids):
        raise ValueError(f"requested {size} unlabelled samples from a pool of {len(pool_ids)}")
    if mode not in ("lowest_loss", "random"):
        raise ValueError("mode must be 'lowest_loss' or 'random'")
    if size == len(pool_ids):
        return np.sort(pool_ids)
    if mode == "random" or model is None or queues is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
        return np.sort(rng.choice(pool_ids, size=size, replace=False))
    cfg = cfg or TrainConfig()
    scores = contrastive_scores(model, queues, pool_images, pool_ids, seed, cfg.temperature,
                                cfg.include_positive, cfg.augment, cfg.use_strong_aug)
    return lowest_scores(scores, pool_ids, size)


def lowest_scores(scores, ids, size: int) -> np.ndarray:
    """The ``size`` ids with the smallest scores, ties by ascending id."""
    ids = np.asarray(ids)
    order = np.lexsort((ids, np.asarray(scores)))
    return ids[order[:size]]
