"""Active-learning orchestration: pool bookkeeping, retraining, selection."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .contrastive import KeyQueuePair, contrastive_scores
from .model import DualModel, ModelConfig, save_checkpoint
from .numcore import no_grad
from .select import (
    FeatureMatrix,
    SelectionResult,
    coreset_select,
    entropy_select,
    high_contrastive_select,
    random_select,
)
from .trainer import TrainConfig, select_unlabelled_training_subset, train_multi_stage, train_stage

log = logging.getLogger(__name__)

SELECTORS = ("coreset", "entropy", "random", "high_contrastive")
SUBSET_MODES = ("lowest_loss", "random")


class PoolError(ValueError):
    pass


class LabelAccessError(RuntimeError):
    pass


class LabelGuard:
    """Ground-truth labels that are only readable once annotated.

    Every read is logged; a read touching an unannotated id is recorded in
    ``violations`` and, in strict mode, refused.
    """

    def __init__(self, labels, strict: bool = True):
        self._labels = np.asarray(labels)
        self._revealed = np.zeros(len(self._labels), dtype=bool)
        self.strict = strict
        self.reads = 0
        self.violations: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._labels)

    def reveal(self, ids) -> None:
        self._revealed[np.asarray(ids, dtype=np.int64)] = True

    def is_revealed(self, ids) -> np.ndarray:
        return self._revealed[np.asarray(ids, dtype=np.int64)]

    def __getitem__(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        hidden = ids[~self._revealed[ids]]
        self.reads += ids.size
        if hidden.size:
            self.violations.append(hidden.copy())
            if self.strict:
                raise LabelAccessError(f"read of {hidden.size} unannotated label(s)")
        return self._labels[ids].copy()

    @property
    def unlabelled_reads(self) -> int:
        return int(sum(v.size for v in self.violations))


@dataclass
class PoolState:
    """Partition of the training ids into labelled and unlabelled sets."""

    labelled: np.ndarray
    unlabelled: np.ndarray
    cycle: int = 0

    @classmethod
    def initial(cls, n_total: int, initial_labelled: int, seed: int) -> "PoolState":
        if not 0 < initial_labelled <= n_total:
            raise PoolError(f"initial labelled size {initial_labelled} outside (0, {n_total}]")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, 71]))
        chosen = np.sort(rng.choice(n_total, size=initial_labelled, replace=False))
        rest = np.setdiff1d(np.arange(n_total), chosen)
        return cls(chosen.astype(np.int64), rest.astype(np.int64))

    @property
    def size(self) -> int:
        return len(self.labelled) + len(self.unlabelled)

    def check(self) -> None:
        lab, unl = self.labelled, self.unlabelled
        if len(np.unique(lab)) != len(lab) or len(np.unique(unl)) != len(unl):
            raise PoolError("duplicate ids in pool")
        if np.intersect1d(lab, unl).size:
            raise PoolError("labelled and unlabelled sets overlap")
        if not np.array_equal(np.union1d(lab, unl), np.arange(self.size)):
            raise PoolError("pool does not cover every training id")

    def annotate(self, ids) -> None:
        """Move ``ids`` from the unlabelled to the labelled set."""
        ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise PoolError("selection contains duplicate ids")
        if not np.all(np.isin(ids, self.unlabelled)):
            raise PoolError("selection contains ids outside the unlabelled pool")
        self.labelled = np.sort(np.concatenate([self.labelled, ids]))
        self.unlabelled = np.setdiff1d(self.unlabelled, ids)
        self.cycle += 1


@dataclass(frozen=True)
class ALConfig:
    initial_labelled: int = 200
    budget: int = 100
    cycles: int = 3
    selector: str = "coreset"
    unlabelled_subset_mode: str = "lowest_loss"
    trials: tuple = (0, 1, 2, 3, 4)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40, batch_size=64, queue_size=256))
    # narrower early blocks than ModelConfig's default keep a 5-seed desk run
    # inside its time budget; d_f stays 64
    model: ModelConfig = field(default_factory=lambda: ModelConfig(widths=(8, 32, 64)))
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(int(t) for t in self.trials))
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}")
        if self.unlabelled_subset_mode not in SUBSET_MODES:
            raise ValueError(f"unlabelled_subset_mode must be one of {SUBSET_MODES}")
        if self.initial_labelled < 2:
            raise ValueError("initial_labelled must be at least 2")
        if self.budget < 0 or self.cycles < 0:
            raise ValueError("budget and cycles must be non-negative")
        if not self.trials:
            raise ValueError("at least one trial seed is required")
        if len(set(self.trials)) != len(self.trials):
            raise ValueError("trial seeds must be distinct")

    def check_pool(self, n_train: int) -> None:
        need = self.initial_labelled + self.cycles * self.budget
        if need > n_train:
            raise PoolError(f"initial {self.initial_labelled} + {self.cycles} x {self.budget} exceeds pool of {n_train}")


@dataclass
class CycleMetrics:
    trial: int
    cycle: int
    labelled: int
    accuracy: float
    per_class: tuple
    classification_loss: float
    contrastive_loss: float
    seconds: float
    selected: tuple = ()


@dataclass
class TrialResult:
    seed: int
    metrics: list
    pools: list
    guard: LabelGuard


def _derive(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def predict(model: DualModel, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode query features and class probabilities, no augmentation."""
    feats, probs = [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            f, _ = model.query_forward(images[s : s + batch_size], train=False)
            logits = model.classify(f).data.astype(np.float64)
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            feats.append(f.data)
            probs.append(z / z.sum(axis=1, keepdims=True))
    return np.concatenate(feats), np.concatenate(probs)


def evaluate(model: DualModel, images: np.ndarray, labels, num_classes: int,
             batch_size: int = 256) -> tuple[float, np.ndarray]:
    """Overall accuracy and per-class accuracy (nan for absent classes)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    _, probs = predict(model, images, batch_size)
    return accuracy_report(probs.argmax(axis=1), labels, num_classes)


def accuracy_report(pred, labels, num_classes: int) -> tuple[float, np.ndarray]:
    pred, labels = np.asarray(pred), np.asarray(labels)
    correct = pred == labels
    counts = np.bincount(labels, minlength=num_classes)
    hits = np.bincount(labels, weights=correct, minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return float(correct.mean()), per_class


def aggregate_trials(trials: list) -> list[dict]:
    """Per-cycle mean and population std of overall accuracy across trials."""
    if not trials:
        raise ValueError("need at least one trial")
    by_cycle: dict[int, list] = {}
    for rows in trials:
        for r in rows:
            by_cycle.setdefault(r.cycle, []).append(r)
    out = []
    for cycle in sorted(by_cycle):
        acc = np.sort([r.accuracy for r in by_cycle[cycle]])
        out.append({
            "cycle": cycle,
            "labelled": by_cycle[cycle][0].labelled,
            "mean": float(acc.mean()),
            "std": float(acc.std()),
            "median": float(np.median(acc)),
            "trials": len(acc),
        })
    return out


def select_batch(model: DualModel, queues: KeyQueuePair, images: np.ndarray, pool: PoolState,
                 cfg: ALConfig, seed: int) -> SelectionResult:
    """Run the configured acquisition function over the unlabelled pool."""
    b, unl = cfg.budget, pool.unlabelled
    if cfg.selector == "random":
        return random_select(unl, b, seed)
    if cfg.selector == "high_contrastive":
        t = cfg.train
        scores = contrastive_scores(model, queues, images[unl], unl, seed, t.temperature,
                                    t.include_positive, t.augment, t.use_strong_aug)
        return high_contrastive_select(scores, b, unl)
    feats_u, probs_u = predict(model, images[unl], cfg.eval_batch_size)
    if cfg.selector == "entropy":
        return entropy_select(probs_u, b, unl)
    feats_l, _ = predict(model, images[pool.labelled], cfg.eval_batch_size)
    return coreset_select(FeatureMatrix(pool.labelled, feats_l), FeatureMatrix(unl, feats_u), b)


def train_cycle(x_train: np.ndarray, pool: PoolState, labelled_labels, cfg: ALConfig, model_cfg: ModelConfig,
                seed: int, cycle: int, prev_model: Optional[DualModel] = None,
                prev_queues: Optional[KeyQueuePair] = None):
    """Pick this cycle's unlabelled training subset, then (re)initialize and
    train. Returns (model, StageReport)."""
    cycle_seed = _derive(seed, 3, cycle)
    tcfg = replace(cfg.train, seed=cycle_seed)
    lab, unl = pool.labelled, pool.unlabelled
    size = min(len(lab), len(unl))
    # the lowest-loss filter scores the pool with the previous cycle's model
    scorer = prev_model if cfg.unlabelled_subset_mode == "lowest_loss" else None
    sub = select_unlabelled_training_subset(scorer, prev_queues, unl, x_train[unl],
                                            size, cfg.unlabelled_subset_mode, cycle_seed, tcfg)
    model = prev_model
    if model is None or cfg.train.reinit_each_cycle:
        model = DualModel(model_cfg, seed=_derive(seed, 5, cycle))
    if cfg.train.mode == "joint":
        return train_stage(model, x_train[lab], labelled_labels, x_train[sub], tcfg, lab, sub)
    both = np.sort(np.concatenate([lab, sub]))
    return train_multi_stage(model, x_train[both], x_train[lab], labelled_labels, tcfg, both, lab)


def run_trial(dataset, cfg: ALConfig, seed: int, on_cycle: Optional[Callable] = None,
              checkpoint_dir=None) -> TrialResult:
    """One seeded active-learning run: N+1 training stages, N selections.

    With ``checkpoint_dir`` set, the model trained in each cycle is saved as
    ``trial<seed>_cycle<c>.ckpt``.
    """
    x_train = dataset.train_images
    cfg.check_pool(len(x_train))
    guard = LabelGuard(dataset.train_labels)
    pool = PoolState.initial(len(x_train), cfg.initial_labelled, seed)
    guard.reveal(pool.labelled)
    mcfg = replace(cfg.model, in_channels=x_train.shape[1], num_classes=dataset.num_classes)
    metrics, pools = [], []
    model = queues = None

    for cycle in range(cfg.cycles + 1):
        t0 = time.perf_counter()
        pool.check()
        pools.append(PoolState(pool.labelled.copy(), pool.unlabelled.copy(), pool.cycle))
        lab = pool.labelled
        model, report = train_cycle(x_train, pool, guard[lab], cfg, mcfg, seed, cycle, model, queues)
        queues = report.queues
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"trial{seed}_cycle{cycle}.ckpt")

        acc, per_class = evaluate(model, dataset.test_images, dataset.test_labels,
                                  dataset.num_classes, cfg.eval_batch_size)
        last = report.epochs[-1]
        chosen = ()
        if cycle < cfg.cycles:
            result = select_batch(model, queues, x_train, pool, cfg, _derive(seed, 7, cycle))
            chosen = tuple(int(i) for i in result.ids)
            pool.annotate(result.ids)
            guard.reveal(result.ids)
        row = CycleMetrics(
            trial=seed,
            cycle=cycle,
            labelled=len(lab),
            accuracy=acc,
            per_class=tuple(float(a) for a in per_class),
            classification_loss=float(last.classification_loss),
            contrastive_loss=_final_contrastive(report.epochs),
            seconds=time.perf_counter() - t0,
            selected=chosen,
        )
        metrics.append(row)
        log.info("trial %d cycle %d: |S_L|=%d acc=%.4f (%.1fs)", seed, cycle, row.labelled, acc, row.seconds)
        if on_cycle is not None:
            on_cycle(row, pool, model)
    pool.check()
    return TrialResult(seed, metrics, pools, guard)


def _final_contrastive(epochs) -> float:
    """Last recorded contrastive loss (unlabelled batches, else labelled)."""
    for rec in reversed(epochs):
        for v in (rec.contrastive_unlabelled, rec.contrastive_labelled):
            if np.isfinite(v):
                return float(v)
    return float("nan")


def _trial_job(args):
    dataset, cfg, seed, checkpoint_dir = args
    return run_trial(dataset, cfg, seed, checkpoint_dir=checkpoint_dir)


def run_active_learning(dataset, cfg: ALConfig, workers: int = 1, checkpoint_dir=None) -> list[TrialResult]:
    """All trials of ``cfg``; results are ordered by the trial list regardless of ``workers``."""
    cfg.check_pool(len(dataset.train_images))
    jobs = [(dataset, cfg, s, checkpoint_dir) for s in cfg.trials]
    if workers <= 1 or len(jobs) == 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_trial_job, jobs))
