"""Acquisition functions.

All selectors break ties by ascending dataset id, so results do not depend
on the order candidates are passed in.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np


class SelectionError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    ids: np.ndarray
    rows: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows[:, None]
        if len(self.ids) != len(self.rows):
            raise SelectionError("one feature row per id is required")
        if not np.all(np.isfinite(self.rows)):
            raise SelectionError("feature rows must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    def sorted(self) -> "FeatureMatrix":
        order = np.argsort(self.ids, kind="stable")
        return FeatureMatrix(self.ids[order], self.rows[order])


@dataclass
class SelectionResult:
    ids: np.ndarray
    scores: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self) -> int:
        return len(self.ids)


def _check_budget(b: int, pool: int) -> None:
    if b < 0:
        raise SelectionError("budget must be non-negative")
    if b > pool:
        raise SelectionError(f"budget {b} exceeds pool size {pool}")


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def _min_dist_to(points: np.ndarray, centers: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = np.full(len(points), np.inf)
    for s in range(0, len(centers), chunk):
        out = np.minimum(out, _pairwise(points, centers[s : s + chunk]).min(axis=1))
    return out


def coreset_select(labelled: FeatureMatrix, unlabelled: FeatureMatrix, b: int) -> SelectionResult:
    """k-Center greedy: repeatedly take the candidate farthest from all centers.

    Centers start as the labelled features. With no labelled features the first
    pick is the candidate minimizing its maximum distance to the others.
    """
    _check_budget(b, len(unlabelled))
    cand = unlabelled.sorted()
    x = cand.rows
    chosen, trace = [], []
    if len(labelled):
        min_d = _min_dist_to(x, labelled.rows)
    else:
        min_d = None
    taken = np.zeros(len(x), dtype=bool)
    for _ in range(b):
        if min_d is None:
            ecc = _pairwise(x, x).max(axis=1)
            pick = int(np.argmin(ecc))
            trace.append(float(ecc[pick]))
            min_d = _pairwise(x, x[pick : pick + 1])[:, 0]
        else:
            masked = np.where(taken, -np.inf, min_d)
            pick = int(np.argmax(masked))  # first maximum = smallest id
            trace.append(float(min_d[pick]))
            min_d = np.minimum(min_d, _pairwise(x, x[pick : pick + 1])[:, 0])
        taken[pick] = True
        chosen.append(int(cand.ids[pick]))
    return SelectionResult(np.array(chosen, dtype=np.int64), np.array(trace))


def covering_radius(points: np.ndarray, centers: np.ndarray) -> float:
    """Largest distance from a point to its nearest center."""
    points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    if len(points) == 0:
        return 0.0
    centers = np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)
    if len(centers) == 0:
        return math.inf
    return float(_min_dist_to(points, centers).max())


def brute_force_kcenter(points, existing_centers, b: int, limit: int = 10**6) -> tuple[float, tuple]:
    """Exhaustive k-center: the size-``b`` subset of ``points`` that, together
    with ``existing_centers``, minimizes the covering radius of ``points``.

    Returns (radius, index tuple); the first minimal subset in lexicographic
    order wins ties.
    """
    pts = np.asarray(points, dtype=np.float64)
    pts = pts.reshape(len(pts), -1)
    existing = np.asarray(existing_centers, dtype=np.float64).reshape(-1, pts.shape[1])
    n = len(pts)
    _check_budget(b, n)
    if math.comb(n, b) > limit:
        raise SelectionError(f"C({n}, {b}) subsets exceed the search limit {limit}")
    d = _pairwise(pts, pts)
    base = _min_dist_to(pts, existing) if len(existing) else np.full(n, np.inf)
    best_r, best = math.inf, ()
    for subset in itertools.combinations(range(n), b):
        r = np.minimum(base, d[:, list(subset)].min(axis=1)).max() if subset else base.max()
        if r < best_r:
            best_r, best = float(r), subset
    return best_r, best


def entropy_select(class_probs, b: int, ids=None) -> SelectionResult:
    """Top-``b`` candidates by Shannon entropy (natural log)."""
    p = np.asarray(class_probs, dtype=np.float64)
    ids = np.arange(len(p)) if ids is None else np.asarray(ids, dtype=np.int64)
    _check_budget(b, len(p))
    if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise SelectionError("each row must be a probability distribution")
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return _top(ent, ids, b)


def _top(scores: np.ndarray, ids: np.ndarray, b: int) -> SelectionResult:
    order = np.lexsort((ids, -scores))[:b]
    return SelectionResult(ids[order], scores[order])


def high_contrastive_select(scores, b: int, ids=None) -> SelectionResult:
    s = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(s)) if ids is None else np.asarray(ids, dtype=np.int64)
    _check_budget(b, len(s))
    if not np.all(np.isfinite(s)):
        raise SelectionError("scores must be finite")
    return _top(s, ids, b)


def random_select(pool_ids, b: int, seed: int) -> SelectionResult:
    pool = np.sort(np.asarray(pool_ids, dtype=np.int64))
    _check_budget(b, len(pool))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 15485863]))
    return SelectionResult(rng.choice(pool, size=b, replace=False))
