"""Three-stage hyperparameter tuning protocol over a pluggable evaluator.

Stage 1 fixes dp = 0 and grid-searches (lr, wd) on the base model, expanding
the grid while the best point sits on its hull. Stage 2 selects dp for the
base model from {0.0, 0.1, 0.2, 0.3}. Stage 3 reuses the stage-1 lr/wd and
selects dp for the large model. Evaluators return a quality score to
maximize; loss-based evaluators must negate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .tensor import InvalidInputError

DEFAULT_CENTER = (1.6e-4, 0.1)
DP_CANDIDATES = (0.0, 0.1, 0.2, 0.3)


@dataclass
class GridResult:
    scores: dict[tuple[float, float], float]
    best: tuple[float, float]
    boundary: bool
    expansions: list[str] = field(default_factory=list)

    @property
    def best_score(self) -> float:
        return self.scores[self.best]


class AuditLog:
    """Append-only evaluation record; serializable to JSON and resumable."""

    def __init__(self, entries=None):
        self.entries = list(entries or [])
        self._cache = {(e["stage"], tuple(e["point"]) if isinstance(e["point"], list) else e["point"]): e["score"]
                       for e in self.entries}

    def lookup(self, stage, point):
        return self._cache.get((stage, tuple(point) if isinstance(point, (list, tuple)) else point))

    def record(self, stage, point, score):
        entry = {"stage": stage, "point": list(point) if isinstance(point, tuple) else point,
                 "score": score, "timestamp": time.time()}
        self.entries.append(entry)
        self._cache[(stage, tuple(point) if isinstance(point, (list, tuple)) else point)] = score

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.entries, f, indent=2)

    @staticmethod
    def load(path) -> "AuditLog":
        with open(path) as f:
            return AuditLog(json.load(f))


def grid_around(center_lr: float, center_wd: float):
    """3x3 grid: halved and doubled values around the center, per axis."""
    if center_lr <= 0 or center_wd <= 0:
        raise InvalidInputError("grid center values must be positive")
    lrs = [center_lr / 2, center_lr, center_lr * 2]
    wds = [center_wd / 2, center_wd, center_wd * 2]
    return [(lr, wd) for lr in lrs for wd in wds]


def search_lr_wd(evaluator, center=DEFAULT_CENTER, max_expansions: int = 3,
                 log: AuditLog | None = None, stage: str = "lr_wd") -> GridResult:
    """Evaluate the 3x3 grid, expanding any axis whose extreme wins.

    Each expansion adds one doubling/halving step on the violating side only
    and evaluates only the new points. Points are memoized by exact value, so
    nothing is re-evaluated. Ties break to the first point in (lr, wd) order.
    """
    log = log if log is not None else AuditLog()
    lrs = sorted({center[0] / 2, center[0], center[0] * 2})
    wds = sorted({center[1] / 2, center[1], center[1] * 2})
    scores: dict[tuple[float, float], float] = {}
    expansions: list[str] = []

    def ensure(points):
        for p in points:
            if p in scores:
                continue
            cached = log.lookup(stage, p)
            if cached is None:
                cached = float(evaluator(*p))
                log.record(stage, p, cached)
            scores[p] = cached

    ensure([(lr, wd) for lr in lrs for wd in wds])
    while True:
        best = max(scores, key=lambda p: (scores[p], (-p[0], -p[1])))
        on_lo_lr = best[0] == lrs[0]
        on_hi_lr = best[0] == lrs[-1]
        on_lo_wd = best[1] == wds[0]
        on_hi_wd = best[1] == wds[-1]
        boundary = on_lo_lr or on_hi_lr or on_lo_wd or on_hi_wd
        if not boundary or len(expansions) >= max_expansions:
            return GridResult(scores, best, boundary, expansions)
        if on_lo_lr:
            lrs.insert(0, lrs[0] / 2)
            expansions.append("lr-down")
            ensure([(lrs[0], wd) for wd in wds])
        elif on_hi_lr:
            lrs.append(lrs[-1] * 2)
            expansions.append("lr-up")
            ensure([(lrs[-1], wd) for wd in wds])
        elif on_lo_wd:
            wds.insert(0, wds[0] / 2)
            expansions.append("wd-down")
            ensure([(lr, wds[0]) for lr in lrs])
        else:
            wds.append(wds[-1] * 2)
            expansions.append("wd-up")
            ensure([(lr, wds[-1]) for lr in lrs])


def select_dp(evaluator, candidates=DP_CANDIDATES, log: AuditLog | None = None,
              stage: str = "dp") -> float:
    """Argmax of the evaluator over the dp candidates; ties take the smaller dp."""
    if not candidates:
        raise InvalidInputError("dp candidate list is empty")
    log = log if log is not None else AuditLog()
    best_dp, best_score = None, None
    for dp in sorted(candidates):
        score = log.lookup(stage, dp)
        if score is None:
            score = float(evaluator(dp))
            log.record(stage, dp, score)
        if best_score is None or score > best_score:
            best_dp, best_score = dp, score
    return best_dp


@dataclass
class ProtocolResult:
    base_formula: dict
    large_formula: dict
    grid: GridResult
    log: AuditLog


def run_protocol(lr_wd_evaluator, base_dp_evaluator, large_dp_evaluator,
                 center=DEFAULT_CENTER, max_expansions: int = 3,
                 log: AuditLog | None = None) -> ProtocolResult:
    """Run the three tuning stages; stage 3 reuses stage-1 lr/wd verbatim."""
    log = log if log is not None else AuditLog()
    grid = search_lr_wd(lr_wd_evaluator, center, max_expansions, log, stage="1-lr-wd")
    lr, wd = grid.best
    dp_base = select_dp(base_dp_evaluator, log=log, stage="2-dp-base")
    dp_large = select_dp(large_dp_evaluator, log=log, stage="3-dp-large")
    return ProtocolResult(
        base_formula={"lr": lr, "wd": wd, "dp": dp_base},
        large_formula={"lr": lr, "wd": wd, "dp": dp_large},
        grid=grid,
        log=log,
    )


def synthetic_quadratic(optimum=DEFAULT_CENTER):
    """Log-space quadratic response surface with a planted optimum."""
    import math

    lr0, wd0 = optimum

    def evaluator(lr, wd):
        return -((math.log(lr) - math.log(lr0)) ** 2 + (math.log(wd) - math.log(wd0)) ** 2)

    return evaluator
