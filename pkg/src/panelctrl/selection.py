"""Penalty selection by leave-one-out cross-validation and in-time placebos.

The cross-validation criterion holds out one pre-treatment period at a
time, refits the SCM weights and the ridge augmentation on the remaining
periods, and scores the held-out treated outcome against the weighted
donor outcomes. The "leave-future" variant drops all periods at or after
the held-out one instead, turning every fold into a forecast.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TreatmentTimeError
from .panel import PanelBlocks, PanelData
from .ridge import ControlSVD
from .scm import ScmConfig, solve_scm

logger = logging.getLogger(__name__)

__all__ = ["CvResult", "loo_cv", "select_lambda", "in_time_placebo", "default_lambda_grid"]

_MIN_FOLD_PERIODS = 2


@dataclass(frozen=True)
class CvResult:
    """Cross-validation curve over a descending penalty grid.

    ``cv_mse`` is the mean held-out squared residual per penalty value and
    ``cv_se`` its standard error over folds; ``lambda_1se`` is the largest
    penalty whose score is within one standard error of the minimum.
    """

    lambda_grid: np.ndarray
    cv_mse: np.ndarray
    cv_se: np.ndarray
    lambda_min: float
    lambda_1se: float
    mode: str
    skipped: tuple

    def __post_init__(self):
        for name in ("lambda_grid", "cv_mse", "cv_se"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "skipped", tuple(self.skipped))
        if np.any(self.cv_mse < 0):
            raise ConfigError("cv_mse must be nonnegative")
        if self.lambda_1se < self.lambda_min:
            raise ConfigError("lambda_1se must not be below lambda_min")

    def rows(self):
        return [
            (float(lam), float(m), float(s))
            for lam, m, s in zip(self.lambda_grid, self.cv_mse, self.cv_se)
        ]


def default_lambda_grid(blocks, size=20):
    """Log-spaced penalty grid bracketing the design's leading curvature.

    Spans 1e-3 s to 1e3 s with s the squared top singular value of the
    scaled control block, descending.
    """
    svd = ControlSVD.compute(blocks.x0 - blocks.x0.mean(axis=0))
    if svd.rank == 0:
        raise ConfigError("control block is identically zero; no sensible grid")
    s = float(svd.d[0] ** 2)
    return np.logspace(np.log10(1e3 * s), np.log10(1e-3 * s), size)


def _fold_indices(t0, mode):
    if mode == "leave-one":
        for t in range(t0):
            keep = np.array([s for s in range(t0) if s != t])
            yield t, keep
    elif mode == "leave-future":
        for t in range(t0):
            keep = np.arange(t)
            yield t, keep
    else:
        raise ConfigError(f"unknown cv mode {mode!r}")


def loo_cv(blocks, lambda_grid=None, mode="leave-one", cfg=None):
    """Cross-validated MSE of the ridge-augmented estimator over penalties.

    For each held-out period t the SCM weights are refit from scratch on
    the remaining pre periods (they do not depend on the penalty), the
    augmentation is applied for every grid value, and the held-out treated
    outcome is predicted as the weighted donor outcome at t. Folds with
    fewer than two remaining periods are skipped and recorded.
    """
    if blocks.t0 < 3:
        raise ConfigError("cross-validation needs at least 3 pre periods")
    cfg = cfg or ScmConfig()
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(blocks)
    grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    if grid.size == 0 or np.any(grid <= 0):
        raise ConfigError("lambda grid must be nonempty and positive")

    sq_residuals = {li: [] for li in range(grid.size)}
    skipped = []
    for t, keep in _fold_indices(blocks.t0, mode):
        if keep.size < _MIN_FOLD_PERIODS:
            skipped.append(t)
            logger.warning("cv fold %d skipped: only %d periods remain", t, keep.size)
            continue
        x0r = blocks.x0[:, keep]
        shift = x0r.mean(axis=0)
        x0r = x0r - shift
        x1r = blocks.x1[keep] - shift
        fold = PanelBlocks(
            x1=x1r,
            x0=x0r,
            y0_post=blocks.y0_post,
            y1_post=blocks.y1_post,
            centering=np.zeros(keep.size),
        )
        w = solve_scm(fold, cfg)
        svd = ControlSVD.compute(x0r)
        gap = x1r - x0r.T @ w.values
        target = float(blocks.x1[t])
        donors_at_t = blocks.x0[:, t]
        for li, lam in enumerate(grid):
            adj = x0r @ svd.gram_inverse_apply(gap, lam)
            pred = float((w.values + adj) @ donors_at_t)
            sq_residuals[li].append((target - pred) ** 2)

    n_used = blocks.t0 - len(skipped)
    if n_used == 0:
        raise ConfigError("all cross-validation folds were skipped")
    cv_mse = np.array([np.mean(sq_residuals[li]) for li in range(grid.size)])
    cv_se = np.array(
        [
            np.std(sq_residuals[li], ddof=1) / np.sqrt(len(sq_residuals[li]))
            if len(sq_residuals[li]) > 1
            else 0.0
            for li in range(grid.size)
        ]
    )
    best = int(np.argmin(cv_mse))
    threshold = cv_mse[best] + cv_se[best]
    within = np.nonzero(cv_mse <= threshold)[0]
    lambda_1se = float(grid[within[0]])  # grid is descending: first hit is largest
    return CvResult(
        lambda_grid=grid,
        cv_mse=cv_mse,
        cv_se=cv_se,
        lambda_min=float(grid[best]),
        lambda_1se=lambda_1se,
        mode=mode,
        skipped=skipped,
    )


def select_lambda(cv, rule="min"):
    """Pick a penalty from a CV curve by the given rule."""
    if rule == "min":
        return cv.lambda_min
    if rule == "one-se":
        return cv.lambda_1se
    raise ConfigError(f"unknown selection rule {rule!r}")


def in_time_placebo(p, placebo_time, spec, cov=None):
    """Re-run the estimator pretending treatment happened at an earlier time.

    The panel is truncated at the true treatment time (post periods are
    discarded), the pre-period count is re-designated at ``placebo_time``,
    and the full estimator runs on the shortened panel; post-placebo
    "effects" are the placebo gaps.
    """
    from .estimators import estimate  # local import to avoid a cycle

    from .panel import parse_time_label

    keys = [parse_time_label(v) for v in p.time_ids]
    placebo_key = parse_time_label(placebo_time)
    if isinstance(keys[0], str) != isinstance(placebo_key, str):
        placebo_key = str(placebo_time)
    new_t0 = sum(1 for k in keys[: p.t0] if k < placebo_key)
    if new_t0 >= p.t0:
        raise TreatmentTimeError(
            f"placebo time {placebo_time!r} is not strictly before the true treatment time"
        )
    if new_t0 < 3:
        raise TreatmentTimeError(
            f"placebo time {placebo_time!r} leaves only {new_t0} pre period(s); need at least 3"
        )
    truncated = PanelData(
        outcomes=p.outcomes[:, : p.t0],
        unit_ids=p.unit_ids,
        time_ids=p.time_ids[: p.t0],
        treated_index=p.treated_index,
        t0=new_t0,
    )
    return estimate(truncated, spec, cov=cov)
