"""Conformal p-values and prediction intervals for the counterfactual.

Full conformal inference enforces a candidate effect tau0, appends the
adjusted post-treatment observation to the pre-period design as one more
column, refits the weights, and ranks the adjusted post residual among
the pre-period residuals. The jackknife+ alternative needs only the T0
leave-one-period-out refits and builds the interval from order statistics
of shifted leave-one-out predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .covariates import (
    joint_augment,
    joint_solve,
    residualized_blocks,
    standardize_to_outcomes,
    two_step_weights,
)
from .errors import ConfigError, GridError
from .estimators import estimate_on_blocks, weights_for_design
from .panel import PanelBlocks, split_and_center
from .scm import solve_scm

logger = logging.getLogger(__name__)

__all__ = [
    "PredictionInterval",
    "conformal_p",
    "conformal_interval",
    "jackknife_plus",
    "convert_target",
]

_WEIGHTING_METHODS = ("scm", "ridge", "ridge_ascm")


@dataclass(frozen=True)
class PredictionInterval:
    """Interval for the counterfactual outcome or the treatment effect.

    ``grid_step`` documents the tau grid spacing for the conformal method;
    ``disconnected`` flags acceptance regions with interior gaps (the hull
    is still reported); ``open_ended`` flags default grids whose endpoints
    were still accepted after adaptive widening.
    """

    lower: float
    upper: float
    level: float
    method: str
    target: str
    grid_step: float = 0.0
    disconnected: bool = False
    open_ended: bool = False

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ConfigError("interval lower bound exceeds upper bound")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must be strictly between 0 and 1")
        if self.method not in ("full-conformal", "jackknife-plus"):
            raise ConfigError(f"unknown interval method {self.method!r}")
        if self.target not in ("counterfactual", "effect"):
            raise ConfigError(f"unknown interval target {self.target!r}")


def convert_target(interval, y1_post_value):
    """Exact switch between effect and counterfactual intervals.

    tau = Y_obs - Y(0), so the two targets are mirror images shifted by
    the observed post outcome.
    """
    new_target = "counterfactual" if interval.target == "effect" else "effect"
    return PredictionInterval(
        lower=y1_post_value - interval.upper,
        upper=y1_post_value - interval.lower,
        level=interval.level,
        method=interval.method,
        target=new_target,
        grid_step=interval.grid_step,
        disconnected=interval.disconnected,
        open_ended=interval.open_ended,
    )


def _augmented_design(blocks, tau0, post_period):
    """Append the tau0-adjusted post observation as one more design column."""
    y0_col = blocks.y0_post[:, post_period]
    shift = float(y0_col.mean())
    y0c = y0_col - shift
    y1_adj = blocks.y1_post[post_period] - tau0 - shift
    x1 = np.concatenate([blocks.x1, [y1_adj]])
    x0 = np.hstack([blocks.x0, y0c[:, None]])
    x0 = x0 - x0.mean(axis=0)
    return PanelBlocks(
        x1=x1,
        x0=x0,
        y0_post=blocks.y0_post,
        y1_post=blocks.y1_post,
        centering=np.zeros(x1.shape[0]),
    )


def _conformal_weights(design, spec, cov):
    if cov is not None and cov.k > 0:
        if spec.method != "ridge_ascm":
            raise ConfigError(
                "covariate-aware conformal inference requires the ridge_ascm method"
            )
        if spec.lam is None:
            raise ConfigError("covariate-aware conformal inference requires a lambda")
        if spec.covariate_mode == "joint":
            scaled, _ = standardize_to_outcomes(cov, design)
            w = joint_solve(design, scaled, spec.scm_config())
            return joint_augment(w, design, scaled, spec.lam).weights
        resid = residualized_blocks(design, cov)
        w = solve_scm(resid, spec.scm_config())
        return two_step_weights(w, design, cov, spec.lam)
    return weights_for_design(design, spec)


def _conformal_p_blocks(blocks, tau0, spec, post_period, cov=None):
    if spec.method not in _WEIGHTING_METHODS:
        raise ConfigError(
            f"conformal inference supports weighting estimators {_WEIGHTING_METHODS}, "
            f"got {spec.method!r}"
        )
    design = _augmented_design(blocks, tau0, post_period)
    w = _conformal_weights(design, spec, cov)
    residuals = design.x1 - design.x0.T @ w.values
    pre = np.abs(residuals[:-1])
    post = abs(residuals[-1])
    t_total = blocks.t0 + 1
    return (int(np.sum(post <= pre)) + 1) / t_total


def conformal_p(p, tau0, spec, post_period=0, cov=None):
    """p-value for the sharp hypothesis that the effect equals tau0.

    The refit includes the adjusted post observation in the fitting panel
    (it joins the design as one more balanced column, entering the
    covariate pipeline when one is configured), so the weights depend on
    tau0. Values live on the grid {1/(T0+1), ..., 1}.
    """
    blocks = split_and_center(p, center=True)
    if not 0 <= post_period < blocks.n_post:
        raise ConfigError(f"post_period {post_period} out of range")
    return _conformal_p_blocks(blocks, tau0, spec, post_period, cov=cov)


def conformal_interval(
    p,
    alpha,
    spec,
    tau_grid=None,
    post_period=0,
    target="effect",
    grid_points=101,
    max_widenings=8,
    cov=None,
):
    """Level 1-alpha interval by inverting the conformal test over a tau grid.

    With no explicit grid, 101 points spanning the point estimate plus or
    minus five pre-period residual RMS are used and widened (doubling the
    half-width) while an endpoint stays accepted. The reported interval is
    the hull of the accepted set; disconnected acceptance is flagged.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must be strictly between 0 and 1")
    blocks = split_and_center(p, center=True)
    if not 0 <= post_period < blocks.n_post:
        raise ConfigError(f"post_period {post_period} out of range")

    def accepted_mask(grid):
        return np.array(
            [
                _conformal_p_blocks(blocks, t0_val, spec, post_period) >= alpha - 1e-12
                for t0_val in grid
            ]
        )

    min_p = 1.0 / (blocks.t0 + 1)
    if tau_grid is not None:
        grid = np.sort(np.asarray(tau_grid, dtype=float))
        mask = accepted_mask(grid)
        open_ended = bool(mask[0] or mask[-1])
    else:
        point = estimate_on_blocks(blocks, spec)
        center = float(point.att[post_period])
        rms = float(np.sqrt(np.mean(point.gap_pre**2)))
        half = 5.0 * max(rms, 1e-12)
        widenings = 0
        while True:
            grid = np.linspace(center - half, center + half, grid_points)
            mask = accepted_mask(grid)
            open_ended = bool(mask[0] or mask[-1])
            if not open_ended or widenings >= max_widenings or alpha <= min_p:
                break
            half *= 2.0
            widenings += 1
        if open_ended and alpha > min_p:
            logger.warning(
                "conformal grid endpoints still accepted after %d widenings", widenings
            )

    if not mask.any():
        raise GridError(
            "no tau value in the grid was accepted; widen the grid or refine its spacing"
        )
    idx = np.nonzero(mask)[0]
    disconnected = bool(np.any(np.diff(idx) > 1))
    lower, upper = float(grid[idx[0]]), float(grid[idx[-1]])
    step = float(grid[1] - grid[0]) if grid.size > 1 else 0.0
    interval = PredictionInterval(
        lower=lower,
        upper=upper,
        level=1.0 - alpha,
        method="full-conformal",
        target="effect",
        grid_step=step,
        disconnected=disconnected,
        open_ended=open_ended,
    )
    if target == "counterfactual":
        interval = convert_target(interval, float(blocks.y1_post[post_period]))
    elif target != "effect":
        raise ConfigError(f"unknown interval target {target!r}")
    return interval


def _order_statistic(values, k):
    """k-th smallest (1-indexed), clamped to the available range."""
    values = np.sort(np.asarray(values, dtype=float))
    k = min(max(int(k), 1), values.shape[0])
    return float(values[k - 1])


def jackknife_plus(p, alpha, spec, post_period=0, target="counterfactual"):
    """Leave-one-period-out prediction interval for the counterfactual.

    For each pre period t the estimator is refit without that period; the
    interval combines the leave-one-out post predictions shifted by the
    absolute held-out residuals through lower/upper order statistics at
    level alpha/2 on each side.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must be strictly between 0 and 1")
    blocks = split_and_center(p, center=True)
    if blocks.t0 < 3:
        raise ConfigError("jackknife+ needs at least 3 pre periods")
    if not 0 <= post_period < blocks.n_post:
        raise ConfigError(f"post_period {post_period} out of range")

    lows, highs = [], []
    for t in range(blocks.t0):
        keep = np.array([s for s in range(blocks.t0) if s != t])
        x0r = blocks.x0[:, keep]
        shift = x0r.mean(axis=0)
        x0r = x0r - shift
        fold = PanelBlocks(
            x1=blocks.x1[keep] - shift,
            x0=x0r,
            y0_post=blocks.y0_post,
            y1_post=blocks.y1_post,
            centering=np.zeros(keep.size),
        )
        est = estimate_on_blocks(fold, spec)
        y_hat_post = float(est.counterfactual[post_period])
        pre_pred = _loo_pre_prediction(fold, blocks, est, spec, t)
        r = abs(float(blocks.x1[t]) - pre_pred)
        lows.append(y_hat_post - r)
        highs.append(y_hat_post + r)

    t_total = blocks.t0 + 1
    k_lo = int(np.floor(alpha / 2.0 * t_total))
    k_hi = int(np.ceil((1.0 - alpha / 2.0) * t_total))
    interval = PredictionInterval(
        lower=_order_statistic(lows, k_lo),
        upper=_order_statistic(highs, k_hi),
        level=1.0 - alpha,
        method="jackknife-plus",
        target="counterfactual",
    )
    if target == "effect":
        interval = convert_target(interval, float(blocks.y1_post[post_period]))
    elif target != "counterfactual":
        raise ConfigError(f"unknown interval target {target!r}")
    return interval


def _loo_pre_prediction(fold, blocks, est, spec, t):
    """Prediction of the held-out pre outcome under the fold's estimator."""
    g = est.weights.values
    if spec.method in ("demeaned", "fixed_effects"):
        x1_raw = fold.x1 + fold.centering
        x0_raw = fold.x0 + fold.centering
        return float(x1_raw.mean() + g @ (blocks.x0[:, t] - x0_raw.mean(axis=1)))
    return float(g @ blocks.x0[:, t])
