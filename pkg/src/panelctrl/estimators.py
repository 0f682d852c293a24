"""Estimator configuration and dispatch.

A single :class:`EstimatorSpec` names one of the supported counterfactual
estimators and its hyper-parameters; :func:`estimate` runs it on a panel,
and the lower-level :func:`weights_for_design` produces the donor weights
for an arbitrary design matrix, which is what the cross-validation,
placebo, and conformal refits need.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .covariates import (
    joint_augment,
    joint_solve,
    residualized_blocks,
    standardize_to_outcomes,
    two_step_weights,
)
from .errors import ConfigError
from .panel import PanelBlocks, split_and_center
from .ridge import (
    AugEstimate,
    UnitMeanModel,
    augment_weights,
    augment_with_model,
    ridge_weights,
)
from .scm import DonorWeights, ScmConfig, solve_scm

logger = logging.getLogger(__name__)

__all__ = ["EstimatorSpec", "estimate", "weights_for_design", "demean_rows"]

_METHODS = ("scm", "ridge", "ridge_ascm", "demeaned", "fixed_effects")


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator to run and with what hyper-parameters.

    ``method`` is one of:

    - ``scm``: simplex-weighted synthetic control.
    - ``ridge``: ridge regression alone (uniform-anchored weights).
    - ``ridge_ascm``: ridge-augmented synthetic control.
    - ``demeaned``: SCM on unit-demeaned outcomes combined with the
      unit-mean outcome model (weighted difference-in-differences).
    - ``fixed_effects``: the same outcome model with uniform weights
      (plain difference-in-differences against the donor average).

    ``lam`` is the ridge penalty on the public scale; required for the two
    ridge methods. ``covariate_mode`` selects how covariates enter when a
    covariate panel is supplied ("joint" or "residualize").
    """

    method: str = "ridge_ascm"
    lam: float | None = None
    zeta: float | None = None
    max_iter: int = 20_000
    tol: float = 1e-9
    covariate_mode: str = "joint"

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ConfigError(f"unknown estimator method {self.method!r}")
        if self.covariate_mode not in ("joint", "residualize"):
            raise ConfigError(f"unknown covariate mode {self.covariate_mode!r}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be nonnegative")

    def scm_config(self):
        return ScmConfig(zeta=self.zeta, max_iter=self.max_iter, tol=self.tol)

    def needs_lambda(self):
        return self.method in ("ridge", "ridge_ascm")

    def with_lambda(self, lam):
        return replace(self, lam=float(lam))


def demean_rows(blocks):
    """Blocks with each unit's pre-period mean removed from its pre outcomes.

    Used to fit SCM weights for the de-meaned estimator, which balances
    residual outcomes rather than levels.
    """
    x1_raw = blocks.x1 + blocks.centering
    x0_raw = blocks.x0 + blocks.centering
    x1 = x1_raw - x1_raw.mean()
    x0 = x0_raw - x0_raw.mean(axis=1)[:, None]
    return PanelBlocks(
        x1=x1,
        x0=x0,
        y0_post=blocks.y0_post,
        y1_post=blocks.y1_post,
        centering=np.zeros(blocks.t0),
    )


def weights_for_design(blocks, spec, scm_w=None):
    """Donor weights for the configured method on an arbitrary (centered) design.

    For the two ridge methods ``lam`` must be set on the spec. ``scm_w``
    short-circuits the SCM solve when the caller already has the weights.
    """
    cfg = spec.scm_config()
    if spec.method == "scm":
        return scm_w if scm_w is not None else solve_scm(blocks, cfg)
    if spec.method == "ridge":
        _require_lam(spec)
        return ridge_weights(blocks, spec.lam)
    if spec.method == "ridge_ascm":
        _require_lam(spec)
        base = scm_w if scm_w is not None else solve_scm(blocks, cfg)
        return augment_weights(base, blocks, spec.lam)
    if spec.method == "demeaned":
        demeaned = demean_rows(blocks)
        return scm_w if scm_w is not None else solve_scm(demeaned, cfg)
    if spec.method == "fixed_effects":
        n0 = blocks.n_donors
        return DonorWeights(values=np.full(n0, 1.0 / n0), provenance="scm")
    raise ConfigError(f"unknown estimator method {spec.method!r}")


def _require_lam(spec):
    if spec.lam is None:
        raise ConfigError(f"method {spec.method!r} requires a lambda value")


def _weighting_estimate(blocks, weights):
    counterfactual = weights.values @ blocks.y0_post
    return AugEstimate(
        counterfactual=counterfactual,
        att=blocks.y1_post - counterfactual,
        gap_pre=blocks.x1 - blocks.x0.T @ weights.values,
        weights=weights,
    )


def estimate(p, spec, cov=None):
    """Run the configured estimator on a panel; returns an AugEstimate.

    When ``cov`` (a CovariatePanel) is given, the covariates enter per
    ``spec.covariate_mode``: jointly stacked with standardized scales, or
    via two-step residualization. Covariates are only supported for the
    ridge-augmented method.
    """
    blocks = split_and_center(p, center=True)
    return estimate_on_blocks(blocks, spec, cov=cov)


def estimate_on_blocks(blocks, spec, cov=None):
    """Like :func:`estimate` but starting from already-built blocks."""
    cfg = spec.scm_config()
    if cov is not None and cov.k > 0:
        if spec.method != "ridge_ascm":
            raise ConfigError(
                f"covariates are only supported with ridge_ascm (got {spec.method!r})"
            )
        _require_lam(spec)
        if spec.covariate_mode == "joint":
            scaled, _ = standardize_to_outcomes(cov, blocks)
            w = joint_solve(blocks, scaled, cfg)
            return joint_augment(w, blocks, scaled, spec.lam)
        resid = residualized_blocks(blocks, cov)
        w = solve_scm(resid, cfg)
        weights = two_step_weights(w, blocks, cov, spec.lam)
        counterfactual = weights.values @ blocks.y0_post
        return AugEstimate(
            counterfactual=counterfactual,
            att=blocks.y1_post - counterfactual,
            gap_pre=blocks.x1 - blocks.x0.T @ weights.values,
            weights=weights,
        )

    if spec.method in ("scm", "ridge", "ridge_ascm"):
        return _weighting_estimate(blocks, weights_for_design(blocks, spec))
    if spec.method in ("demeaned", "fixed_effects"):
        w = weights_for_design(blocks, spec)
        return augment_with_model(w, UnitMeanModel(), blocks)
    raise ConfigError(f"unknown estimator method {spec.method!r}")
