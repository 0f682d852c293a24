import io

import numpy as np
import pytest

from panelctrl.covariates import (
    CovariatePanel,
    balance_table,
    covariates_from_long,
    joint_augment,
    joint_solve,
    residualize,
    residualized_blocks,
    stacked_blocks,
    standardize_to_outcomes,
    two_step_weights,
)
from panelctrl.errors import ConfigError, SingularityError
from panelctrl.panel import load_panel
from panelctrl.ridge import ControlSVD, augment_weights, verify_penalized_form
from panelctrl.scm import ScmConfig, imbalance, solve_scm

from conftest import make_blocks


def make_cov(rng, n0, k, **kwargs):
    z0 = rng.normal(size=(n0, k))
    z1 = rng.normal(size=k)
    return CovariatePanel.from_raw(z1=z1, z0=z0, **kwargs)


class TestCovariatePanel:
    def test_from_raw_centers(self, rng):
        cov = make_cov(rng, 8, 3)
        assert np.abs(cov.z0.mean(axis=0)).max() < 1e-12

    def test_uncentered_rejected(self, rng):
        z0 = rng.normal(size=(6, 2)) + 5.0
        with pytest.raises(ConfigError):
            CovariatePanel(z1=np.zeros(2), z0=z0)

    def test_default_names(self, rng):
        cov = make_cov(rng, 5, 2)
        assert cov.names == ("z1", "z2")


class TestJointSolve:
    def test_theta_z_zero_matches_plain_scm(self, rng):
        blocks = make_blocks(rng, 6, 4)
        cov = make_cov(rng, 6, 2, theta_z=0.0)
        cfg = ScmConfig(zeta=1e-4)
        w_joint = joint_solve(blocks, cov, cfg)
        w_plain = solve_scm(blocks, cfg)
        assert np.abs(w_joint.values - w_plain.values).max() < 1e-6

    def test_duplicated_x_equals_double_theta(self, rng):
        # stacking a copy of the outcome rows as covariates is the same as
        # doubling the outcome balance weight
        from panelctrl.panel import PanelBlocks

        blocks = make_blocks(rng, 5, 3)
        cov = CovariatePanel(z1=blocks.x1.copy(), z0=blocks.x0.copy(), theta_z=1.0)
        cfg = ScmConfig(zeta=1e-5)
        w_dup = joint_solve(blocks, cov, cfg)
        doubled = PanelBlocks(
            x1=np.sqrt(2.0) * blocks.x1,
            x0=np.sqrt(2.0) * blocks.x0,
            y0_post=blocks.y0_post,
            y1_post=blocks.y1_post,
            centering=np.zeros(blocks.t0),
        )
        w_two = solve_scm(doubled, cfg)
        assert np.abs(w_dup.values - w_two.values).max() < 1e-6

    def test_dominant_theta_z_balances_z(self, rng):
        n0 = 6
        x0 = rng.normal(size=(n0, 4))
        x0 = x0 - x0.mean(axis=0)
        g_true = rng.dirichlet(np.ones(n0))
        z0 = rng.normal(size=(n0, 1))
        z0 = z0 - z0.mean(axis=0)
        cov = CovariatePanel(z1=z0.T @ g_true, z0=z0, theta_z=1e6)
        blocks = make_blocks(rng, n0, 4)
        w = joint_solve(blocks, cov, ScmConfig(zeta=0.0, tol=1e-10))
        z_gap = float(np.abs(cov.z1 - cov.z0.T @ w.values).max())
        assert z_gap < 1e-4


class TestJointAugment:
    def test_k_zero_matches_plain_augment(self, rng):
        blocks = make_blocks(rng, 6, 4)
        cov = CovariatePanel(z1=np.zeros(0), z0=np.zeros((6, 0)))
        w = solve_scm(blocks)
        est = joint_augment(w, blocks, cov, 1.5)
        plain = augment_weights(w, blocks, 1.5)
        assert np.abs(est.weights.values - plain.values).max() < 1e-12

    def test_exact_stacked_fit_no_op(self, rng):
        n0 = 6
        x0 = rng.normal(size=(n0, 3))
        x0 = x0 - x0.mean(axis=0)
        z0 = rng.normal(size=(n0, 2))
        z0 = z0 - z0.mean(axis=0)
        g = rng.dirichlet(np.ones(n0))
        blocks = make_blocks(rng, n0, 3)
        blocks = type(blocks)(
            x1=x0.T @ g, x0=x0, y0_post=blocks.y0_post, y1_post=blocks.y1_post,
            centering=np.zeros(3),
        )
        cov = CovariatePanel(z1=z0.T @ g, z0=z0)
        from panelctrl.scm import DonorWeights

        est = joint_augment(DonorWeights(values=g), blocks, cov, 2.0)
        assert np.abs(est.weights.values - g).max() < 1e-10

    def test_stacked_penalized_form_check(self, rng):
        for _ in range(10):
            n0 = int(rng.integers(5, 12))
            blocks = make_blocks(rng, n0, 4)
            cov = make_cov(rng, n0, 2)
            scaled, _ = standardize_to_outcomes(cov, blocks)
            w = joint_solve(blocks, scaled, ScmConfig())
            lam = float(10 ** rng.uniform(-1, 3))
            est = joint_augment(w, blocks, scaled, lam)
            stacked = stacked_blocks(blocks, scaled, theta=False)
            rep = verify_penalized_form(est.weights, w, stacked, lam)
            assert rep.passed

    def test_scale_consistency(self, rng):
        # multiplying Z by c and rescaling theta_z, lambda_z accordingly
        # leaves the weights unchanged
        n0 = 7
        blocks = make_blocks(rng, n0, 4)
        cov = make_cov(rng, n0, 2)
        c = 3.7
        cov_scaled = CovariatePanel(
            z1=cov.z1 * c, z0=cov.z0 * c, theta_z=cov.theta_z / c**2
        )
        cfg = ScmConfig(zeta=1e-6)
        w1 = joint_solve(blocks, cov, cfg)
        w2 = joint_solve(blocks, cov_scaled, cfg)
        assert np.abs(w1.values - w2.values).max() < 1e-8
        lam = 2.0
        est1 = joint_augment(w1, blocks,
                             CovariatePanel(z1=cov.z1, z0=cov.z0, lambda_x=lam, lambda_z=lam),
                             lam)
        est2 = joint_augment(w1, blocks,
                             CovariatePanel(z1=cov.z1 * c, z0=cov.z0 * c,
                                            lambda_x=lam, lambda_z=lam * c**2),
                             lam)
        assert np.abs(est1.weights.values - est2.weights.values).max() < 1e-8


class TestResidualize:
    def test_orthogonal_z_leaves_x(self, rng):
        n0 = 8
        x0 = rng.normal(size=(n0, 3))
        x0 = x0 - x0.mean(axis=0)
        z0 = rng.normal(size=(n0, 2))
        z0 = z0 - z0.mean(axis=0)
        # orthogonalize z against every x column
        q, _ = np.linalg.qr(x0)
        z0 = z0 - q @ (q.T @ z0)
        z0 = z0 - z0.mean(axis=0)
        blocks = make_blocks(rng, n0, 3)
        blocks = type(blocks)(
            x1=blocks.x1, x0=x0, y0_post=blocks.y0_post, y1_post=blocks.y1_post,
            centering=np.zeros(3),
        )
        cov = CovariatePanel(z1=rng.normal(size=2), z0=z0)
        rp = residualize(blocks, cov)
        assert np.abs(rp.x0_check - x0).max() < 1e-10

    def test_linear_x_gives_zero(self, rng):
        n0 = 8
        z0 = rng.normal(size=(n0, 2))
        z0 = z0 - z0.mean(axis=0)
        coef = rng.normal(size=(2, 4))
        x0 = z0 @ coef
        blocks = make_blocks(rng, n0, 4)
        blocks = type(blocks)(
            x1=blocks.x1, x0=x0, y0_post=blocks.y0_post, y1_post=blocks.y1_post,
            centering=np.zeros(4),
        )
        cov = CovariatePanel(z1=rng.normal(size=2), z0=z0)
        rp = residualize(blocks, cov)
        assert np.abs(rp.x0_check).max() < 1e-10

    def test_orthogonality_invariant(self, rng):
        for _ in range(10):
            blocks = make_blocks(rng, 8, 5)
            cov = make_cov(rng, 8, 2)
            rp = residualize(blocks, cov)
            assert np.abs(cov.z0.T @ rp.x0_check).max() < 1e-8

    def test_idempotent(self, rng):
        blocks = make_blocks(rng, 9, 4)
        cov = make_cov(rng, 9, 3)
        rp1 = residualize(blocks, cov)
        again = type(blocks)(
            x1=rp1.x1_check, x0=rp1.x0_check,
            y0_post=blocks.y0_post, y1_post=blocks.y1_post,
            centering=np.zeros(blocks.t0),
        )
        rp2 = residualize(again, cov)
        assert np.abs(rp2.x0_check - rp1.x0_check).max() < 1e-10
        assert np.abs(rp2.x1_check - rp1.x1_check).max() < 1e-10

    def test_rank_deficient_z_errors(self, rng):
        z0 = rng.normal(size=(8, 1))
        z0 = np.hstack([z0, z0])  # duplicated column
        z0 = z0 - z0.mean(axis=0)
        blocks = make_blocks(rng, 8, 4)
        cov = CovariatePanel(z1=np.zeros(2), z0=z0)
        with pytest.raises(SingularityError):
            residualize(blocks, cov)

    def test_k_too_large_rejected(self, rng):
        blocks = make_blocks(rng, 4, 3)
        cov = make_cov(rng, 4, 4)
        with pytest.raises(ConfigError):
            residualize(blocks, cov)


class TestTwoStepWeights:
    def test_k_zero_reduces_to_augment(self, rng):
        blocks = make_blocks(rng, 6, 4)
        cov = CovariatePanel(z1=np.zeros(0), z0=np.zeros((6, 0)))
        w = solve_scm(blocks)
        tw = two_step_weights(w, blocks, cov, 1.0)
        plain = augment_weights(w, blocks, 1.0)
        assert np.abs(tw.values - plain.values).max() < 1e-12
        assert tw.provenance == "covariate-adjusted"

    def test_exact_z_balance(self, rng):
        for _ in range(20):
            n0 = int(rng.integers(6, 14))
            k = int(rng.integers(1, 4))
            blocks = make_blocks(rng, n0, int(rng.integers(3, 7)))
            cov = make_cov(rng, n0, k)
            w = solve_scm(residualized_blocks(blocks, cov))
            tw = two_step_weights(w, blocks, cov, float(10 ** rng.uniform(-1, 3)))
            assert np.abs(cov.z1 - cov.z0.T @ tw.values).max() <= 1e-8

    def test_imbalance_bound(self, rng):
        for _ in range(20):
            n0 = int(rng.integers(6, 14))
            k = int(rng.integers(1, 4))
            blocks = make_blocks(rng, n0, int(rng.integers(3, 7)))
            cov = make_cov(rng, n0, k)
            resid = residualized_blocks(blocks, cov)
            w = solve_scm(resid)
            lam = float(10 ** rng.uniform(-1, 3))
            tw = two_step_weights(w, blocks, cov, lam)
            lhs = np.linalg.norm(blocks.x1 - blocks.x0.T @ tw.values)
            svd = ControlSVD.compute(resid.x0)
            resid_imb = imbalance(resid, w)
            if svd.full_column_rank:
                factor = lam / (lam + svd.n0 * float(svd.d[-1]) ** 2)
            else:
                factor = 1.0
            assert lhs <= factor * resid_imb + 1e-10


class TestBalanceTable:
    def test_standardized_gaps(self, rng):
        cov = make_cov(rng, 6, 2, names=("wage", "emp"))
        g = rng.dirichlet(np.ones(6))
        rows = balance_table(cov, g)
        assert [r[0] for r in rows] == ["wage", "emp"]
        for k, (_, raw, weighted) in enumerate(rows):
            sd = cov.z0[:, k].std()
            assert np.isclose(raw, abs(cov.z1[k]) / sd)
            assert np.isclose(weighted, abs(cov.z1[k] - cov.z0[:, k] @ g) / sd)


class TestCovariatesFromLong:
    def test_pre_period_means(self):
        rows = ["unit,time,outcome,gdp"]
        for unit, base in (("a", 1.0), ("b", 2.0), ("c", 3.0)):
            for t in range(1, 5):
                rows.append(f"{unit},{t},{base + 0.1 * t},{base * 10 + t}")
        src = io.StringIO("\n".join(rows) + "\n")
        p = load_panel(io.StringIO("\n".join(rows) + "\n"), "a", 3)
        cov = covariates_from_long(src, p, ["gdp"])
        # pre periods are t=1,2: unit means 10+1.5, 20+1.5, 30+1.5
        assert cov.k == 1
        donors_mean = np.array([21.5, 31.5]).mean()
        assert np.isclose(cov.z1[0], 11.5 - donors_mean)
        assert np.abs(cov.z0.mean(axis=0)).max() < 1e-12
