"""contrast_est のテスト"""
import math

import numpy as np
import pytest
from scipy import optimize

from src.alpha_qv import IncrementStats
from src.contrast_est import (
    ContrastError,
    ContrastResult,
    DegenerateDesign,
    NoConvergence,
    ParamSpaceXi,
    clamp_alpha,
    contrast_value,
    minimize_contrast,
    profile_sigma2,
    theta2_lower_bound,
)
from src.model_core import NoiseFamily
from src.special_psi import PsiCache

R = 0.3
ALPHA = 0.5
TRUTH = (1.0, 1.0, 0.2, 1.0)
XI = ParamSpaceXi(kappa=(-3.0, 3.0), eta=(-3.0, 3.0), theta2=(0.05, 2.0), sigma2=(1e-4, 10.0))


def model_stats(vartheta=TRUTH, r=R, alpha=ALPHA, m=10, family=NoiseFamily.Q1, cache=None) -> IncrementStats:
    """ϑ で生成した雑音なしの V, Ṽ"""
    cache = cache or PsiCache()
    kappa, eta, theta2, sigma2 = vartheta
    mid = (np.arange(m) + 0.5) / m
    tilt = np.outer(np.exp(-kappa * mid), np.exp(-eta * mid))
    v = sigma2 * tilt * cache.get(r, alpha, theta2, family)
    v_tilde = sigma2 * tilt * cache.get(r / math.sqrt(2), alpha, theta2, family)
    return IncrementStats(
        sum_sq_t=float("nan"), sum_sq_t_tilde=float("nan"),
        m1=m, m2=m, n=100, alpha=alpha, dt=0.01,
        v=v, v_tilde=v_tilde, r=r, y_mid=mid, z_mid=mid,
    )


class TestParamSpace:
    def test_default_theta2_bound(self):
        xi = ParamSpaceXi.default_for(1.0)
        assert xi.theta2[0] == pytest.approx(1 / (8 * math.log(1 + math.sqrt(2))))
        assert theta2_lower_bound(1.0) == pytest.approx(0.14183, abs=1e-5)
        assert ParamSpaceXi.default_for(0.01).theta2[0] == 1e-3

    def test_overrides(self):
        xi = ParamSpaceXi.default_for(1.0, kappa=(0.0, 2.0))
        assert xi.kappa == (0.0, 2.0)

    def test_lattice(self):
        xi = ParamSpaceXi(kappa=(0.0, 4.0), eta=(0.0, 4.0), theta2=(1.0, 5.0))
        points = xi.lattice(3)
        assert len(points) == 27
        assert points[0] == pytest.approx([1.0, 1.0, 2.0])
        assert points[-1] == pytest.approx([3.0, 3.0, 4.0])
        assert xi.lattice(1)[0] == pytest.approx([2.0, 2.0, 3.0])

    def test_contains(self):
        assert XI.contains(TRUTH)
        assert not XI.contains((4.0, 1.0, 0.2, 1.0))

    @pytest.mark.parametrize("kwargs", [
        {"kappa": (1.0, 1.0)},
        {"theta2": (0.0, 1.0)},
        {"sigma2": (-1.0, 1.0)},
    ])
    def test_invalid_box(self, kwargs):
        with pytest.raises(ContrastError):
            ParamSpaceXi(**kwargs)


class TestContrastValue:
    def test_zero_at_truth(self):
        cache = PsiCache()
        stats = model_stats(cache=cache)
        assert contrast_value(stats, TRUTH, R, ALPHA, cache=cache) == pytest.approx(0.0, abs=1e-28)

    def test_zero_at_truth_q2(self):
        cache = PsiCache()
        stats = model_stats(family=NoiseFamily.Q2, cache=cache)
        assert contrast_value(stats, TRUTH, R, ALPHA, NoiseFamily.Q2, cache=cache) == pytest.approx(0.0, abs=1e-28)
        assert contrast_value(stats, TRUTH, R, ALPHA, NoiseFamily.Q1, cache=cache) > 0

    def test_positive_away_from_truth(self):
        cache = PsiCache()
        stats = model_stats(cache=cache)
        assert contrast_value(stats, (1.1, 1.0, 0.2, 1.0), R, ALPHA, cache=cache) > 0
        assert contrast_value(stats, (1.0, 1.0, 0.25, 1.0), R, ALPHA, cache=cache) > 0

    def test_quadratic_in_sigma2(self):
        cache = PsiCache()
        stats = model_stats(cache=cache)

        def k(s):
            return contrast_value(stats, (0.5, 1.5, 0.3, s), R, ALPHA, cache=cache)

        # 2階差分が一定
        values = [k(s) for s in (0.5, 1.0, 1.5, 2.0)]
        second = np.diff(values, 2)
        assert second[0] == pytest.approx(second[1], rel=1e-9)


class TestProfile:
    def test_exact_fit(self):
        cache = PsiCache()
        stats = model_stats(cache=cache)
        assert profile_sigma2(stats, 1.0, 1.0, 0.2, R, ALPHA, xi=XI, cache=cache) == pytest.approx(1.0, rel=1e-12)

    def test_zero_data_clips_to_lower_bound(self):
        stats = model_stats()
        zeros = IncrementStats(
            sum_sq_t=0.0, sum_sq_t_tilde=0.0, m1=stats.m1, m2=stats.m2, n=stats.n, alpha=ALPHA, dt=stats.dt,
            v=np.zeros_like(stats.v), v_tilde=np.zeros_like(stats.v_tilde), r=R,
            y_mid=stats.y_mid, z_mid=stats.z_mid,
        )
        assert profile_sigma2(zeros, 1.0, 1.0, 0.2, R, ALPHA, xi=XI) == XI.sigma2[0]

    def test_degenerate_design(self):
        stats = model_stats()
        with pytest.raises(DegenerateDesign):
            profile_sigma2(stats, 1.0, 1.0, 0.2, R, ALPHA, xi=XI, psi_pair=lambda theta2: (0.0, 0.0))

    def test_profile_matches_scalar_minimization(self):
        cache = PsiCache()
        stats = model_stats(vartheta=(0.7, 1.2, 0.4, 2.0), cache=cache)
        kappa, eta, theta2 = 0.9, 1.0, 0.25
        profiled = profile_sigma2(stats, kappa, eta, theta2, R, ALPHA, xi=XI, cache=cache)
        scalar = optimize.minimize_scalar(
            lambda s: contrast_value(stats, (kappa, eta, theta2, s), R, ALPHA, cache=cache),
            bounds=XI.sigma2, method="bounded", options={"xatol": 1e-12},
        )
        assert profiled == pytest.approx(scalar.x, abs=1e-6)


class TestClampAlpha:
    @pytest.mark.parametrize("alpha_hat, expected, clamped", [
        (0.5, 0.5, False),
        (2.3, 1.95, True),
        (-0.4, 0.05, True),
        (1.95, 1.95, False),
    ])
    def test_clamp(self, alpha_hat, expected, clamped):
        assert clamp_alpha(alpha_hat) == (expected, clamped)

    def test_non_finite(self):
        with pytest.raises(ContrastError):
            clamp_alpha(float("nan"))


class TestMinimizeContrast:
    def test_recovers_truth_from_noise_free_stats(self):
        stats = model_stats()
        result = minimize_contrast(stats, XI, R, ALPHA)
        assert result.vartheta_hat == pytest.approx(TRUTH, abs=1e-6)
        assert result.objective < 1e-16
        assert result.converged
        assert not result.alpha_clamped
        assert len(result.restarts) == 27

    def test_scale_invariance(self):
        stats = model_stats()
        scaled = IncrementStats(
            sum_sq_t=stats.sum_sq_t, sum_sq_t_tilde=stats.sum_sq_t_tilde,
            m1=stats.m1, m2=stats.m2, n=stats.n, alpha=ALPHA, dt=stats.dt,
            v=3.0 * stats.v, v_tilde=3.0 * stats.v_tilde, r=R, y_mid=stats.y_mid, z_mid=stats.z_mid,
        )
        base = minimize_contrast(stats, XI, R, ALPHA, lattice=2)
        result = minimize_contrast(scaled, XI, R, ALPHA, lattice=2)
        assert result.vartheta_hat[:3] == pytest.approx(base.vartheta_hat[:3], abs=1e-6)
        assert result.sigma2 == pytest.approx(3.0 * base.sigma2, rel=1e-6)

    def test_threads_do_not_change_result(self):
        stats = model_stats()
        single = minimize_contrast(stats, XI, R, ALPHA, lattice=2, threads=1)
        multi = minimize_contrast(stats, XI, R, ALPHA, lattice=2, threads=4)
        assert single.vartheta_hat == multi.vartheta_hat
        assert single.restarts == multi.restarts

    def test_clamped_alpha_reported(self):
        stats = model_stats(alpha=1.95)
        result = minimize_contrast(stats, XI, R, 2.3, lattice=1)
        assert result.alpha_used == 1.95
        assert result.alpha_clamped

    def test_strict_raises_when_not_converged(self, monkeypatch):
        monkeypatch.setattr("src.contrast_est.NM_MAXITER", 2)
        with pytest.raises(NoConvergence) as excinfo:
            minimize_contrast(model_stats(), XI, R, ALPHA, lattice=1, strict=True)
        assert not excinfo.value.result.converged

    def test_result_identities(self):
        result = ContrastResult(
            vartheta_hat=(1.5, -0.5, 0.4, 2.0), objective=0.0, converged=True,
            iterations=1, alpha_used=0.5, alpha_clamped=False,
        )
        assert result.theta1 == pytest.approx(0.6)
        assert result.eta1 == pytest.approx(-0.2)
        assert result.sigma2 == 2.0
