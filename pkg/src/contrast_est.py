"""最小コントラスト推定モジュール（ϑ = (κ, η, θ₂, σ²)）"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import optimize

import sys
sys.path.insert(0, ".")
from config.settings import (
    ALPHA_CLAMP,
    NM_CONVERGED_DIAMETER,
    NM_FATOL,
    NM_LATTICE,
    NM_MAXITER,
    NM_XATOL,
    PSI_TOLERANCE,
    XI_ETA,
    XI_KAPPA,
    XI_SIGMA2,
    XI_THETA2_MAX,
    XI_THETA2_MIN,
)
from src.alpha_qv import IncrementStats
from src.model_core import NoiseFamily
from src.special_psi import PsiCache, PsiCurve

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2)


class ContrastError(Exception):
    """コントラスト推定例外クラス"""
    pass


class DegenerateDesign(ContrastError):
    """Σh² + Σh̃² = 0 で σ² をプロファイルできない"""
    pass


class NoConvergence(ContrastError):
    """Nelder–Mead が収束しなかった（strict 指定時のみ送出）"""

    def __init__(self, message: str, result: "ContrastResult"):
        super().__init__(message)
        self.result = result


def theta2_lower_bound(r: float) -> float:
    """θ₂ の識別可能性の下限 r²/(8 log(1+√2))"""
    return r * r / (8 * math.log(1 + SQRT2))


@dataclass(frozen=True)
class ParamSpaceXi:
    """パラメータ空間 Ξ（κ, η, θ₂, σ² の箱）"""
    kappa: Tuple[float, float] = XI_KAPPA
    eta: Tuple[float, float] = XI_ETA
    theta2: Tuple[float, float] = (XI_THETA2_MIN, XI_THETA2_MAX)
    sigma2: Tuple[float, float] = XI_SIGMA2

    def __post_init__(self):
        for name in ("kappa", "eta", "theta2", "sigma2"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ContrastError(f"Ξ の {name} 区間が空です: [{lo}, {hi}]")
        if self.theta2[0] <= 0 or self.sigma2[0] <= 0:
            raise ContrastError(f"θ₂, σ² の下限は正である必要があります: {self.theta2}, {self.sigma2}")

    @classmethod
    def default_for(cls, r: float, **overrides) -> "ParamSpaceXi":
        """θ₂ の下限を max(r²/(8 log(1+√2)), 1e−3) にした既定の Ξ"""
        theta2 = (max(theta2_lower_bound(r), XI_THETA2_MIN), XI_THETA2_MAX)
        return cls(**{"theta2": theta2, **overrides})

    @property
    def bounds3(self) -> List[Tuple[float, float]]:
        """(κ, η, θ₂) の箱"""
        return [self.kappa, self.eta, self.theta2]

    def contains(self, vartheta) -> bool:
        box = self.bounds3 + [self.sigma2]
        return all(lo <= v <= hi for v, (lo, hi) in zip(vartheta, box))

    def lattice(self, k: int = NM_LATTICE) -> List[np.ndarray]:
        """各軸の (i+1)/(k+1) 分位点による k×k×k の初期点"""
        fractions = (np.arange(k) + 1) / (k + 1)
        axes = [lo + fractions * (hi - lo) for lo, hi in self.bounds3]
        return [np.array(p) for p in itertools.product(*axes)]


@dataclass(frozen=True)
class ContrastResult:
    """最小コントラスト推定の結果"""
    vartheta_hat: Tuple[float, float, float, float]
    objective: float
    converged: bool
    iterations: int
    alpha_used: float
    alpha_clamped: bool
    restarts: list = field(default_factory=list)

    @property
    def kappa(self) -> float:
        return self.vartheta_hat[0]

    @property
    def eta(self) -> float:
        return self.vartheta_hat[1]

    @property
    def theta2(self) -> float:
        return self.vartheta_hat[2]

    @property
    def sigma2(self) -> float:
        return self.vartheta_hat[3]

    @property
    def theta1(self) -> float:
        """θ̂₁ = κ̂θ̂₂"""
        return self.kappa * self.theta2

    @property
    def eta1(self) -> float:
        """η̂₁ = η̂θ̂₂"""
        return self.eta * self.theta2


PsiPair = Callable[[float], Tuple[float, float]]


def _cached_psi_pair(r: float, alpha: float, family: NoiseFamily, cache: Optional[PsiCache]) -> PsiPair:
    cache = cache or PsiCache()
    return lambda theta2: (
        cache.get(r, alpha, theta2, family),
        cache.get(r / SQRT2, alpha, theta2, family),
    )


def _design(stats: IncrementStats, kappa: float, eta: float, psi_r: float, psi_r2: float):
    """h = e^{−κȳ−ηz̄}ψ_r, h̃ = e^{−κȳ−ηz̄}ψ_{r/√2}"""
    tilt = np.outer(np.exp(-kappa * stats.y_mid), np.exp(-eta * stats.z_mid))
    return tilt * psi_r, tilt * psi_r2


def contrast_value(stats: IncrementStats, vartheta, r: float, alpha: float,
                   family: NoiseFamily = NoiseFamily.Q1,
                   cache: Optional[PsiCache] = None, psi_pair: Optional[PsiPair] = None) -> float:
    """
    𝒦(ϑ; α) = (1/m)Σ{V − f_{r,α}}² + (1/m)Σ{Ṽ − f_{r/√2,α}}²（Q2 は f̃）

    Args:
        stats: 同じ α で計算した IncrementStats
        vartheta: (κ, η, θ₂, σ²)
        r: 縦横比
        alpha: α
        family: ノイズ族
    """
    kappa, eta, theta2, sigma2 = vartheta
    psi_pair = psi_pair or _cached_psi_pair(r, alpha, family, cache)
    h, h_tilde = _design(stats, kappa, eta, *psi_pair(theta2))
    return float(
        np.mean((stats.v - sigma2 * h) ** 2) + np.mean((stats.v_tilde - sigma2 * h_tilde) ** 2)
    )


def profile_sigma2(stats: IncrementStats, kappa: float, eta: float, theta2: float, r: float,
                   alpha: float, family: NoiseFamily = NoiseFamily.Q1,
                   xi: Optional[ParamSpaceXi] = None,
                   cache: Optional[PsiCache] = None, psi_pair: Optional[PsiPair] = None) -> float:
    """
    σ²* = (ΣVh + ΣṼh̃)/(Σh² + Σh̃²) を Ξ の σ² 区間にクリップ

    コントラストは σ² の2次式なので (κ, η, θ₂) 固定での最小化は厳密に解ける。
    """
    xi = xi or ParamSpaceXi.default_for(r)
    psi_pair = psi_pair or _cached_psi_pair(r, alpha, family, cache)
    h, h_tilde = _design(stats, kappa, eta, *psi_pair(theta2))
    denom = float(np.sum(h * h) + np.sum(h_tilde * h_tilde))
    if denom <= 0:
        raise DegenerateDesign(f"Σh²+Σh̃² = {denom} のため σ² を決められません")
    numer = float(np.sum(stats.v * h) + np.sum(stats.v_tilde * h_tilde))
    return float(np.clip(numer / denom, *xi.sigma2))


def clamp_alpha(alpha_hat: float) -> Tuple[float, bool]:
    """α̂ を [0.05, 1.95] にクランプし、クランプしたかを返す"""
    if not math.isfinite(alpha_hat):
        raise ContrastError(f"α̂ が有限ではありません: {alpha_hat}")
    lo, hi = ALPHA_CLAMP
    clamped = min(max(alpha_hat, lo), hi)
    return clamped, clamped != alpha_hat


def _initial_simplex(x0: np.ndarray, bounds) -> np.ndarray:
    simplex = [x0]
    for axis, (lo, hi) in enumerate(bounds):
        vertex = x0.copy()
        step = 0.1 * (hi - lo)
        vertex[axis] = x0[axis] + step if x0[axis] + step <= hi else x0[axis] - step
        simplex.append(vertex)
    return np.array(simplex)


def _simplex_diameter(simplex: np.ndarray) -> float:
    """最良点からの最大距離（スケール max(1, |x|) で相対化）"""
    best = simplex[0]
    return float(np.max(np.linalg.norm(simplex - best, axis=1)) / max(1.0, float(np.linalg.norm(best))))


def minimize_contrast(
    stats: IncrementStats,
    xi: Optional[ParamSpaceXi],
    r: float,
    alpha_hat: float,
    family: NoiseFamily = NoiseFamily.Q1,
    lattice: int = NM_LATTICE,
    threads: int = 1,
    tol: float = PSI_TOLERANCE,
    strict: bool = False,
) -> ContrastResult:
    """
    ϑ̂ = argmin_Ξ 𝒦(ϑ; α̂)

    σ² をプロファイルした (κ, η, θ₂) 上の Nelder–Mead（箱制約つき）を
    格子状の初期点から多点スタートし、目的関数が最小の点を返す（同値なら先に見つかった点）。

    Args:
        stats: IncrementStats（α が違えば α̂ に付け替える）
        xi: パラメータ空間（省略時は ParamSpaceXi.default_for(r)）
        r: 縦横比
        alpha_hat: α̂（[0.05, 1.95] にクランプ）
        family: ノイズ族
        lattice: 初期格子の一辺の点数
        threads: 多点スタートの並列数
        tol: ψ 求積の許容誤差
        strict: True なら未収束時に NoConvergence を送出

    Returns:
        ContrastResult
    """
    family = NoiseFamily(family)
    xi = xi or ParamSpaceXi.default_for(r)
    alpha, clamped = clamp_alpha(alpha_hat)
    if clamped:
        logger.warning(f"α̂ = {alpha_hat:.6f} を {alpha:.2f} にクランプしました")
    stats = stats.rescaled(alpha)

    curve_r = PsiCurve(r, alpha, xi.theta2, family, tol)
    curve_r2 = PsiCurve(r / SQRT2, alpha, xi.theta2, family, tol)

    def psi_pair(theta2):
        return curve_r(theta2), curve_r2(theta2)

    bounds = xi.bounds3

    def objective(x):
        x = np.clip(x, [b[0] for b in bounds], [b[1] for b in bounds])
        kappa, eta, theta2 = x
        sigma2 = profile_sigma2(stats, kappa, eta, theta2, r, alpha, family, xi, psi_pair=psi_pair)
        return contrast_value(stats, (kappa, eta, theta2, sigma2), r, alpha, family, psi_pair=psi_pair)

    def run(x0):
        return optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "initial_simplex": _initial_simplex(x0, bounds),
                "xatol": NM_XATOL,
                "fatol": NM_FATOL,
                "maxiter": NM_MAXITER,
                "maxfev": 2 * NM_MAXITER,
            },
        )

    starts = xi.lattice(lattice)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(run, starts))
    else:
        results = [run(x0) for x0 in starts]

    best = None
    for res in results:
        if best is None or res.fun < best.fun:
            best = res

    kappa, eta, theta2 = (float(v) for v in best.x)
    sigma2 = profile_sigma2(stats, kappa, eta, theta2, r, alpha, family, xi, psi_pair=psi_pair)
    converged = _simplex_diameter(best.final_simplex[0]) < NM_CONVERGED_DIAMETER

    result = ContrastResult(
        vartheta_hat=(kappa, eta, theta2, sigma2),
        objective=float(best.fun),
        converged=converged,
        iterations=int(sum(res.nit for res in results)),
        alpha_used=alpha,
        alpha_clamped=clamped,
        restarts=[(tuple(float(v) for v in res.x), float(res.fun)) for res in results],
    )
    logger.debug(
        f"ϑ̂ = (κ={kappa:.6f}, η={eta:.6f}, θ₂={theta2:.6f}, σ²={sigma2:.6f}), "
        f"𝒦={result.objective:.3e}, converged={converged}"
    )
    if not converged:
        logger.warning(f"Nelder–Mead が収束しませんでした (𝒦={result.objective:.3e})")
        if strict:
            raise NoConvergence("Nelder–Mead が収束しませんでした", result)
    return result
