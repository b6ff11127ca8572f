"""近似座標過程とプラグイン推定モジュール（θ₀ / μ₀, θ₁, η₁, θ₂, σ²）"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

import sys
sys.path.insert(0, ".")
from config.settings import ALPHA_FRAGILE
from src.model_core import PI_SQ, ModelParams, NoiseFamily, derive_spectrum

logger = logging.getLogger(__name__)

DEFAULT_MODES = ((1, 1), (1, 2))


class CoordEstError(Exception):
    """座標推定例外クラス"""
    pass


class NonPositiveQV(CoordEstError):
    """実現二次変動がゼロ以下"""
    pass


class InvertedModeOrder(CoordEstError):
    """ς̄₁₂^{−2/α̂} ≤ ς̄₁₁^{−2/α̂}（二次変動が不安定）"""
    pass


class NonUniformGrid(CoordEstError):
    """近似座標には一様グリッドが必要"""
    pass


@dataclass(frozen=True)
class CoordEstimates:
    """座標過程からのプラグイン推定値"""
    family: NoiseFamily
    qv: Dict[Tuple[int, int], float]
    implied: Dict[Tuple[int, int], float]
    theta1: float
    eta1: float
    theta2: float
    sigma2: float
    theta0: Optional[float] = None
    mu0: Optional[float] = None
    rate: Dict[str, float] = field(default_factory=dict)
    fragile: bool = False

    def as_dict(self) -> dict:
        return {
            "theta0": self.theta0,
            "mu0": self.mu0,
            "theta1": self.theta1,
            "eta1": self.eta1,
            "theta2": self.theta2,
            "sigma2": self.sigma2,
        }


def g_fun(l: int, x, a: float):
    """
    g_l(x:a) = √2 e^{ax/2}/((a/2)²+(πl)²)·((a/2) sin(πlx) − πl cos(πlx))

    d/dx g_l(x:a) = √2 sin(πlx) e^{ax/2}
    """
    if l < 1:
        raise CoordEstError(f"l は1以上が必要です: {l}")
    x = np.asarray(x, dtype=float)
    half = a / 2
    pl = math.pi * l
    return math.sqrt(2) * np.exp(half * x) / (half ** 2 + pl ** 2) * (half * np.sin(pl * x) - pl * np.cos(pl * x))


def cell_weights(l: int, a: float, nodes: np.ndarray) -> np.ndarray:
    """δ_j g_l = g_l(x_j:a) − g_l(x_{j−1}:a), j=1..M"""
    return np.diff(g_fun(l, nodes, a))


def thinned_time_index(n_time: int, n: Optional[int]) -> np.ndarray:
    """観測時刻 0..N から n+1 点を等間隔に選ぶ添字"""
    if n is None:
        return np.arange(n_time + 1)
    if n < 1 or n_time % n != 0:
        raise CoordEstError(f"n={n} は N={n_time} を割り切る必要があります")
    return np.arange(n + 1) * (n_time // n)


def approx_coordinate(record, l1: int, l2: int, kappa_hat: float, eta_hat: float,
                      times: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    x̂_{l1,l2}(t) = Σ_{j,k} X_t(y_{j−1}, z_{k−1}) δ_j g_{l1}(κ̂) δ_k g_{l2}(η̂)

    Args:
        record: 一様グリッド上の FieldRecord
        l1, l2: モード
        kappa_hat, eta_hat: 曲率パラメータの推定値
        times: 時間添字（省略時は全時刻）

    Returns:
        各時刻の x̂
    """
    grid = record.grid
    if not grid.is_uniform:
        raise NonUniformGrid(f"近似座標には一様グリッドが必要です (margin={grid.margin})")
    wy = cell_weights(l1, kappa_hat, grid.y_nodes())
    wz = cell_weights(l2, eta_hat, grid.z_nodes())
    idx = np.arange(grid.n_time + 1) if times is None else np.asarray(times)
    return np.einsum("j,tjk,k->t", wy, record.values[idx, :-1, :-1], wz)


def coord_qv(path) -> float:
    """σ̃² = Σ_i (x̂(t_i) − x̂(t_{i−1}))²"""
    return float(np.sum(np.diff(np.asarray(path, dtype=float)) ** 2))


def tilde_power(base: float, a: float, b: float) -> float:
    """
    L^{a ∧̃ b}: a<b なら L^a、a>b なら L^b、a=b なら L^b/log L（L > 1）
    """
    if not base > 1:
        raise CoordEstError(f"底は1より大きい必要があります: {base}")
    if a < b:
        return base ** a
    if a > b:
        return base ** b
    return base ** b / math.log(base)


def rate_diagnostics(n: int, m_min: int, alpha_hat: float) -> Dict[str, float]:
    """n/(M1∧M2)^{2(α̂∧̃1)}（一致性）と n²/(M1∧M2)^{2(α̂∧̃1)}（CLT）"""
    denom = tilde_power(m_min ** 2, alpha_hat, 1.0)
    return {"rate_consistency": n / denom, "rate_clt": n * n / denom}


def _check_qv(qv11: float, qv12: float):
    if not (qv11 > 0 and qv12 > 0):
        raise NonPositiveQV(f"二次変動が正ではありません: qv11={qv11}, qv12={qv12}")


def _fragile(alpha_hat: float) -> bool:
    if alpha_hat < ALPHA_FRAGILE:
        logger.warning(f"α̂ = {alpha_hat:.4f} が小さく指数 1/α̂ が極端なため、プラグイン推定は数値的に不安定です")
        return True
    return False


def q1_plug_in(qv11: float, qv12: float, vartheta_hat, alpha_hat: float,
               rate: Optional[Dict[str, float]] = None) -> CoordEstimates:
    """
    Q1モデルのプラグイン推定

    λ̃ = (σ̂²/σ̃²)^{1/α̂}, θ̃₀ = −λ̃₁₁ + ((κ̂²+η̂²)/4 + 2π²)θ̂₂, θ̃₂ = (λ̃₁₂−λ̃₁₁)/(3π²),
    θ̃₁ = κ̂θ̃₂, η̃₁ = η̂θ̃₂, σ̃² = (σ̂²/θ̂₂)θ̃₂
    """
    _check_qv(qv11, qv12)
    kappa, eta, theta2, sigma2 = vartheta_hat
    if not sigma2 > 0:
        raise CoordEstError(f"σ̂² は正である必要があります: {sigma2}")
    lam11 = (sigma2 / qv11) ** (1 / alpha_hat)
    lam12 = (sigma2 / qv12) ** (1 / alpha_hat)
    theta2_t = (lam12 - lam11) / (3 * PI_SQ)
    return CoordEstimates(
        family=NoiseFamily.Q1,
        qv={(1, 1): qv11, (1, 2): qv12},
        implied={(1, 1): lam11, (1, 2): lam12},
        theta0=-lam11 + ((kappa ** 2 + eta ** 2) / 4 + 2 * PI_SQ) * theta2,
        theta1=kappa * theta2_t,
        eta1=eta * theta2_t,
        theta2=theta2_t,
        sigma2=sigma2 / theta2 * theta2_t,
        rate=rate or {},
        fragile=_fragile(alpha_hat),
    )


def q2_plug_in(qv11: float, qv12: float, vartheta_check, alpha_hat: float,
               rate: Optional[Dict[str, float]] = None) -> CoordEstimates:
    """
    Q2モデルのプラグイン推定

    u = ς̄²^{−1/α̂} として σ̄² = (3π²/(u₁₂−u₁₁))^{α̂}, μ̄₀ = (σ̌²/ς̄₁₁²)^{1/α̂} − 2π²,
    θ̄₂ = (θ̌₂/σ̌²)σ̄², θ̄₁ = κ̌θ̄₂, η̄₁ = η̌θ̄₂
    """
    _check_qv(qv11, qv12)
    kappa, eta, theta2, sigma2 = vartheta_check
    if not sigma2 > 0:
        raise CoordEstError(f"σ̌² は正である必要があります: {sigma2}")
    u11 = qv11 ** (-1 / alpha_hat)
    u12 = qv12 ** (-1 / alpha_hat)
    if not u12 > u11:
        raise InvertedModeOrder(f"ς̄₁₂^(−2/α̂)={u12:.6g} ≤ ς̄₁₁^(−2/α̂)={u11:.6g}")
    sigma2_bar = (3 * PI_SQ / (u12 - u11)) ** alpha_hat
    theta2_bar = theta2 / sigma2 * sigma2_bar
    mu11 = (sigma2 / qv11) ** (1 / alpha_hat)
    mu12 = (sigma2 / qv12) ** (1 / alpha_hat)
    return CoordEstimates(
        family=NoiseFamily.Q2,
        qv={(1, 1): qv11, (1, 2): qv12},
        implied={(1, 1): mu11, (1, 2): mu12},
        mu0=mu11 - 2 * PI_SQ,
        theta1=kappa * theta2_bar,
        eta1=eta * theta2_bar,
        theta2=theta2_bar,
        sigma2=sigma2_bar,
        rate=rate or {},
        fragile=_fragile(alpha_hat),
    )


def estimate_coordinates(record, vartheta_hat, alpha_hat: float,
                         family: NoiseFamily = NoiseFamily.Q1, n: Optional[int] = None,
                         modes: Sequence[Tuple[int, int]] = DEFAULT_MODES) -> CoordEstimates:
    """
    フィールドから近似座標の二次変動を求めてプラグイン推定を行う

    Args:
        record: 一様グリッド上の FieldRecord
        vartheta_hat: コントラスト推定値 (κ̂, η̂, θ̂₂, σ̂²)
        alpha_hat: α̂
        family: ノイズ族
        n: 間引き後の時間ステップ数（省略時は N）
        modes: 二次変動を求めるモード（(1,1), (1,2) は必須）
    """
    if (1, 1) not in modes or (1, 2) not in modes:
        raise CoordEstError(f"モード (1,1), (1,2) が必要です: {modes}")
    kappa, eta = vartheta_hat[0], vartheta_hat[1]
    times = thinned_time_index(record.grid.n_time, n)
    qv = {
        mode: coord_qv(approx_coordinate(record, mode[0], mode[1], kappa, eta, times))
        for mode in modes
    }
    for mode, value in qv.items():
        logger.debug(f"  σ̃²{mode} = {value:.6e}")

    rate = rate_diagnostics(len(times) - 1, min(record.grid.m_space_y, record.grid.m_space_z), alpha_hat)
    plug_in = q2_plug_in if NoiseFamily(family) == NoiseFamily.Q2 else q1_plug_in
    estimates = plug_in(qv[(1, 1)], qv[(1, 2)], vartheta_hat, alpha_hat, rate)
    return replace(estimates, qv=qv)


def asymptotic_cov(params: ModelParams, printed: bool = False) -> np.ndarray:
    """
    プラグイン推定量の漸近共分散（5×5）

    Q1（順序 θ₀, θ₁, η₁, θ₂, σ²）:
        𝒥 = 2/(9π⁴α²)·(λ₁₁² v₁v₁ᵀ + λ₁₂² v₂v₂ᵀ), v₁=(3π², κ, η, 1, σ²/θ₂), v₂=(0, κ, η, 1, σ²/θ₂)
    Q2（順序 μ₀, θ₁, η₁, θ₂, σ²）:
        𝒦 = 2/(9π⁴)·(μ₁₁² w₁w₁ᵀ + μ₁₂² w₂w₂ᵀ), w₁=(3π²/α, θ₁, η₁, θ₂, σ²), w₂=(0, θ₁, η₁, θ₂, σ²)

    既定はデルタ法の外積形。ブロック形 2·[[J₁₁, J₁₂], [J₁₂ᵀ, J₂₂]] の係数表示
    （θ = (θ₁, η₁, θ₂, σ²) として J₂₂ = 2(λ₁₁²+λ₁₂²)/(9π⁴θ₂²α²)·θθᵀ、K₂₂ = 2(μ₁₁²+μ₁₂²)/(9π⁴)·θθᵀ）
    とは次の点が異なる（printed=True でブロック形の係数どおりの行列を返す）:
        - J₂₂, K₂₂ は外積形の2倍
        - K₁₂ の係数 μ₁₁²/(3π²θ₂α²) は外積形では μ₁₁²/(3π²α)
    """
    if printed:
        return _printed_cov(params)
    spec = derive_spectrum(params)
    alpha = params.alpha
    sigma2 = params.sigma ** 2
    if params.noise == NoiseFamily.Q2:
        mu11, mu12 = float(spec.mu(1, 1)), float(spec.mu(1, 2))
        tail = [params.theta1, params.eta1, params.theta2, sigma2]
        w1 = np.array([3 * PI_SQ / alpha] + tail)
        w2 = np.array([0.0] + tail)
        return 2 / (9 * PI_SQ ** 2) * (mu11 ** 2 * np.outer(w1, w1) + mu12 ** 2 * np.outer(w2, w2))

    lam11, lam12 = float(spec.lam(1, 1)), float(spec.lam(1, 2))
    tail = [spec.kappa, spec.eta, 1.0, sigma2 / params.theta2]
    v1 = np.array([3 * PI_SQ] + tail)
    v2 = np.array([0.0] + tail)
    return 2 / (9 * PI_SQ ** 2 * alpha ** 2) * (lam11 ** 2 * np.outer(v1, v1) + lam12 ** 2 * np.outer(v2, v2))


def _printed_cov(params: ModelParams) -> np.ndarray:
    """2·[[J₁₁, J₁₂], [J₁₂ᵀ, J₂₂]]（Q2 は K）を係数どおりに組み立てる"""
    spec = derive_spectrum(params)
    alpha = params.alpha
    theta2 = params.theta2
    tail = np.array([params.theta1, params.eta1, theta2, params.sigma ** 2])
    if params.noise == NoiseFamily.Q2:
        s11, s12 = float(spec.mu(1, 1)), float(spec.mu(1, 2))
        scale22 = 2 * (s11 ** 2 + s12 ** 2) / (9 * PI_SQ ** 2)
    else:
        s11, s12 = float(spec.lam(1, 1)), float(spec.lam(1, 2))
        scale22 = 2 * (s11 ** 2 + s12 ** 2) / (9 * PI_SQ ** 2 * theta2 ** 2 * alpha ** 2)
    block = np.empty((5, 5))
    block[0, 0] = s11 ** 2 / alpha ** 2
    block[0, 1:] = s11 ** 2 / (3 * PI_SQ * theta2 * alpha ** 2) * tail
    block[1:, 0] = block[0, 1:]
    block[1:, 1:] = scale22 * np.outer(tail, tail)
    return 2 * block
