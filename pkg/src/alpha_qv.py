"""三重増分統計と減衰パラメータ α の推定モジュール"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

import sys
sys.path.insert(0, ".")
from src.model_core import ThinSpec, ThinnedView, thin

logger = logging.getLogger(__name__)


class AlphaQVError(Exception):
    """α推定例外クラス"""
    pass


class DegenerateView(AlphaQVError):
    """増分を作れない（セル・時間ステップ不足、または二乗平均がゼロ）"""
    pass


class IndivisibleCoarsening(AlphaQVError):
    """p ∤ m1 または p² ∤ N で粗いビューを作れない"""
    pass


@dataclass(frozen=True, eq=False)
class IncrementStats:
    """三重増分の二乗和とセルごとの再スケール和 V, Ṽ"""
    sum_sq_t: float
    sum_sq_t_tilde: float
    m1: int
    m2: int
    n: int
    alpha: float
    dt: float
    v: np.ndarray
    v_tilde: np.ndarray
    r: float = float("nan")
    y_mid: np.ndarray = None
    z_mid: np.ndarray = None

    @property
    def m(self) -> int:
        return self.m1 * self.m2

    def rescaled(self, alpha: float) -> "IncrementStats":
        """別の α での V, Ṽ（Δ^α 正規化の付け替えのみ）"""
        if alpha == self.alpha:
            return self
        return replace(
            self,
            alpha=alpha,
            v=self.v * self.dt ** (self.alpha - alpha),
            v_tilde=self.v_tilde * (2 * self.dt) ** (self.alpha - alpha),
        )


@dataclass(frozen=True)
class AlphaEstimate:
    """α̂（クランプなし）と範囲外フラグ"""
    value: float
    ms_fine: float
    ms_coarse: float
    p: int

    @property
    def in_range(self) -> bool:
        return 0 < self.value < 2


def triple_increments(view: Union[ThinnedView, np.ndarray]) -> np.ndarray:
    """
    三重増分 T_{i,j,k}X（時間差分と y, z の二重差分）

    Args:
        view: 間引きビュー、または (n+1, m1+1, m2+1) 配列

    Returns:
        形状 (n, m1, m2) の増分配列
    """
    values = view.values if isinstance(view, ThinnedView) else np.asarray(view, dtype=float)
    if values.ndim != 3 or min(values.shape) < 2:
        raise DegenerateView(f"三重増分には各軸2点以上が必要です: shape={values.shape}")
    return np.diff(np.diff(np.diff(values, axis=0), axis=1), axis=2)


def cell_sums_from_increments(increments: np.ndarray, dt: float, alpha: float) -> tuple:
    """
    V_{j,k} = (1/(nΔ^α)) Σ_i T², Ṽ_{j,k} = (1/(n(2Δ)^α)) Σ_{i=1}^{n−1} (T_i + T_{i+1})²
    """
    n = increments.shape[0]
    if n < 2:
        raise DegenerateView(f"Ṽ には2ステップ以上が必要です: n={n}")
    sq = increments ** 2
    paired = (increments[:-1] + increments[1:]) ** 2
    v = sq.sum(axis=0) / (n * dt ** alpha)
    v_tilde = paired.sum(axis=0) / (n * (2 * dt) ** alpha)
    return v, v_tilde, float(sq.sum()), float(paired.sum())


def rescaled_cell_sums(view: ThinnedView, alpha: float) -> IncrementStats:
    """
    セルごとの再スケール二乗和（コントラスト関数の材料）

    Args:
        view: 間引きビュー
        alpha: 正規化に使う α（(0,2)）

    Returns:
        IncrementStats
    """
    if not 0 < alpha < 2:
        raise AlphaQVError(f"alpha は (0,2) の範囲である必要があります: {alpha}")
    increments = triple_increments(view)
    v, v_tilde, sum_sq, sum_sq_tilde = cell_sums_from_increments(increments, view.dt, alpha)
    return IncrementStats(
        sum_sq_t=sum_sq,
        sum_sq_t_tilde=sum_sq_tilde,
        m1=view.m1,
        m2=view.m2,
        n=view.n,
        alpha=alpha,
        dt=view.dt,
        v=v,
        v_tilde=v_tilde,
        r=view.r,
        y_mid=view.y_mid(),
        z_mid=view.z_mid(),
    )


def mean_square(view: Union[ThinnedView, np.ndarray]) -> float:
    """(1/(mN)) ΣΣΣ T²"""
    return float(np.mean(triple_increments(view) ** 2))


def alpha_from_mean_squares(ms_fine: float, ms_coarse: float, p: int = 2) -> float:
    """α̂ = log(ms_coarse / ms_fine) / log(p²)"""
    if ms_fine <= 0 or ms_coarse <= 0:
        raise DegenerateView(f"二乗平均がゼロです: fine={ms_fine}, coarse={ms_coarse}")
    return math.log(ms_coarse / ms_fine) / math.log(p * p)


def coarsening_specs(b: float, m1: int, n: int, p: int = 2) -> tuple:
    """細かいビュー (m1, N) と粗いビュー (m1/p, N/p²) の間引き指定"""
    if p < 2:
        raise AlphaQVError(f"p は2以上が必要です: {p}")
    if m1 % p != 0 or n % (p * p) != 0:
        raise IndivisibleCoarsening(f"p={p} で粗くできません: m1={m1}, N={n}")
    return ThinSpec(b, m1, n), ThinSpec(b, m1 // p, n // (p * p))


def estimate_alpha(parent, b: float, m1: int, p: int = 2, n: int = None) -> AlphaEstimate:
    """
    α̂ を2段階の解像度の三重増分二乗平均比から推定

    細かいビュー (δ, Δ) と粗いビュー (pδ, p²Δ) は縦横比 r を共有する。

    Args:
        parent: 親フィールド（grid と values を持つ）
        b: 間引きマージン
        m1: 細かいビューの空間分割数（m1 = m2）
        p: 粗視化倍率
        n: 細かいビューの時間ステップ数（省略時は親の N）

    Returns:
        AlphaEstimate（(0,2) 外でもクランプしない）
    """
    n = n or parent.grid.n_time
    fine_spec, coarse_spec = coarsening_specs(b, m1, n, p)
    fine = thin(parent, fine_spec)
    coarse = thin(parent, coarse_spec)

    ms_fine = mean_square(fine)
    ms_coarse = mean_square(coarse)
    value = alpha_from_mean_squares(ms_fine, ms_coarse, p)

    estimate = AlphaEstimate(value=value, ms_fine=ms_fine, ms_coarse=ms_coarse, p=p)
    if not estimate.in_range:
        logger.warning(f"α̂ = {value:.6f} が (0,2) の範囲外です")
    logger.debug(f"α̂ = {value:.6f} (fine ms={ms_fine:.6e}, coarse ms={ms_coarse:.6e}, r={fine.r:.6g})")
    return estimate
