"""SPDEモデル基盤モジュール（パラメータ・固有系・観測グリッド・間引き）"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

import sys
sys.path.insert(0, ".")
from config.settings import ALIGN_TOLERANCE

PI_SQ = math.pi ** 2


class ModelCoreError(Exception):
    """モデル基盤例外クラス"""
    pass


class NonPositiveOperator(ModelCoreError):
    """λ_{1,1} ≤ 0（A_θ が正定値でない）"""
    pass


class BadNoiseParam(ModelCoreError):
    """Q2ノイズの μ₀ が (−2π², ∞) の外"""
    pass


class MisalignedThinning(ModelCoreError):
    """間引きノードが親グリッドのノードと一致しない"""
    pass


class NoiseFamily(str, Enum):
    """Q-Wiener過程の種類"""
    Q1 = "Q1"
    Q2 = "Q2"


@dataclass(frozen=True)
class ModelParams:
    """SPDEの全パラメータ

    σ=0 はゼロ場を生成する退化設定として許容する。
    """
    theta0: float
    theta1: float
    eta1: float
    theta2: float
    sigma: float
    alpha: float
    noise: NoiseFamily = NoiseFamily.Q1
    mu0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "noise", NoiseFamily(self.noise))
        if not self.theta2 > 0:
            raise ModelCoreError(f"theta2 は正である必要があります: {self.theta2}")
        if self.sigma < 0:
            raise ModelCoreError(f"sigma は非負である必要があります: {self.sigma}")
        if not 0 < self.alpha < 2:
            raise ModelCoreError(f"alpha は (0,2) の範囲である必要があります: {self.alpha}")
        _check_operator(self)

    @property
    def kappa(self) -> float:
        return self.theta1 / self.theta2

    @property
    def eta(self) -> float:
        return self.eta1 / self.theta2

    @property
    def vartheta(self) -> tuple:
        """(κ, η, θ₂, σ²)"""
        return (self.kappa, self.eta, self.theta2, self.sigma ** 2)

    def as_dict(self) -> dict:
        return {
            "theta0": self.theta0,
            "theta1": self.theta1,
            "eta1": self.eta1,
            "theta2": self.theta2,
            "sigma": self.sigma,
            "alpha": self.alpha,
            "noise": self.noise.value,
            "mu0": self.mu0,
        }


def _check_operator(params: ModelParams) -> float:
    """λ_{1,1} と μ_{1,1} の正値性を確認し Γ を返す"""
    kappa = params.theta1 / params.theta2
    eta = params.eta1 / params.theta2
    gamma_cap = -params.theta0 / params.theta2 + (kappa ** 2 + eta ** 2) / 4
    lam11 = params.theta2 * (2 * PI_SQ + gamma_cap)
    if lam11 <= 0:
        raise NonPositiveOperator(f"λ_1,1 = {lam11:.6g} ≤ 0 のため A_θ が正定値ではありません")
    if params.noise == NoiseFamily.Q2 and params.mu0 <= -2 * PI_SQ:
        raise BadNoiseParam(f"mu0 = {params.mu0} は −2π² より大きい必要があります")
    return gamma_cap


@dataclass(frozen=True)
class DerivedSpectrum:
    """A_θ の固有系（κ, η, Γ と固有値・固有関数の評価関数）"""
    kappa: float
    eta: float
    gamma_cap: float
    theta2: float
    noise: NoiseFamily = NoiseFamily.Q1
    mu0: float = 0.0

    def lam(self, l1, l2):
        """λ_{l1,l2} = θ₂(π²(l1²+l2²)+Γ)（配列をブロードキャスト可能）"""
        l1 = np.asarray(l1, dtype=float)
        l2 = np.asarray(l2, dtype=float)
        return self.theta2 * (PI_SQ * (l1 ** 2 + l2 ** 2) + self.gamma_cap)

    def mu(self, l1, l2):
        """μ_{l1,l2} = π²(l1²+l2²)+μ₀"""
        l1 = np.asarray(l1, dtype=float)
        l2 = np.asarray(l2, dtype=float)
        return PI_SQ * (l1 ** 2 + l2 ** 2) + self.mu0

    def noise_weight(self, l1, l2, alpha: float):
        """座標過程の拡散係数の重み λ^{−α/2}（Q1）または μ^{−α/2}（Q2）"""
        if self.noise == NoiseFamily.Q2:
            return self.mu(l1, l2) ** (-alpha / 2)
        return self.lam(l1, l2) ** (-alpha / 2)

    def e1(self, l, y):
        """e^{(1)}_l(y) = √2 sin(πly) e^{−κy/2}"""
        y = np.asarray(y, dtype=float)
        return math.sqrt(2) * np.sin(math.pi * l * y) * np.exp(-self.kappa * y / 2)

    def e2(self, l, z):
        """e^{(2)}_l(z) = √2 sin(πlz) e^{−ηz/2}"""
        z = np.asarray(z, dtype=float)
        return math.sqrt(2) * np.sin(math.pi * l * z) * np.exp(-self.eta * z / 2)


def derive_spectrum(params: ModelParams) -> DerivedSpectrum:
    """
    パラメータから固有系を導出

    Args:
        params: SPDEパラメータ

    Returns:
        κ, η, Γ と評価関数を持つ DerivedSpectrum

    Raises:
        NonPositiveOperator: θ₂(2π²+Γ) ≤ 0 の場合
        BadNoiseParam: Q2 で μ₀ ≤ −2π² の場合
    """
    gamma_cap = _check_operator(params)
    return DerivedSpectrum(
        kappa=params.kappa,
        eta=params.eta,
        gamma_cap=gamma_cap,
        theta2=params.theta2,
        noise=params.noise,
        mu0=params.mu0,
    )


def eigfun(spec: DerivedSpectrum, l1: int, l2: int, y, z):
    """e_{l1,l2}(y,z) = 2 sin(πl1y) sin(πl2z) e^{−(κy+ηz)/2}"""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    return (
        2.0
        * np.sin(math.pi * l1 * y)
        * np.sin(math.pi * l2 * z)
        * np.exp(-(spec.kappa * y + spec.eta * z) / 2)
    )


@dataclass(frozen=True)
class SamplingGrid:
    """
    観測グリッド

    ノードは t_i = i/N, y_j = c + j(1−2c)/M1, z_k = c + k(1−2c)/M2。
    margin c=0 が一様グリッド j/M、c>0 は間引き幾何を直接シミュレーションするためのシフトグリッド。
    """
    n_time: int
    m_space_y: int
    m_space_z: int
    margin: float = 0.0

    def __post_init__(self):
        if min(self.n_time, self.m_space_y, self.m_space_z) < 2:
            raise ModelCoreError(
                f"グリッド数は2以上が必要です: N={self.n_time}, M1={self.m_space_y}, M2={self.m_space_z}"
            )
        if not 0 <= self.margin < 0.5:
            raise ModelCoreError(f"margin は [0, 1/2) の範囲である必要があります: {self.margin}")

    @classmethod
    def shifted(cls, n_time: int, margin: float, m: int) -> "SamplingGrid":
        """間引きノード c + jδ (δ=(1−2c)/m) 上のグリッド"""
        return cls(n_time=n_time, m_space_y=m, m_space_z=m, margin=margin)

    @property
    def is_uniform(self) -> bool:
        return self.margin == 0.0

    @property
    def delta_y(self) -> float:
        return (1 - 2 * self.margin) / self.m_space_y

    @property
    def delta_z(self) -> float:
        return (1 - 2 * self.margin) / self.m_space_z

    @property
    def dt(self) -> float:
        return 1.0 / self.n_time

    def y_nodes(self) -> np.ndarray:
        return _axis_nodes(self.margin, self.m_space_y)

    def z_nodes(self) -> np.ndarray:
        return _axis_nodes(self.margin, self.m_space_z)

    def t_nodes(self) -> np.ndarray:
        return np.arange(self.n_time + 1) / self.n_time

    @property
    def shape(self) -> tuple:
        return (self.n_time + 1, self.m_space_y + 1, self.m_space_z + 1)

    def as_dict(self) -> dict:
        return {
            "n_time": self.n_time,
            "m_space_y": self.m_space_y,
            "m_space_z": self.m_space_z,
            "margin": self.margin,
        }


def _axis_nodes(margin: float, count: int) -> np.ndarray:
    j = np.arange(count + 1)
    if margin == 0.0:
        return j / count
    return margin + j * ((1 - 2 * margin) / count)


@dataclass(frozen=True)
class ThinSpec:
    """間引き指定 𝕏^{(c)}_{m,n}（m1 = m2）"""
    margin: float
    m1: int
    n: int
    m2: Optional[int] = None

    def __post_init__(self):
        if self.m2 is None:
            object.__setattr__(self, "m2", self.m1)
        if self.m2 != self.m1:
            raise ModelCoreError(f"間引きは m1 = m2 が必要です: m1={self.m1}, m2={self.m2}")
        if self.m1 < 1 or self.n < 1:
            raise ModelCoreError(f"m1, n は1以上が必要です: m1={self.m1}, n={self.n}")
        if not 0 <= self.margin < 0.5:
            raise ModelCoreError(f"margin は [0, 1/2) の範囲である必要があります: {self.margin}")

    @property
    def delta(self) -> float:
        return (1 - 2 * self.margin) / self.m1


@dataclass(frozen=True, eq=False)
class ThinnedView:
    """親グリッド（またはフィールド）への索引表による間引きビュー"""
    parent: SamplingGrid
    spec: ThinSpec
    t_index: np.ndarray
    y_index: np.ndarray
    z_index: np.ndarray
    dt: float
    source: Optional[np.ndarray] = None

    @property
    def delta(self) -> float:
        return self.spec.delta

    @property
    def r(self) -> float:
        """縦横比 r = δ/√Δ"""
        return self.delta / math.sqrt(self.dt)

    @property
    def m1(self) -> int:
        return self.spec.m1

    @property
    def m2(self) -> int:
        return self.spec.m2

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def m(self) -> int:
        return self.spec.m1 * self.spec.m2

    def y_nodes(self) -> np.ndarray:
        return self.spec.margin + np.arange(self.m1 + 1) * self.delta

    def z_nodes(self) -> np.ndarray:
        return self.spec.margin + np.arange(self.m2 + 1) * self.delta

    def t_nodes(self) -> np.ndarray:
        return self.t_index / self.parent.n_time

    def y_mid(self) -> np.ndarray:
        """ȳ_j = (ỹ_{j−1}+ỹ_j)/2, j=1..m1"""
        y = self.y_nodes()
        return (y[:-1] + y[1:]) / 2

    def z_mid(self) -> np.ndarray:
        z = self.z_nodes()
        return (z[:-1] + z[1:]) / 2

    def take(self, values: np.ndarray) -> np.ndarray:
        """親配列からビューの値 (n+1, m1+1, m2+1) を取り出す"""
        if values.shape != self.parent.shape:
            raise ModelCoreError(f"配列の形状 {values.shape} が親グリッド {self.parent.shape} と一致しません")
        return values[np.ix_(self.t_index, self.y_index, self.z_index)]

    @property
    def values(self) -> np.ndarray:
        if self.source is None:
            raise ModelCoreError("このビューにはフィールドが結合されていません")
        return self.take(self.source)


def _align_axis(targets: np.ndarray, margin: float, count: int, axis: str) -> np.ndarray:
    """間引きノードを親ノードの添字に変換（一致しなければ MisalignedThinning）"""
    pos = (targets - margin) * count / (1 - 2 * margin)
    idx = np.rint(pos)
    bad = (np.abs(pos - idx) > ALIGN_TOLERANCE) | (idx < 0) | (idx > count)
    if bad.any():
        j = int(np.argmax(bad))
        raise MisalignedThinning(
            f"{axis}軸の間引きノード j={j} (座標 {targets[j]:.12g}, 親添字換算 {pos[j]:.9f}) "
            "が親グリッドのノードに一致しません"
        )
    return idx.astype(np.int64)


def thin(source: Union[SamplingGrid, "object"], spec: ThinSpec) -> ThinnedView:
    """
    間引きビューを作成

    Args:
        source: 親の SamplingGrid、または grid と values を持つフィールド
        spec: 間引き指定

    Returns:
        ビュー値 (i,j,k) が親の (i⌊N/n⌋, (c+jδ)M1, (c+kδ)M2) に対応する ThinnedView
    """
    if isinstance(source, SamplingGrid):
        grid, values = source, None
    else:
        grid, values = source.grid, source.values

    if spec.n > grid.n_time:
        raise ModelCoreError(f"n={spec.n} は親の N={grid.n_time} 以下である必要があります")

    step = grid.n_time // spec.n
    t_index = np.arange(spec.n + 1, dtype=np.int64) * step

    y_targets = spec.margin + np.arange(spec.m1 + 1) * spec.delta
    z_targets = spec.margin + np.arange(spec.m2 + 1) * spec.delta
    y_index = _align_axis(y_targets, grid.margin, grid.m_space_y, "y")
    z_index = _align_axis(z_targets, grid.margin, grid.m_space_z, "z")

    return ThinnedView(
        parent=grid,
        spec=spec,
        t_index=t_index,
        y_index=y_index,
        z_index=z_index,
        dt=step / grid.n_time,
        source=values,
    )


def square_thin_spec(grid: SamplingGrid, n: Optional[int] = None, m: Optional[int] = None) -> ThinSpec:
    """
    親グリッドの両軸に載る正方セルの間引き指定

    m を省略すると gcd(M1, M2)（両軸のノードに一致する最大の分割数）を使う。
    """
    m = m or math.gcd(grid.m_space_y, grid.m_space_z)
    return ThinSpec(grid.margin, m, n or grid.n_time)
