"""特殊関数モジュール（J₀, ψ_{r,α}, ψ̃_{r,α}, f_{r,α}, g_{r,α}）"""
import logging
import math
import threading
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, interpolate, special

import sys
sys.path.insert(0, ".")
from config.settings import PSI_TOLERANCE, PSI_TAIL_MIN, PSI_ASYMPTOTIC_ARG
from src.model_core import NoiseFamily

logger = logging.getLogger(__name__)

TOL_RANGE = (1e-12, 1e-6)
# 閉形式の α=1 近傍を補間で置き換える幅
_SINGULAR_STEP = 2e-3


class SpecialPsiError(Exception):
    """特殊関数例外クラス"""
    pass


class ToleranceNotMet(SpecialPsiError):
    """要求精度を達成できなかった（達成した誤差限界を保持）"""

    def __init__(self, message: str, report: "QuadratureReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class PsiQuery:
    """ψ_{r,α}(θ₂) の評価点"""
    r: float
    alpha: float
    theta2: float

    def __post_init__(self):
        if not self.r > 0:
            raise SpecialPsiError(f"r は正である必要があります: {self.r}")
        if not 0 < self.alpha < 2:
            raise SpecialPsiError(f"alpha は (0,2) の範囲である必要があります: {self.alpha}")
        if not self.theta2 > 0:
            raise SpecialPsiError(f"theta2 は正である必要があります: {self.theta2}")

    @property
    def a(self) -> float:
        """Bessel引数のスケール a = r/√θ₂"""
        return self.r / math.sqrt(self.theta2)


@dataclass(frozen=True)
class QuadratureReport:
    """数値積分の結果"""
    value: float
    abs_error_bound: float
    nodes_used: int
    tail_cut: float


def bessel_j0(x):
    """第1種0次Bessel関数 J₀（偶関数）"""
    return special.j0(np.abs(x))


# Hankel漸近展開の係数 a_k(0) = Π_{j≤k}(−(2j−1)²) / (k! 8^k)
_HANKEL = [1.0]
for _k in range(1, 11):
    _HANKEL.append(_HANKEL[-1] * (-(2 * _k - 1) ** 2) / (_k * 8))
_HANKEL_P = [(-1) ** k * _HANKEL[2 * k] for k in range(5)]
_HANKEL_Q = [(-1) ** k * _HANKEL[2 * k + 1] for k in range(5)]
_HANKEL_NEXT = abs(_HANKEL[10])

# J₀(√2u) − 2J₀(u) + 1 のべき級数係数（k ≥ 2）
_COMBO_SERIES = [
    (-1) ** k * (2 ** k - 2) / (math.factorial(k) ** 2 * 4 ** k)
    for k in range(2, 16)
]
_COMBO_SERIES_LIMIT = 1.5


def _hankel_pq(u):
    """J₀(u) ≈ √(1/(πu))[(P+Q)cos u + (P−Q)sin u] の P, Q"""
    inv2 = 1.0 / (u * u)
    p = 0.0
    q = 0.0
    for coef in reversed(_HANKEL_P):
        p = p * inv2 + coef
    for coef in reversed(_HANKEL_Q):
        q = q * inv2 + coef
    return p, q / u


def bessel_combination(u):
    """
    h(u) = J₀(√2u) − 2J₀(u) + 1

    原点付近は h ~ u⁴/32 で桁落ちするため級数で評価する。
    """
    u = np.abs(np.asarray(u, dtype=float))
    direct = special.j0(math.sqrt(2) * u) - 2 * special.j0(u) + 1
    w = (u * u)
    series = np.zeros_like(u)
    for coef in reversed(_COMBO_SERIES):
        series = series * w + coef
    series = series * w * w
    return np.where(u < _COMBO_SERIES_LIMIT, series, direct)


def _integrand(x: float, a: float, alpha: float) -> float:
    if x == 0.0:
        return 0.0
    return -math.expm1(-x * x) * x ** (-1 - 2 * alpha) * float(bessel_combination(a * x))


def _quad(func, lo, hi, args, epsabs, **kwargs):
    """quad を full_output で実行し (値, 誤差, 評価回数) を返す"""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad(func, lo, hi, args=args, epsabs=epsabs, epsrel=0.0,
                             limit=400, full_output=1, **kwargs)
    value, err, info = res[0], res[1], res[2]
    return value, err, int(info.get("neval", 0)) if isinstance(info, dict) else 0


def _bessel_tail(c: float, alpha: float, x_cut: float, epsabs: float):
    """∫_X^∞ x^{−1−2α} J₀(cx) dx を漸近展開とフーリエ積分（QAWF）で評価"""
    amp = 1.0 / math.sqrt(math.pi * c)

    def f_cos(x):
        p, q = _hankel_pq(c * x)
        return amp * x ** (-1.5 - 2 * alpha) * (p + q)

    def f_sin(x):
        p, q = _hankel_pq(c * x)
        return amp * x ** (-1.5 - 2 * alpha) * (p - q)

    v_cos, e_cos, n_cos = _quad(f_cos, x_cut, np.inf, (), epsabs / 2, weight="cos", wvar=c)
    v_sin, e_sin, n_sin = _quad(f_sin, x_cut, np.inf, (), epsabs / 2, weight="sin", wvar=c)
    u_cut = c * x_cut
    # 打ち切った漸近級数の次項による誤差
    trunc = (_HANKEL_NEXT / u_cut ** 10) * math.sqrt(2 / (math.pi * u_cut)) * x_cut ** (-2 * alpha) / (2 * alpha)
    return v_cos + v_sin, e_cos + e_sin + trunc, n_cos + n_sin


def psi(q: PsiQuery, tol: float = PSI_TOLERANCE, tail_cut: Optional[float] = None) -> QuadratureReport:
    """
    ψ_{r,α}(θ₂) = (2/(θ₂π)) ∫₀^∞ (1−e^{−x²}) x^{−1−2α} (J₀(√2ax) − 2J₀(ax) + 1) dx, a = r/√θ₂

    [0, X] は振動の半周期ごとに分割した適応積分、[X, ∞) は定数項の解析的な裾
    X^{−2α}/(2α) と Bessel項の漸近展開＋フーリエ積分で評価する。

    Args:
        q: 評価点
        tol: 要求絶対誤差（[1e−12, 1e−6]）
        tail_cut: 分割点 X（省略時は max(10, 30/a)）

    Returns:
        QuadratureReport

    Raises:
        ToleranceNotMet: 誤差限界が tol を超えた場合
    """
    if not TOL_RANGE[0] <= tol <= TOL_RANGE[1]:
        raise SpecialPsiError(f"tol は {TOL_RANGE} の範囲で指定してください: {tol}")

    a = q.a
    alpha = q.alpha
    scale = 2.0 / (q.theta2 * math.pi)
    budget = tol / scale

    x_cut = tail_cut if tail_cut is not None else max(PSI_TAIL_MIN, PSI_ASYMPTOTIC_ARG / a)

    # [0, X]: √2a の振動半周期ごとに分割
    pieces = max(8, int(math.ceil(x_cut * math.sqrt(2) * a / math.pi)))
    edges = np.unique(np.concatenate([np.linspace(0.0, x_cut, pieces + 1), [min(1.0, x_cut)]]))
    head_eps = budget / (4 * (len(edges) - 1))
    head = 0.0
    err = 0.0
    nodes = 0
    for lo, hi in zip(edges[:-1], edges[1:]):
        v, e, n = _quad(_integrand, lo, hi, (a, alpha), head_eps)
        head += v
        err += e
        nodes += n

    # [X, ∞): 定数項 + Bessel項
    const_tail = x_cut ** (-2 * alpha) / (2 * alpha)
    tail_eps = budget / 8
    t_sqrt2, e1, n1 = _bessel_tail(math.sqrt(2) * a, alpha, x_cut, tail_eps)
    t_one, e2, n2 = _bessel_tail(a, alpha, x_cut, tail_eps)
    tail = const_tail + t_sqrt2 - 2 * t_one
    # (1−e^{−x²}) ≈ 1 の近似誤差
    gauss_corr = 4 * math.exp(-x_cut * x_cut) * x_cut ** (-2 - 2 * alpha)
    err += e1 + 2 * e2 + gauss_corr
    nodes += n1 + n2

    report = QuadratureReport(
        value=scale * (head + tail),
        abs_error_bound=scale * err,
        nodes_used=nodes,
        tail_cut=x_cut,
    )
    if report.abs_error_bound > tol:
        raise ToleranceNotMet(
            f"ψ の誤差限界 {report.abs_error_bound:.3e} が tol={tol:.1e} を超えました "
            f"(r={q.r}, alpha={q.alpha}, theta2={q.theta2})",
            report,
        )
    return report


def psi_tilde(q: PsiQuery, tol: float = PSI_TOLERANCE) -> QuadratureReport:
    """ψ̃_{r,α}(θ₂) = θ₂^α ψ_{r,α}(θ₂)（Q2モデル用）"""
    base = psi(q, tol)
    factor = q.theta2 ** q.alpha
    return QuadratureReport(
        value=factor * base.value,
        abs_error_bound=factor * base.abs_error_bound,
        nodes_used=base.nodes_used,
        tail_cut=base.tail_cut,
    )


def _closed_form_raw(a: float, alpha: float) -> float:
    c_mellin = 2.0 ** (-2 * alpha - 1) * special.gamma(-alpha) * (2 ** alpha - 2) / special.gamma(1 + alpha)
    bracket = (
        special.hyp1f1(-alpha, 1.0, -a * a / 2)
        - 2 * special.hyp1f1(-alpha, 1.0, -a * a / 4)
        + 1.0
    )
    return a ** (2 * alpha) * c_mellin - 0.5 * special.gamma(-alpha) * bracket


def psi_closed_form(r: float, alpha: float, theta2: float) -> float:
    """
    Mellin変換による ψ の閉形式（数値積分とは独立な検証用）

    ψ = (2/(θ₂π))(a^{2α}C(α) − B(a,α))。α=1 は除去可能特異点なので
    |α−1| < h の範囲は α=1±kh（k=1..4）の8点を通る7次多項式で補間する。
    """
    a = r / math.sqrt(theta2)
    scale = 2.0 / (theta2 * math.pi)
    if abs(alpha - 1.0) < _SINGULAR_STEP:
        nodes = 1.0 + _SINGULAR_STEP * np.array([-4, -3, -2, -1, 1, 2, 3, 4], dtype=float)
        values = [_closed_form_raw(a, float(x)) for x in nodes]
        return scale * float(interpolate.barycentric_interpolate(nodes, values, alpha))
    return scale * _closed_form_raw(a, alpha)


def dpsi_dtheta2(q: PsiQuery, tol: float = PSI_TOLERANCE) -> float:
    """∂ψ/∂θ₂ の中心差分（ステップ 1e−5·θ₂、診断用）"""
    h = 1e-5 * q.theta2
    up = psi(PsiQuery(q.r, q.alpha, q.theta2 + h), tol).value
    down = psi(PsiQuery(q.r, q.alpha, q.theta2 - h), tol).value
    return (up - down) / (2 * h)


def dpsi_dalpha(q: PsiQuery, h: float = 1e-4, tol: float = PSI_TOLERANCE) -> float:
    """∂ψ/∂α の中心差分（テスト用）"""
    up = psi(PsiQuery(q.r, q.alpha + h, q.theta2), tol).value
    down = psi(PsiQuery(q.r, q.alpha - h, q.theta2), tol).value
    return (up - down) / (2 * h)


class PsiCache:
    """(r, α, θ₂, 族) ごとの ψ メモ化（読み取りは並行、書き込みは排他）"""

    def __init__(self, tol: float = PSI_TOLERANCE):
        self.tol = tol
        self._values = {}
        self._lock = threading.Lock()

    def get(self, r: float, alpha: float, theta2: float, family: NoiseFamily = NoiseFamily.Q1) -> float:
        key = (r, alpha, theta2, NoiseFamily(family))
        value = self._values.get(key)
        if value is not None:
            return value
        q = PsiQuery(r, alpha, theta2)
        if key[3] == NoiseFamily.Q2:
            value = psi_tilde(q, self.tol).value
        else:
            value = psi(q, self.tol).value
        with self._lock:
            self._values[key] = value
        return value

    def __len__(self) -> int:
        return len(self._values)


class PsiCurve:
    """
    固定 (r, α, 族) での θ₂ ↦ ψ の Chebyshev 補間（log θ₂ 上）

    最適化ループで ψ を何度も評価するための代替。構築時に Chebyshev 点で求積し、
    区間内の検査点で誤差を確認する。
    """

    def __init__(self, r: float, alpha: float, theta2_range: tuple,
                 family: NoiseFamily = NoiseFamily.Q1, tol: float = PSI_TOLERANCE, degree: int = 48):
        lo, hi = theta2_range
        if not 0 < lo < hi:
            raise SpecialPsiError(f"θ₂ の区間が不正です: {theta2_range}")
        self.r = r
        self.alpha = alpha
        self.family = NoiseFamily(family)
        self.lo, self.hi = lo, hi
        exact = psi_tilde if self.family == NoiseFamily.Q2 else psi

        def evaluate(log_theta2):
            return np.array([exact(PsiQuery(r, alpha, math.exp(v)), tol).value for v in np.atleast_1d(log_theta2)])

        domain = [math.log(lo), math.log(hi)]
        self._poly = np.polynomial.Chebyshev.interpolate(evaluate, degree, domain=domain)

        checkpoints = np.linspace(domain[0], domain[1], 7)[1:-1] + (domain[1] - domain[0]) / 97
        self.max_error = float(np.max(np.abs(self._poly(checkpoints) - evaluate(checkpoints))))
        if self.max_error > 100 * tol:
            logger.warning(
                f"ψ 補間誤差 {self.max_error:.2e} が大きいです (r={r}, alpha={alpha}, θ₂∈[{lo:.4g},{hi:.4g}])"
            )

    def __call__(self, theta2: float) -> float:
        if not self.lo <= theta2 <= self.hi:
            raise SpecialPsiError(f"θ₂={theta2} は補間区間 [{self.lo}, {self.hi}] の外です")
        return float(self._poly(math.log(theta2)))


def f_limit(y, z, vartheta: tuple, r: float, alpha: float,
            family: NoiseFamily = NoiseFamily.Q1, cache: Optional[PsiCache] = None):
    """
    f_{r,α}(y,z;ϑ) = σ² e^{−κy−ηz} ψ_{r,α}(θ₂)（Q2 は ψ̃ を使う f̃）

    Args:
        y, z: 空間座標（配列可）
        vartheta: (κ, η, θ₂, σ²)
        r: 縦横比
        alpha: 減衰パラメータ
        family: ノイズ族
        cache: ψ キャッシュ
    """
    kappa, eta, theta2, sigma2 = vartheta
    cache = cache or PsiCache()
    psi_value = cache.get(r, alpha, theta2, family)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    return sigma2 * np.exp(-kappa * y - eta * z) * psi_value


def _tilt_integral(k: float, b: float) -> float:
    """∫_b^{1−b} e^{−ky} dy（k→0 で 1−2b）"""
    width = 1 - 2 * b
    if k == 0.0:
        return width
    return math.exp(-k * b) * -math.expm1(-k * width) / k


def g_limit(vartheta: tuple, r: float, alpha: float, b: float,
            family: NoiseFamily = NoiseFamily.Q1, cache: Optional[PsiCache] = None) -> float:
    """
    g_{r,α}(ϑ) = σ²ψ_{r,α}(θ₂)/(1−2b)² ∫∫_{[b,1−b]²} e^{−κy−ηz} dy dz

    三重増分の二乗平均（Δ^α で正規化）の確率極限。
    """
    if not 0 <= b < 0.5:
        raise SpecialPsiError(f"b は [0, 1/2) の範囲である必要があります: {b}")
    kappa, eta, theta2, sigma2 = vartheta
    cache = cache or PsiCache()
    psi_value = cache.get(r, alpha, theta2, family)
    width = 1 - 2 * b
    return sigma2 * psi_value * _tilt_integral(kappa, b) * _tilt_integral(eta, b) / width ** 2
