"""SPDE標本場シミュレーションモジュール（スペクトル打ち切り＋OU座標過程）"""
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Iterator, Optional

import numpy as np
from scipy import fft

import sys
sys.path.insert(0, ".")
from config.settings import ROW_BLOCK_THREADS
from src.model_core import DerivedSpectrum, ModelParams, SamplingGrid, derive_spectrum

logger = logging.getLogger(__name__)


class FieldSimError(Exception):
    """シミュレーション例外クラス"""
    pass


class FoldedRequiresUniformGrid(FieldSimError):
    """折り畳み合成は一様グリッド j/M でのみ使える"""
    pass


class UnstableSchemeWarning(UserWarning):
    """Euler–Maruyama法で λ·dt ≥ 2（発散する）"""
    pass


class Scheme(str, Enum):
    EXACT = "exact"
    EM = "em"


class SynthesisMode(str, Enum):
    AUTO = "auto"
    NAIVE = "naive"
    FOLDED = "folded"


@dataclass(frozen=True)
class TruncationSpec:
    """スペクトル打ち切り (L1, L2)"""
    l1: int
    l2: int

    def __post_init__(self):
        if self.l1 < 1 or self.l2 < 1:
            raise FieldSimError(f"打ち切り次数は1以上が必要です: L1={self.l1}, L2={self.l2}")

    def modes(self):
        """モード番号の配列 (1..L1, 1..L2)"""
        return np.arange(1, self.l1 + 1), np.arange(1, self.l2 + 1)

    def as_dict(self) -> dict:
        return {"l1": self.l1, "l2": self.l2}


@dataclass(frozen=True)
class RngStreamSpec:
    """
    行ごとのカウンタベース乱数ストリーム

    l1 行は Philox(key=(seed<<64)|l1) で生成し、各時間ステップで L2 個の正規乱数を
    順に取り出す。行ごとに独立なので、スレッド数によらず結果は同一。
    """
    master_seed: int

    def __post_init__(self):
        if not 0 <= self.master_seed < 2 ** 64:
            raise FieldSimError(f"master_seed は64bit非負整数である必要があります: {self.master_seed}")

    def row_generator(self, l1: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=(self.master_seed << 64) | int(l1)))


@dataclass(frozen=True, eq=False)
class CoordinateBlock:
    """時刻 t_index における座標 x_{l1,l2}(t)（L1×L2、読み取り専用）"""
    t_index: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class FieldRecord:
    """グリッド上の標本場と生成条件"""
    grid: SamplingGrid
    values: np.ndarray
    params: Optional[ModelParams] = None
    trunc: Optional[TruncationSpec] = None
    seed: Optional[int] = None
    scheme: str = Scheme.EXACT.value
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise FieldSimError(f"値の形状 {self.values.shape} がグリッド {self.grid.shape} と一致しません")


def ou_step_exact(x, lam, noise_sd, dt, gauss):
    """
    OU過程 dx = −λx dt + noise_sd dw の厳密遷移

    e^{−λdt}x + noise_sd·√((1−e^{−2λdt})/(2λ))·gauss
    """
    lam = np.asarray(lam, dtype=float)
    transition_sd = np.sqrt(-np.expm1(-2 * lam * dt) / (2 * lam))
    return np.exp(-lam * dt) * x + noise_sd * transition_sd * gauss


def ou_step_em(x, lam, noise_sd, dt, gauss):
    """Euler–Maruyama 1ステップ (1−λdt)x + noise_sd·√dt·gauss（λ·dt ≥ 2 で警告）"""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam * dt >= 2):
        warnings.warn(f"λ·dt = {float(np.max(lam * dt)):.3g} ≥ 2 のためEM法は不安定です", UnstableSchemeWarning)
    return (1 - lam * dt) * x + noise_sd * math.sqrt(dt) * gauss


def _coefficient_tables(spec: DerivedSpectrum, trunc: TruncationSpec, sigma: float, alpha: float):
    l1, l2 = trunc.modes()
    lam = spec.lam(l1[:, None], l2[None, :])
    noise_sd = sigma * spec.noise_weight(l1[:, None], l2[None, :], alpha)
    return lam, noise_sd


def _row_blocks(n_rows: int, threads: int):
    bounds = np.linspace(0, n_rows, max(1, min(threads, n_rows)) + 1).astype(int)
    return [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def simulate_coordinates(
    params: ModelParams,
    trunc: TruncationSpec,
    n_time: int,
    scheme: str = Scheme.EXACT.value,
    seed: int = 0,
    x0: Optional[np.ndarray] = None,
    substeps: int = 1,
    threads: int = ROW_BLOCK_THREADS,
) -> Iterator[CoordinateBlock]:
    """
    座標過程の時系列を1ステップずつ生成

    Args:
        params: SPDEパラメータ（Q1 は λ^{−α/2}、Q2 は μ^{−α/2} の重み）
        trunc: 打ち切り次数
        n_time: [0,1] の観測ステップ数 N
        scheme: "exact"（厳密OU遷移）または "em"
        seed: マスターシード
        x0: 初期係数 ⟨X₀, e_{l1,l2}⟩（省略時はゼロ）
        substeps: 観測間隔あたりの内部ステップ数
        threads: 行ブロック並列のスレッド数

    Yields:
        t_index = 0..N の CoordinateBlock（初期ブロックを含む）
    """
    scheme = Scheme(scheme)
    if n_time < 1 or substeps < 1:
        raise FieldSimError(f"n_time, substeps は1以上が必要です: {n_time}, {substeps}")

    spec = derive_spectrum(params)
    lam, noise_sd = _coefficient_tables(spec, trunc, params.sigma, params.alpha)
    dt = 1.0 / (n_time * substeps)

    if x0 is None:
        x = np.zeros((trunc.l1, trunc.l2))
    else:
        x = np.array(x0, dtype=float)
        if x.shape != (trunc.l1, trunc.l2):
            raise FieldSimError(f"x0 の形状 {x.shape} が打ち切り ({trunc.l1}, {trunc.l2}) と一致しません")

    if scheme == Scheme.EXACT:
        decay = np.exp(-lam * dt)
        scale = noise_sd * np.sqrt(-np.expm1(-2 * lam * dt) / (2 * lam))
    else:
        if float(np.max(lam)) * dt >= 2:
            warnings.warn(
                f"λ_max·dt = {float(np.max(lam)) * dt:.3g} ≥ 2 のためEM法は不安定です",
                UnstableSchemeWarning,
            )
        decay = 1 - lam * dt
        scale = noise_sd * math.sqrt(dt)

    streams = RngStreamSpec(seed)
    generators = [streams.row_generator(l1) for l1 in range(1, trunc.l1 + 1)]
    blocks = _row_blocks(trunc.l1, threads)

    logger.info(
        f"座標過程シミュレーション開始: L=({trunc.l1},{trunc.l2}), N={n_time}, "
        f"scheme={scheme.value}, substeps={substeps}, threads={len(blocks)}"
    )

    x.setflags(write=False)
    yield CoordinateBlock(t_index=0, values=x)

    def advance(prev: np.ndarray, out: np.ndarray, lo: int, hi: int):
        gauss = np.empty((hi - lo, trunc.l2))
        for row in range(lo, hi):
            gauss[row - lo] = generators[row].standard_normal(trunc.l2)
        out[lo:hi] = decay[lo:hi] * prev[lo:hi] + scale[lo:hi] * gauss

    executor = ThreadPoolExecutor(max_workers=len(blocks)) if len(blocks) > 1 else None
    try:
        for i in range(1, n_time + 1):
            for _ in range(substeps):
                nxt = np.empty_like(x)
                if executor is None:
                    advance(x, nxt, 0, trunc.l1)
                else:
                    list(executor.map(lambda b: advance(x, nxt, *b), blocks))
                x = nxt
            x.setflags(write=False)
            if i % max(1, n_time // 10) == 0:
                logger.debug(f"  ステップ {i}/{n_time}")
            yield CoordinateBlock(t_index=i, values=x)
    finally:
        if executor is not None:
            executor.shutdown()


def _basis(spec_axis_tilt: float, count: int, nodes: np.ndarray) -> np.ndarray:
    """√2 sin(πl·x) e^{−a x/2}（L×ノード数、境界ノードは厳密に0）"""
    l = np.arange(1, count + 1)[:, None]
    basis = math.sqrt(2) * np.sin(math.pi * l * nodes[None, :]) * np.exp(-spec_axis_tilt * nodes[None, :] / 2)
    basis[:, (nodes == 0.0) | (nodes == 1.0)] = 0.0
    return basis


def _uniform_count(nodes: np.ndarray) -> Optional[int]:
    """nodes が j/M (j=0..M, M≥3) と一致すれば M を返す"""
    count = len(nodes) - 1
    if count < 3:
        return None
    if np.array_equal(nodes, np.arange(count + 1) / count):
        return count
    return None


def _fold(coeffs: np.ndarray, m: int, axis: int) -> np.ndarray:
    """係数を l mod 2M で畳み込み F[l'] = A[l'] − A[2M−l'] (l'=1..M−1) を返す"""
    coeffs = np.moveaxis(coeffs, axis, 0)
    period = 2 * m
    n_blocks = -(-(coeffs.shape[0] + 1) // period)
    padded = np.zeros((n_blocks * period,) + coeffs.shape[1:])
    padded[1:coeffs.shape[0] + 1] = coeffs
    acc = padded.reshape((n_blocks, period) + coeffs.shape[1:]).sum(axis=0)
    folded = acc[1:m] - acc[period - 1:m:-1]
    return np.moveaxis(folded, 0, axis)


class SlabSynthesizer:
    """係数ブロックからグリッド上の1時刻分の場を合成する"""

    def __init__(self, spec: DerivedSpectrum, trunc: TruncationSpec,
                 nodes_y: np.ndarray, nodes_z: np.ndarray, mode: str = SynthesisMode.AUTO.value):
        self.nodes_y = np.asarray(nodes_y, dtype=float)
        self.nodes_z = np.asarray(nodes_z, dtype=float)
        if self.nodes_y.min() < 0 or self.nodes_y.max() > 1 or self.nodes_z.min() < 0 or self.nodes_z.max() > 1:
            raise FieldSimError("ノード座標は [0,1] の範囲である必要があります")
        self.trunc = trunc
        my = _uniform_count(self.nodes_y)
        mz = _uniform_count(self.nodes_z)
        mode = SynthesisMode(mode)

        if mode == SynthesisMode.AUTO:
            uniform = my is not None and mz is not None
            mode = SynthesisMode.FOLDED if uniform and (trunc.l1 > 2 * my or trunc.l2 > 2 * mz) else SynthesisMode.NAIVE
        if mode == SynthesisMode.FOLDED and (my is None or mz is None):
            raise FoldedRequiresUniformGrid("折り畳み合成には一様グリッド j/M (M≥3) が必要です")

        self.mode = mode
        if mode == SynthesisMode.NAIVE:
            self.e1 = _basis(spec.kappa, trunc.l1, self.nodes_y)
            self.e2 = _basis(spec.eta, trunc.l2, self.nodes_z)
        else:
            self.my, self.mz = my, mz
            self.tilt = 2.0 * np.outer(
                np.exp(-spec.kappa * self.nodes_y[1:-1] / 2),
                np.exp(-spec.eta * self.nodes_z[1:-1] / 2),
            )

    def __call__(self, coeffs: np.ndarray) -> np.ndarray:
        if coeffs.shape != (self.trunc.l1, self.trunc.l2):
            raise FieldSimError(f"係数の形状 {coeffs.shape} が打ち切りと一致しません")
        if self.mode == SynthesisMode.NAIVE:
            return self.e1.T @ coeffs @ self.e2

        folded = _fold(_fold(coeffs, self.my, 0), self.mz, 1)
        out = np.zeros((self.my + 1, self.mz + 1))
        # 型I DST は 2Σ x_n sin(π(k+1)(n+1)/M) なので各軸 1/2
        out[1:-1, 1:-1] = fft.dstn(folded, type=1) / 4 * self.tilt
        return out


def synthesize_field(
    blocks: Iterable[CoordinateBlock],
    spec: DerivedSpectrum,
    grid: SamplingGrid,
    mode: str = SynthesisMode.AUTO.value,
    trunc: Optional[TruncationSpec] = None,
    **provenance,
) -> FieldRecord:
    """
    X(t_i, y_j, z_k) = Σ_{l1,l2} x_{l1,l2}(t_i) e_{l1,l2}(y_j, z_k) を合成

    Args:
        blocks: t_index = 0..N の係数ブロック
        spec: 固有系
        grid: 観測グリッド
        mode: "naive"（E1ᵀ C E2）、"folded"（l mod 2M 折り畳み＋DST-I）、"auto"
        trunc: 打ち切り（省略時は最初のブロックから決定）

    Returns:
        FieldRecord
    """
    blocks = iter(blocks)
    values = np.empty(grid.shape)
    synthesizer = None
    seen = 0
    for block in blocks:
        if synthesizer is None:
            trunc = trunc or TruncationSpec(*block.values.shape)
            synthesizer = SlabSynthesizer(spec, trunc, grid.y_nodes(), grid.z_nodes(), mode)
        if block.t_index > grid.n_time:
            raise FieldSimError(f"t_index={block.t_index} がグリッドの N={grid.n_time} を超えています")
        values[block.t_index] = synthesizer(block.values)
        seen += 1
    if seen != grid.n_time + 1:
        raise FieldSimError(f"ブロック数 {seen} が N+1={grid.n_time + 1} と一致しません")
    values.setflags(write=False)
    return FieldRecord(grid=grid, values=values, trunc=trunc, **provenance)


def simulate_fields(
    params: ModelParams,
    trunc: TruncationSpec,
    grids: Dict[str, SamplingGrid],
    scheme: str = Scheme.EXACT.value,
    seed: int = 0,
    mode: str = SynthesisMode.AUTO.value,
    x0: Optional[np.ndarray] = None,
    substeps: int = 1,
    threads: int = ROW_BLOCK_THREADS,
) -> Dict[str, FieldRecord]:
    """
    1本の座標パスを複数グリッドで同時に合成

    シミュレーションの時間ステップ数は各グリッドの n_time の最小公倍数 N とし、
    グリッド g は N/n_time(g) ステップごとに記録する。
    """
    if not grids:
        raise FieldSimError("グリッドが指定されていません")
    n_steps = math.lcm(*(g.n_time for g in grids.values()))
    spec = derive_spectrum(params)

    synthesizers = {
        name: SlabSynthesizer(spec, trunc, g.y_nodes(), g.z_nodes(), mode)
        for name, g in grids.items()
    }
    strides = {name: n_steps // g.n_time for name, g in grids.items()}
    values = {name: np.empty(g.shape) for name, g in grids.items()}

    logger.info(
        f"場の合成: grids={ {n: (g.n_time, g.m_space_y, g.m_space_z, g.margin) for n, g in grids.items()} }, "
        f"modes={ {n: s.mode.value for n, s in synthesizers.items()} }"
    )

    for block in simulate_coordinates(params, trunc, n_steps, scheme, seed, x0, substeps, threads):
        for name, stride in strides.items():
            if block.t_index % stride == 0:
                values[name][block.t_index // stride] = synthesizers[name](block.values)

    records = {}
    for name, g in grids.items():
        values[name].setflags(write=False)
        records[name] = FieldRecord(
            grid=g,
            values=values[name],
            params=params,
            trunc=trunc,
            seed=seed,
            scheme=Scheme(scheme).value,
        )
    return records


def simulate_field(
    params: ModelParams,
    trunc: TruncationSpec,
    grid: SamplingGrid,
    scheme: str = Scheme.EXACT.value,
    seed: int = 0,
    mode: str = SynthesisMode.AUTO.value,
    x0: Optional[np.ndarray] = None,
    substeps: int = 1,
    threads: int = ROW_BLOCK_THREADS,
) -> FieldRecord:
    """単一グリッドの標本場をシミュレーション（1時刻ずつストリーミング合成）"""
    return simulate_fields(
        params, trunc, {"field": grid}, scheme, seed, mode, x0, substeps, threads
    )["field"]


def stationary_variance(params: ModelParams, l1, l2):
    """座標過程の定常分散 σ²w²/(2λ)（w は族ごとの重み、l1, l2 は配列可）"""
    spec = derive_spectrum(params)
    lam = spec.lam(l1, l2)
    weight = spec.noise_weight(l1, l2, params.alpha)
    var = params.sigma ** 2 * weight ** 2 / (2 * lam)
    return float(var) if np.ndim(var) == 0 else var


def field_variance(params: ModelParams, trunc: TruncationSpec, t: float, y: float, z: float) -> float:
    """Var[X_t(y,z)] = σ² Σ w²(1−e^{−2λt})/(2λ) e²_{l1,l2}(y,z)（X₀=0、打ち切り L まで）"""
    spec = derive_spectrum(params)
    l1, l2 = trunc.modes()
    lam = spec.lam(l1[:, None], l2[None, :])
    stationary = stationary_variance(params, l1[:, None], l2[None, :])
    eig = np.outer(spec.e1(l1, y), spec.e2(l2, z))
    return float(np.sum(stationary * -np.expm1(-2 * lam * t) * eig ** 2))
