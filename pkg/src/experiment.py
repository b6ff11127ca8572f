"""モンテカルロ実験モジュール（設定・1試行のパイプライン・並列実行）"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

import sys
sys.path.insert(0, ".")
from config.settings import (
    DATA_DIR,
    DEFAULT_M_SPACE,
    DEFAULT_N_TIME,
    DEFAULT_REPS,
    DEFAULT_SEED,
    DEFAULT_TRUNCATION,
    DEFAULT_WORKERS,
    NM_LATTICE,
    PSI_TOLERANCE,
    ROW_BLOCK_THREADS,
    TRUE_ALPHA,
    TRUE_ETA1,
    TRUE_SIGMA,
    TRUE_THETA0,
    TRUE_THETA1,
    TRUE_THETA2,
    XI_ETA,
    XI_KAPPA,
    XI_SIGMA2,
    XI_THETA2_MAX,
    XI_THETA2_MIN,
)
from src.alpha_qv import AlphaQVError, estimate_alpha, rescaled_cell_sums
from src.contrast_est import ContrastError, ParamSpaceXi, clamp_alpha, minimize_contrast, theta2_lower_bound
from src.coord_est import CoordEstError, estimate_coordinates
from src.field_sim import FieldSimError, TruncationSpec, simulate_fields
from src.model_core import ModelCoreError, ModelParams, NoiseFamily, SamplingGrid, ThinSpec, thin
from src.special_psi import SpecialPsiError

logger = logging.getLogger(__name__)

# 推定値の列（先頭はこの順）
ESTIMATE_COLUMNS = ["alpha_hat", "theta0", "theta1", "eta1", "theta2", "sigma2", "mu0", "flags"]
EXTRA_COLUMNS = [
    "rep", "seed", "kappa", "eta", "objective", "converged",
    "coord_theta1", "coord_eta1", "coord_theta2", "coord_sigma2",
    "qv11", "qv12", "rate_consistency", "rate_clt", "failed",
]

PIPELINE_ERRORS = (ModelCoreError, FieldSimError, SpecialPsiError, AlphaQVError, ContrastError, CoordEstError)


class ExperimentError(Exception):
    """実験例外クラス"""
    pass


class ConfigError(ExperimentError):
    """設定ファイルまたは設定値が不正"""
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """実験設定（真値・打ち切り・各段階の間引き・Ξ・試行回数・シード）"""
    theta0: float = TRUE_THETA0
    theta1: float = TRUE_THETA1
    eta1: float = TRUE_ETA1
    theta2: float = TRUE_THETA2
    sigma: float = TRUE_SIGMA
    alpha: float = TRUE_ALPHA
    noise: str = NoiseFamily.Q1.value
    mu0: float = 0.0
    # シミュレーション
    trunc_l1: int = DEFAULT_TRUNCATION
    trunc_l2: int = DEFAULT_TRUNCATION
    n_time: int = DEFAULT_N_TIME
    scheme: str = "exact"
    substeps: int = 1
    synthesis: str = "auto"
    # α 推定（マージン b のシフトグリッド上の細かいビューと粗いビュー）
    alpha_b: float = 0.005
    alpha_m: int = DEFAULT_M_SPACE
    alpha_p: int = 2
    # コントラスト推定
    contrast_b: float = 0.0
    contrast_m: int = 30
    contrast_n: int = 100
    # 座標推定（一様グリッド）
    coord_m: int = DEFAULT_M_SPACE
    coord_n: int = 100
    # Ξ と数値設定
    xi_kappa: Tuple[float, float] = XI_KAPPA
    xi_eta: Tuple[float, float] = XI_ETA
    xi_theta2_max: float = XI_THETA2_MAX
    xi_sigma2: Tuple[float, float] = XI_SIGMA2
    psi_tol: float = PSI_TOLERANCE
    lattice: int = NM_LATTICE
    # 実行
    reps: int = DEFAULT_REPS
    seed: int = DEFAULT_SEED
    workers: int = DEFAULT_WORKERS
    threads: int = ROW_BLOCK_THREADS
    out: str = DATA_DIR
    label: str = "case1"

    @property
    def params(self) -> ModelParams:
        return ModelParams(
            theta0=self.theta0,
            theta1=self.theta1,
            eta1=self.eta1,
            theta2=self.theta2,
            sigma=self.sigma,
            alpha=self.alpha,
            noise=self.noise,
            mu0=self.mu0,
        )

    @property
    def family(self) -> NoiseFamily:
        return NoiseFamily(self.noise)

    @property
    def trunc(self) -> TruncationSpec:
        return TruncationSpec(self.trunc_l1, self.trunc_l2)

    def grids(self) -> Dict[str, SamplingGrid]:
        """α・コントラスト・座標の各段階が使うグリッド"""
        return {
            "alpha": SamplingGrid.shifted(self.n_time, self.alpha_b, self.alpha_m),
            "contrast": SamplingGrid.shifted(self.contrast_n, self.contrast_b, self.contrast_m),
            "coord": SamplingGrid(self.coord_n, self.coord_m, self.coord_m),
        }

    def xi_for(self, r: float) -> ParamSpaceXi:
        return ParamSpaceXi(
            kappa=tuple(self.xi_kappa),
            eta=tuple(self.xi_eta),
            theta2=(max(theta2_lower_bound(r), XI_THETA2_MIN), self.xi_theta2_max),
            sigma2=tuple(self.xi_sigma2),
        )

    def validate(self) -> "ExperimentConfig":
        """各サブ設定を構築して検証する"""
        try:
            self.params
            self.trunc
            self.grids()
        except (ModelCoreError, FieldSimError) as e:
            raise ConfigError(str(e)) from e
        if self.reps < 1:
            raise ConfigError(f"reps は1以上が必要です: {self.reps}")
        if self.alpha_m % self.alpha_p != 0 or self.n_time % (self.alpha_p ** 2) != 0:
            raise ConfigError(
                f"α 段階の粗視化 p={self.alpha_p} が m={self.alpha_m}, N={self.n_time} を割り切りません"
            )
        if self.scheme not in ("exact", "em"):
            raise ConfigError(f"scheme は exact か em です: {self.scheme}")
        return self


# 標準実験 Case 1〜3（α 段階の幾何のみ異なる）
PRESETS = {
    "case1": {"alpha_m": 200, "alpha_b": 0.005},
    "case2": {"alpha_m": 100, "alpha_b": 0.01},
    "case3": {"alpha_m": 50, "alpha_b": 0.02},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    """名前付きプリセット"""
    if name not in PRESETS:
        raise ConfigError(f"未知のプリセットです: {name}（{', '.join(PRESETS)}）")
    return ExperimentConfig(label=name, **{**PRESETS[name], **overrides})


def parse_value(name: str, raw: str):
    """設定値の文字列を ExperimentConfig のフィールド型に変換"""
    field_types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in field_types:
        raise ConfigError(f"未知の設定キーです: {name.upper()}")
    kind = field_types[name]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (str, "str"):
            return raw
        lo, hi = (float(v) for v in str(raw).split(","))
        return (lo, hi)
    except ValueError as e:
        raise ConfigError(f"{name.upper()}={raw!r} を変換できません") from e


def config_items(config: ExperimentConfig) -> Dict[str, str]:
    """設定を KEY=VALUE 文書の (大文字キー, 文字列) に変換（parse_value で元に戻る）"""
    items = {}
    for key, value in asdict(config).items():
        if isinstance(value, tuple):
            value = ",".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        items[key.upper()] = str(value)
    return items


def config_from_items(items: Dict[str, str]) -> ExperimentConfig:
    """config_items の出力（またはサイドカーの CONFIG_ 部分）から設定を復元"""
    values = {key.lower(): parse_value(key.lower(), raw) for key, raw in items.items()}
    return replace(ExperimentConfig(), **values).validate()


def load_config(path=None, preset_name: Optional[str] = None, **overrides) -> ExperimentConfig:
    """
    KEY=VALUE 形式の設定ファイルを読み込む

    優先順位は overrides（CLI）> ファイル > プリセット > settings の既定値。
    プリセットは preset_name、なければファイルの PRESET キーで選ぶ。

    Args:
        path: 設定ファイル（省略可）
        preset_name: 土台にするプリセット名（省略可）
        overrides: None 以外の値で上書き

    Returns:
        検証済みの ExperimentConfig
    """
    values = {}
    document = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"設定ファイルがありません: {path}")
        document = dotenv_values(path)
    file_preset = document.pop("PRESET", None)
    preset_name = preset_name or file_preset
    base = preset(preset_name) if preset_name else ExperimentConfig()
    for key, raw in document.items():
        if raw is None:
            raise ConfigError(f"{key} に値がありません")
        values[key.lower()] = parse_value(key.lower(), raw)

    for key, value in overrides.items():
        if value is None:
            continue
        if key not in {f.name for f in fields(ExperimentConfig)}:
            raise ConfigError(f"未知の設定キーです: {key}")
        values[key] = value

    config = replace(base, **values)
    logger.debug(f"設定: {asdict(config)}")
    return config.validate()


def rep_seed(master: int, rep: int) -> int:
    """(マスターシード, 試行番号) を64bitに混合した試行ごとのシード"""
    state = np.random.SeedSequence([master, rep]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def _empty_row(rep: int, seed: int) -> dict:
    row = {column: math.nan for column in ESTIMATE_COLUMNS + EXTRA_COLUMNS}
    row.update({"rep": rep, "seed": seed, "flags": "", "converged": 0, "failed": 0})
    return row


def run_rep(config: ExperimentConfig, rep: int) -> dict:
    """
    1試行: シミュレーション → α̂ → ϑ̂ → 座標プラグイン推定

    パイプラインのエラーは failed=1 と flags に記録して返す。
    """
    seed = rep_seed(config.seed, rep)
    row = _empty_row(rep, seed)
    flags: List[str] = []
    family = config.family

    try:
        records = simulate_fields(
            config.params,
            config.trunc,
            config.grids(),
            scheme=config.scheme,
            seed=seed,
            mode=config.synthesis,
            substeps=config.substeps,
            threads=config.threads,
        )

        alpha_est = estimate_alpha(records["alpha"], config.alpha_b, config.alpha_m, config.alpha_p)
        row["alpha_hat"] = alpha_est.value
        if not alpha_est.in_range:
            flags.append("alpha_out_of_range")

        view = thin(records["contrast"], ThinSpec(config.contrast_b, config.contrast_m, config.contrast_n))
        alpha_used, _ = clamp_alpha(alpha_est.value)
        stats = rescaled_cell_sums(view, alpha_used)
        contrast = minimize_contrast(
            stats,
            config.xi_for(view.r),
            view.r,
            alpha_est.value,
            family,
            lattice=config.lattice,
            threads=config.threads,
            tol=config.psi_tol,
        )
        if contrast.alpha_clamped:
            flags.append("alpha_clamped")
        if not contrast.converged:
            flags.append("no_convergence")
        row.update({
            "theta1": contrast.theta1,
            "eta1": contrast.eta1,
            "theta2": contrast.theta2,
            "sigma2": contrast.sigma2,
            "kappa": contrast.kappa,
            "eta": contrast.eta,
            "objective": contrast.objective,
            "converged": int(contrast.converged),
        })

        coord = estimate_coordinates(
            records["coord"], contrast.vartheta_hat, contrast.alpha_used, family, n=config.coord_n
        )
        if coord.fragile:
            flags.append("fragile")
        row.update({
            "theta0": coord.theta0 if family == NoiseFamily.Q1 else math.nan,
            "mu0": coord.mu0 if family == NoiseFamily.Q2 else math.nan,
            "coord_theta1": coord.theta1,
            "coord_eta1": coord.eta1,
            "coord_theta2": coord.theta2,
            "coord_sigma2": coord.sigma2,
            "qv11": coord.qv[(1, 1)],
            "qv12": coord.qv[(1, 2)],
            **coord.rate,
        })
    except PIPELINE_ERRORS as e:
        logger.warning(f"試行 {rep} が失敗しました: {type(e).__name__}: {e}")
        flags.append(f"{type(e).__name__}: {e}")
        row["failed"] = 1

    row["flags"] = ";".join(flags)
    return row


def _run_rep_star(args) -> dict:
    return run_rep(*args)


@dataclass(frozen=True, eq=False)
class RunRecord:
    """実験の全試行の結果"""
    config: ExperimentConfig
    rows: pd.DataFrame

    @property
    def failed(self) -> int:
        return int(self.rows["failed"].sum())


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None) -> RunRecord:
    """
    モンテカルロ実験を実行

    試行は試行番号順に結果を集める（並列数によらず同一の出力）。

    Args:
        config: 実験設定
        workers: プロセス数（省略時は config.workers）

    Returns:
        RunRecord
    """
    config.validate()
    workers = workers or config.workers
    logger.info(
        f"実験開始: label={config.label}, reps={config.reps}, L=({config.trunc_l1},{config.trunc_l2}), "
        f"N={config.n_time}, noise={config.noise}, workers={workers}"
    )

    tasks = [(config, rep) for rep in range(config.reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(_run_rep_star, tasks))
    else:
        rows = []
        for task in tasks:
            rows.append(_run_rep_star(task))
            logger.info(f"  試行 {task[1] + 1}/{config.reps} 完了")

    df = pd.DataFrame(rows, columns=ESTIMATE_COLUMNS + EXTRA_COLUMNS)
    record = RunRecord(config=config, rows=df)
    logger.info(f"実験終了: {len(df)} 試行（失敗 {record.failed}）")
    return record


def true_values(config: ExperimentConfig) -> dict:
    """要約表の真値の行"""
    return {
        "alpha_hat": config.alpha,
        "theta0": config.theta0 if config.family == NoiseFamily.Q1 else math.nan,
        "theta1": config.theta1,
        "eta1": config.eta1,
        "theta2": config.theta2,
        "sigma2": config.sigma ** 2,
        "mu0": config.mu0 if config.family == NoiseFamily.Q2 else math.nan,
    }
