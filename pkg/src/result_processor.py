"""実験結果処理モジュール（CSV保存・推定量ごとの平均と標準偏差の要約）"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import pandas as pd

import sys
sys.path.insert(0, ".")
from config.settings import DATA_DIR
from src.experiment import ESTIMATE_COLUMNS, ExperimentError, config_items, true_values

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [c for c in ESTIMATE_COLUMNS if c != "flags"]


class TooFewRows(ExperimentError):
    """要約に使える（失敗していない）行が2行未満"""
    pass


@dataclass(frozen=True, eq=False)
class SummaryTable:
    """推定量ごとの平均と標準偏差（分母 reps−1）"""
    table: pd.DataFrame
    n_used: int
    n_flagged: int

    def format(self) -> str:
        """整列したテキスト表"""
        lines = [
            self.table.to_string(float_format=lambda v: f"{v:.6f}"),
            f"(使用 {self.n_used} 行, 失敗 {self.n_flagged} 行)",
        ]
        return "\n".join(lines)


def summarize(rows: pd.DataFrame, truth: Optional[dict] = None) -> SummaryTable:
    """
    失敗していない行の平均と標準偏差を計算

    Args:
        rows: 試行ごとの結果（failed 列があれば failed=1 の行を除外）
        truth: 真値（指定時は先頭行に追加）

    Returns:
        SummaryTable

    Raises:
        TooFewRows: 使える行が2行未満
    """
    if "failed" in rows.columns:
        used = rows[rows["failed"].fillna(0).astype(int) == 0]
    else:
        used = rows
    n_flagged = len(rows) - len(used)
    if len(used) < 2:
        raise TooFewRows(f"要約には2行以上必要です（使用可能 {len(used)} 行, 失敗 {n_flagged} 行）")

    columns = [c for c in SUMMARY_COLUMNS if c in used.columns and used[c].notna().any()]
    values = used[columns].astype(float)
    table = pd.DataFrame(
        {"mean": values.mean(), "sd": values.std(ddof=1)}
    ).T
    if truth is not None:
        true_row = pd.DataFrame([{c: truth.get(c) for c in columns}], index=["true"])
        table = pd.concat([true_row, table])
    return SummaryTable(table=table[columns], n_used=len(used), n_flagged=n_flagged)


class ResultProcessor:
    """実験結果の保存と読み込み"""

    def __init__(self, data_dir: Optional[str] = None):
        self.data_dir = Path(data_dir or DATA_DIR)
        self.data_dir.mkdir(parents=True, exist_ok=True)

    def save_to_csv(self, df: pd.DataFrame, filename: str, index: bool = False) -> Path:
        """DataFrameをCSVファイルに保存"""
        filepath = self.data_dir / filename
        df.to_csv(filepath, index=index, encoding="utf-8-sig")
        logger.info(f"CSV保存: {filepath}")
        return filepath

    def load_from_csv(self, filename: str) -> pd.DataFrame:
        """CSVファイルからDataFrameを読み込み"""
        filepath = Path(filename)
        if not filepath.is_absolute() and not filepath.exists():
            filepath = self.data_dir / filename
        if not filepath.exists():
            return pd.DataFrame()

        return pd.read_csv(filepath, encoding="utf-8-sig", keep_default_na=True)

    def save_run(self, record, stem: Optional[str] = None) -> dict:
        """
        試行結果・要約・設定を保存

        Returns:
            {"rows": パス, "summary": パス or None, "config": パス}
        """
        stem = stem or f"mc_{record.config.label}_seed{record.config.seed}"
        paths = {"rows": self.save_to_csv(record.rows, f"{stem}.csv"), "summary": None}

        try:
            summary = summarize(record.rows, true_values(record.config))
            paths["summary"] = self.save_to_csv(summary.table, f"{stem}_summary.csv", index=True)
        except TooFewRows as e:
            logger.warning(f"要約を作成できませんでした: {e}")

        paths["config"] = self.save_config(record.config, f"{stem}.env")
        return paths

    def save_config(self, config, filename: str) -> Path:
        """設定を KEY=VALUE 形式で保存（--config で再実行できる）"""
        filepath = self.data_dir / filename
        with open(filepath, "w", encoding="utf-8") as f:
            for key, value in config_items(config).items():
                f.write(f"{key}={value}\n")
        return filepath
