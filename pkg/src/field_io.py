"""フィールドファイル入出力モジュール"""
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import dotenv_values

import sys
sys.path.insert(0, ".")
from config.settings import FIELD_MAGIC
from src.field_sim import FieldRecord, TruncationSpec
from src.model_core import ModelCoreError, ModelParams, SamplingGrid

logger = logging.getLogger(__name__)

HEADER_DIMS = np.dtype("<u4")
PAYLOAD = np.dtype("<f8")
HEADER_SIZE = len(FIELD_MAGIC) + 3 * HEADER_DIMS.itemsize

_PARAM_KEYS = ("theta0", "theta1", "eta1", "theta2", "sigma", "alpha", "mu0")

# metadata["config"] の実験設定はサイドカーに CONFIG_<KEY> で書く
CONFIG_KEY = "config"
CONFIG_PREFIX = "CONFIG_"


class FieldIOError(Exception):
    """フィールドファイル例外クラス"""
    pass


class BadMagic(FieldIOError):
    pass


class DimMismatch(FieldIOError):
    """ヘッダーの次元がメタデータのグリッドと一致しない"""
    pass


class TruncatedFile(FieldIOError):
    """ヘッダーとペイロードのサイズが一致しない"""
    pass


class BadDims(FieldIOError):
    """ヘッダーまたはサイドカーの次元からグリッドを構成できない"""
    pass


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def record_metadata(record: FieldRecord) -> dict:
    """サイドカーに書くキーと値（キーは大文字）"""
    meta = {f"GRID_{k.upper()}": v for k, v in record.grid.as_dict().items()}
    if record.params is not None:
        meta.update({f"PARAM_{k.upper()}": v for k, v in record.params.as_dict().items()})
    if record.trunc is not None:
        meta.update({f"TRUNC_{k.upper()}": v for k, v in record.trunc.as_dict().items()})
    if record.seed is not None:
        meta["SEED"] = record.seed
    meta["SCHEME"] = record.scheme
    for key, value in record.metadata.items():
        if key == CONFIG_KEY:
            meta.update({f"{CONFIG_PREFIX}{k.upper()}": v for k, v in value.items()})
        else:
            meta[key.upper()] = value
    return meta


def write_field(record: FieldRecord, path) -> Path:
    """
    フィールドをバイナリファイルとサイドカーに保存

    形式: マジック "SPDE2D01"、<u4 の次元 (n_time+1, n_y, n_z)、<f8 の値（時間→y→z順）。
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = np.asarray(record.values.shape, dtype=HEADER_DIMS)
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(dims.tobytes())
        f.write(np.ascontiguousarray(record.values, dtype=PAYLOAD).tobytes())

    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        for key, value in record_metadata(record).items():
            f.write(f"{key}={_format_value(value)}\n")

    logger.info(f"フィールド保存: {path} shape={record.values.shape}")
    return path


def _grid_from_meta(meta: dict) -> Optional[SamplingGrid]:
    if "GRID_N_TIME" not in meta:
        return None
    return SamplingGrid(
        n_time=int(meta["GRID_N_TIME"]),
        m_space_y=int(meta["GRID_M_SPACE_Y"]),
        m_space_z=int(meta["GRID_M_SPACE_Z"]),
        margin=float(meta.get("GRID_MARGIN", 0.0)),
    )


def _params_from_meta(meta: dict) -> Optional[ModelParams]:
    if "PARAM_THETA2" not in meta:
        return None
    values = {k: float(meta[f"PARAM_{k.upper()}"]) for k in _PARAM_KEYS}
    return ModelParams(noise=meta.get("PARAM_NOISE", "Q1"), **values)


def read_field(path) -> FieldRecord:
    """
    フィールドファイルを読み込む

    Raises:
        BadMagic: マジックバイトが一致しない
        TruncatedFile: ペイロードのサイズがヘッダーと一致しない
        DimMismatch: ヘッダーの次元がサイドカーのグリッドと一致しない
        BadDims: 次元からグリッドを構成できない（サイドカーなしで小さすぎる場合など）
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        if not FIELD_MAGIC.startswith(raw[:len(FIELD_MAGIC)]):
            raise BadMagic(f"マジックバイトが一致しません: {path}")
        raise TruncatedFile(f"ヘッダーが不完全です ({len(raw)} bytes): {path}")
    if raw[:len(FIELD_MAGIC)] != FIELD_MAGIC:
        raise BadMagic(f"マジックバイトが一致しません: {raw[:len(FIELD_MAGIC)]!r}")

    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=HEADER_DIMS, count=3, offset=len(FIELD_MAGIC)))
    expected = int(np.prod(dims)) * PAYLOAD.itemsize
    actual = len(raw) - HEADER_SIZE
    if actual != expected:
        raise TruncatedFile(f"ペイロードは {expected} bytes 必要ですが {actual} bytes です: {path}")
    values = np.frombuffer(raw, dtype=PAYLOAD, offset=HEADER_SIZE).reshape(dims).astype(float)
    values.setflags(write=False)

    meta_file = sidecar_path(path)
    meta = dict(dotenv_values(meta_file)) if meta_file.exists() else {}
    try:
        grid = _grid_from_meta(meta)
        if grid is None:
            grid = SamplingGrid(n_time=dims[0] - 1, m_space_y=dims[1] - 1, m_space_z=dims[2] - 1)
    except (ModelCoreError, ValueError) as e:
        raise BadDims(f"次元 {dims} からグリッドを構成できません: {e}") from e
    if grid.shape != dims:
        raise DimMismatch(f"ヘッダーの次元 {dims} がメタデータのグリッド {grid.shape} と一致しません")

    trunc = None
    if "TRUNC_L1" in meta:
        trunc = TruncationSpec(int(meta["TRUNC_L1"]), int(meta["TRUNC_L2"]))
    known = {"SEED", "SCHEME"}
    extra = {
        k.lower(): v for k, v in meta.items()
        if k not in known and not k.startswith(("GRID_", "PARAM_", "TRUNC_", CONFIG_PREFIX))
    }
    config = {k[len(CONFIG_PREFIX):]: v for k, v in meta.items() if k.startswith(CONFIG_PREFIX)}
    if config:
        extra[CONFIG_KEY] = config
    return FieldRecord(
        grid=grid,
        values=values,
        params=_params_from_meta(meta),
        trunc=trunc,
        seed=int(meta["SEED"]) if "SEED" in meta else None,
        scheme=meta.get("SCHEME", "exact"),
        metadata=extra,
    )
