"""アプリケーション設定"""
import os
from dotenv import load_dotenv

load_dotenv()


def _get_setting(key: str, default: str = "") -> str:
    """環境変数（SPDE_プレフィックス付き）から値を取得"""
    value = os.getenv(f"SPDE_{key}")
    if value:
        return value
    return default


def _get_float(key: str, default: float) -> float:
    return float(_get_setting(key, str(default)))


def _get_int(key: str, default: int) -> int:
    return int(_get_setting(key, str(default)))


# データ保存設定
DATA_DIR = _get_setting("DATA_DIR", "data")

# 乱数・並列設定
DEFAULT_SEED = _get_int("SEED", 20240601)
DEFAULT_WORKERS = _get_int("WORKERS", 1)
ROW_BLOCK_THREADS = _get_int("ROW_BLOCK_THREADS", 1)

# グリッド整合の許容誤差（座標はO(1)なので絶対誤差）
ALIGN_TOLERANCE = 1e-9

# ψ 数値積分
PSI_TOLERANCE = _get_float("PSI_TOLERANCE", 1e-10)
PSI_TAIL_MIN = 10.0
PSI_ASYMPTOTIC_ARG = 30.0

# α̂ のクランプ区間（コントラスト推定用）
ALPHA_CLAMP = (0.05, 1.95)
ALPHA_FRAGILE = 0.05

# パラメータ空間 Ξ のデフォルト
XI_KAPPA = (-5.0, 5.0)
XI_ETA = (-5.0, 5.0)
XI_THETA2_MIN = 1e-3
XI_THETA2_MAX = 5.0
XI_SIGMA2 = (1e-4, 25.0)

# Nelder-Mead設定
NM_LATTICE = _get_int("NM_LATTICE", 3)
NM_MAXITER = _get_int("NM_MAXITER", 4000)
NM_XATOL = 1e-10
NM_FATOL = 1e-16
NM_CONVERGED_DIAMETER = 1e-8

# デスクスケール実験のデフォルト（L=10^4, 250回 の本番規模を縮小）
DEFAULT_TRUNCATION = _get_int("TRUNCATION", 2000)
DEFAULT_REPS = _get_int("REPS", 20)
DEFAULT_N_TIME = 1000
DEFAULT_M_SPACE = 200

# 真値（標準シミュレーション設定）
TRUE_THETA0 = 0.0
TRUE_THETA1 = 0.2
TRUE_ETA1 = 0.2
TRUE_THETA2 = 0.2
TRUE_SIGMA = 1.0
TRUE_ALPHA = 0.5

# フィールドファイル
FIELD_MAGIC = b"SPDE2D01"
