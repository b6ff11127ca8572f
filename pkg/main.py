"""2次元SPDE シミュレーション・推定ツールキット - エントリーポイント"""
import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from src.alpha_qv import AlphaQVError, estimate_alpha, rescaled_cell_sums
from src.contrast_est import ContrastError, clamp_alpha, minimize_contrast
from src.coord_est import CoordEstError, estimate_coordinates
from src.experiment import (
    PRESETS,
    ExperimentConfig,
    ExperimentError,
    config_items,
    load_config,
    parse_value,
    rep_seed,
    run_experiment,
    true_values,
)
from src.field_io import FieldIOError, read_field, write_field
from src.field_sim import FieldSimError, simulate_fields
from src.model_core import ModelCoreError, square_thin_spec, thin
from src.result_processor import ResultProcessor, summarize
from src.special_psi import PsiQuery, SpecialPsiError, psi, psi_closed_form

CLI_ERRORS = (
    ModelCoreError, FieldSimError, SpecialPsiError, AlphaQVError,
    ContrastError, CoordEstError, FieldIOError, ExperimentError,
)

# 設定フィールドのうち説明を個別に付けるもの（他は「設定 KEY を上書き」）
FIELD_HELP = {
    "seed": "マスターシード",
    "reps": "試行回数",
    "workers": "プロセス数",
    "threads": "行ブロック・多点スタートのスレッド数",
    "out": "出力ディレクトリ",
    "alpha": "真の α（推定値は --alpha-hat）",
    "noise": "ノイズ族 Q1 / Q2",
    "xi_kappa": "Ξ の κ 区間 lo,hi",
    "xi_eta": "Ξ の η 区間 lo,hi",
    "xi_sigma2": "Ξ の σ² 区間 lo,hi",
}


def _banner(title: str):
    print("=" * 50)
    print(title)
    print("=" * 50)


def _config_from_args(args):
    overrides = {
        f.name: parse_value(f.name, getattr(args, f.name))
        for f in fields(ExperimentConfig)
        if getattr(args, f.name, None) is not None
    }
    return load_config(args.config, preset_name=args.preset, **overrides)


def cmd_simulate(args) -> int:
    """α・コントラスト・座標の各グリッドで標本場を1本シミュレーションして保存"""
    config = _config_from_args(args)
    _banner("SPDE 標本場シミュレーション")
    seed = rep_seed(config.seed, args.rep)
    print(f"L=({config.trunc_l1},{config.trunc_l2}), N={config.n_time}, scheme={config.scheme}, seed={seed}")

    print("\n[1/2] シミュレーション中...")
    records = simulate_fields(
        config.params, config.trunc, config.grids(),
        scheme=config.scheme, seed=seed, mode=config.synthesis,
        substeps=config.substeps, threads=config.threads,
    )

    print("\n[2/2] ファイル保存中...")
    provenance = {"config": config_items(config), "rep": args.rep}
    for name, record in records.items():
        record = replace(record, metadata={**record.metadata, **provenance})
        path = write_field(record, Path(config.out) / f"field_{name}_rep{args.rep}.bin")
        print(f"  {name}: {path} shape={record.values.shape}")
    return 0


def cmd_alpha(args) -> int:
    """フィールドファイルから α̂ を推定"""
    record = read_field(args.field)
    spec = square_thin_spec(record.grid, m=args.m)
    b = args.b if args.b is not None else spec.margin
    estimate = estimate_alpha(record, b, spec.m1, args.p)
    print(f"alpha_hat = {estimate.value:.10f}")
    print(f"  ms_fine = {estimate.ms_fine:.6e}, ms_coarse = {estimate.ms_coarse:.6e}, in_range = {estimate.in_range}")
    return 0


def cmd_contrast(args) -> int:
    """フィールドファイルと α̂ から ϑ̂ を推定"""
    config = _config_from_args(args)
    record = read_field(args.field)
    view = thin(record, square_thin_spec(record.grid, n=args.n, m=args.m))
    alpha_used, _ = clamp_alpha(args.alpha_hat)
    stats = rescaled_cell_sums(view, alpha_used)
    result = minimize_contrast(
        stats, config.xi_for(view.r), view.r, args.alpha_hat, config.family,
        lattice=config.lattice, threads=config.threads, tol=config.psi_tol,
    )
    kappa, eta, theta2, sigma2 = result.vartheta_hat
    print(f"view = (n={view.spec.n}, m={view.spec.m1}), r = {view.r:.6f}, "
          f"alpha = {result.alpha_used:.6f}{' (clamped)' if result.alpha_clamped else ''}")
    print(f"kappa = {kappa:.8f}, eta = {eta:.8f}, theta2 = {theta2:.8f}, sigma2 = {sigma2:.8f}")
    print(f"theta1 = {result.theta1:.8f}, eta1 = {result.eta1:.8f}")
    print(f"objective = {result.objective:.6e}, converged = {result.converged}, iterations = {result.iterations}")
    return 0


def cmd_coord(args) -> int:
    """フィールドファイル・ϑ̂・α̂ から座標プラグイン推定"""
    config = _config_from_args(args)
    record = read_field(args.field)
    vartheta = tuple(float(v) for v in args.vartheta.split(","))
    if len(vartheta) != 4:
        print("エラー: --vartheta は kappa,eta,theta2,sigma2 の4値で指定してください")
        return 2
    estimates = estimate_coordinates(record, vartheta, args.alpha_hat, config.family, n=args.n)
    for key, value in estimates.as_dict().items():
        if value is not None:
            print(f"{key} = {value:.8f}")
    for mode, value in estimates.qv.items():
        print(f"qv{mode[0]}{mode[1]} = {value:.6e}")
    for key, value in estimates.rate.items():
        print(f"{key} = {value:.6e}")
    return 0


def cmd_psi(args) -> int:
    """ψ_{r,α}(θ₂) の数値積分と閉形式の比較表"""
    config = _config_from_args(args)
    _banner(f"ψ_{{r,α}}(θ₂) 数値積分 vs 閉形式 (θ₂={config.theta2})")
    for r in args.r:
        for alpha in args.alphas:
            report = psi(PsiQuery(r, alpha, config.theta2), config.psi_tol)
            closed = psi_closed_form(r, alpha, config.theta2)
            print(
                f"  r={r:<5} α={alpha:<5} ψ={report.value:.12f} 閉形式={closed:.12f} "
                f"差={abs(report.value - closed):.1e} 誤差限界={report.abs_error_bound:.1e} "
                f"評価回数={report.nodes_used}"
            )
    return 0


def cmd_mc(args) -> int:
    """モンテカルロ実験を実行して CSV と要約を保存"""
    config = _config_from_args(args)
    _banner(f"モンテカルロ実験 ({config.label})")
    print(f"試行回数: {config.reps}, シード: {config.seed}, ノイズ: {config.noise}")
    print(f"α段階: b={config.alpha_b}, m={config.alpha_m}, p={config.alpha_p}")
    print(f"コントラスト段階: b={config.contrast_b}, m={config.contrast_m}, n={config.contrast_n}")
    print(f"座標段階: M={config.coord_m}, n={config.coord_n}")

    print("\n[1/3] 実験実行中...")
    record = run_experiment(config)

    print("\n[2/3] 結果保存中...")
    processor = ResultProcessor(config.out)
    paths = processor.save_run(record)
    for key, path in paths.items():
        if path is not None:
            print(f"  {key}: {path}")

    print("\n[3/3] 要約")
    _print_summary(record.rows, true_values(config))
    return 0


def cmd_summarize(args) -> int:
    """保存済み CSV を要約"""
    processor = ResultProcessor(args.out)
    rows = processor.load_from_csv(args.input)
    if rows.empty:
        print(f"エラー: CSV が読み込めません: {args.input}")
        return 1
    _print_summary(rows, None)
    return 0


def _print_summary(rows, truth):
    summary = summarize(rows, truth)
    print()
    _banner("推定結果サマリー")
    print(summary.format())


def _add_config_options(parser: argparse.ArgumentParser):
    """ExperimentConfig の各フィールドに対応する --kebab-case オプション"""
    group = parser.add_argument_group("設定の上書き（--config・--preset より優先）")
    for f in fields(ExperimentConfig):
        group.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            metavar=f.name.upper(),
            help=FIELD_HELP.get(f.name, f"設定 {f.name.upper()} を上書き"),
        )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="KEY=VALUE 形式の設定ファイル")
    common.add_argument("--preset", choices=sorted(PRESETS), help="土台にする標準実験の設定")
    common.add_argument("--verbose", action="store_true", help="DEBUGログを表示")
    _add_config_options(common)

    parser = argparse.ArgumentParser(
        description="2次元放物型SPDE シミュレーション・推定ツールキット",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  python main.py mc --preset case1 --reps 20 --seed 1
  python main.py mc --config case3.env --workers 8 --noise Q2 --mu0 0
  python main.py simulate --out data/fields --trunc-l1 500 --trunc-l2 500
  python main.py alpha --field data/fields/field_alpha_rep0.bin
  python main.py contrast --field data/fields/field_contrast_rep0.bin --alpha-hat 0.5
  python main.py psi --r 0.1 0.3 --alphas 0.5 1.0
  python main.py summarize --input data/mc_case1_seed1.csv
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="標本場のシミュレーション")
    p.add_argument("--rep", type=int, default=0, help="試行番号（シード混合に使用）")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("alpha", parents=[common], help="α̂ の推定")
    p.add_argument("--field", required=True, help="フィールドファイル")
    p.add_argument("--b", type=float, help="マージン（デフォルト: グリッドの margin）")
    p.add_argument("--m", type=int, help="細かいビューの分割数（デフォルト: gcd(M1, M2)）")
    p.add_argument("--p", type=int, default=2, help="粗視化倍率")
    p.set_defaults(func=cmd_alpha)

    p = sub.add_parser("contrast", parents=[common], help="ϑ̂ の最小コントラスト推定")
    p.add_argument("--field", required=True, help="フィールドファイル")
    p.add_argument("--alpha-hat", type=float, required=True, help="α̂")
    p.add_argument("--n", type=int, help="間引き後の時間ステップ数")
    p.add_argument("--m", type=int, help="間引き後の空間分割数（デフォルト: gcd(M1, M2)）")
    p.set_defaults(func=cmd_contrast)

    p = sub.add_parser("coord", parents=[common], help="座標プラグイン推定")
    p.add_argument("--field", required=True, help="一様グリッドのフィールドファイル")
    p.add_argument("--alpha-hat", type=float, required=True, help="α̂")
    p.add_argument("--vartheta", required=True, help="kappa,eta,theta2,sigma2")
    p.add_argument("--n", type=int, help="間引き後の時間ステップ数")
    p.set_defaults(func=cmd_coord)

    p = sub.add_parser("mc", parents=[common], help="モンテカルロ実験")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("psi", parents=[common], help="ψ の数値積分と閉形式の比較")
    p.add_argument("--r", type=float, nargs="+", default=[0.1, 0.3, 1.0], help="縦横比 r")
    p.add_argument("--alphas", type=float, nargs="+", default=[0.25, 0.5, 1.0, 1.5], help="α の一覧")
    p.set_defaults(func=cmd_psi)

    p = sub.add_parser("summarize", parents=[common], help="結果CSVの要約")
    p.add_argument("--input", required=True, help="結果CSV")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    """メイン関数"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.func(args)
    except CLI_ERRORS as e:
        print(f"エラー: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
