"""Command-line front end: fit, backtest, impute and embed subcommands.

Every run writes a ``manifest.json`` into the output directory with the
echoed configuration, the seed and content hashes of all inputs, so a run
can be reproduced exactly.  Exit codes: 0 success, 1 numerical failure,
2 input/validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import pandas as pd

from . import data as data_mod
from .errors import NumericalError, ValidationError
from .finance import BacktestConfig, backtest
from .kernels import KERNEL_KINDS, KernelSpec, assemble_covariance
from .model import PriorConfig
from .predict import export_embedding, loocv_impute
from .vi import (
    FitConfig,
    FitResult,
    fit,
    fit_result_from_dict,
    fit_result_to_dict,
    select_latent_dim,
)

MODEL_FORMAT_VERSION = 1
ESTIMATOR_CHOICES = "linear,se,exp,m32,sample,ledoit,equal"


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: list[str], outputs: list[str]) -> None:
    parameters = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and v is not None
    }
    manifest = {
        "command": command,
        "parameters": parameters,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": sorted(outputs),
    }
    _write_json(out_dir / "manifest.json", manifest)


def _require_file(path: str | None, flag: str) -> str:
    if path is None:
        raise ValidationError(f"{flag} is required for this command")
    if not os.path.exists(path):
        raise ValidationError(f"input file does not exist: {path}")
    return path


def _load_input_returns(args: argparse.Namespace) -> tuple[data_mod.ReturnMatrix, list[str], list[str]]:
    """Returns (matrix, input_paths, notes)."""
    if (args.prices is None) == (args.returns is None):
        raise ValidationError("provide exactly one of --prices or --returns")
    notes = []
    if args.prices is not None:
        path = _require_file(args.prices, "--prices")
        table, dropped = data_mod.load_prices(path, drop_incomplete=args.drop_incomplete)
        if dropped:
            notes.append(f"dropped incomplete tickers: {', '.join(dropped)}")
        return data_mod.compute_returns(table), [path], notes
    path = _require_file(args.returns, "--returns")
    return data_mod.load_returns(path), [path], notes


def _parse_q_range(text: str) -> list[int]:
    try:
        lo_s, hi_s = text.split("..")
        lo, hi = int(lo_s), int(hi_s)
    except ValueError:
        raise ValidationError(f"--latent-dim-range must look like A..B, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise ValidationError(f"invalid latent dimension range {text!r}")
    return list(range(lo, hi + 1))


def _fit_config(args: argparse.Namespace) -> FitConfig:
    return FitConfig(
        iterations=args.iterations,
        step_size=args.step_size,
        mc_samples=args.mc_samples,
        restarts=args.restarts,
        final_elbo_samples=args.final_elbo_samples,
        seed=args.seed,
    )


def _model_document(result: FitResult, args: argparse.Namespace) -> dict:
    doc = fit_result_to_dict(result)
    doc["format_version"] = MODEL_FORMAT_VERSION
    doc["fit_config"] = {
        "iterations": args.iterations,
        "step_size": args.step_size,
        "mc_samples": args.mc_samples,
        "restarts": args.restarts,
        "final_elbo_samples": args.final_elbo_samples,
        "seed": args.seed,
    }
    return doc


def _load_model(path: str) -> FitResult:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported model format version {version}")
    return fit_result_from_dict(doc)


def _write_covariance_csv(path: Path, result: FitResult) -> None:
    cov = assemble_covariance(
        result.kernel, result.point_params.latents, result.point_params.hyper
    )
    tickers = result.tickers or tuple(f"A{i:03d}" for i in range(cov.n_assets))
    frame = pd.DataFrame(cov.matrix, index=list(tickers), columns=list(tickers))
    frame.index.name = "ticker"
    frame.to_csv(path, float_format="%.12g")


def cmd_fit(args: argparse.Namespace) -> int:
    returns, inputs, notes = _load_input_returns(args)
    cfg = _fit_config(args)
    prior = PriorConfig()
    spec = KernelSpec(kind=args.kernel)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    lines = list(notes)
    if args.latent_dim_range is not None:
        q_range = _parse_q_range(args.latent_dim_range)
        selection = select_latent_dim(returns, spec, q_range, cfg, prior, workers=args.threads)
        lines.append("latent dimension sweep:")
        lines.append(f"{'Q':>4}  {'ELBO':>16}  {'stderr':>10}")
        for entry in selection.table:
            star = " *" if entry.latent_dim == selection.best_latent_dim else ""
            if entry.fit is None:
                lines.append(f"{entry.latent_dim:>4}  {'failed':>16}  {entry.error}")
            else:
                lines.append(
                    f"{entry.latent_dim:>4}  {entry.elbo:>16.4f}  {entry.stderr:>10.4f}{star}"
                )
        result = next(e.fit for e in selection.table if e.latent_dim == selection.best_latent_dim)
        table_doc = [
            {
                "latent_dim": e.latent_dim,
                "elbo": None if e.fit is None else e.elbo,
                "stderr": None if e.fit is None else e.stderr,
                "selected": e.latent_dim == selection.best_latent_dim,
            }
            for e in selection.table
        ]
        if args.format == "json":
            _write_json(out_dir / "elbo_by_q.json", {"table": table_doc})
            outputs.append("elbo_by_q.json")
        else:
            pd.DataFrame(table_doc).to_csv(out_dir / "elbo_by_q.csv", index=False)
            outputs.append("elbo_by_q.csv")
    else:
        result = fit(returns, spec, args.latent_dim, cfg, prior, workers=args.threads)

    _write_json(out_dir / "model.json", _model_document(result, args))
    _write_covariance_csv(out_dir / "covariance.csv", result)
    outputs += ["model.json", "covariance.csv"]

    lines.append(
        f"kernel={spec.kind} latent_dim={result.latent_dim} "
        f"final_elbo={result.final_elbo:.4f} (stderr {result.final_elbo_stderr:.4f}) "
        f"winning_restart={result.restart_index}/{len(result.restart_elbos)}"
    )
    summary = "\n".join(lines) + "\n"
    (out_dir / "fit_summary.txt").write_text(summary)
    outputs.append("fit_summary.txt")
    sys.stdout.write(summary)
    _write_manifest(out_dir, "fit", args, inputs, outputs)
    return 0


def cmd_backtest(args: argparse.Namespace) -> int:
    returns, inputs, notes = _load_input_returns(args)
    cfg = BacktestConfig(
        estimators=tuple(t.strip() for t in args.estimators.split(",") if t.strip()),
        train_days=args.train_days,
        hold_days=args.hold_days,
        weight_cap=args.weight_cap,
        latent_dim=args.latent_dim,
    )
    report = backtest(returns, cfg, _fit_config(args), workers=args.threads)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "backtest_report.json", report.to_dict())
    rows = report.table_rows()
    pd.DataFrame(rows).to_csv(out_dir / "backtest_table.csv", index=False, float_format="%.6g")
    for note in notes:
        print(note)
    print(pd.DataFrame(rows).to_string(index=False))
    _write_manifest(out_dir, "backtest", args, inputs, ["backtest_report.json", "backtest_table.csv"])
    return 0


def _check_ticker_alignment(result: FitResult, returns: data_mod.ReturnMatrix) -> data_mod.ReturnMatrix:
    if result.tickers is None:
        return returns
    model_set = set(result.tickers)
    data_set = set(returns.tickers)
    if model_set != data_set:
        offenders = sorted(model_set.symmetric_difference(data_set))
        raise ValidationError(f"ticker mismatch between model and data: {offenders}")
    order = [returns.tickers.index(t) for t in result.tickers]
    return data_mod.ReturnMatrix(
        tickers=result.tickers, dates=returns.dates, values=returns.values[order]
    )


def cmd_impute(args: argparse.Namespace) -> int:
    model_path = _require_file(args.model, "--model")
    returns_path = _require_file(args.returns, "--returns")
    result = _load_model(model_path)
    test = _check_ticker_alignment(result, data_mod.load_returns(returns_path))
    cov = assemble_covariance(
        result.kernel,
        result.point_params.latents,
        result.point_params.hyper,
        tickers=result.tickers,
    )
    report = loocv_impute(test, cov, baseline_means=result.train_means)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "r2": report.r2,
        "mean_abs_deviation": report.mean_abs_deviation,
        "baseline_r2": report.baseline_r2,
        "baseline_mean_abs_deviation": report.baseline_mean_abs_deviation,
        "per_asset_r2": {
            t: (None if math.isnan(v) else v)
            for t, v in zip(report.tickers, report.per_asset_r2)
        },
    }
    _write_json(out_dir / "imputation_report.json", summary)
    cells = []
    for i, ticker in enumerate(report.tickers):
        for j, day in enumerate(report.dates):
            cells.append(
                {
                    "ticker": ticker,
                    "date": day.isoformat(),
                    "actual": report.actual[i, j],
                    "predicted": report.predicted[i, j],
                    "baseline": report.baseline[i, j],
                }
            )
    pd.DataFrame(cells).to_csv(out_dir / "imputation_cells.csv", index=False, float_format="%.12g")
    print(
        f"imputation r2={report.r2:.4f} mad={report.mean_abs_deviation:.6f} "
        f"baseline_r2={report.baseline_r2:.4f} baseline_mad={report.baseline_mean_abs_deviation:.6f}"
    )
    _write_manifest(
        out_dir, "impute", args, [model_path, returns_path],
        ["imputation_report.json", "imputation_cells.csv"],
    )
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    model_path = _require_file(args.model, "--model")
    result = _load_model(model_path)
    inputs = [model_path]
    sectors = None
    if args.sectors is not None:
        sectors_path = _require_file(args.sectors, "--sectors")
        inputs.append(sectors_path)
        frame = pd.read_csv(sectors_path, dtype=str)
        if frame.shape[1] < 2:
            raise ValidationError(f"{sectors_path}: need ticker and sector columns")
        sectors = dict(zip(frame.iloc[:, 0], frame.iloc[:, 1]))
    table = export_embedding(result, sectors=sectors)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    coords = {f"b{q}": table.coordinates[:, q] for q in range(table.coordinates.shape[1])}
    frame = pd.DataFrame({"ticker": list(table.tickers), **coords})
    if table.sectors is not None:
        frame["sector"] = list(table.sectors)
    if args.format == "json":
        _write_json(out_dir / "embedding.json", {"rows": frame.to_dict(orient="records")})
        outputs = ["embedding.json"]
    else:
        frame.to_csv(out_dir / "embedding.csv", index=False, float_format="%.12g")
        outputs = ["embedding.csv"]
    print(f"wrote embedding for {len(table.tickers)} assets (Q={table.coordinates.shape[1]})")
    _write_manifest(out_dir, "embed", args, inputs, outputs)
    return 0


def _add_common_io(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--prices", help="price table (CSV: date column + one column per ticker)")
    parser.add_argument("--returns", help="return matrix in the same layout")
    parser.add_argument("--drop-incomplete", action="store_true",
                        help="drop tickers missing any date instead of failing")


def _add_fit_params(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--iterations", type=int, default=3000)
    parser.add_argument("--step-size", type=float, default=0.05)
    parser.add_argument("--mc-samples", type=int, default=3)
    parser.add_argument("--restarts", type=int, default=50)
    parser.add_argument("--final-elbo-samples", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for restarts (results are thread-count independent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gplvmcov",
        description="Latent-variable covariance estimation for return series",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the covariance model and export it")
    _add_common_io(p_fit)
    p_fit.add_argument("--kernel", choices=KERNEL_KINDS, required=True)
    p_fit.add_argument("--latent-dim", type=int, default=3)
    p_fit.add_argument("--latent-dim-range", help="inclusive sweep range A..B; picks the ELBO argmax")
    _add_fit_params(p_fit)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--format", choices=("json", "csv"), default="csv")
    p_fit.set_defaults(func=cmd_fit)

    p_bt = sub.add_parser("backtest", help="rolling minimum-variance backtest")
    _add_common_io(p_bt)
    p_bt.add_argument("--estimators", default="linear,se,sample,ledoit,equal",
                      help=f"comma list from {ESTIMATOR_CHOICES}")
    p_bt.add_argument("--train-days", type=int, default=252)
    p_bt.add_argument("--hold-days", type=int, default=126)
    p_bt.add_argument("--weight-cap", type=float, default=0.1)
    p_bt.add_argument("--latent-dim", type=int, default=3)
    _add_fit_params(p_bt)
    p_bt.add_argument("--out", required=True)
    p_bt.add_argument("--format", choices=("json", "csv"), default="csv")
    p_bt.set_defaults(func=cmd_backtest)

    p_imp = sub.add_parser("impute", help="leave-one-out imputation on a test period")
    p_imp.add_argument("--model", required=True, help="model.json written by fit")
    p_imp.add_argument("--returns", required=True, help="test-period return matrix")
    p_imp.add_argument("--out", required=True)
    p_imp.add_argument("--format", choices=("json", "csv"), default="csv")
    p_imp.set_defaults(func=cmd_impute)

    p_emb = sub.add_parser("embed", help="export the latent embedding")
    p_emb.add_argument("--model", required=True, help="model.json written by fit")
    p_emb.add_argument("--sectors", help="optional CSV with ticker,sector columns")
    p_emb.add_argument("--out", required=True)
    p_emb.add_argument("--format", choices=("json", "csv"), default="csv")
    p_emb.set_defaults(func=cmd_embed)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
