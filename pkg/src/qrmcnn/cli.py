"""Command-line pipeline: synth, qrm, features, train, tune, evaluate, baseline, report.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 missing
prerequisite column.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cnn, features, market_data, qrm, strategy
from .config import ConfigError, PipelineConfig

log = logging.getLogger("qrmcnn")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_PREREQ = 0, 2, 3, 4
REPORT_JSON = "report.json"
METHOD_NAMES = {"approach_1_0": "CNN App 1.0", "approach_1_1": "CNN App 1.1"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- io helpers

def _read_text(path: str | Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from exc


def _write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write {path}: {exc}") from exc


def _load_quotes(path) -> list[market_data.OptionQuoteRow]:
    try:
        result = market_data.parse_quotes(io.StringIO(_read_text(path)))
    except market_data.QuoteError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from exc
    for rej in result.rejected:
        log.warning("%s line %d (%s) rejected: %s", path, rej.line, rej.row_id, "; ".join(rej.reasons))
    return result.accepted


def _dump_quotes(rows, with_qrm: bool) -> str:
    buf = io.StringIO()
    market_data.write_quotes(rows, buf, with_qrm=with_qrm)
    return buf.getvalue()


def _load_features(path) -> features.FeatureTable:
    try:
        return features.read_features(io.StringIO(_read_text(path)))
    except (features.FeatureError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: not a features file ({exc})") from exc


def _load_model(path) -> cnn.CnnModel:
    try:
        return cnn.load_model(io.StringIO(_read_text(path)))
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: not a saved model ({exc})") from exc


def _trace_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.name + ".trace.csv")


def _load_trace(path) -> cnn.TrainingTrace:
    try:
        return strategy.read_trace(io.StringIO(_read_text(path)))
    except (ValueError, IndexError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: not a loss trace ({exc})") from exc


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, cfg: PipelineConfig) -> int:
    rows = market_data.generate_synthetic(cfg.synthetic())
    _write_text(args.out, _dump_quotes(rows, with_qrm=False))
    log.info("wrote %d synthetic rows to %s", len(rows), args.out)
    return EXIT_OK


def _solve_row(job: tuple[market_data.OptionQuoteRow, qrm.SolverConfig, bool]) -> tuple[market_data.OptionQuoteRow, str]:
    row, solver, wanted = job
    if not wanted:
        return row, ""
    try:
        sol = qrm.solve(qrm.build_problem(row, solver), solver.cg_tol, solver.cg_max_iter)
    except (qrm.QrmError, qrm.NoConvergence) as exc:
        return row, f"{row.row_id}: {type(exc).__name__}: {exc}"
    try:
        err_1, err_2 = qrm.minimizer_error(sol, row)
    except qrm.QrmError:
        err_1 = err_2 = None
    return dataclasses.replace(row, est_p1=sol.est_1, est_p2=sol.est_2, minimizer_error_p1=err_1,
                               minimizer_error_p2=err_2, residual_norm=sol.residual_norm), ""


def cmd_qrm(args, cfg: PipelineConfig) -> int:
    rows = _load_quotes(args.input)
    solver = cfg.solver()
    jobs = [(r, solver, r.is_call or not cfg["qrm.calls_only"]) for r in rows]
    workers = cfg["qrm.workers"]
    if workers > 1 and len(jobs) > 1:
        chunk = max(1, len(jobs) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_row, jobs, chunksize=chunk))
    else:
        results = [_solve_row(job) for job in jobs]
    for _, problem in results:
        if problem:
            log.warning("qrm solve failed, row left unfilled: %s", problem)
    _write_text(args.out, _dump_quotes([r for r, _ in results], with_qrm=True))
    solved = sum(1 for (_, problem), (_, _, wanted) in zip(results, jobs) if wanted and not problem)
    log.info("solved %d of %d rows", solved, len(rows))
    return EXIT_OK


def cmd_features(args, cfg: PipelineConfig) -> int:
    rows = [r for r in _load_quotes(args.input) if r.is_call]
    examples, missing_est = [], 0
    for r in rows:
        try:
            examples.append(features.build_example(r))
        except features.MissingField as exc:
            missing_est += exc.name in ("est_p1", "est_p2")
            log.warning("skipped: %s", exc)
        except features.FeatureError as exc:
            log.warning("skipped %s: %s", r.row_id, exc)
    if not examples:
        if missing_est:
            raise CliError(EXIT_PREREQ, f"{args.input}: no row has est_p1/est_p2; run 'qrm' first")
        raise CliError(EXIT_INPUT, f"{args.input}: no usable call rows")
    part = features.split(examples, cfg.seed_for("features.split_seed"), cfg["features.split_mode"])
    buf = io.StringIO()
    features.write_features([e for group in part for e in group], buf)
    _write_text(args.out, buf.getvalue())
    log.info("features: %d train, %d validation, %d test", *map(len, part))
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    table = _load_features(args.features)
    tr, va = table.subset("train"), table.subset("validation")
    if len(tr) == 0:
        raise CliError(EXIT_INPUT, f"{args.features}: no training rows")
    model = cnn.init(cfg.cnn())
    try:
        fitted, trace = cnn.train(model, tr.X, tr.y, va.X if len(va) else None, va.y if len(va) else None)
    except cnn.DivergenceDetected as exc:
        raise CliError(EXIT_CONFIG, f"training diverged ({exc}); lower cnn.lr") from exc
    buf = io.StringIO()
    cnn.save_model(fitted, buf)
    _write_text(args.model, buf.getvalue())
    buf = io.StringIO()
    strategy.write_trace(trace, buf)
    _write_text(args.trace or _trace_path(args.model), buf.getvalue())
    accuracy = float(np.mean(cnn.predict_batch(fitted, tr.X, 0.5) == tr.y))
    print(f"train accuracy: {accuracy:.4f}")
    if trace.train_loss:
        print(f"final train loss: {trace.train_loss[-1]:.6f}")
    return EXIT_OK


def _tune(model: cnn.CnnModel, table: features.FeatureTable, source) -> tuple[float, float]:
    va = table.subset("validation")
    if len(va) == 0:
        raise CliError(EXIT_PREREQ, f"{source}: no validation rows to tune the threshold on")
    c = cnn.tune_threshold(model, va.X, va.y)
    return c, float(np.mean(cnn.predict_batch(model, va.X, c) == va.y))


def cmd_tune(args, cfg: PipelineConfig) -> int:
    model = _load_model(args.model)
    c, acc = _tune(model, _load_features(args.features), args.features)
    _write_text(args.out, json.dumps({"threshold": c, "validation_accuracy": acc}, sort_keys=True) + "\n")
    print(f"threshold: {c:.2f} (validation accuracy {acc:.4f})")
    return EXIT_OK


def _read_threshold(path) -> float:
    try:
        c = float(json.loads(_read_text(path))["threshold"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: not a threshold file ({exc})") from exc
    if not 0 < c < 1:
        raise CliError(EXIT_INPUT, f"{path}: threshold {c} outside (0, 1)")
    return c


def _emit_reports(reports: list[strategy.EvaluationReport], out: Path, trace) -> None:
    try:
        strategy.report_tables(reports, out, trace)
    except strategy.IoFailure as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    doc = {"reports": [r.to_dict() for r in reports]}
    _write_text(out / REPORT_JSON, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _guard_existing(out: Path, force: bool) -> None:
    existing = [name for name in strategy.REPORT_FILES + (REPORT_JSON,) if (out / name).exists()]
    if existing and not force:
        raise CliError(EXIT_CONFIG, f"{out} already holds a report ({existing[0]}); "
                                    "testing happens once, pass --force to overwrite")


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    _guard_existing(out, args.force)
    model = _load_model(args.model)
    table = _load_features(args.features)
    te = table.subset("test")
    if len(te) == 0:
        raise CliError(EXIT_INPUT, f"{args.features}: no test rows")
    c = _read_threshold(args.threshold_file) if args.threshold_file else _tune(model, table, args.features)[0]
    trace_path = args.trace or _trace_path(args.model)
    trace = _load_trace(trace_path) if Path(trace_path).exists() else None
    decisions = cnn.predict_batch(model, te.X, c)
    name = METHOD_NAMES.get(model.config.variant, model.config.variant)
    _emit_reports([strategy.evaluate(decisions, te.y, c, name)], out, trace)
    return EXIT_OK


def cmd_baseline(args, cfg: PipelineConfig) -> int:
    rows = [r for r in _load_quotes(args.quotes) if r.is_call]
    usable = [r for r in rows if r.est_p1 is not None and r.option_mean_p1 is not None]
    if not any(r.est_p1 is not None for r in rows):
        raise CliError(EXIT_PREREQ, f"{args.quotes}: no row has est_p1; run 'qrm' first")
    if len(usable) < len(rows):
        log.warning("baseline skipped %d rows lacking est_p1 or option_mean_p1", len(rows) - len(usable))
    if not usable:
        raise CliError(EXIT_INPUT, f"{args.quotes}: no row carries both est_p1 and option_mean_p1")
    decisions = [strategy.qrm_decision(r) for r in usable]
    labels = [strategy.direction_label(r) for r in usable]
    _emit_reports([strategy.evaluate(decisions, labels, None, "QRM")], Path(args.out), None)
    return EXIT_OK


def cmd_report(args, cfg: PipelineConfig) -> int:
    reports = []
    for path in args.reports:
        try:
            doc = json.loads(_read_text(path))
            reports += [strategy.EvaluationReport.from_dict(d) for d in doc["reports"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_INPUT, f"{path}: not a report file ({exc})") from exc
    if not reports:
        raise CliError(EXIT_INPUT, "no reports given")
    trace = _load_trace(args.trace) if args.trace else None
    _emit_reports(reports, Path(args.out), trace)
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'dotted.key = value' config file")
    common.add_argument("--seed", type=int, help="global seed (used where no module seed is set)")
    common.add_argument("--workers", type=int, help="worker processes for qrm solves")
    common.add_argument("--force", action="store_true", help="overwrite an existing report")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="qrmcnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic quote CSV")
    p.add_argument("out")
    p.add_argument("-n", "--n-options", type=int, help="number of option-days")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("qrm", parents=[common], help="fill est/minimizer-error columns")
    p.add_argument("input")
    p.add_argument("out")
    p.set_defaults(func=cmd_qrm)

    p = sub.add_parser("features", parents=[common], help="build normalized features and the split")
    p.add_argument("input")
    p.add_argument("out")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[common], help="train the CNN on the train group")
    p.add_argument("features")
    p.add_argument("model")
    p.add_argument("--trace", help="loss trace CSV (default: MODEL.trace.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", parents=[common], help="pick the threshold on the validation group")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("evaluate", parents=[common], help="score the test group once")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("out", help="report directory")
    p.add_argument("--threshold-file", help="output of 'tune' (default: tune on validation now)")
    p.add_argument("--trace", help="loss trace CSV (default: MODEL.trace.csv when present)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", parents=[common], help="score the QRM buy rule")
    p.add_argument("quotes")
    p.add_argument("out", help="report directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", parents=[common], help="combine saved reports into one set of tables")
    p.add_argument("out", help="report directory")
    p.add_argument("reports", nargs="+", help="report.json files from evaluate/baseline")
    p.add_argument("--trace", help="loss trace CSV to include")
    p.set_defaults(func=cmd_report)
    return parser


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.workers is not None:
        out["qrm.workers"] = str(args.workers)
    if getattr(args, "n_options", None) is not None:
        out["synth.n_options"] = str(args.n_options)
    return out


def _configure_logging(verbose: bool) -> None:
    # replace our own handler on every call so repeated in-process runs log to the current stderr
    for handler in [h for h in log.handlers if getattr(h, "_qrmcnn", False)]:
        log.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._qrmcnn = True
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        cfg = PipelineConfig.load(args.config, _overrides(args))
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CliError as exc:
        log.error("%s", exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
