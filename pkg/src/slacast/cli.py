"""Command-line entry point: ``slacast gen|features|train|eval``.

Exit codes
----------
0 success, 2 configuration error, 3 I/O error, 4 telemetry validation failure,
5 training divergence, 6 checkpoint or version mismatch.

stdout carries only the summary table (or the JSON report for ``features``);
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .features import CORRELATION_THRESHOLD, FeatureError, feature_report
from .pipeline import (
    Experiment,
    NonFiniteLoss,
    PipelineError,
    evaluate,
    rebuild_test,
    report_rows,
    rows_to_csv,
    run_experiment,
    summary_table,
)
from .synthgen import ConfigError, ScenarioConfig, generate_scenario, scenario_echo
from .telemetry import (
    GapError,
    SliceKind,
    TelemetryError,
    load_telemetry,
    require_complete,
    save_handovers,
    save_telemetry,
)

log = logging.getLogger("slacast")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_DIVERGENCE = 5
EXIT_CHECKPOINT = 6

TELEMETRY_FILE = "telemetry.csv"
HANDOVER_FILE = "handovers.csv"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise CliError(EXIT_CONFIG, f"{path}: top level must be an object")
    return d


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """``manifest.json`` written when a run starts and finalised when it ends."""

    def __init__(self, out_dir: Path, command: str, config: dict, seed, inputs: list[Path]):
        self.path = out_dir / "manifest.json"
        self.data = {
            "command": command,
            "toolkit_version": __version__,
            "seed": seed,
            "config": config,
            "inputs": {str(p): _digest(p) for p in inputs if p.exists()},
            "stages": {},
            "status": "running",
        }
        self._write()

    def stage(self, name: str, seconds: float) -> None:
        self.data["stages"][name] = round(seconds, 6)

    def finish(self, status: str = "ok") -> None:
        self.data["status"] = status
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _load_store(data_dir: Path):
    tpath = data_dir / TELEMETRY_FILE
    hpath = data_dir / HANDOVER_FILE
    if not tpath.exists():
        raise CliError(EXIT_IO, f"missing {tpath}")
    try:
        return load_telemetry(tpath, hpath if hpath.exists() else None)
    except TelemetryError as exc:
        raise CliError(EXIT_VALIDATION, f"invalid telemetry: {exc}") from None


def _validate(store) -> None:
    try:
        require_complete(store)
    except GapError as exc:
        raise CliError(EXIT_VALIDATION, f"telemetry has gaps: {exc}") from None
    for (cell, sl), s in store.series.items():
        if (s.f0 < 0).any():
            raise CliError(EXIT_VALIDATION, f"{cell}/{sl.value}: negative F0 values")


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {path}: {exc}") from None
    return path


def cmd_gen(args) -> int:
    raw = _read_json(args.config)
    try:
        config = ScenarioConfig.from_dict(raw)
    except (ConfigError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    out = _ensure_dir(Path(args.out))
    t0 = time.perf_counter()
    store = generate_scenario(config)
    try:
        save_telemetry(store, out / TELEMETRY_FILE)
        save_handovers(store.handovers, out / HANDOVER_FILE)
        (out / "scenario.json").write_text(json.dumps(scenario_echo(config), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"write failed: {exc}") from None
    log.info("generated %d series x %d hours in %.2fs", len(store), config.hours, time.perf_counter() - t0)
    print(f"{len(store)} series, {config.hours} hours -> {out}")
    return 0


def cmd_features(args) -> int:
    store = _load_store(Path(args.data))
    _validate(store)
    if args.config:
        exp = _experiment(args.config)
        split = exp.folds.splits(next(iter(store.series.values())).length)[args.fold]
        train_range = split.train_ranges
        threshold = exp.threshold
    else:
        train_range = ((0, next(iter(store.series.values())).length),)
        threshold = args.threshold
    reports = []
    for cell in store.cells():
        for sl in store.slices_of(cell):
            if args.slice and sl.value != args.slice:
                continue
            try:
                reports.append(feature_report(store, cell, sl, train_range, threshold))
            except FeatureError as exc:
                log.warning("%s/%s: %s", cell, sl.value, exc)
    text = json.dumps({"train_ranges": [list(r) for r in train_range], "series": reports}, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _experiment(path) -> Experiment:
    raw = _read_json(path)
    try:
        return Experiment.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None


def _run_one(store, exp: Experiment, ckpt_dir: Path):
    return run_experiment(store, exp, ckpt_dir)


def cmd_train(args) -> int:
    exp = _experiment(args.config)
    data_dir = Path(args.data)
    out = _ensure_dir(Path(args.out))
    manifest = Manifest(out, "train", exp.to_dict(), exp.train.seed,
                        [Path(args.config), data_dir / TELEMETRY_FILE, data_dir / HANDOVER_FILE])
    try:
        t0 = time.perf_counter()
        store = _load_store(data_dir)
        _validate(store)
        manifest.stage("load", time.perf_counter() - t0)
        ckpt = _ensure_dir(out / "checkpoints")
        t0 = time.perf_counter()
        try:
            if args.parallel > 1 and len(exp.cells or store.cells()) > 1 and exp.arch.value.startswith("single"):
                rows = _train_parallel(store, exp, ckpt, args.parallel)
            else:
                rows = run_experiment(store, exp, ckpt).rows
        except NonFiniteLoss as exc:
            raise CliError(EXIT_DIVERGENCE, f"training diverged: {exc}") from None
        except (PipelineError, FeatureError, TelemetryError) as exc:
            raise CliError(EXIT_VALIDATION, f"cannot build datasets: {exc}") from None
        manifest.stage("train", time.perf_counter() - t0)
        (out / "report.csv").write_text(rows_to_csv(rows))
        (out / "summary.txt").write_text(summary_table(rows) + "\n")
        print(summary_table(rows))
    except CliError:
        manifest.finish("failed")
        raise
    manifest.finish()
    return 0


def _train_parallel(store, exp: Experiment, ckpt: Path, workers: int) -> list[dict]:
    from dataclasses import replace

    from .pipeline import _sort_key

    cells = exp.cells or store.cells()
    jobs = [replace(exp, cells=[c]) for c in cells]
    rows: list[dict] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for res in pool.map(_run_one, [store] * len(jobs), jobs, [ckpt] * len(jobs)):
            rows.extend(res.rows)
    rows.sort(key=_sort_key)
    return rows


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise CliError(EXIT_CHECKPOINT, f"cannot read checkpoint: {exc}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from None
    store = _load_store(Path(args.data))
    _validate(store)
    horizons = [int(h) for h in args.horizons.split(",")]
    try:
        test = rebuild_test(store, model)
        rep = evaluate(model, test, horizons)
    except (PipelineError, FeatureError, KeyError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint does not match data: {exc}") from None
    label = model.model_kind.value if model.loss.value == "wmae" else f"baseline_{model.loss.value}"
    rows = report_rows(rep, model, label, include_mean=False)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slacast", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    p.add_argument("--version", action="version", version=f"slacast {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic telemetry")
    g.add_argument("config", help="scenario JSON")
    g.add_argument("out", help="output directory")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("features", help="per-cell feature report (JSON)")
    f.add_argument("data", help="directory holding telemetry.csv / handovers.csv")
    f.add_argument("--config", help="experiment JSON; its fold spec picks the training range")
    f.add_argument("--fold", type=int, default=0)
    f.add_argument("--threshold", type=float, default=CORRELATION_THRESHOLD)
    f.add_argument("--slice", choices=[s.value for s in SliceKind])
    f.add_argument("--out")
    f.set_defaults(func=cmd_features)

    t = sub.add_parser("train", help="train, calibrate and report")
    t.add_argument("config", help="experiment JSON")
    t.add_argument("data", help="directory holding telemetry.csv / handovers.csv")
    t.add_argument("out", help="output directory")
    t.add_argument("--parallel", type=int, default=1, help="worker processes (1 = bit-reproducible)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint at several horizons")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--horizons", default="1,2,4,8,24")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
