"""Command-line entry point: ``phantomgrad <subcommand> [--config F] [--out D] [--seed N] [--workers N]``.

Every subcommand writes ``<out>/rows.csv`` and ``<out>/manifest.json``.
``--config`` takes a key=value file or a previous ``manifest.json``, in which
case the recorded configuration and seed are replayed. Exit codes: 0 on
success, 2 when any row is flagged as failed, 1 on usage or config errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import eqmodule as eq
from . import experiments as ex
from . import gradoracles as go
from . import training as tr
from .config import (RunManifest, __version__, config_echo, config_hash, derived_seed,
                     parse_config, rng_stream, write_csv)
from .errors import ConfigError, ParameterError, PhantomGradError

log = logging.getLogger("phantomgrad")

EXIT_OK, EXIT_USAGE, EXIT_FLAGGED = 0, 1, 2


@dataclass(frozen=True)
class BenchSpec:
    """Training benchmark grid. ``seed`` drives both dataset and module seeds."""
    train: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(steps=200, batch_size=64,
                                                                         eta0=0.1))
    methods: list[str] = field(default_factory=lambda: [go.IFT, go.NPG, go.UPG])
    k_values: list[int] = field(default_factory=lambda: [5])
    lambda_values: list[float] = field(default_factory=lambda: [0.5])
    seed: int = 0

    def __post_init__(self):
        bad = set(self.methods) - set(go.METHODS)
        if bad:
            raise ParameterError(f"unknown methods {sorted(bad)}")
        if not all(0.0 < lam <= 1.0 for lam in self.lambda_values):
            raise ParameterError("every lambda must lie in (0, 1]")
        if not all(k >= 1 for k in self.k_values):
            raise ParameterError("every k must be >= 1")

    def configs(self) -> list[tr.TrainConfig]:
        base = replace(self.train, dataset_seed=derived_seed(self.seed, "dataset"),
                       module_seed=derived_seed(self.seed, "module"))
        out = []
        for method in self.methods:
            if method in (go.NPG, go.UPG):
                for k in self.k_values:
                    for lam in self.lambda_values:
                        out.append(replace(base, oracle=replace(base.oracle, method=method, k=k, lam=lam)))
            else:
                out.append(replace(base, oracle=replace(base.oracle, method=method)))
        return out


@dataclass(frozen=True)
class FDCheckSpec:
    """Finite-difference check of one oracle on small random instances."""
    oracle: go.GradOracleSpec = field(default_factory=lambda: go.GradOracleSpec(method=go.IFT))
    d: int = 8
    target_L: float = 0.5
    kind: str = eq.AFFINE_TANH
    batch_size: int = 4
    n_seeds: int = 8
    eps_fd: float = 1e-5
    tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.n_seeds < 1 or self.batch_size < 1:
            raise ParameterError("n_seeds and batch_size must be >= 1")
        if not 0.0 < self.target_L < 1.0:
            raise ParameterError("target_L must lie in (0, 1)")


FD_COLUMNS = ("seed", "instance", "config_hash", "method", "max_rel_error", "tol", "failed", "error")


def run_fd_check(spec: FDCheckSpec) -> list[dict]:
    rows = []
    h = config_hash(spec)
    for i in range(spec.n_seeds):
        m = eq.new_synthetic(spec.d, spec.target_L, derived_seed(spec.seed, f"module/{i}"), spec.kind)
        rng = rng_stream(spec.seed, f"data/{i}")
        u = rng.standard_normal((spec.batch_size, spec.d))
        y = rng.standard_normal((spec.batch_size, spec.d))
        row = {"seed": spec.seed, "instance": i, "config_hash": h, "method": spec.oracle.method,
               "tol": spec.tol, "error": ""}
        try:
            err = tr.finite_difference_check(m, u, y, spec.oracle, spec.eps_fd)
            row.update(max_rel_error=err, failed=not err <= spec.tol)
        except PhantomGradError as exc:
            row.update(failed=True, error=type(exc).__name__)
        rows.append(row)
    return rows


COMMANDS = {
    "precision-sweep": ex.SweepSpec,
    "stability": ex.SweepSpec,
    "theory-grid": ex.SweepSpec,
    "train-bench": BenchSpec,
    "fd-check": FDCheckSpec,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phantomgrad", description="Phantom-gradient experiment runners.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "precision-sweep": "cosine of UPG/NPG against the exact gradient over (k, lambda)",
        "stability": "Broyden adjoint traces versus phantom gradients at matched budgets",
        "theory-grid": "ascent-condition and Neumann-error grid on small dense instances",
        "train-bench": "train with several oracles; losses in rows.csv, wall times in timings.csv",
        "fd-check": "finite-difference check of a gradient oracle",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text, description=text)
        s.add_argument("--config", type=Path, help="key=value file or a previous manifest.json")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        s.add_argument("--seed", type=int, help="master seed, overrides the config")
        s.add_argument("--workers", type=int, default=1, help="worker processes (default: 1)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def load_spec(command: str, path: Path | None, seed: int | None):
    """Typed spec for ``command`` from a config file or manifest, with seed override."""
    cls = COMMANDS[command]
    text = ""
    if path is not None:
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            try:
                man = RunManifest.from_json(text)
            except (json.JSONDecodeError, TypeError) as exc:
                raise ConfigError(f"not a run manifest: {exc}") from None
            if man.command != command:
                raise ConfigError(f"manifest was written by {man.command!r}, not {command!r}")
            text = man.config_text()
    spec = parse_config(text, cls)
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be >= 0", key="--seed")
        spec = replace(spec, seed=seed)
    return spec


def execute(command: str, spec, workers: int = 1):
    """Run one subcommand; returns ``(columns, rows, extra_tables)``."""
    if command == "precision-sweep":
        return ex.PRECISION_COLUMNS, ex.run_precision_sweep(spec, workers), {}
    if command == "stability":
        return ex.STABILITY_COLUMNS, ex.run_stability_study(spec, workers=workers), {}
    if command == "theory-grid":
        return ex.THEORY_COLUMNS, ex.run_theory_grid(spec, workers), {}
    if command == "train-bench":
        rows, timings = ex.run_training_benchmark(spec.configs(), workers)
        for r in rows:
            r["seed"] = spec.seed
        return ("seed",) + ex.BENCH_COLUMNS, rows, {"timings.csv": (ex.TIMING_COLUMNS, timings)}
    return FD_COLUMNS, run_fd_check(spec), {}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("phantomgrad: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = load_spec(args.command, args.config, args.seed)
    except (ConfigError, OSError) as exc:
        print(f"phantomgrad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    started = _now()
    columns, rows, extra = execute(args.command, spec, args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "rows.csv", columns, rows)
    for name, (cols, table) in extra.items():
        write_csv(args.out / name, cols, table)
    n_failed = sum(bool(r.get("failed")) for r in rows)
    manifest = RunManifest(
        command=args.command, config=config_echo(spec), seed=spec.seed, started=started,
        finished=_now(), defaults=config_echo(COMMANDS[args.command]()),
        config_hash=config_hash(spec), status={"rows": len(rows), "failed": n_failed},
    )
    (args.out / "manifest.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    print(f"{args.command}: {len(rows)} rows, {n_failed} flagged -> {args.out}")
    return EXIT_FLAGGED if n_failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
