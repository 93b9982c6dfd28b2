from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, NoReturn, Sequence

from opentelemetry import trace

from .checks import format_table, run_check_suite
from .config import ObservabilitySettings, RunConfig
from .errors import ConfigError, CrossFVError
from .experiments import (
    build_initial,
    build_mesh,
    build_model,
    resolve_steady,
    run_convergence_study,
    run_decay_study,
)
from .logging import log_json
from .otel import configure_logging, init_otel
from .output import (
    CONVERGENCE_FILE,
    DECAY_FILE,
    SERIES_FILE,
    SeriesWriter,
    SnapshotWriter,
    format_float,
    write_convergence,
    write_decay,
)
from .solver import simulate
from .span import SpanOps

logger = logging.getLogger("crossfv")

TRACER_NAME = "crossfv/cli"
EXIT_OK = 0
EXIT_CHECK_FAILED = 3

CONFIG_HELP = """\
configuration file (INI, `key = value` under `[section]`, `#` starts a comment):

[model]        name = maxwell_stefan | thin_film | tumor | two_species   (required)
               maxwell_stefan: d0, d1, d2 (default 1/0.168, 1/0.68, 1/0.883)
               thin_film: a = rows of the (n+1)x(n+1) table separated by ';'
                          (default 0 1 0.1; 1 0 0; 0.1 0 0), reaction = true|false,
                          reaction_rate (default 1000)
               tumor: beta, theta (theta < 4/sqrt(beta)), delta (default 0)
[mesh]         kind = interval | rectangle | file
               interval: a, b, n_cells    rectangle: lx, ly, nx, ny    file: path
[initial]      preset = testcase1 | testcase2 | steady | constant | blocks
               constant: values = v1 v2 ...
               blocks: background = v1 v2 ..., block1 = x0 x1 y0 y1 | v1 v2 ..., block2 = ...
[time]         t_end, mode = adaptive | fixed, fixed_dt, dt_initial, dt_min, dt_max,
               dt_grow, dt_shrink, newton_tol, newton_max_iter, damping_min, fd_step
[output]       directory (relative to the config file), snapshot_every (0 = final only)
[diagnostics]  steady = auto | none | v1 v2 ...   (steady state of the relative entropy)
[convergence]  reference, ladder = 40 80 160 320, t_end, full_scale (or paper_scale) = true|false
[decay]        nx, ny, t_end, window_start, window_end, initial = testcase2 | steady

exit codes: 0 success, 1 configuration error, 2 solver failure, 3 check-suite failure
"""


def _traced(command: str, body: Callable[[], int]) -> int:
    tracer = trace.get_tracer(TRACER_NAME)
    with tracer.start_as_current_span(f"cli.{command}") as span:
        ops = SpanOps(span)
        start = time.perf_counter()
        try:
            status = body()
        except CrossFVError as err:
            ops.error(err)
            log_json(
                logger,
                f"cli.{command}",
                "command failed",
                level="error",
                fields={"error_code": err.error_code, "error": str(err)},
            )
            print(f"[error] {err.error_code}: {err}", file=sys.stderr)
            return err.exit_code
        ops.attrs({"cli.exit_code": status}).duration_ms((time.perf_counter() - start) * 1000).ok()
        return status


def cmd_run(config_path: str | Path) -> int:
    def body() -> int:
        config = RunConfig.from_file(config_path)
        model = build_model(config.model)
        mesh = build_mesh(config.mesh)
        initial = build_initial(config.initial, mesh, model)
        steady = resolve_steady(config.steady, model, initial, mesh)
        config.output_dir.mkdir(parents=True, exist_ok=True)
        snapshots = SnapshotWriter(config.output_dir, mesh, config.snapshot_every)
        with SeriesWriter(config.output_dir / SERIES_FILE, model.n_species) as series:
            result = simulate(
                initial,
                mesh,
                model,
                config.solver,
                config.t_end,
                observers=[series, snapshots],
                steady=steady,
            )
        snapshots.write(result.final, result.reports[-1].step)
        log_json(
            logger,
            "cli.run",
            "run finished",
            fields={"output_dir": str(config.output_dir), "steps": result.accepted_steps, "t": result.final.t},
        )
        print(f"[run] {result.accepted_steps} steps to t = {format_float(result.final.t)}, output in {config.output_dir}")
        return EXIT_OK

    return _traced("run", body)


def cmd_convergence(config_path: str | Path, *, workers: int = 1, full_scale: bool = False) -> int:
    def body() -> int:
        config = RunConfig.from_file(config_path)
        study = run_convergence_study(config, workers=workers, full_scale=full_scale)
        path = write_convergence(
            config.output_dir / CONVERGENCE_FILE,
            [(row.n_cells, row.h, row.error) for row in study.rows],
            study.orders,
            comments=study.comments,
        )
        orders = " ".join(f"{order:.3f}" for order in study.orders)
        print(f"[convergence] observed orders {orders}, table in {path}")
        return EXIT_OK

    return _traced("convergence", body)


def cmd_decay(config_path: str | Path) -> int:
    def body() -> int:
        config = RunConfig.from_file(config_path)
        study = run_decay_study(config)
        path = write_decay(config.output_dir / DECAY_FILE, study.fit, study.series)
        if study.fit is None:
            print(f"[decay] no decay fit (relative entropy vanishes), table in {path}")
        else:
            print(
                f"[decay] rate {study.fit.rate:.6g}, r_squared {study.fit.r_squared:.6f}, "
                f"mass drift {study.mass_drift():.3e}, table in {path}"
            )
        return EXIT_OK

    return _traced("decay", body)


def cmd_check(*, seed: int = 0, samples: int = 10_000) -> int:
    def body() -> int:
        rows = run_check_suite(seed=seed, samples=samples)
        print(format_table(rows))
        failed = sum(not row.passed for row in rows)
        print(f"[check] {len(rows) - failed}/{len(rows)} passed")
        return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED

    return _traced("check", body)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration error status."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="crossfv",
        description="Entropy-stable finite-volume solver for cross-diffusion systems.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--log-level",
        default=None,
        help="logging level (default: $CROSSFV_LOG_LEVEL or INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one simulation and write series.csv and snapshots")
    run.add_argument("config", type=Path)

    convergence = sub.add_parser("convergence", help="spatial convergence study against a fine reference")
    convergence.add_argument("config", type=Path)
    convergence.add_argument(
        "--full-scale",
        "--paper-scale",
        dest="full_scale",
        action="store_true",
        help="reference 5120 cells and ladder 40..1280 (long run)",
    )
    convergence.add_argument("--workers", type=int, default=1, help="worker processes for the ladder (default: 1)")

    decay = sub.add_parser("decay", help="relative-entropy decay of the reaction thin-film system")
    decay.add_argument("config", type=Path)

    check = sub.add_parser("check", help="run the invariant check suite")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--samples", type=int, default=10_000)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = ObservabilitySettings.from_env()
    level = (args.log_level or settings.log_level).upper()
    configure_logging("crossfv", level=level)
    init_otel(settings.service_name, logger, settings)

    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "convergence":
        return cmd_convergence(args.config, workers=max(1, args.workers), full_scale=args.full_scale)
    if args.command == "decay":
        return cmd_decay(args.config)
    return cmd_check(seed=args.seed, samples=args.samples)


if __name__ == "__main__":
    sys.exit(main())
