"""``fdresnet`` command line: ``run`` a configured experiment or ``sweep`` a filter grid.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (non-finite loss, or a gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

THREADS_ENV = "FDRESNET_NUM_THREADS"


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdresnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="YAML experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. filter.low.kernel=5)")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="parent output directory")
        sp.add_argument("--seed", type=int, default=None, help="override train.seed")
        sp.add_argument("--deterministic", type=_bool, default=True,
                        help="single-threaded BLAS for bit-reproducible runs (default true)")
        sp.add_argument("-v", "--verbose", action="store_true")

    run = sub.add_parser("run", help="execute the configured tasks")
    run.add_argument("config_path", nargs="?", type=Path, help="same as --config")
    common(run)
    run.add_argument("--task", dest="tasks", action="append", default=[],
                     help="task to run (repeatable); overrides the config's task list")

    sweep = sub.add_parser("sweep", help="run a kernel/sigma grid with repeats")
    sweep.add_argument("config_path", nargs="?", type=Path, help="same as --config")
    common(sweep)
    sweep.add_argument("--grid", required=True,
                       help="grid YAML file, or inline YAML such as "
                            "'{kernels: [3,5,7], sigmas: [1.0], repeat: 3}'")
    sweep.add_argument("--repeat", type=int, default=None, help="override the grid's repeat count")
    return p


def _thread_limit(deterministic: bool):
    """Deterministic runs pin BLAS to one thread; otherwise honour FDRESNET_NUM_THREADS."""
    limit = os.environ.get(THREADS_ENV)
    n = 1 if deterministic else (int(limit) if limit else None)
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_grid(text: str) -> dict:
    path = Path(text)
    raw = path.read_text() if path.is_file() else text
    from .config import load_yaml

    grid = load_yaml(raw)
    if not isinstance(grid, dict):
        raise ValueError(f"grid {text!r} must be a mapping")
    return grid


def main(argv=None) -> int:
    from .config import ConfigError, load_config
    from .data import DataError
    from .experiment import make_run_dir, parse_grid, run_experiment, run_sweep
    from .train import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg_path = args.config or args.config_path
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    limiter = _thread_limit(args.deterministic)
    try:
        if args.command == "run":
            if args.tasks:
                overrides.append("tasks=[" + ",".join(args.tasks) + "]")
            cfg = load_config(cfg_path, overrides)
            out_dir = make_run_dir(args.out, cfg.name)
            print(f"output directory: {out_dir}")
            result = run_experiment(cfg, out_dir)
            if result.gradcheck_failed:
                print("gradient check exceeded tolerance", file=sys.stderr)
                return EXIT_NUMERICAL
        else:
            cfg = load_config(cfg_path, overrides)  # validate before any compute
            try:
                grid = _load_grid(args.grid)
                if args.repeat is not None:
                    grid["repeat"] = args.repeat
                parse_grid(grid)
            except (OSError, yaml.YAMLError, ValueError) as exc:
                raise ConfigError(f"--grid: {exc}") from None
            out_dir = make_run_dir(args.out, f"{cfg.name}_sweep")
            print(f"output directory: {out_dir}")
            run_sweep(cfg_path, grid, out_dir, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
