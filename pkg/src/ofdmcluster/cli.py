"""Command-line entry point: ``ofdmcluster <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, LinkConfig, config_from_dict, load_config

log = logging.getLogger("ofdmcluster")


def _load(path: str | None) -> LinkConfig:
    return LinkConfig().validate() if path is None else load_config(path)


def _apply_overrides(config: LinkConfig, items: list[str]) -> LinkConfig:
    """``--set fiber.n_spans=3`` style overrides; values are parsed as JSON."""
    changes = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value", key)
        try:
            changes[key] = json.loads(raw)
        except json.JSONDecodeError:
            changes[key] = raw
    if not changes:
        return config
    # round-trip through the dict form so types and enums are coerced
    data = config.to_dict()
    for key, value in changes.items():
        *sections, name = key.split(".")
        node = data
        for s in sections:
            if s not in node or not isinstance(node[s], dict):
                raise ConfigError(f"unknown config section {s!r}", key)
            node = node[s]
        if name not in node:
            raise ConfigError(f"unknown config key {key!r}", key)
        node[name] = value
    return config_from_dict(data)


def _spec(path: str | None) -> harness.SweepSpec:
    return harness.SweepSpec() if path is None else harness.SweepSpec.load(path)


def cmd_trial(args: argparse.Namespace) -> int:
    config = _apply_overrides(_load(args.config), args.set)
    result = harness.run_trial(config, args.seed, ase=not args.no_ase)
    out = {
        "seed": config.rng_seed if args.seed is None else args.seed,
        "launch_power_dbm": config.launch_power_dbm,
        "equalizer": config.equalizer.kind.value,
        "n_bits": result.n_bits,
        "n_errors": result.n_errors,
        "ber": result.ber,
        "q_db": result.q_factor_db if math.isfinite(result.q_factor_db) else str(result.q_factor_db),
        "n_clusters_mode": result.modal_cluster_count,
        "elapsed_s": round(result.elapsed, 3),
    }
    print(json.dumps(out, indent=2))
    return 0


def _print_summary(result: harness.SweepResult) -> None:
    for s in result.summary():
        eps = "" if s["epsilon"] is None else f" eps={s['epsilon']:g} mp={s['min_points']}"
        print(
            f"lop={s['lop_dbm']:g} {s['equalizer']}{eps}: "
            f"ber={s['ber']:.3e} q={s['q_db']:.3f} dB clusters={s['modal_clusters']}"
            + (f" failed={s['n_failed']}" if s["n_failed"] else "")
        )


def cmd_sweep_lop(args: argparse.Namespace) -> int:
    config = _apply_overrides(_load(args.config), args.set)
    result = harness.sweep_lop(_spec(args.spec), config, workers=args.workers)
    harness.write_results_csv(result, args.out)
    log.info("wrote %d rows to %s", len(result.rows), args.out)
    _print_summary(result)
    return 0


def cmd_sweep_dbscan(args: argparse.Namespace) -> int:
    config = _apply_overrides(_load(args.config), args.set)
    result = harness.sweep_dbscan_params(_spec(args.spec), config, workers=args.workers)
    harness.write_results_csv(result, args.out)
    if args.surface:
        harness.write_surface_csv(result, args.surface)
    log.info("wrote %d rows to %s", len(result.rows), args.out)
    return 0


def cmd_dump_constellation(args: argparse.Namespace) -> int:
    config = _apply_overrides(_load(args.config), args.set)
    written = harness.export_constellations(config, args.seed, args.stage, args.out_dir, ase=not args.no_ase)
    for stage, path in written.items():
        print(f"{stage}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofdmcluster", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON link configuration (defaults if omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. fiber.n_spans=3")

    p = sub.add_parser("trial", help="run one block end to end")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-ase", action="store_true", help="disable amplifier noise")
    p.set_defaults(func=cmd_trial)

    for name, func, help_ in (
        ("sweep-lop", cmd_sweep_lop, "Q-factor versus launch power"),
        ("sweep-dbscan", cmd_sweep_dbscan, "BER and cluster-count surfaces over (epsilon, min_points)"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--spec", help="JSON sweep specification")
        p.add_argument("--out", default=f"{name}.csv", help="per-seed results CSV")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default ${harness.WORKERS_ENV} or 1)")
        if name == "sweep-dbscan":
            p.add_argument("--surface", help="also write the seed-pooled surface CSV here")
        p.set_defaults(func=func)

    p = sub.add_parser("dump-constellation", help="write constellation CSVs")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stage", action="append", choices=["linear", "clustered"],
                   help="stage to export (repeatable; default both)")
    p.add_argument("--out-dir", default=".", type=Path)
    p.add_argument("--no-ase", action="store_true")
    p.set_defaults(func=cmd_dump_constellation)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "stage", None) is None and args.command == "dump-constellation":
        args.stage = ["linear", "clustered"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except harness.StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
