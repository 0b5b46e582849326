"""Command line experiment runner.

    swle run --config case1 --seed 3 --out results/
    swle compare --config case1 --seeds 5

``--config`` takes a JSON file or the name of a bundled preset.  Exit codes:
0 success, 1 invariant violation, 2 bad configuration or arguments.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
from pathlib import Path
from typing import Optional

from swle import config as config_mod
from swle.config import Config, ConfigError
from swle.metrics import summary_json
from swle.sim import InvariantViolation, SimulationReport, run as simulate

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2

PRESETS = ("fault_free", "case1", "case2", "case3", "adversarial_pregst")


def load_config(ref: str) -> Config:
    path = Path(ref)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise ConfigError(f"{ref}: no such file")
        return config_mod.load(path)
    if ref in PRESETS:
        return config_mod.load(config_mod.preset_path(ref))
    raise ConfigError(f"{ref}: not a file and not a preset ({', '.join(PRESETS)})")


def write_report(report: SimulationReport, out: Path) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{report.config.name or 'run'}-{report.config.mechanism}-s{report.seed}"
    csv_path = out / f"{stem}.csv"
    json_path = out / f"{stem}.summary.json"
    csv_path.write_text(report.csv())
    json_path.write_text(report.json())
    return csv_path, json_path


def _overrides(cfg: Config, args) -> Config:
    changes = {}
    if args.mechanism:
        changes["mechanism"] = args.mechanism
    if args.views:
        changes["views"] = args.views
    return cfg.replace(**changes) if changes else cfg


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def cmd_run(args) -> int:
    cfg = _overrides(load_config(args.config), args)
    seed = cfg.seed if args.seed is None else args.seed
    report = simulate(cfg, seed)
    out = Path(args.out or cfg.out or ".")
    csv_path, json_path = write_report(report, out)
    s = report.summary
    lat = "n/a" if s["latency_avg"] is None else f"{s['latency_avg']:.1f} ms"
    _say(args, f"{cfg.name or 'run'} [{cfg.mechanism}] seed={seed}: "
               f"{s['throughput_avg']:.0f} op/s, latency {lat}, "
               f"faulty leaders {s['faulty_leader_pct']:.2f}%, timeouts {s['timeout_pct']:.2f}%, v_c={s['v_c']}")
    _say(args, f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def compare(cfg: Config, seeds: list[int]) -> dict:
    """Run both mechanisms on the same configuration and seeds."""
    rows = []
    for seed in seeds:
        pair = {m: simulate(cfg.replace(mechanism=m), seed).summary for m in ("swle", "roundrobin")}
        rr = pair["roundrobin"]["throughput_avg"]
        rows.append({
            "seed": seed,
            "swle": _brief(pair["swle"]),
            "roundrobin": _brief(pair["roundrobin"]),
            "throughput_ratio": pair["swle"]["throughput_avg"] / rr if rr else None,
        })
    ratios = [r["throughput_ratio"] for r in rows if r["throughput_ratio"] is not None]
    return {
        "name": cfg.name,
        "seeds": seeds,
        "runs": rows,
        "throughput_ratio_mean": statistics.fmean(ratios) if ratios else None,
        "swle_faulty_leader_pct_mean": statistics.fmean(r["swle"]["faulty_leader_pct"] for r in rows),
        "roundrobin_faulty_leader_pct_mean": statistics.fmean(r["roundrobin"]["faulty_leader_pct"] for r in rows),
    }


def _brief(summary: dict) -> dict:
    keys = ("throughput_avg", "latency_avg", "faulty_leader_pct", "timeout_pct", "v_c")
    return {k: summary[k] for k in keys}


def cmd_compare(args) -> int:
    cfg = _overrides(load_config(args.config), args)
    seeds = [cfg.seed + k for k in range(args.seeds)]
    table = compare(cfg, seeds)
    if not args.quiet:
        print(f"{'seed':>6} {'swle op/s':>11} {'rr op/s':>11} {'ratio':>7} {'swle bad%':>10} {'rr bad%':>8}")
        for r in table["runs"]:
            ratio = "n/a" if r["throughput_ratio"] is None else f"{r['throughput_ratio']:.2f}"
            print(f"{r['seed']:>6} {r['swle']['throughput_avg']:>11.0f} {r['roundrobin']['throughput_avg']:>11.0f} "
                  f"{ratio:>7} {r['swle']['faulty_leader_pct']:>10.2f} {r['roundrobin']['faulty_leader_pct']:>8.2f}")
        mean = table["throughput_ratio_mean"]
        print(f"mean throughput ratio: {'n/a' if mean is None else f'{mean:.2f}'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{cfg.name or 'run'}-compare.json").write_text(summary_json(table))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swle", description="Leader election experiments on a simulated BFT cluster")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file or preset name")
        p.add_argument("--mechanism", choices=("swle", "roundrobin"))
        p.add_argument("--views", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true")

    p_run = sub.add_parser("run", help="run one simulation")
    common(p_run)
    p_run.add_argument("--seed", type=int)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="SWLE against round-robin over several seeds")
    common(p_cmp)
    p_cmp.add_argument("--seeds", type=int, default=5)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    level = logging.getLevelName(os.environ.get("SWLE_LOG", "WARNING").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "views", None) is not None and args.views < 1:
        print("error: --views must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        for line in exc.trace[-20:]:
            print(f"  {line}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
