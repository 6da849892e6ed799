"""Command-line front end: ``hflsim {run,sweep,budget,equivalence,attack,plot}``.

Exit codes: 0 success, 1 a check failed or a run diverged, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from hflsim import attacks, engine
from hflsim.config import ConfigError, RunSpec, config_to_dict, load_config
from hflsim.dpcore import PLACEMENTS, config_budget
from hflsim.errors import ConfigurationError, DivergenceError
from hflsim.svgplot import line_chart

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
EQUIVALENCE_TOL = 1e-9
EQUIVALENCE_TOL_SECAGG = 1e-5


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, config_path: str, spec: RunSpec, artifacts: Sequence[str]) -> None:
    """Written after every artifact, so its presence marks a complete output directory."""
    manifest = {
        "config_path": str(config_path),
        "config": config_to_dict(spec),
        "output_dir": str(out),
        "artifacts": {name: _sha256(out / name) for name in artifacts},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load(path: str) -> Optional[RunSpec]:
    try:
        return load_config(path)
    except ConfigError as exc:
        _err(f"{path}: {exc}")
        return None


def cmd_run(args: argparse.Namespace) -> int:
    spec = _load(args.config)
    if spec is None:
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = engine.run_flat if spec.mode == "flat" else engine.run_hier
    start = time.perf_counter()
    try:
        result = runner(spec.experiment)
    except DivergenceError as exc:
        _err(str(exc))
        return EXIT_FAIL
    except ConfigurationError as exc:
        _err(str(exc))
        return EXIT_USAGE
    wall = time.perf_counter() - start
    (out / "rounds.csv").write_text(engine.rounds_csv(result.records), encoding="utf-8")
    summary = {**result.summary(), "mode": spec.mode, "wall_time_s": wall, "config": config_to_dict(spec)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, args.config, spec, ["rounds.csv", "summary.json"])
    last = result.records[-1]
    print(f"final val_acc {last.val_acc:.4f}  eps_aggregator {engine._fmt(last.eps_aggregator)}  ({wall:.1f}s)")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = _load(args.config)
    if spec is None:
        return EXIT_USAGE
    try:
        configs = spec.sweep_configs()
    except ConfigurationError as exc:
        _err(str(exc))
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = engine.sweep(configs, hierarchical=spec.mode != "flat")
    (out / "sweep.csv").write_text(engine.sweep_csv(rows), encoding="utf-8")
    _write_manifest(out, args.config, spec, ["sweep.csv"])
    for r in rows:
        print(f"{r['placement']} s={r['s']} z={r['z']} seed={r['seed']}: acc {r['final_val_acc']:.4f} [{r['status']}]")
    return EXIT_OK


def _fmt_budget(x: float) -> str:
    return f"{x:.12g}"


def cmd_budget(args: argparse.Namespace) -> int:
    kwargs = dict(s=args.s, m=args.m, alpha=args.alpha, beta=args.beta, k=args.k, shuffling=args.shuffling)
    if args.placement:
        try:
            value = config_budget(args.placement, args.eps, **kwargs)
        except ConfigurationError as exc:
            _err(str(exc))
            return EXIT_USAGE
        print(_fmt_budget(value))
        return EXIT_OK
    printed = 0
    for cfg in PLACEMENTS[1:]:
        try:
            value = config_budget(cfg, args.eps, **kwargs)
        except ConfigurationError as exc:
            print(f"{cfg}\t-\t({exc})")
            continue
        print(f"{cfg}\t{_fmt_budget(value)}")
        printed += 1
    return EXIT_OK if printed else EXIT_USAGE


def cmd_equivalence(args: argparse.Namespace) -> int:
    spec = _load(args.config)
    if spec is None:
        return EXIT_USAGE
    tol = args.tol
    if tol is None:
        tol = EQUIVALENCE_TOL_SECAGG if spec.experiment.engine.secure_agg else EQUIVALENCE_TOL
    try:
        gaps = engine.equivalence(spec.experiment)
    except ConfigurationError as exc:
        _err(str(exc))
        return EXIT_USAGE
    worst = max(gaps)
    print(f"max divergence {worst:.3e} over {len(gaps)} rounds (tolerance {tol:g})")
    bad = next((t for t, g in enumerate(gaps) if not g < tol), None)
    if bad is not None:
        print(f"first offending round {bad}: divergence {gaps[bad]:.3e}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    spec = _load(args.config)
    if spec is None:
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        results = attacks.attack_suite(spec.attack)
    except ConfigurationError as exc:
        _err(str(exc))
        return EXIT_USAGE
    (out / "attack_table.csv").write_text(attacks.attack_table_csv(results), encoding="utf-8")
    for r in results:
        print(f"{r.name:5s} median MSE {r.median_mse:.6g}")
    ok = attacks.ordering_holds(results)
    print("ordering LDP >= HDP >= CDP >= NoDP: " + ("holds" if ok else "violated"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_plot(args: argparse.Namespace) -> int:
    series: dict[str, list[tuple[float, float]]] = {}
    for path in args.csv:
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                header = reader.fieldnames or []
                rows = list(reader)
        except OSError as exc:
            _err(str(exc))
            return EXIT_USAGE
        if not header or not rows:
            _err(f"{path}: empty CSV")
            return EXIT_USAGE
        needed = [args.x, args.y] + ([args.group] if args.group else [])
        missing = [c for c in needed if c not in header]
        if missing:
            _err(f"{path}: missing column(s) {', '.join(missing)}; available: {', '.join(header)}")
            return EXIT_USAGE
        for row in rows:
            name = row[args.group] if args.group else Path(path).stem
            try:
                point = (float(row[args.x]), float(row[args.y]))
            except ValueError:
                _err(f"{path}: non-numeric value in {args.x}/{args.y}")
                return EXIT_USAGE
            series.setdefault(name, []).append(point)
    try:
        svg = line_chart(series, args.x, args.y, args.title or "")
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    print(f"wrote {out} ({len(series)} series)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hflsim", description="Hierarchical federated learning with DP noise placement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the config's [sweep] grid")
    p.add_argument("config")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("budget", help="aggregator-level budget of a noise placement")
    p.add_argument("--placement", choices=PLACEMENTS[1:])
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--s", type=float)
    p.add_argument("--m", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--shuffling", action="store_true")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("equivalence", help="flat vs hierarchical without noise")
    p.add_argument("config")
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("attack", help="gradient-inversion suite across placements")
    p.add_argument("config")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("plot", help="SVG line chart from CSV files")
    p.add_argument("csv", nargs="+")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--group")
    p.add_argument("--title")
    p.add_argument("--out", default="plot.svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
