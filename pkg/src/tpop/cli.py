"""Command-line front end: sweep, model, compare, platoon, uniqueness.

Exit codes: 0 success, 1 runtime or I/O failure (including a failed
comparison), 2 invalid configuration or mismatched inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__, analytics, simulator
from .types import AgentState, Environment, ThetaParams

log = logging.getLogger("tpop")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

PRESETS = {
    "theta1": "t=1,h=2,w=2,2",
    "theta2": "t=1,h=1,w=6",
    "theta3": "t=0.4,h=2,w=2,2",
    "theta4": "t=0.4,h=1,w=6",
}


class ConfigError(ValueError):
    pass


def parse_theta(text: str) -> ThetaParams:
    """``t=<real>,h=<int>,w=<int>[,<int>...]`` or a preset name."""
    if text is None:
        raise ConfigError("missing --theta")
    text = PRESETS.get(text.strip().lower(), text)
    fields: dict[str, list[str]] = {}
    key = None
    for tok in (s.strip() for s in text.split(",")):
        if "=" in tok:
            key, val = (s.strip() for s in tok.split("=", 1))
            if key in fields:
                raise ConfigError(f"repeated theta key {key!r}")
            fields[key] = [val]
        elif key == "w" and tok:
            fields["w"].append(tok)
        else:
            raise ConfigError(f"cannot parse theta {text!r}")
    if set(fields) != {"t", "h", "w"}:
        raise ConfigError(f"theta needs exactly t, h and w: {text!r}")
    try:
        t = float(fields["t"][0])
        h = int(fields["h"][0])
        w = tuple(int(v) for v in fields["w"])
    except ValueError:
        raise ConfigError(f"non-numeric theta value in {text!r}") from None
    if len(fields["t"]) != 1 or len(fields["h"]) != 1:
        raise ConfigError(f"cannot parse theta {text!r}")
    try:
        return ThetaParams(t, h, w)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse_env(text: str) -> tuple[float, float]:
    try:
        w, h = (float(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--env expects WxH, got {text!r}") from None
    return w, h


def parse_point(text: str) -> tuple[float, float]:
    try:
        ph, pc = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected p_h,p_c, got {text!r}") from None
    for v in (ph, pc):
        if not 0 <= v <= 1:
            raise ConfigError(f"probability out of [0, 1]: {v}")
    return ph, pc


# ---------------------------------------------------------------- output


def metadata_lines(command: str, config: dict) -> list[str]:
    return [
        f"# tpop {__version__}",
        f"# command: {command}",
        f"# config: {json.dumps(config, sort_keys=True)}",
        f"# seed: {config.get('seed')}",
    ]


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence], meta: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in meta:
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    log.info("wrote %s", path)


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def format_pct(v: Optional[Fraction], places: int = 6) -> str:
    """Exact percentage rounded half-even; complementary values still sum to 100."""
    if v is None:
        return ""
    scale = 10**places
    q = round(v * scale)
    sign = "-" if q < 0 else ""
    q = abs(q)
    return f"{sign}{q // scale}.{q % scale:0{places}d}"


def fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- commands


def _theta_and_env(cfg: dict) -> tuple[ThetaParams, Environment]:
    theta = parse_theta(cfg.get("theta"))
    width, height = parse_env(cfg["env"])
    try:
        env = Environment(width, height, float(cfg["r"]), int(cfg["agents"]))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return theta, env


def _check_positive(cfg: dict, *keys: str) -> None:
    for k in keys:
        if not cfg[k] or cfg[k] <= 0:
            raise ConfigError(f"--{k.replace('_', '-')} must be positive")


def cmd_sweep(cfg: dict) -> int:
    theta, env = _theta_and_env(cfg)
    _check_positive(cfg, "runs", "grid_step")
    out = Path(cfg["out"])
    meta = metadata_lines("sweep", cfg)
    if cfg.get("edges"):
        ph, pc = parse_point(cfg["edges"])
        hist = simulator.edge_histogram(env, theta, ph, pc, cfg["runs"], cfg["seed"], cfg["jobs"])
        write_csv(out / "edges_histogram.csv", ("edges", "count"), sorted(hist.counts.items()), meta)
        write_json(out / "edges_histogram.json", {"config": cfg, "mean": hist.mean, "trees": hist.runs})
        print(f"mean confirmed edges at p_h={ph:g}, p_c={pc:g}: {hist.mean:.4f} ({hist.runs} trees)")
        return EXIT_OK
    try:
        analytics.grid_values(cfg["grid_step"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    res = simulator.sweep(env, theta, cfg["grid_step"], cfg["runs"], cfg["seed"], cfg["jobs"])
    rows = []
    for row in res.rows():
        rows.append(
            [fmt(row["p_h"]), fmt(row["p_c"]), row["tp"], row["tn"], row["fp"], row["fn"]]
            + [format_pct(row[k]) for k in ("tp_pct", "tn_pct", "fp_pct", "fn_pct")]
            + [row["runs"]]
        )
    meta = meta + [f"# population: {res.metadata['population']}"]
    write_csv(out / "sweep.csv", simulator.SWEEP_COLUMNS, rows, meta)
    write_json(
        out / "sweep.json",
        {"config": cfg, "metadata": res.metadata, "total_runs": res.total_runs, "version": __version__},
    )
    print(f"{res.total_runs} prover runs over {len(res.counts)} cells -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_model(cfg: dict) -> int:
    theta = parse_theta(cfg.get("theta"))
    _check_positive(cfg, "grid_step")
    try:
        grid = analytics.grid_values(cfg["grid_step"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(cfg["out"])
    meta = metadata_lines("model", cfg)

    edge_rows = [
        (fmt(ph), fmt(pc), fmt(analytics.expected_edges(theta, ph, pc))) for ph in grid for pc in grid
    ]
    write_csv(out / "edges.csv", ("p_h", "p_c", "value"), edge_rows, meta)
    if cfg.get("edges"):
        print(f"expected-edge grid ({len(edge_rows)} cells) -> {out / 'edges.csv'}")
        return EXIT_OK

    infinite = bool(cfg.get("infinite_density"))
    mu = math.inf
    if not infinite:
        width, height = parse_env(cfg["env"])
        mu = int(cfg["agents"]) / (width * height)
    try:
        s = analytics.theoretical_surfaces(theta, cfg["grid_step"], infinite, mu, float(cfg["r"]))
    except analytics.UnsupportedShapeError as e:
        raise ConfigError(f"{e}; use --infinite-density for this tree shape") from None

    surf_rows, tp_rows, tn_rows = [], [], []
    for ph, pc, tp, tn in s.rows():
        surf_rows.append([fmt(ph), fmt(pc), fmt(100 * tp), fmt(100 * tn), fmt(100 - 100 * tn), fmt(100 - 100 * tp)])
        tp_rows.append((fmt(ph), fmt(pc), fmt(tp)))
        tn_rows.append((fmt(ph), fmt(pc), fmt(tn)))
    write_csv(out / "surfaces.csv", ("p_h", "p_c", "tp_pct", "tn_pct", "fp_pct", "fn_pct"), surf_rows, meta)
    write_csv(out / "tp.csv", ("p_h", "p_c", "value"), tp_rows, meta)
    write_csv(out / "tn.csv", ("p_h", "p_c", "value"), tn_rows, meta)

    crit_rows = []
    uniq = None
    if not infinite:
        uniq = analytics.uniqueness_probability(theta, mu * math.pi * float(cfg["r"]) ** 2, float(cfg["r"]))
    for ph in grid:
        for pc in grid:
            model = analytics.ModelParams(ph, pc, theta, mu, float(cfg["r"]), infinite, uniq)
            for u in (AgentState.S1, AgentState.S3, AgentState.S4, AgentState.S5):
                c1, c2, c3 = analytics.criterion_breakdown(u, model)
                crit_rows.append((fmt(ph), fmt(pc), f"s{int(u)}", fmt(c1), fmt(c2), fmt(c3), fmt(c1 * c2 * c3)))
    write_csv(
        out / "criteria.csv",
        ("p_h", "p_c", "state", "criterion1", "criterion2", "criterion3", "tpop"),
        crit_rows,
        meta,
    )
    write_json(
        out / "model.json",
        {
            "config": cfg,
            "version": __version__,
            "mean_tp": float(np.mean(s.tp)),
            "mean_tn": float(np.mean(s.tn)),
            "uniqueness": uniq,
        },
    )
    print(f"model surfaces for {theta} -> {out}")
    return EXIT_OK


def _pct_table(rows: list[dict], metrics: Sequence[str]) -> dict:
    table = {}
    for row in rows:
        try:
            key = (round(float(row["p_h"]), 9), round(float(row["p_c"]), 9))
        except (KeyError, ValueError):
            raise ConfigError("rows need numeric p_h and p_c") from None
        if key in table:
            raise ConfigError(f"duplicate cell {key}")
        vals = {}
        for m in metrics:
            col = f"{m}_pct"
            if col not in row:
                raise ConfigError(f"missing column {col}")
            vals[m] = float(row[col]) if row[col] not in ("", None) else None
        table[key] = vals
    return table


def compare_tables(sim: dict, model: dict, tolerance: float, interior: bool) -> dict:
    if set(sim) != set(model):
        raise ConfigError("simulation and model grids differ")
    diffs, failures = [], []
    for key in sorted(sim):
        ph, _ = key
        if interior and not (0.1 - 1e-9 <= ph <= 0.9 + 1e-9):
            continue
        for m, a in sim[key].items():
            b = model[key][m]
            if a is None or b is None:
                continue
            d = abs(a - b)
            diffs.append(d)
            if d > tolerance:
                failures.append({"p_h": key[0], "p_c": key[1], "metric": m, "sim": a, "model": b, "diff": d})
    return {
        "cells_compared": len(diffs),
        "max_deviation": max(diffs) if diffs else 0.0,
        "mean_deviation": float(np.mean(diffs)) if diffs else 0.0,
        "tolerance": tolerance,
        "interior_only": interior,
        "passed": not failures,
        "failures": failures,
    }


def cmd_compare(cfg: dict) -> int:
    metrics = [m.strip() for m in cfg["metrics"].split(",") if m.strip()]
    if not metrics or any(m not in ("tp", "tn", "fp", "fn") for m in metrics):
        raise ConfigError(f"bad --metrics {cfg['metrics']!r}")
    if cfg["tolerance"] is None or cfg["tolerance"] < 0:
        raise ConfigError("--tolerance must be non-negative")
    sim = _pct_table(read_csv(Path(cfg["sim_csv"])), metrics)
    model = _pct_table(read_csv(Path(cfg["model_csv"])), metrics)
    report = compare_tables(sim, model, cfg["tolerance"], cfg["interior"])
    report["config"] = cfg
    write_json(Path(cfg["out"]) / "compare.json", report)
    print(
        f"compared {report['cells_compared']} values: max {report['max_deviation']:.3f} pp, "
        f"mean {report['mean_deviation']:.3f} pp, tolerance {cfg['tolerance']:g} pp"
    )
    for f in report["failures"]:
        print(
            f"FAIL p_h={f['p_h']:g} p_c={f['p_c']:g} {f['metric']}: "
            f"sim {f['sim']:.3f} model {f['model']:.3f} diff {f['diff']:.3f}"
        )
    print("PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


def cmd_platoon(cfg: dict) -> int:
    theta = parse_theta(cfg.get("theta"))
    _check_positive(cfg, "grid_step", "points")
    try:
        grid = analytics.grid_values(cfg["grid_step"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(cfg["out"])
    meta = metadata_lines("platoon", cfg)
    rows = [
        (fmt(ph), fmt(pc), fmt(analytics.platoon_expected_edges(theta, ph, pc))) for ph in grid for pc in grid
    ]
    write_csv(out / "platoon_edges.csv", ("p_h", "p_c", "value"), rows, meta)
    optima = analytics.optimal_honest_edge_points(cfg["points"])
    write_csv(
        out / "honest_edge_optima.csv",
        ("entry", "parent", "child", "p_h", "p_c", "value"),
        [(o["entry"], o["parent"], o["child"], fmt(o["p_h"]), fmt(o["p_c"]), fmt(o["value"])) for o in optima],
        meta,
    )
    for o in optima:
        print(f"{o['entry']}: p_h={o['p_h']:g} p_c={o['p_c']:g} ({o['value']:.4f})")
    return EXIT_OK


def cmd_uniqueness(cfg: dict) -> int:
    theta = parse_theta(cfg.get("theta") or "t=1,h=2,w=2,2")
    _check_positive(cfg, "trees", "r")
    if cfg.get("n_values"):
        try:
            n_values = [int(v) for v in str(cfg["n_values"]).split(",")]
        except ValueError:
            raise ConfigError("--n-values expects comma-separated integers") from None
    else:
        _check_positive(cfg, "n_min", "n_max", "n_points")
        if cfg["n_min"] > cfg["n_max"]:
            raise ConfigError("--n-min exceeds --n-max")
        n_values = sorted(
            set(np.unique(np.round(np.geomspace(cfg["n_min"], cfg["n_max"], cfg["n_points"]))).astype(int))
        )
    if any(n < 2 for n in n_values):
        raise ConfigError("need at least two agents")
    pts = simulator.uniqueness_experiment(n_values, cfg["r"], cfg["trees"], cfg["seed"], cfg["jobs"], theta)
    rows = [(p.n_agents, fmt(p.fraction_unique), "" if math.isnan(p.theory) else fmt(p.theory)) for p in pts]
    write_csv(Path(cfg["out"]) / "uniqueness.csv", ("n_agents", "fraction_unique", "theory"), rows, metadata_lines("uniqueness", cfg))
    for p in pts:
        print(f"N={p.n_agents}: empirical {p.fraction_unique:.4f} theory {p.theory:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--jobs", type=int, default=simulator.default_jobs(), help="worker processes")
    common.add_argument("--config", help="JSON file of option values; flags override it")

    p = argparse.ArgumentParser(prog="tpop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tpop {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def sim_args(sp):
        sp.add_argument("--theta", help="t=..,h=..,w=.. or theta1..theta4")
        sp.add_argument("--env", default="10x10", help="WxH")
        sp.add_argument("--agents", type=int, default=350)
        sp.add_argument("--r", type=float, default=1.0)
        sp.add_argument("--grid-step", type=float, default=0.1)

    sp = sub.add_parser("sweep", parents=[common], help="agent-based Monte-Carlo sweep")
    sim_args(sp)
    sp.add_argument("--runs", type=int, default=5, help="repetitions per cell")
    sp.add_argument("--edges", metavar="P_H,P_C", help="write a confirmed-edge histogram at this point instead")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("model", parents=[common], help="theoretical surfaces")
    sim_args(sp)
    sp.add_argument("--infinite-density", action="store_true")
    sp.add_argument("--edges", action="store_true", help="only write the expected-edge grid")
    sp.set_defaults(func=cmd_model)

    sp = sub.add_parser("compare", parents=[common], help="simulation vs model surfaces")
    sp.add_argument("sim_csv")
    sp.add_argument("model_csv")
    sp.add_argument("--tolerance", type=float, default=5.0, help="percentage points")
    sp.add_argument("--interior", action="store_true", help="only 0.1 <= p_h <= 0.9")
    sp.add_argument("--metrics", default="tp,tn")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("platoon", parents=[common], help="platoon-attack edge model")
    sp.add_argument("--theta", help="t=..,h=..,w=.. or theta1..theta4")
    sp.add_argument("--grid-step", type=float, default=0.1)
    sp.add_argument("--points", type=int, default=101, help="grid points per axis for the optima search")
    sp.set_defaults(func=cmd_platoon)

    sp = sub.add_parser("uniqueness", parents=[common], help="distinct-node tree fraction vs N")
    sp.add_argument("--theta", help="tree shape, default t=1,h=2,w=2,2")
    sp.add_argument("--r", type=float, default=0.1)
    sp.add_argument("--trees", type=int, default=10000)
    sp.add_argument("--n-values", help="comma-separated N list")
    sp.add_argument("--n-min", type=int, default=200)
    sp.add_argument("--n-max", type=int, default=10000)
    sp.add_argument("--n-points", type=int, default=20)
    sp.set_defaults(func=cmd_uniqueness)
    return p


def _parse(parser: argparse.ArgumentParser, argv: Sequence[str]):
    args = parser.parse_args(argv)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise OSError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad config JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = set(doc) - set(vars(args))
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        # file values become defaults so that explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**doc)
        args = parser.parse_args(argv)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    if cfg.get("jobs") is not None and cfg["jobs"] < 1:
        raise ConfigError("--jobs must be at least 1")
    return cfg, args.func


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("TPOP_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cfg, func = _parse(parser, argv)
        return func(cfg)
    except SystemExit as e:
        # argparse reports usage errors with status 2
        return int(e.code) if isinstance(e.code, int) else EXIT_INVALID
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
