"""Command-line entry point: ``caap run | sweep-eps | security | calibrate``.

Every subcommand prints its checks and exits 0 only if all of them hold.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from caap.adversary import first_inversion, selection_bias_probe
from caap.costmodel import (
    ATTACK_MAGNITUDE,
    NOMINAL_CHANNEL,
    NOMINAL_CONTEXT,
    NOMINAL_HARDWARE,
    catalog,
    objective_arrays,
    scale_compute,
)
from caap.errors import CaapError
from caap.harness import (
    APMOEA,
    APMOEA_NO_RL,
    SELECTORS,
    ExperimentConfig,
    emit_report,
    load_config,
    report_tables,
    run_experiment,
    run_security_suite,
    sweep_prediction_error,
)
from caap.optimizer import pareto_front

log = logging.getLogger("caap")


class Checks:
    def __init__(self):
        self.results: list[tuple[str, bool]] = []

    def add(self, name: str, ok: bool) -> None:
        self.results.append((name, bool(ok)))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")

    @property
    def ok(self) -> bool:
        return all(ok for _, ok in self.results)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.out is not None:
        over["output_dir"] = args.out
    if args.selector:
        over["selectors"] = tuple(args.selector)
    if getattr(args, "runs", None) is not None:
        over["monte_carlo_runs"] = args.runs
    cfg = replace(cfg, **over)
    cfg.validate()
    return cfg


def _emit(tables, cfg: ExperimentConfig, fmt: str) -> None:
    for f in (("csv", "json") if fmt == "both" else (fmt,)):
        for p in emit_report(tables, f, cfg.output_dir):
            log.info("wrote %s", p)


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg)
    checks = Checks()
    for name, m in report.selectors.items():
        print(f"{name:14s} mean {m.mean_latency_ms:7.3f} ms  p95 {m.p95_latency_ms:7.3f} ms  "
              f"switches/60s {m.switches_per_60s:7.2f}  URLLC {m.urllc_in_band:.3f}")
        checks.add(f"{name}: selection shares sum to 1", abs(sum(m.selection.values()) - 1.0) < 1e-9)
        if name.startswith("Static"):
            checks.add(f"{name}: no switches", m.switches_per_60s == 0)
    static = report.static_means
    print("static means: " + ", ".join(f"{k} {v:.3f}" for k, v in static.items()))
    if APMOEA in report.selectors:
        mean = report.selectors[APMOEA].mean_latency_ms
        checks.add("adaptive mean latency below every static profile", mean < min(static.values()))
        for k, r in report.overhead_ratios().items():
            print(f"comm overhead vs {k}: ratio {r:.3f}")
    if APMOEA in report.selectors and APMOEA_NO_RL in report.selectors:
        a = report.selectors[APMOEA].switches_per_60s
        b = report.selectors[APMOEA_NO_RL].switches_per_60s
        checks.add(f"RL switching {a:.2f} <= 0.5 x no-RL {b:.2f}", a <= 0.5 * b)
    _emit(report_tables(report), cfg, args.format)
    return 0 if checks.ok else 1


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = tuple(args.eps) if args.eps else None
    sweep = sweep_prediction_error(cfg, grid)
    for e, r in sweep.points:
        print(f"eps {e:.2f}  switches/60s {r:.2f}")
    rates = sweep.rates
    checks = Checks()
    checks.add("switch rate non-decreasing in epsilon", all(b >= a for a, b in zip(rates, rates[1:])))
    if len(rates) > 1 and rates[0] > 0:
        checks.add(f"rate ratio last/first {rates[-1] / rates[0]:.2f} >= 5", rates[-1] >= 5 * rates[0])
    _emit(report_tables(sweep=sweep), cfg, args.format)
    return 0 if checks.ok else 1


def cmd_security(args) -> int:
    cfg = _config(args)
    sec = run_security_suite(cfg)
    for row in sec.table:
        print(f"{row['scenario']:26s} {row['mitigation']:40s} {row['detected']}/{row['runs']} "
              f"regressions {row['regressions']}")
    checks = Checks()
    checks.add(f"attack detection {sec.detection_rate:.3f} == 1", sec.attacks_detected == sec.attacks_run)
    checks.add(f"version regressions {sec.regressions} == 0", sec.regressions == 0)
    checks.add(f"legitimate upgrades accepted {sec.legit_accepted}/{sec.legit_total}", sec.legit_accepted == sec.legit_total)
    checks.add(f"scripted up/down attempts {sec.scripted}", sec.scripted == [1, 1, 0, 0, 0])
    _emit(report_tables(security=sec), cfg, args.format)
    return 0 if checks.ok else 1


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    checks = Checks()
    print(f"{'profile':16s} {'runtime':>8s} {'@800MHz':>8s} {'comm KB':>8s} {'bits':>5s}")
    for p in catalog():
        s = scale_compute(p, cfg.hardware)
        print(f"{p.id.value:16s} {p.runtime_ms:8.2f} {s.runtime_ms:8.2f} {p.s_comm_kb:8.2f} {p.sec_bits:5d}")
    F = objective_arrays(NOMINAL_CONTEXT.numeric()[None, :], NOMINAL_CHANNEL, NOMINAL_HARDWARE)[0]
    front = [catalog()[i].id.value for i in pareto_front(F)]
    print("non-dominated at nominal context: " + ", ".join(front))
    probe = selection_bias_probe(magnitudes=(0.0, ATTACK_MAGNITUDE))
    for r in probe:
        print(f"manipulation {r.magnitude:.2f}: order {' < '.join(r.attacked_order)}")
    checks.add("ordering unchanged at calibrated manipulation", all(r.preserved for r in probe))
    inv = first_inversion()
    print(f"first ordering inversion at magnitude {inv}" if inv is not None else "no inversion up to 1.0")
    _emit(report_tables(probe=probe), cfg, args.format)
    return 0 if checks.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--selector", action="append", choices=SELECTORS,
                       help="selector to evaluate (repeatable)")
        p.add_argument("--format", choices=("csv", "json", "both"), default="both")
        return p

    p = common(sub.add_parser("run", help="compare selectors on the standard trace"))
    p.add_argument("--runs", type=int, help="Monte Carlo runs")
    p.set_defaults(func=cmd_run)
    p = common(sub.add_parser("sweep-eps", help="switching rate versus prediction error"))
    p.add_argument("--runs", type=int, help="Monte Carlo runs per grid point")
    p.add_argument("--eps", type=float, nargs="+", help="epsilon grid")
    p.set_defaults(func=cmd_sweep)
    common(sub.add_parser("security", help="attack matrix and scripted attempts")).set_defaults(func=cmd_security)
    common(sub.add_parser("calibrate", help="catalog tables and ordering robustness")).set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CaapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
