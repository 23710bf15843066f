"""Reproducible experiments: selectors on shared traces, metrics, reports."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from caap.adversary import (
    FAILURE_TABLE,
    ChannelSchedule,
    make_pair,
    outcome_table,
    parse_scenario,
    run_attack_suite,
    run_session,
    scripted_attempts,
)
from caap.context import (
    DEFAULT_INITIAL,
    FIELD_RANGES,
    NUMERIC_FIELDS,
    OPERATING_RANGES,
    URGENCY_WEIGHTS,
    Segment,
    TraceConfig,
    synth_trace,
    to_array,
)
from caap.costmodel import (
    PROFILE_ORDER,
    ChannelModelConfig,
    ContextRegion,
    HardwareProfile,
    WeightVector,
    estimate_latency_lipschitz,
    estimate_lipschitz,
    gap_from_losses,
    normalized_objectives,
    objective_arrays,
)
from caap.errors import ConfigError
from caap.optimizer import (
    ApmoeaConfig,
    ApmoeaMemory,
    BaselineKind,
    DynamicWeightConfig,
    Population,
    QState,
    RewardParams,
    RlOnlyAgent,
    STATIC_PROFILE,
    VariationConfig,
    apmoea_generation,
    dynamic_multipliers,
    dynamic_weight_fn,
    nsga2_select,
    _SIGN,
)
from caap.predictor import inject_error_array

APMOEA = "APMOEA"
APMOEA_NO_RL = "APMOEA-noRL"
ORACLE = "Oracle"
SELECTORS = (APMOEA, APMOEA_NO_RL, ORACLE) + tuple(k.value for k in BaselineKind)
DEFAULT_EPS_GRID = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
URLLC_BAND_MS = (5.0, 20.0)
DEFAULT_ATTACKS = tuple(s.label for s in FAILURE_TABLE) + ("ContextManipulation(0.05)",)


def standard_trace_config(seed: int = 0, duration_s: float = 60.0) -> TraceConfig:
    """Reference workload: loaded clear-channel stretches alternating with a
    noisy lightly loaded stretch and a short deep-fade burst."""
    segments = [
        Segment(15.0, {"snr_db": 26.0, "per": 0.02, "cpu_load": 0.8}),
        Segment(15.0, {"snr_db": 5.0, "per": 0.15, "cpu_load": 0.3}),
        Segment(15.0, {"snr_db": 24.0, "per": 0.03, "cpu_load": 0.8}),
        Segment(7.0, {"snr_db": 1.0, "per": 0.3, "cpu_load": 0.3}),
        Segment(8.0, {"snr_db": 25.0, "per": 0.02, "cpu_load": 0.8}),
    ]
    initial = {**DEFAULT_INITIAL, **segments[0].targets}
    return TraceConfig(duration_s=duration_s, rng_seed=seed, segments=segments, initial=initial)


@dataclass
class QParams:
    learning_rate: float = 0.1
    discount: float = 0.9
    exploration_eps: float = 0.2
    eps_decay: float = 0.995
    eps_floor: float = 0.01

    def make(self, n_actions: int, reward_params: RewardParams) -> QState:
        return QState(n_actions=n_actions, reward_params=reward_params, **asdict(self))


@dataclass
class ExperimentConfig:
    trace: TraceConfig = field(default_factory=standard_trace_config)
    channel: ChannelModelConfig = field(default_factory=ChannelModelConfig)
    hardware: HardwareProfile = field(default_factory=HardwareProfile)
    selectors: tuple[str, ...] = (APMOEA, APMOEA_NO_RL, ORACLE, "StaticLattice", "StaticCode", "StaticHash")
    apmoea: ApmoeaConfig = field(default_factory=ApmoeaConfig)
    q: QParams = field(default_factory=QParams)
    reward: RewardParams = field(default_factory=RewardParams)
    epsilon: float = 0.05
    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID
    monte_carlo_runs: int = 200
    master_seed: int = 0
    output_dir: str = "out"
    attack_scenarios: tuple[str, ...] = DEFAULT_ATTACKS
    security_runs: int = 100

    def validate(self) -> None:
        self.trace.validate()
        if self.monte_carlo_runs < 1:
            raise ConfigError("monte_carlo_runs", "must be >= 1")
        for i, s in enumerate(self.selectors):
            if s not in SELECTORS:
                raise ConfigError(f"selectors[{i}]", f"unknown selector {s!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ConfigError("epsilon", "must be finite and >= 0")
        if self.security_runs < 0:
            raise ConfigError("security_runs", "must be >= 0")
        for i, label in enumerate(self.attack_scenarios):
            try:
                parse_scenario(label)
            except ValueError as exc:
                raise ConfigError(f"attack_scenarios[{i}]", str(exc)) from exc
        grid = list(self.eps_grid)
        if not grid or any(e < 0 for e in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("eps_grid", "must be non-empty, non-negative and strictly increasing")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        data = dict(data or {})
        kw = {}
        try:
            if "trace" in data:
                t = dict(data.pop("trace"))
                seed = int(t.pop("rng_seed", 0))
                base = standard_trace_config(seed).to_dict() if t.pop("standard", True) else TraceConfig(rng_seed=seed).to_dict()
                base.update(t)
                kw["trace"] = TraceConfig.from_dict(base)
            for key, typ, path in (("channel", ChannelModelConfig, "channel"), ("hardware", HardwareProfile, "hardware"),
                                   ("q", QParams, "q"), ("reward", RewardParams, "reward")):
                if key in data:
                    kw[key] = _build(typ, data.pop(key), path)
            if "apmoea" in data:
                a = dict(data.pop("apmoea"))
                if "base_weights" in a:
                    bw = a.pop("base_weights")
                    a["base_weights"] = WeightVector(*bw) if isinstance(bw, (list, tuple)) else _build(WeightVector, bw, "apmoea.base_weights")
                if "dynamic" in a:
                    a["dynamic"] = _build(DynamicWeightConfig, a.pop("dynamic"), "apmoea.dynamic")
                if "variation" in a:
                    a["variation"] = _build(VariationConfig, a.pop("variation"), "apmoea.variation")
                kw["apmoea"] = _build(ApmoeaConfig, a, "apmoea")
            for key in ("selectors", "eps_grid", "attack_scenarios"):
                if key in data:
                    kw[key] = tuple(data.pop(key))
            for key in ("epsilon", "monte_carlo_runs", "master_seed", "output_dir", "security_runs"):
                if key in data:
                    kw[key] = data.pop(key)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("config", str(exc)) from exc
        if data:
            raise ConfigError(sorted(data)[0], "unknown key")
        cfg = cls(**kw)
        cfg.validate()
        return cfg


def _build(typ, data, path):
    if not isinstance(data, Mapping):
        raise ConfigError(path, "expected a mapping")
    known = {f.name for f in fields(typ)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{path}.{k}", "unknown key")
    try:
        return typ(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


# --------------------------------------------------------------------------
# One Monte Carlo run


@dataclass
class TraceArrays:
    """Everything a selector may look at for one run, precomputed."""

    X: np.ndarray
    urgency_w: np.ndarray
    raw_true: np.ndarray  # (T, P, 4)
    norm_true: np.ndarray
    mult_true: np.ndarray
    X_hat: np.ndarray
    raw_hat: np.ndarray
    norm_hat: np.ndarray
    mult_hat: np.ndarray

    @property
    def latency(self) -> np.ndarray:
        return self.raw_true[:, :, 0]

    @property
    def steps(self) -> int:
        return len(self.X)


def build_arrays(trace, epsilon: float, ch, hw, dyn: DynamicWeightConfig, seed) -> TraceArrays:
    X = to_array(trace)
    u = np.array([URGENCY_WEIGHTS[x.urgency] for x in trace])
    raw = objective_arrays(X, ch, hw)
    X_hat = inject_error_array(X, epsilon, np.random.default_rng(seed))
    raw_hat = objective_arrays(X_hat, ch, hw)
    return TraceArrays(
        X, u, raw, normalized_objectives(raw), dynamic_multipliers(X, u, dyn),
        X_hat, raw_hat, normalized_objectives(raw_hat), dynamic_multipliers(X_hat, u, dyn),
    )


@dataclass
class SelectorRun:
    choices: np.ndarray
    weights: np.ndarray | None = None  # consensus weights per step (APMOEA)
    hysteresis: np.ndarray | None = None
    pareto: np.ndarray | None = None


def run_apmoea(arr: TraceArrays, cfg: ApmoeaConfig, qp: QParams, rp: RewardParams, seed) -> SelectorRun:
    rng = np.random.default_rng(seed)
    pop = Population.uniform(cfg.population_size, cfg.base_weights)
    q = qp.make(6, rp) if cfg.rl_enabled else None
    mem = ApmoeaMemory(residuals=deque(maxlen=cfg.residual_window))
    T = arr.steps
    choices = np.empty(T, dtype=np.int64)
    weights = np.empty((T, 4))
    hyst = np.zeros(T)
    pareto = np.empty((T, len(PROFILE_ORDER)), dtype=bool)
    current = None
    lat = arr.latency
    for t in range(T):
        obs = None
        if t > 0:
            obs = (arr.norm_true[t - 1], lat[t - 1], float(arr.X[t - 1, 0]))
        d, pop = apmoea_generation(
            pop, arr.raw_hat[t], arr.norm_hat[t], arr.mult_hat[t], current, q, mem, obs, cfg, rng, rp
        )
        current = d.profile_index
        choices[t] = current
        weights[t] = d.weights
        hyst[t] = d.hysteresis
        pareto[t] = d.pareto_flags
    return SelectorRun(choices, weights, hyst, pareto)


def oracle_choices(arr: TraceArrays, weights: np.ndarray) -> np.ndarray:
    """Fixed-order argmin of the true-context loss under per-step weights."""
    W = np.broadcast_to(weights, (arr.steps, 4)) * arr.mult_true * _SIGN
    L = np.einsum("tpk,tk->tp", arr.norm_true, W)
    return _argmin_rows(L)


def _argmin_rows(L: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    # earliest column within atol of the row minimum
    return np.argmax(L <= L.min(axis=1, keepdims=True) + atol, axis=1)


def run_nsga2(arr: TraceArrays) -> SelectorRun:
    # decides on the last observed context, no forecast
    T = arr.steps
    out = np.empty(T, dtype=np.int64)
    cache: dict[bytes, int] = {}
    for t in range(T):
        obs = arr.raw_true[max(t - 1, 0)]
        key = obs.tobytes()
        if key not in cache:
            cache[key] = nsga2_select(obs)
        out[t] = cache[key]
    return SelectorRun(out)


def run_rl_only(arr: TraceArrays, qp: QParams, rp: RewardParams, seed) -> SelectorRun:
    rng = np.random.default_rng(seed)
    agent = RlOnlyAgent(q=qp.make(len(PROFILE_ORDER), rp))
    T = arr.steps
    out = np.empty(T, dtype=np.int64)
    sec = arr.raw_true[0, :, 3]
    lat = arr.latency
    last_switched = False
    for t in range(T):
        if t == 0:
            a = agent.select(None, float(arr.X[0, 0]), rng, False, sec)
        else:
            a = agent.select(float(lat[t - 1, out[t - 1]]), float(arr.X[t - 1, 0]), rng, last_switched, sec)
        last_switched = t > 0 and a != out[t - 1]
        out[t] = a
    return SelectorRun(out)


def run_selector(name: str, arr: TraceArrays, cfg: ExperimentConfig, seed) -> SelectorRun:
    if name == APMOEA:
        return run_apmoea(arr, cfg.apmoea, cfg.q, cfg.reward, seed)
    if name == APMOEA_NO_RL:
        return run_apmoea(arr, _no_rl(cfg.apmoea), cfg.q, cfg.reward, seed)
    if name == ORACLE:
        return SelectorRun(oracle_choices(arr, cfg.apmoea.base_weights.as_array()))
    kind = BaselineKind(name)
    if kind in STATIC_PROFILE:
        return SelectorRun(np.full(arr.steps, PROFILE_ORDER.index(STATIC_PROFILE[kind])))
    if kind is BaselineKind.NSGA_II:
        return run_nsga2(arr)
    return run_rl_only(arr, cfg.q, cfg.reward, seed)


def _no_rl(a: ApmoeaConfig) -> ApmoeaConfig:
    return replace(a, rl_enabled=False)


# --------------------------------------------------------------------------
# Metrics


@dataclass
class SelectorMetrics:
    mean_latency_ms: float
    p95_latency_ms: float
    switches_per_60s: float
    selection: dict[str, float]
    comm_kb_per_decision: float
    urllc_within_budget: float
    urllc_in_band: float
    decisions: int


@dataclass
class MetricsReport:
    selectors: dict[str, SelectorMetrics]
    runs: int
    duration_s: float
    epsilon: float
    master_seed: int
    static_means: dict[str, float] = field(default_factory=dict)
    oracle_mismatch: dict[str, int] = field(default_factory=dict)

    def overhead_ratios(self, selector: str = APMOEA) -> dict[str, float]:
        """Adaptive communication overhead relative to each static profile."""
        ref = self.selectors[selector].comm_kb_per_decision
        return {
            k: ref / m.comm_kb_per_decision
            for k, m in self.selectors.items()
            if k.startswith("Static") and m.comm_kb_per_decision > 0
        }


def switches(choices: np.ndarray) -> int:
    return int(np.count_nonzero(np.diff(choices)))


def _collect(acc: dict, name: str, arr: TraceArrays, run: SelectorRun):
    T = arr.steps
    lat = arr.latency[np.arange(T), run.choices]
    s_comm = arr.raw_true[0, :, 2]
    a = acc.setdefault(name, {"lat": [], "sw": 0, "counts": np.zeros(len(PROFILE_ORDER)), "comm": 0.0})
    a["lat"].append(lat)
    a["sw"] += switches(run.choices)
    a["counts"] += np.bincount(run.choices, minlength=len(PROFILE_ORDER))
    a["comm"] += float(s_comm[run.choices].sum())


def _summarise(acc: dict, runs: int, duration_s: float) -> dict[str, SelectorMetrics]:
    out = {}
    lo, hi = URLLC_BAND_MS
    for name, a in acc.items():
        lat = np.concatenate(a["lat"])
        n = len(lat)
        out[name] = SelectorMetrics(
            mean_latency_ms=float(lat.mean()),
            p95_latency_ms=float(np.percentile(lat, 95)),
            switches_per_60s=a["sw"] / runs * 60.0 / duration_s,
            selection={p.value: float(c / n) for p, c in zip(PROFILE_ORDER, a["counts"])},
            comm_kb_per_decision=a["comm"] / n,
            urllc_within_budget=float(np.mean(lat <= hi)),
            urllc_in_band=float(np.mean((lat >= lo) & (lat <= hi))),
            decisions=n,
        )
    return out


def run_seeds(cfg: ExperimentConfig, r: int) -> tuple[int, int, int]:
    """(trace seed, prediction-error seed, selector seed) for run ``r``."""
    ss = np.random.SeedSequence([cfg.master_seed, r])
    a, b, c = ss.generate_state(3)
    return int(a), int(b), int(c)


def prepare_run(cfg: ExperimentConfig, r: int, epsilon: float | None = None):
    trace_seed, err_seed, sel_seed = run_seeds(cfg, r)
    tc = TraceConfig(**{**{f.name: getattr(cfg.trace, f.name) for f in fields(TraceConfig)}, "rng_seed": trace_seed})
    trace = synth_trace(tc)
    eps = cfg.epsilon if epsilon is None else epsilon
    arr = build_arrays(trace, eps, cfg.channel, cfg.hardware, cfg.apmoea.dynamic, err_seed)
    return trace, arr, sel_seed


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Evaluate every configured selector on the same trace per run and
    average over ``monte_carlo_runs`` runs."""
    cfg.validate()
    acc: dict = {}
    mismatch: dict[str, int] = {}
    static_sum = np.zeros(len(PROFILE_ORDER))
    n = 0
    for r in range(cfg.monte_carlo_runs):
        _, arr, sel_seed = prepare_run(cfg, r)
        static_sum += arr.latency.sum(axis=0)
        n += arr.steps
        for name in cfg.selectors:
            run = run_selector(name, arr, cfg, sel_seed)
            _collect(acc, name, arr, run)
            if run.weights is not None:
                o = oracle_choices(arr, run.weights)
                mismatch[name] = mismatch.get(name, 0) + int(np.count_nonzero(o != run.choices))
    return MetricsReport(
        _summarise(acc, cfg.monte_carlo_runs, cfg.trace.duration_s),
        cfg.monte_carlo_runs, cfg.trace.duration_s, cfg.epsilon, cfg.master_seed,
        static_means={p.value: float(v / n) for p, v in zip(PROFILE_ORDER, static_sum)},
        oracle_mismatch=mismatch,
    )


@dataclass
class SweepResult:
    points: list[tuple[float, float]]

    def __post_init__(self):
        eps = [e for e, _ in self.points]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon grid must be strictly increasing")

    @property
    def rates(self) -> list[float]:
        return [r for _, r in self.points]


def sweep_prediction_error(cfg: ExperimentConfig, eps_grid: Sequence[float] | None = None,
                           selector: str = APMOEA) -> SweepResult:
    """Mean switches per 60 s of ``selector`` at each prediction-error bound.

    Every grid point reuses the same traces and selector seeds; only the
    forecast error changes.
    """
    grid = tuple(cfg.eps_grid if eps_grid is None else eps_grid)
    cfg.validate()
    SweepResult([(e, 0.0) for e in grid])  # validates ordering
    points = []
    for eps in grid:
        total = 0
        for r in range(cfg.monte_carlo_runs):
            _, arr, sel_seed = prepare_run(cfg, r, eps)
            total += switches(run_selector(selector, arr, cfg, sel_seed).choices)
        points.append((float(eps), total / cfg.monte_carlo_runs * 60.0 / cfg.trace.duration_s))
    return SweepResult(points)


# --------------------------------------------------------------------------
# Security suite


@dataclass
class SecurityReport:
    table: list[dict]
    attacks_run: int
    attacks_detected: int
    regressions: int
    legit_total: int
    legit_accepted: int
    scripted: list[int]

    @property
    def detection_rate(self) -> float:
        return self.attacks_detected / self.attacks_run if self.attacks_run else 1.0

    @property
    def legit_rate(self) -> float:
        return self.legit_accepted / self.legit_total if self.legit_total else 1.0

    @property
    def failures(self) -> list[str]:
        out = []
        if self.attacks_detected != self.attacks_run:
            out.append(f"{self.attacks_run - self.attacks_detected} attack runs undetected")
        if self.regressions:
            out.append(f"{self.regressions} version regressions")
        if self.legit_accepted != self.legit_total:
            out.append(f"{self.legit_total - self.legit_accepted} legitimate upgrades not accepted in one round trip")
        if self.scripted != SCRIPTED_EXPECTED:
            out.append(f"scripted attempts gave {self.scripted}")
        return out

    @property
    def passed(self) -> bool:
        return not self.failures


SCRIPTED_STEPS = ("up", "up", "down", "down", "down")
SCRIPTED_EXPECTED = [1, 1, 0, 0, 0]


def run_security_suite(cfg: ExperimentConfig) -> SecurityReport:
    """Every configured attack for ``security_runs`` seeds, plus one honest
    upgrade per seed and the scripted up/down sequence."""
    cfg.validate()
    scenarios = [parse_scenario(s) for s in cfg.attack_scenarios]
    seeds = [cfg.master_seed * 1_000_003 + i for i in range(cfg.security_runs)]
    outcomes = run_attack_suite(make_pair, scenarios, seeds)
    accepted = 0
    for seed in seeds:
        a, b = make_pair(seed)
        res = run_session(a, b, a.current_version + 1, ChannelSchedule(one_way_ms=a.rtt_ms / 2), np.random.default_rng(seed))
        accepted += int(res.committed and res.round_trips == 1 and b.current_version == a.current_version)
    return SecurityReport(
        table=outcome_table(outcomes),
        attacks_run=len(outcomes),
        attacks_detected=sum(o.detected for o in outcomes),
        regressions=sum(o.regressed for o in outcomes),
        legit_total=len(seeds),
        legit_accepted=accepted,
        scripted=scripted_attempts(SCRIPTED_STEPS, cfg.master_seed),
    )


# --------------------------------------------------------------------------
# Reports

OVERHEAD_TARGET = 0.65


def report_tables(report: MetricsReport | None = None, sweep: SweepResult | None = None,
                  security: SecurityReport | None = None, probe: Sequence | None = None) -> dict[str, list[dict]]:
    """Flatten results into named tables of plain rows, in a fixed order."""
    tables: dict[str, list[dict]] = {}
    if report is not None:
        tables["latency"] = [
            {"selector": k, "mean_latency_ms": m.mean_latency_ms, "p95_latency_ms": m.p95_latency_ms,
             "switches_per_60s": m.switches_per_60s, "comm_kb_per_decision": m.comm_kb_per_decision,
             "urllc_within_budget": m.urllc_within_budget, "urllc_in_band": m.urllc_in_band, "decisions": m.decisions}
            for k, m in report.selectors.items()
        ]
        tables["selection"] = [
            {"selector": k, "profile": p, "share": v}
            for k, m in report.selectors.items() for p, v in m.selection.items()
        ]
        tables["static_means"] = [{"profile": p, "mean_latency_ms": v} for p, v in report.static_means.items()]
        if APMOEA in report.selectors:
            tables["overhead"] = [
                {"baseline": k, "ratio": r, "reduction": 1.0 - r,
                 "near_target": abs((1.0 - r) - OVERHEAD_TARGET) <= 0.05}
                for k, r in report.overhead_ratios().items()
            ]
        tables["oracle_mismatch"] = [{"selector": k, "mismatches": v} for k, v in report.oracle_mismatch.items()]
    if probe is not None:
        tables["ordering"] = [
            {"magnitude": r.magnitude, "profile": p.value, "honest_cost": h, "attacked_cost": a,
             "preserved": r.preserved}
            for r in probe for p, h, a in zip(PROFILE_ORDER, r.honest_costs, r.attacked_costs)
        ]
    if security is not None:
        tables["attacks"] = list(security.table)
        tables["attempts"] = [{"attempt": i + 1, "step": s, "outcome": o}
                              for i, (s, o) in enumerate(zip(SCRIPTED_STEPS, security.scripted))]
    if sweep is not None:
        tables["sweep"] = [{"epsilon": e, "switches_per_60s": r} for e, r in sweep.points]
    return {k: [{c: _plain(v) for c, v in row.items()} for row in rows] for k, rows in tables.items()}


def _plain(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    return v


def emit_report(tables: Mapping[str, list[dict]], fmt: str, out_dir: str | Path) -> list[Path]:
    """Write ``tables`` as one JSON document or one CSV per table.

    Floats are written with their shortest round-trip representation, so both
    formats carry identical numbers and identical inputs give identical bytes.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("output_dir", f"cannot create {out}: {exc}") from exc
    written = []
    try:
        if fmt == "json":
            path = out / "report.json"
            path.write_text(json.dumps(tables, indent=2) + "\n")
            written.append(path)
        else:
            for name, rows in tables.items():
                path = out / f"{name}.csv"
                buf = io.StringIO()
                cols = list(rows[0]) if rows else []
                w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
                path.write_text(buf.getvalue())
                written.append(path)
    except OSError as exc:
        raise ConfigError("output_dir", f"cannot write to {out}: {exc}") from exc
    return written


def read_csv_tables(paths: Sequence[Path]) -> dict[str, list[dict]]:
    """Parse emitted CSV files back, converting numeric and boolean cells."""
    def conv(s: str):
        if s in ("True", "False"):
            return s == "True"
        for typ in (int, float):
            try:
                return typ(s)
            except ValueError:
                pass
        return s

    return {Path(p).stem: [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(open(p))] for p in paths}


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment config."""
    import yaml

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError("config", "top level must be a mapping")
    return ExperimentConfig.from_dict(data or {})


# --------------------------------------------------------------------------
# Executable stability and boundedness checks

_SPAN = np.array([FIELD_RANGES[f][1] - FIELD_RANGES[f][0] for f in NUMERIC_FIELDS])
_OP_LO = np.array([OPERATING_RANGES[f][0] for f in NUMERIC_FIELDS])
_OP_HI = np.array([OPERATING_RANGES[f][1] for f in NUMERIC_FIELDS])


def local_region(x, epsilon: float) -> ContextRegion:
    """Every context a forecast within ``epsilon`` of ``x`` can land on."""
    v = x.numeric()
    lo = np.maximum(v - epsilon * _SPAN, np.minimum(_OP_LO, v))
    hi = np.minimum(v + epsilon * _SPAN, np.maximum(_OP_HI, v))
    return ContextRegion(lo, hi, (x.urgency,))


@dataclass
class StabilityResult:
    epsilon: float
    steps: int
    qualifying: int
    mismatches_when_qualifying: int
    mismatches_total: int


def decision_stability(cfg: ExperimentConfig, epsilon: float, runs: int = 1, samples: int = 300) -> StabilityResult:
    """Compare APMOEA against the oracle on every step where the local
    Lipschitz bound guarantees the forecast cannot change the argmin.

    At each step K is estimated over the epsilon-box around the true context
    with the step's consensus weights (dynamic multipliers included), and
    the step qualifies when ``K * epsilon`` is below the loss gap there.
    """
    steps = qualifying = bad = total_bad = 0
    for r in range(runs):
        trace, arr, seed = prepare_run(cfg, r, epsilon)
        run = run_apmoea(arr, cfg.apmoea, cfg.q, cfg.reward, seed)
        oracle = oracle_choices(arr, run.weights)
        for t, x in enumerate(trace):
            w = WeightVector.from_array(run.weights[t])
            losses = arr.norm_true[t] @ (run.weights[t] * arr.mult_true[t] * _SIGN)
            gap = gap_from_losses(losses)
            lip = 0.0
            if epsilon > 0:
                lip = estimate_lipschitz(dynamic_weight_fn(w, cfg.apmoea.dynamic), cfg.channel, cfg.hardware,
                                       local_region(x, epsilon), samples=samples, seed=t)
            ok = lip * epsilon < gap
            miss = oracle[t] != run.choices[t]
            steps += 1
            qualifying += ok
            bad += ok and miss
            total_bad += miss
    return StabilityResult(epsilon, steps, qualifying, int(bad), int(total_bad))


@dataclass
class LatencyBoundResult:
    k_lat: float
    delta: float
    pairs: int
    drift_violations: int
    ceiling_violations: int


def latency_boundedness(cfg: ExperimentConfig, selector: str = APMOEA, run_index: int = 0,
                        samples: int = 4000) -> LatencyBoundResult:
    """Check per-step latency drift of the selected profile against K_lat * delta.

    ``delta`` is the trace's per-step drift bound in normalised L-infinity
    units; K_lat is the finite-difference latency estimate over the box the
    trace spans.
    """
    trace, arr, seed = prepare_run(cfg, run_index)
    choices = run_selector(selector, arr, cfg, seed).choices
    bounds = cfg.trace.drift_bounds
    delta = max(bounds.get(f, 0.0) / (FIELD_RANGES[f][1] - FIELD_RANGES[f][0]) for f in NUMERIC_FIELDS)
    k_lat = estimate_latency_lipschitz(cfg.channel, cfg.hardware, ContextRegion.around(trace), samples=samples)
    lat = arr.latency
    T = arr.steps
    held = lat[1:, :][np.arange(T - 1), choices[:-1]] - lat[:-1, :][np.arange(T - 1), choices[:-1]]
    drift_bad = int(np.count_nonzero(np.abs(held) > k_lat * delta * (1 + 1e-9)))
    ceiling_bad = int(np.count_nonzero(lat[np.arange(T), choices] > lat.max(axis=1)))
    return LatencyBoundResult(k_lat, delta, T - 1, drift_bad, ceiling_bad)
