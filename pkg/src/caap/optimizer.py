"""Evolutionary profile selection with Q-learning stabilisation.

A population of (profile, weight vector) candidates evolves once per
decision step. Fitness is each candidate's own context-weighted loss, with
an anchoring penalty that keeps weights from drifting off towards trivially
low losses. The decision itself is made with the population's consensus
weights: the minimum-loss profile among the Pareto-optimal profiles present
in the population. A tabular Q-learning agent picks, per step, a
mutation-rate multiplier and whether to grant the incumbent profile a
switching hysteresis bonus.

The per-step hot path works on precomputed arrays (normalised objectives,
dynamic-weight multipliers) so Monte Carlo runs stay fast; the public
functions taking ``ContextVector`` inputs route through the same code.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from caap.context import (
    NUMERIC_FIELDS,
    URGENCY_WEIGHTS,
    ContextVector,
    Urgency,
)
from caap.costmodel import (
    PROFILE_ORDER,
    ChannelModelConfig,
    HardwareProfile,
    ObjectiveVector,
    ProfileId,
    WeightVector,
    objective_arrays,
    normalized_objectives,
    argmin_fixed_order,
)

N_PROFILES = len(PROFILE_ORDER)
_SIGN = np.array([1.0, 1.0, 1.0, -1.0])
_IDX = {f: i for i, f in enumerate(NUMERIC_FIELDS)}
_PROFILE_INDEX = {p: i for i, p in enumerate(PROFILE_ORDER)}

MAX_POPULATION = 40


class BaselineKind(str, enum.Enum):
    STATIC_LATTICE = "StaticLattice"
    STATIC_CODE = "StaticCode"
    STATIC_HASH = "StaticHash"
    NSGA_II = "NsgaII"
    RL_ONLY = "RlOnly"


STATIC_PROFILE = {
    BaselineKind.STATIC_LATTICE: ProfileId.KYBER768,
    BaselineKind.STATIC_CODE: ProfileId.MCELIECE348864,
    BaselineKind.STATIC_HASH: ProfileId.SPHINCSPLUS128S,
}


# --------------------------------------------------------------------------
# Dynamic weights


@dataclass(frozen=True)
class DynamicWeightConfig:
    """Piecewise-linear context multipliers applied to the base weights.

    Every multiplier is 1 for telemetry traffic on a clean, lightly loaded
    link, so base weights pass through unchanged there.
    """

    urgency_gain: float = 2.5
    per_threshold: float = 0.1
    per_gain: float = 5.0
    load_threshold: float = 0.6
    load_gain: float = 15.0
    snr_threshold_db: float = 10.0
    snr_gain_per_db: float = 0.1


DEFAULT_DYNAMIC = DynamicWeightConfig()
_TELEMETRY_U = URGENCY_WEIGHTS[Urgency.TELEMETRY]


def dynamic_multipliers(X: np.ndarray, urgency_w: np.ndarray, cfg: DynamicWeightConfig = DEFAULT_DYNAMIC) -> np.ndarray:
    """Multipliers (T, 4) for contexts (T, F) and urgency weights (T,)."""
    X = np.atleast_2d(X)
    u = np.broadcast_to(np.asarray(urgency_w, dtype=float), (X.shape[0],))
    M = np.ones((X.shape[0], 4))
    M[:, 0] += cfg.urgency_gain * np.maximum(0.0, u - _TELEMETRY_U)
    M[:, 1] += cfg.load_gain * np.maximum(0.0, X[:, _IDX["cpu_load"]] - cfg.load_threshold)
    M[:, 2] += cfg.per_gain * np.maximum(0.0, X[:, _IDX["per"]] - cfg.per_threshold)
    M[:, 3] += cfg.snr_gain_per_db * np.maximum(0.0, cfg.snr_threshold_db - X[:, _IDX["snr_db"]])
    return M


def dynamic_weights(predicted: ContextVector, base: WeightVector, cfg: DynamicWeightConfig = DEFAULT_DYNAMIC) -> WeightVector:
    m = dynamic_multipliers(predicted.numeric()[None, :], [predicted.urgency_weight], cfg)[0]
    return WeightVector.from_array(base.as_array() * m)


def dynamic_weight_fn(base: WeightVector, cfg: DynamicWeightConfig = DEFAULT_DYNAMIC):
    """Callable form for :func:`caap.costmodel.estimate_lipschitz`."""
    b = base.as_array()

    def fn(X, urgency):
        return b * dynamic_multipliers(X, URGENCY_WEIGHTS[Urgency(urgency)], cfg)

    return fn


# --------------------------------------------------------------------------
# Population


@dataclass(frozen=True)
class Candidate:
    profile_id: ProfileId
    weights: WeightVector


@dataclass
class Population:
    """Candidates stored column-wise: profile indices (N,) and weights (N, 4)."""

    profile_idx: np.ndarray
    weights: np.ndarray
    generation: int = 0

    def __post_init__(self):
        self.profile_idx = np.asarray(self.profile_idx, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        n = len(self.profile_idx)
        if n == 0:
            raise ValueError("population must be non-empty")
        if self.weights.shape != (n, 4):
            raise ValueError("weights must have shape (N, 4)")
        if np.any(self.profile_idx < 0) or np.any(self.profile_idx >= N_PROFILES):
            raise ValueError("profile index outside the catalog")
        if np.any(self.weights < 0):
            raise ValueError("weights must be >= 0")

    def __len__(self) -> int:
        return len(self.profile_idx)

    @property
    def members(self) -> list[Candidate]:
        return [
            Candidate(PROFILE_ORDER[int(i)], WeightVector.from_array(w))
            for i, w in zip(self.profile_idx, self.weights)
        ]

    @classmethod
    def from_candidates(cls, members: Sequence[Candidate], generation: int = 0) -> "Population":
        return cls(
            np.array([_PROFILE_INDEX[ProfileId(c.profile_id)] for c in members]),
            np.array([c.weights.as_array() for c in members]).reshape(len(members), 4),
            generation,
        )

    @classmethod
    def uniform(cls, size: int, base: WeightVector) -> "Population":
        """``size`` candidates cycling through the catalog, all with ``base`` weights."""
        if not 1 <= size <= MAX_POPULATION:
            raise ValueError(f"population size must lie in [1, {MAX_POPULATION}]")
        idx = np.arange(size) % N_PROFILES
        return cls(idx, np.tile(base.as_array(), (size, 1)))

    def copy(self) -> "Population":
        return Population(self.profile_idx.copy(), self.weights.copy(), self.generation)


def _own_losses(pop: Population, norm_obj: np.ndarray, mult: np.ndarray) -> np.ndarray:
    """Each candidate's loss under its own dynamically adjusted weights."""
    wd = pop.weights * mult * _SIGN
    return np.einsum("nk,nk->n", wd, norm_obj[pop.profile_idx])


def _context_arrays(x: ContextVector, ch, hw):
    F = objective_arrays(x.numeric()[None, :], ch, hw)
    return F[0], normalized_objectives(F)[0], dynamic_multipliers(x.numeric()[None, :], [x.urgency_weight])[0]


def evaluate_fitness(pop: Population, predicted: ContextVector, ch: ChannelModelConfig, hw: HardwareProfile,
                     dyn: DynamicWeightConfig = DEFAULT_DYNAMIC) -> np.ndarray:
    """Loss of every candidate's profile at ``predicted`` under its own
    dynamically adjusted weights (objectives normalised over the catalog)."""
    F = objective_arrays(predicted.numeric()[None, :], ch, hw)
    mult = dynamic_multipliers(predicted.numeric()[None, :], [predicted.urgency_weight], dyn)[0]
    return _own_losses(pop, normalized_objectives(F)[0], mult)


def _better(i: np.ndarray, j: np.ndarray, scores: np.ndarray, pidx: np.ndarray) -> np.ndarray:
    """Element-wise winner of pairs (i, j): lower score, then earlier profile."""
    si, sj = scores[i], scores[j]
    take_i = (si < sj) | ((si == sj) & (pidx[i] <= pidx[j]))
    return np.where(take_i, i, j)


def tournament_select(pop: Population, scores, k: int = 2, rng: np.random.Generator | None = None) -> Candidate:
    """Return the lowest-score member of ``k`` members drawn with replacement."""
    rng = rng if rng is not None else np.random.default_rng()
    scores = np.asarray(scores, dtype=float)
    picks = rng.integers(0, len(pop), size=k)
    best = picks[0]
    for j in picks[1:]:
        best = int(_better(np.array([best]), np.array([j]), scores, pop.profile_idx)[0])
    return pop.members[best]


@dataclass(frozen=True)
class VariationConfig:
    blend_low: float = 0.3
    blend_high: float = 0.7
    # largest mutation step, as a fraction of WEIGHT_RANGE
    mutation_step: float = 0.10
    weight_range: float = 1.0
    exploration: float = 0.05


DEFAULT_VARIATION = VariationConfig()


def _vary(wa, wb, pa, pb, rate, rng, var: VariationConfig):
    m = len(pa)
    beta = rng.uniform(var.blend_low, var.blend_high, (m, 1))
    child = beta * wa + (1.0 - beta) * wb
    mutate = rng.random((m, 4)) < rate
    step = rng.uniform(-1.0, 1.0, (m, 4)) * var.mutation_step * var.weight_range
    child = np.maximum(0.0, child + np.where(mutate, step, 0.0))
    prof = np.where(rng.random(m) < 0.5, pa, pb)
    explore = rng.random(m) < var.exploration
    prof = np.where(explore, rng.integers(0, N_PROFILES, m), prof)
    return child, prof


def crossover_mutate(a: Candidate, b: Candidate, mutation_rate: float, rng: np.random.Generator,
                     var: VariationConfig = DEFAULT_VARIATION) -> Candidate:
    """Blend the parents' weights, mutate, and inherit (or explore) a profile."""
    if not 0.0 <= mutation_rate <= 1.0:
        raise ValueError("mutation_rate must lie in [0, 1]")
    w, p = _vary(
        a.weights.as_array()[None, :], b.weights.as_array()[None, :],
        np.array([_PROFILE_INDEX[ProfileId(a.profile_id)]]), np.array([_PROFILE_INDEX[ProfileId(b.profile_id)]]),
        mutation_rate, rng, var,
    )
    return Candidate(PROFILE_ORDER[int(p[0])], WeightVector.from_array(w[0]))


# --------------------------------------------------------------------------
# Pareto machinery


def _as_matrix(vectors) -> np.ndarray:
    return np.array([v.as_tuple() if isinstance(v, ObjectiveVector) else v for v in vectors], dtype=float).reshape(-1, 4)


def dominance_matrix(F: np.ndarray) -> np.ndarray:
    """D[i, j] is True when row i dominates row j.

    Columns 0-2 are minimised and column 3 (security) is maximised.
    """
    G = np.asarray(F, dtype=float) * _SIGN
    le = np.all(G[:, None, :] <= G[None, :, :], axis=2)
    lt = np.any(G[:, None, :] < G[None, :, :], axis=2)
    return le & lt


def pareto_front(vectors) -> list[int]:
    F = _as_matrix(vectors)
    if len(F) == 0:
        raise ValueError("need at least one objective vector")
    return [int(i) for i in np.flatnonzero(~dominance_matrix(F).any(axis=0))]


def fast_non_dominated_sort(F) -> list[list[int]]:
    F = _as_matrix(F)
    D = dominance_matrix(F)
    count = D.sum(axis=0)
    fronts = []
    remaining = np.ones(len(F), dtype=bool)
    while remaining.any():
        front = np.flatnonzero(remaining & (count == 0))
        fronts.append([int(i) for i in front])
        remaining[front] = False
        count = count - D[front].sum(axis=0)
        count[~remaining] = -1
    return fronts


def crowding_distance(F) -> np.ndarray:
    F = _as_matrix(F)
    n = len(F)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = math.inf
        return dist
    for k in range(F.shape[1]):
        order = np.argsort(F[:, k], kind="stable")
        span = F[order[-1], k] - F[order[0], k]
        dist[order[0]] = dist[order[-1]] = math.inf
        if span > 0:
            dist[order[1:-1]] += (F[order[2:], k] - F[order[:-2], k]) / span
    return dist


def knee_point(F, members: Sequence[int], crowd: np.ndarray | None = None) -> int:
    """Member closest (Euclidean) to the ideal point in normalised space.

    Objectives are min-max normalised over all rows of ``F``; security is
    flipped so every normalised axis is "smaller is better". Exact distance
    ties go to the larger crowding distance, then the earlier member.
    """
    F = _as_matrix(F)
    lo = F.min(axis=0)
    span = F.max(axis=0) - lo
    Z = np.where(span > 0, (F - lo) / np.where(span > 0, span, 1.0), 0.0)
    Z[:, 3] = np.where(span[3] > 0, 1.0 - Z[:, 3], 0.0)
    members = list(members)
    d = np.linalg.norm(Z[members], axis=1)
    tied = np.flatnonzero(np.isclose(d, d.min(), rtol=0.0, atol=1e-12))
    if crowd is not None and len(tied) > 1:
        c = np.asarray(crowd)[tied]
        tied = tied[c == c.max()]
    return members[int(tied[0])]


def nsga2_select(F) -> int:
    """NSGA-II ranking over profile objectives: the knee of the first front."""
    F = _as_matrix(F)
    first = fast_non_dominated_sort(F)[0]
    return knee_point(F, first, crowding_distance(F[first]))


# --------------------------------------------------------------------------
# Reinforcement learning


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.01

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("reward parameters must be >= 0")


def reward(t_lat: float, n_switch: float, snr_db: float, sigma_sec: float, params: RewardParams = RewardParams()) -> float:
    return -t_lat - params.alpha * n_switch + params.beta * snr_db + params.gamma * sigma_sec


# Latency thirds of the 5-20 ms budget, SNR bands in dB.
LATENCY_EDGES = (10.0, 15.0)
SNR_EDGES = (5.0, 15.0)
MUTATION_MULTIPLIERS = (0.5, 1.0, 2.0)
ACTIONS = tuple((m, hyst) for m in MUTATION_MULTIPLIERS for hyst in (False, True))


def bucket(value: float, edges: Sequence[float]) -> int:
    return int(np.searchsorted(edges, value, side="right"))


@dataclass
class QState:
    """Tabular Q function over (latency bucket, SNR bucket, profile) x action.

    ``n_actions`` is 6 for the optimizer agent (``ACTIONS``) and 4 for the
    profile-picking baseline.
    """

    n_actions: int = len(ACTIONS)
    learning_rate: float = 0.1
    discount: float = 0.9
    exploration_eps: float = 0.2
    eps_decay: float = 0.995
    eps_floor: float = 0.01
    reward_params: RewardParams = field(default_factory=RewardParams)
    q_table: np.ndarray = None
    n_updates: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "discount", "exploration_eps"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.q_table is None:
            self.q_table = np.zeros((len(LATENCY_EDGES) + 1, len(SNR_EDGES) + 1, N_PROFILES, self.n_actions))
        else:
            self.q_table = np.asarray(self.q_table, dtype=float)

    @staticmethod
    def state_of(t_lat_ms: float, snr_db: float, profile_idx: int) -> tuple[int, int, int]:
        return (bucket(t_lat_ms, LATENCY_EDGES), bucket(snr_db, SNR_EDGES), int(profile_idx))

    def greedy(self, s) -> int:
        # first maximum, so ties resolve to the lowest action index
        return int(np.argmax(self.q_table[s]))

    def choose(self, s, rng: np.random.Generator) -> int:
        if rng.random() < self.exploration_eps:
            return int(rng.integers(0, self.n_actions))
        return self.greedy(s)

    def copy(self) -> "QState":
        return replace(self, q_table=self.q_table.copy())


def rl_update(q: QState, s, action: int, r: float, s_next, rng: np.random.Generator | None = None) -> int:
    """One temporal-difference update of ``q`` in place.

    Decays the exploration rate and returns the action for ``s_next``
    (epsilon-greedy when ``rng`` is given, greedy otherwise).
    """
    target = r + q.discount * float(np.max(q.q_table[s_next]))
    q.q_table[s + (action,)] += q.learning_rate * (target - q.q_table[s + (action,)])
    q.exploration_eps = max(q.eps_floor, q.exploration_eps * q.eps_decay)
    q.n_updates += 1
    return q.choose(s_next, rng) if rng is not None else q.greedy(s_next)


def rl_update_all(q: QState, s, rewards: np.ndarray, s_next) -> None:
    """TD update of every action of state ``s`` from known per-action rewards."""
    target = np.asarray(rewards, dtype=float) + q.discount * float(np.max(q.q_table[s_next]))
    q.q_table[s] += q.learning_rate * (target - q.q_table[s])
    q.exploration_eps = max(q.eps_floor, q.exploration_eps * q.eps_decay)
    q.n_updates += 1


# --------------------------------------------------------------------------
# APMOEA generation


@dataclass(frozen=True)
class ApmoeaConfig:
    population_size: int = 20
    tournament_k: int = 2
    base_weights: WeightVector = WeightVector()
    base_mutation_rate: float = 0.3
    # L1 penalty on a candidate's distance from the base weights
    anchor: float = 2.0
    # hysteresis = gain * max recent |predicted loss - realised loss|
    hysteresis_gain: float = 6.0
    hysteresis_cap: float = 0.15
    residual_window: int = 20
    rl_enabled: bool = True
    dynamic: DynamicWeightConfig = DEFAULT_DYNAMIC
    variation: VariationConfig = DEFAULT_VARIATION

    def __post_init__(self):
        if not 1 <= self.population_size <= MAX_POPULATION:
            raise ValueError(f"population_size must lie in [1, {MAX_POPULATION}]")
        if self.tournament_k < 1:
            raise ValueError("tournament_k must be >= 1")
        if not 0 <= self.base_mutation_rate <= 1:
            raise ValueError("base_mutation_rate must lie in [0, 1]")
        if self.anchor < 0 or self.hysteresis_gain < 0:
            raise ValueError("anchor and hysteresis_gain must be >= 0")


@dataclass
class SelectorDecision:
    profile_id: ProfileId
    predicted_losses: np.ndarray
    pareto_flags: np.ndarray
    switched: bool
    weights: np.ndarray
    action: tuple[float, bool] | None = None
    hysteresis: float = 0.0

    @property
    def profile_index(self) -> int:
        return _PROFILE_INDEX[self.profile_id]


@dataclass
class ApmoeaMemory:
    """Per-run bookkeeping carried between generations.

    Holds the previous prediction (to measure realised prediction residuals
    once the true context arrives), the inputs of the previous decision (to
    replay it under every RL action) and the agent's pending state.
    """

    residuals: deque = field(default_factory=lambda: deque(maxlen=20))
    last_pred_norm: np.ndarray | None = None
    last_weights: np.ndarray | None = None
    last_losses: np.ndarray | None = None
    last_allowed: np.ndarray | None = None
    last_incumbent: int | None = None
    last_margin: float = 0.0
    pending_state: tuple | None = None


def _decide(losses, allowed, incumbent, h) -> int:
    adjusted = losses
    if incumbent is not None and h > 0:
        adjusted = losses.copy()
        adjusted[incumbent] -= h
    return argmin_fixed_order(adjusted, np.flatnonzero(allowed))


def _variation(pop: Population, fitness: np.ndarray, rate: float, cfg: ApmoeaConfig, rng) -> Population:
    n = len(pop)
    pidx = pop.profile_idx
    # per-profile elitism: the best candidate of every present profile survives
    order = np.lexsort((np.arange(n), fitness, pidx))
    first = np.ones(n, dtype=bool)
    first[1:] = pidx[order[1:]] != pidx[order[:-1]]
    elites = order[first][: n]
    m = n - len(elites)
    if m <= 0:
        return Population(pidx[elites].copy(), pop.weights[elites].copy(), pop.generation + 1)
    k = cfg.tournament_k

    def tournament():
        picks = rng.integers(0, n, (m, k))
        best = picks[:, 0]
        for j in range(1, k):
            best = _better(best, picks[:, j], fitness, pidx)
        return best

    pa, pb = tournament(), tournament()
    child_w, child_p = _vary(pop.weights[pa], pop.weights[pb], pidx[pa], pidx[pb], rate, rng, cfg.variation)
    return Population(
        np.concatenate([pidx[elites], child_p]),
        np.vstack([pop.weights[elites], child_w]),
        pop.generation + 1,
    )


def apmoea_generation(
    pop: Population,
    raw_hat: np.ndarray,
    norm_hat: np.ndarray,
    mult_hat: np.ndarray,
    current: int | None,
    q: QState | None,
    memory: ApmoeaMemory,
    observation: tuple[np.ndarray, np.ndarray, float] | None,
    cfg: ApmoeaConfig,
    rng: np.random.Generator,
    params: RewardParams = RewardParams(),
) -> tuple[SelectorDecision, Population]:
    """Array-level APMOEA step.

    ``raw_hat``/``norm_hat`` are the (4, 4) raw and normalised objectives at
    the predicted context and ``mult_hat`` its dynamic-weight multipliers.
    ``observation`` reveals the true context that the previous decision
    served, as (normalised objectives there, latency of every profile there,
    true SNR). It drives the residual estimate and the Q update.

    The agent's immediate reward is known for every action once the true
    context arrives: the previous decision is replayed with and without the
    hysteresis margin and scored with the cost model. All actions of the
    previous state are updated from those rewards, so the rarely visible
    benefit of hysteresis is not drowned in latency noise.
    """
    sec = raw_hat[:, 3]
    # 1. learn from the previous decision now that its outcome is known
    action_idx = None
    if observation is not None and memory.last_pred_norm is not None:
        norm_true, lat_true, snr_true = observation
        wv = memory.last_weights * _SIGN
        memory.residuals.append(float(np.max(np.abs((memory.last_pred_norm - norm_true) @ wv))))
        if q is not None and cfg.rl_enabled and current is not None:
            s_next = QState.state_of(float(lat_true[current]), snr_true, current)
            if memory.pending_state is not None:
                # replay the previous decision with and without hysteresis
                inc = memory.last_incumbent
                by_hyst = {}
                for hyst in (False, True):
                    c = _decide(memory.last_losses, memory.last_allowed, inc, memory.last_margin if hyst else 0.0)
                    switched = inc is not None and c != inc
                    by_hyst[hyst] = reward(float(lat_true[c]), float(switched), snr_true, sec[c], params)
                rewards = np.array([by_hyst[h] for _, h in ACTIONS])
                rl_update_all(q, memory.pending_state, rewards, s_next)
            action_idx = q.choose(s_next, rng)
            memory.pending_state = s_next
    if cfg.rl_enabled and action_idx is not None:
        mult_rate, hyst_on = ACTIONS[action_idx]
    else:
        mult_rate, hyst_on = 1.0, False
    action = (mult_rate, hyst_on) if cfg.rl_enabled else None

    # 2. fitness and consensus decision
    own = _own_losses(pop, norm_hat, mult_hat)
    fitness = own + cfg.anchor * np.abs(pop.weights - cfg.base_weights.as_array()).sum(axis=1)
    w_t = pop.weights.mean(axis=0)
    wd = w_t * mult_hat
    losses = norm_hat @ (wd * _SIGN)
    flags = ~dominance_matrix(raw_hat).any(axis=0)
    present = np.zeros(N_PROFILES, dtype=bool)
    present[pop.profile_idx] = True
    allowed = flags & present
    if not allowed.any():
        allowed = flags
    margin = min(cfg.hysteresis_cap, cfg.hysteresis_gain * max(memory.residuals)) if memory.residuals else 0.0
    h = margin if hyst_on else 0.0
    choice = _decide(losses, allowed, current, h)
    switched = current is not None and choice != current

    memory.last_pred_norm = norm_hat
    memory.last_weights = wd
    memory.last_losses = losses
    memory.last_allowed = allowed
    memory.last_incumbent = current
    memory.last_margin = margin

    # 3. next generation
    rate = min(1.0, cfg.base_mutation_rate * mult_rate)
    new_pop = _variation(pop, fitness, rate, cfg, rng)
    decision = SelectorDecision(PROFILE_ORDER[choice], losses, flags, bool(switched), w_t, action, h)
    return decision, new_pop


def apmoea_step(
    pop: Population,
    x_t: ContextVector | None,
    x_hat: ContextVector,
    q: QState | None,
    ch: ChannelModelConfig,
    hw: HardwareProfile,
    current: ProfileId | None,
    rng: np.random.Generator,
    cfg: ApmoeaConfig = ApmoeaConfig(),
    memory: ApmoeaMemory | None = None,
) -> tuple[SelectorDecision, Population, QState | None]:
    """One APMOEA generation from context objects.

    ``x_t`` is the context just observed (the truth for the previous
    decision, or None on the first step) and ``x_hat`` the forecast the
    decision is made for. ``memory`` carries residuals and the pending RL
    transition between calls; pass the same object each step.
    """
    memory = memory if memory is not None else ApmoeaMemory(residuals=deque(maxlen=cfg.residual_window))
    raw_hat, norm_hat, mult_hat = _context_arrays(x_hat, ch, hw)
    cur = None if current is None else _PROFILE_INDEX[ProfileId(current)]
    obs = None
    if x_t is not None and cur is not None:
        raw_t, norm_t, _ = _context_arrays(x_t, ch, hw)
        obs = (norm_t, raw_t[:, 0], x_t.snr_db)
    params = q.reward_params if q is not None else RewardParams()
    decision, new_pop = apmoea_generation(pop, raw_hat, norm_hat, mult_hat, cur, q, memory, obs, cfg, rng, params)
    return decision, new_pop, q


# --------------------------------------------------------------------------
# Oracle and baselines


def oracle_select(x_true_next: ContextVector, w: WeightVector, ch: ChannelModelConfig, hw: HardwareProfile) -> ProfileId:
    """Exhaustive argmin of the loss over the catalog at the true context."""
    F = objective_arrays(x_true_next.numeric()[None, :], ch, hw)
    losses = normalized_objectives(F)[0] @ (w.as_array() * _SIGN)
    return PROFILE_ORDER[argmin_fixed_order(losses)]


@dataclass
class RlOnlyAgent:
    """Profile-picking Q-learner: same state grid and reward, no evolution."""

    q: QState = field(default_factory=lambda: QState(n_actions=N_PROFILES))
    current: int | None = None
    pending: tuple | None = None

    def select(self, observed_lat: float | None, observed_snr: float, rng, last_switched: bool, sec_bits) -> int:
        if self.current is None:
            self.current = int(rng.integers(0, N_PROFILES))
            return self.current
        s = QState.state_of(observed_lat, observed_snr, self.current)
        r = reward(observed_lat, float(last_switched), observed_snr, sec_bits[self.current], self.q.reward_params)
        if self.pending is None:
            a = self.q.choose(s, rng)
        else:
            a = rl_update(self.q, self.pending[0], self.pending[1], r, s, rng)
        self.pending = (s, a)
        self.current = a
        return a


def baseline_select(kind: BaselineKind, x: ContextVector, ch: ChannelModelConfig, hw: HardwareProfile,
                    agent: RlOnlyAgent | None = None, rng: np.random.Generator | None = None,
                    observed_lat: float | None = None, last_switched: bool = False) -> ProfileId:
    """Baseline decision for the context ``x`` (observed, not forecast).

    ``RlOnly`` needs a persistent ``agent`` and ``rng`` plus the realised
    latency of its previous pick.
    """
    kind = BaselineKind(kind)
    if kind in STATIC_PROFILE:
        return STATIC_PROFILE[kind]
    F = objective_arrays(x.numeric()[None, :], ch, hw)[0]
    if kind is BaselineKind.NSGA_II:
        return PROFILE_ORDER[nsga2_select(F)]
    if agent is None or rng is None:
        raise ValueError("RlOnly needs an agent and an rng")
    return PROFILE_ORDER[agent.select(observed_lat, x.snr_db, rng, last_switched, F[:, 3])]


def profile_index(pid: ProfileId | str) -> int:
    return _PROFILE_INDEX[ProfileId(pid)]


def catalog_objectives(x: ContextVector, ch, hw) -> list[ObjectiveVector]:
    F = objective_arrays(x.numeric()[None, :], ch, hw)[0]
    return [ObjectiveVector(*map(float, row)) for row in F]

