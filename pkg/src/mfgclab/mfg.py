"""Conditional McKean-Vlasov equilibria under common noise.

The pipeline: simulate a particle cloud sharing one common-noise path,
freeze the resulting flows, solve a backward dynamic program against them
per scenario, re-simulate under the improved policy, damp, repeat.  The
fixed point is diagnosed by a deviation gap (best-response value minus the
value of the incumbent policy, both against the frozen flows) and by
weak-form residuals of the flows themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .measures import Ensemble, MeasureFlow, Scenario, ScenarioEnsemble, flow_distance
from .model import ModelSpec, NoisePath, TimeGrid, eval_running_cost, eval_terminal
from .streams import TAG_COMMON, TAG_INITIAL, TAG_NOISE, TAG_OPTIMIZER, stream

__all__ = [
    "FeatureSpec",
    "FeedbackPolicy",
    "constant_policy",
    "simulate_conditional_mkv",
    "SimRecord",
    "BestResponse",
    "best_response_dp",
    "frozen_policy_value",
    "EquilibriumSolution",
    "mfg_fixed_point",
    "project_to_moment_features",
    "TestFunction",
    "cosine",
    "sine",
    "gaussian_bump",
    "standard_dictionary",
    "ResidualTable",
    "fokker_planck_residual",
    "strong_to_openloop_view",
    "OpenLoopView",
]


# ----------------------------------------------------------------------
# policies
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    """How a feedback table reads the population measure.

    kind 'none': a single row per time node.
    kind 'scenario': one row per common-noise scenario (full measurability
    at finite scenario count).
    kind 'moments': rows indexed by binning the running conditional mean
    and, when variance edges are given, the running conditional variance
    (mean-major order).
    """

    kind: str = "none"
    count: int = 1
    mean_edges: np.ndarray | None = None
    var_edges: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "scenario", "moments"):
            raise ValueError("feature kind must be none, scenario or moments")
        if self.kind == "moments":
            edges = np.asarray(self.mean_edges, dtype=np.float64)
            if edges.ndim != 1 or np.any(np.diff(edges) <= 0.0):
                raise ValueError("mean edges must be strictly increasing")
            object.__setattr__(self, "mean_edges", edges)
            rows = edges.size + 1
            if self.var_edges is not None:
                vedges = np.asarray(self.var_edges, dtype=np.float64)
                if vedges.ndim != 1 or np.any(np.diff(vedges) <= 0.0):
                    raise ValueError("variance edges must be strictly increasing")
                object.__setattr__(self, "var_edges", vedges)
                rows *= vedges.size + 1
            object.__setattr__(self, "count", rows)
        elif self.kind == "none":
            object.__setattr__(self, "count", 1)

    def index(self, scenario=None, moments=None):
        if self.kind == "none":
            return 0
        if self.kind == "scenario":
            if scenario is None:
                raise ValueError("policy requires a scenario index")
            if not 0 <= int(scenario) < self.count:
                raise ValueError("scenario index out of range")
            return int(scenario)
        if moments is None:
            raise ValueError("policy requires running moment features")
        mean, var = moments
        row = int(np.digitize(float(np.atleast_1d(mean)[0]), self.mean_edges))
        if self.var_edges is not None:
            vrow = int(np.digitize(float(np.atleast_1d(var)[0]), self.var_edges))
            row = row * (self.var_edges.size + 1) + vrow
        return row


@dataclass(frozen=True)
class FeedbackPolicy:
    """Tabulated feedback (time node, feature row, state cell) -> control.

    Control values are interpolated linearly across state cells, then
    projected to the nearest control-grid point (ties to the lower index).
    Scalar states only.
    """

    grid: TimeGrid
    state_cells: np.ndarray  # (S,), ascending
    control_grid: np.ndarray  # (G, q)
    table: np.ndarray  # (K, F, S) indices into the control grid
    features: FeatureSpec = field(default_factory=FeatureSpec)

    def __post_init__(self):
        # copy inputs before freezing so callers keep writable arrays
        cells = np.array(self.state_cells, dtype=np.float64)
        if cells.ndim != 1 or cells.size < 2 or np.any(np.diff(cells) <= 0.0):
            raise ValueError("state cells must be ascending, at least two")
        grid = np.array(self.control_grid, dtype=np.float64)
        if grid.ndim == 1:
            grid = grid[:, None]
        table = np.array(self.table, dtype=np.int64)
        expect = (self.grid.steps, self.features.count, cells.size)
        if table.shape != expect:
            raise ValueError(f"table must have shape {expect}, got {table.shape}")
        if table.min() < 0 or table.max() >= grid.shape[0]:
            raise ValueError("table entries must index the control grid")
        for arr in (cells, grid, table):
            arr.setflags(write=False)
        object.__setattr__(self, "state_cells", cells)
        object.__setattr__(self, "control_grid", grid)
        object.__setattr__(self, "table", table)

    @classmethod
    def constant(cls, grid, state_cells, control_grid, control_index, features=None):
        features = features or FeatureSpec()
        table = np.full(
            (grid.steps, features.count, len(state_cells)), int(control_index), dtype=np.int64
        )
        return cls(grid, state_cells, control_grid, table, features)

    def controls(self, k, states, scenario=None, moments=None):
        X = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if X.shape[1] != 1:
            raise ValueError("tabulated policies support scalar states only")
        row = self.table[min(k, self.grid.steps - 1), self.features.index(scenario, moments)]
        values = self.control_grid[row]  # (S, q)
        out = np.empty((X.shape[0], values.shape[1]))
        for d in range(values.shape[1]):
            interp = _interp_rows(self.state_cells, values[None, :, d], X[None, :, 0])[0]
            out[:, d] = _project_column(interp, self.control_grid[:, d])
        return out


def bisect_ascending(sorted_vals, queries):
    """np.searchsorted(sorted_vals, queries, side="left"), but faster.

    For a near-uniform ascending array the rounded affine guess is off by
    at most one slot, so two comparison fixups reproduce bisection exactly;
    anything else falls back to numpy's bisection.  Simulation hot loops
    bisect small grids with huge query batches, where this wins ~10x.
    """
    m = sorted_vals.size
    if m >= 2:
        h = (sorted_vals[-1] - sorted_vals[0]) / (m - 1)
        if h > 0.0:
            dev = np.abs(sorted_vals - (sorted_vals[0] + h * np.arange(m))).max()
            if dev <= 0.25 * h:
                pos = (queries - sorted_vals[0]) * (1.0 / h)
                np.rint(pos, out=pos)
                guess = pos.astype(np.intp)
                np.clip(guess, 0, m - 1, out=guess)
                guess += queries > sorted_vals[guess]
                prev = sorted_vals[np.maximum(guess - 1, 0)]
                guess -= (queries <= prev) & (guess > 0)
                return guess
    return np.searchsorted(sorted_vals, queries, side="left")


def _interp_rows(cells, values, x):
    """Linear interpolation with per-row value tables, flat beyond the ends.

    values: (P, S); x: (P, L) -> (P, L).
    """
    S = cells.size
    idx = np.clip(bisect_ascending(cells, x), 1, S - 1)
    x0 = cells[idx - 1]
    w = np.clip((x - x0) / (cells[idx] - x0), 0.0, 1.0)
    rows = np.arange(values.shape[0])[:, None]
    v0 = values[rows, idx - 1]
    v1 = values[rows, idx]
    v1 -= v0
    v1 *= w
    v1 += v0
    return v1


def project_to_grid(values, grid_column):
    """Snap values to the nearest grid point, ties to the lower index.

    Requires an ascending column; implemented by bisecting the midpoint
    array so batch callers and scalar callers land on identical choices.
    """
    mids = (grid_column[:-1] + grid_column[1:]) / 2.0
    return grid_column[bisect_ascending(mids, values)]


def _project_column(values, grid_column):
    """Nearest-point projection for one control coordinate, any ordering."""
    if grid_column.size > 1 and np.all(np.diff(grid_column) > 0.0):
        return project_to_grid(values, grid_column)
    flat = np.ravel(values)
    idx = np.abs(flat[:, None] - grid_column[None, :]).argmin(axis=1)
    return grid_column[idx].reshape(np.shape(values))


def constant_policy(control):
    """Policy callable applying one fixed control to every particle."""
    u = np.atleast_1d(np.asarray(control, dtype=np.float64))

    def policy(k, states, scenario=None, moments=None):
        X = np.atleast_2d(states)
        return np.tile(u, (X.shape[0], 1))

    return policy


def _policy_controls(policy, k, X, scenario, moments):
    if hasattr(policy, "controls"):
        U = policy.controls(k, X, scenario=scenario, moments=moments)
    else:
        U = policy(k, X, scenario=scenario, moments=moments)
    return np.atleast_2d(np.asarray(U, dtype=np.float64))


@lru_cache(maxsize=64)
def _uniform_weights(m):
    w = np.full(m, 1.0 / m)
    w.setflags(write=False)
    return w


# ----------------------------------------------------------------------
# conditional simulation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SimRecord:
    """Raw per-particle trajectory data from one conditional simulation."""

    states: np.ndarray  # (K+1, M, n)
    controls: np.ndarray  # (K, M, q)
    noise_increments: np.ndarray  # (K, M, n) idiosyncratic
    initial: np.ndarray  # (M, n)


def _as_key(seed):
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def simulate_conditional_mkv(
    spec: ModelSpec,
    policy,
    grid: TimeGrid,
    noise: NoisePath,
    particles: int,
    seed,
    scenario=None,
    record=False,
):
    """Euler scheme for a particle cloud sharing one common-noise path.

    All particles interact through the same-node empirical joint law of
    states and controls; the returned flow's frames are those clouds with
    unit weights.  The final frame repeats the last-node policy on the
    terminal states so every frame carries a joint law.

    Raises RuntimeError at the first non-finite state, naming the step and
    particle.
    """
    if particles < 2:
        raise ValueError("need at least two particles")
    key = _as_key(seed)
    M, n, q = int(particles), spec.state_dim, spec.control_dim
    K, dt, nodes = grid.steps, grid.dt, grid.nodes
    if noise.dim != n or len(noise.grid) != len(grid):
        raise ValueError("noise path does not match grid/model")

    X = np.asarray(spec.initial_sampler(stream(*key, TAG_INITIAL), M), dtype=np.float64)
    X = np.atleast_2d(X)
    if X.shape != (M, n):
        raise ValueError("initial sampler returned a bad shape")
    dW = stream(*key, TAG_NOISE).normal(scale=np.sqrt(dt), size=(K, M, n))
    dB = np.diff(noise.values, axis=0) @ spec.common_noise_coeff.T  # (K, n)

    weights = _uniform_weights(M)
    frames = []
    if record:
        states_rec = np.empty((K + 1, M, n))
        controls_rec = np.empty((K, M, q))
        initial = X.copy()

    for k in range(K):
        t = nodes[k]
        U = _policy_controls(policy, k, X, scenario, (X.mean(axis=0), X.var(axis=0)))
        law = Ensemble(X, U, weights, t, check=False)
        frames.append(law)
        drift = spec.drift_law(t, law)[None, :] + np.asarray(
            spec.drift_control(t, X, U), dtype=np.float64
        )
        sig = spec.sigma_at(t, X)
        X_next = X + drift * dt + np.einsum("mij,mj->mi", sig, dW[k]) + dB[k][None, :]
        if not np.all(np.isfinite(X_next)):
            bad = np.argwhere(~np.isfinite(X_next))[0]
            raise RuntimeError(
                f"non-finite state at step {k + 1}, particle {int(bad[0])}"
            )
        if record:
            states_rec[k] = X
            controls_rec[k] = U
        X = X_next

    U_last = _policy_controls(policy, K - 1, X, scenario, (X.mean(axis=0), X.var(axis=0)))
    frames.append(Ensemble(X, U_last, weights, nodes[K], check=False))
    flow = MeasureFlow(grid, tuple(frames))
    if record:
        states_rec[K] = X
        return flow, SimRecord(states_rec, controls_rec, dW, initial)
    return flow


# ----------------------------------------------------------------------
# backward dynamic programming
# ----------------------------------------------------------------------


@lru_cache(maxsize=8)
def _gauss_hermite(points):
    raw_nodes, raw_weights = np.polynomial.hermite.hermgauss(points)
    nodes = np.sqrt(2.0) * raw_nodes
    weights = raw_weights / np.sqrt(np.pi)
    return nodes, weights / weights.sum()


def _dp_state_cells(spec, scenarios, n_cells):
    pooled_min, pooled_max = np.inf, -np.inf
    total, total_sq, count = 0.0, 0.0, 0
    for s in scenarios:
        for f in s.flow.frames:
            col = f.states[:, 0]
            pooled_min = min(pooled_min, float(col.min()))
            pooled_max = max(pooled_max, float(col.max()))
            total += float(col.sum())
            total_sq += float((col**2).sum())
            count += col.size
    mean = total / count
    std = np.sqrt(max(total_sq / count - mean**2, 0.0))
    grid = scenarios.grid
    probe = np.linspace(pooled_min, pooled_max, 16)[:, None]
    sig_max = max(
        float(np.abs(spec.sigma_at(t, probe)).max()) for t in (0.0, grid.horizon / 2)
    )
    db_max = max(
        float(np.abs(np.diff(s.noise.values, axis=0) @ spec.common_noise_coeff.T).max())
        for s in scenarios
    )
    pad = 3.0 * sig_max * np.sqrt(grid.dt) + db_max + 1e-6
    lo = min(pooled_min, mean - 3.0 * std) - pad
    hi = max(pooled_max, mean + 3.0 * std) + pad
    return np.linspace(lo, hi, n_cells)


@dataclass(frozen=True)
class BestResponse:
    """Backward-DP deviation against frozen flows."""

    policy: FeedbackPolicy
    value: float
    scenario_values: np.ndarray
    state_cells: np.ndarray
    extrapolated_points: int

    @property
    def extrapolation_flagged(self):
        return self.extrapolated_points > 0


def best_response_dp(
    spec: ModelSpec, scenarios: ScenarioEnsemble, n_cells=73, quad_points=5,
    state_cells=None,
):
    """Optimal deviation value and policy against frozen scenario flows.

    Per scenario, values are computed backward on a shared state grid:
    the terminal objective against the frozen terminal marginal, then at
    each node the running objective (frozen joint law) plus the expected
    continuation, with the idiosyncratic increment integrated by
    Gauss-Hermite quadrature and the common increment read from the
    scenario path.  Scalar states only; continuation values are
    interpolated linearly and extrapolated flat (flagged in the result).
    """
    if spec.state_dim != 1:
        raise ValueError("the backward DP supports scalar states only")
    grid = scenarios.grid
    K, dt, nodes = grid.steps, grid.dt, grid.nodes
    if state_cells is None:
        cells = _dp_state_cells(spec, scenarios, n_cells)
    else:
        cells = np.ascontiguousarray(state_cells, dtype=np.float64)
        if cells.ndim != 1 or np.any(np.diff(cells) <= 0.0):
            raise ValueError("state cells must be ascending")
    S = cells.size
    controls = spec.control_grid  # (G, q)
    G = controls.shape[0]
    z, zw = _gauss_hermite(quad_points)
    n_scen = len(scenarios)

    X_flat = np.repeat(cells, G)[:, None]  # (S*G, 1)
    U_flat = np.tile(controls, (S, 1))  # (S*G, q)

    table = np.empty((K, n_scen, S), dtype=np.int64)
    values = np.empty(n_scen)
    extrapolated = 0
    lo, hi = cells[0], cells[-1]

    for si, scen in enumerate(scenarios):
        flow = scen.flow
        dB = np.diff(scen.noise.values, axis=0) @ spec.common_noise_coeff.T
        V = eval_terminal(spec, cells[:, None], flow.frames[K].state_marginal())
        for k in range(K - 1, -1, -1):
            t = nodes[k]
            law = flow.frames[k]
            base = spec.drift_law(t, law)[0]
            ctrl_drift = np.asarray(
                spec.drift_control(t, X_flat, U_flat), dtype=np.float64
            )[:, 0]
            sig = spec.sigma_at(t, cells[:, None])[:, 0, 0]
            mean_next = (
                X_flat[:, 0] + (base + ctrl_drift) * dt + dB[k, 0]
            ).reshape(S, G)
            x_next = mean_next[:, :, None] + (
                np.sqrt(dt) * sig[:, None, None] * z[None, None, :]
            )
            extrapolated += int(np.count_nonzero((x_next < lo) | (x_next > hi)))
            cont = np.interp(x_next.ravel(), cells, V).reshape(S, G, -1) @ zw
            reward = eval_running_cost(spec, t, X_flat, law, U_flat).reshape(S, G)
            Q = reward * dt + cont
            best = np.argmax(Q, axis=1)
            table[k, si] = best
            V = Q[np.arange(S), best]
        nu0 = flow.frames[0]
        values[si] = float(
            np.dot(nu0.weights, np.interp(nu0.states[:, 0], cells, V))
        )

    policy = FeedbackPolicy(
        grid, cells, controls, table, FeatureSpec("scenario", count=n_scen)
    )
    return BestResponse(policy, float(values.mean()), values, cells, extrapolated)


# ----------------------------------------------------------------------
# frozen-flow policy value
# ----------------------------------------------------------------------


def _frozen_cost_paths(spec, policy, scen: Scenario, scenario_idx, particles, key):
    """Per-particle objective under a policy, dynamics reading frozen flows."""
    grid = scen.flow.grid
    K, dt, nodes = grid.steps, grid.dt, grid.nodes
    n = spec.state_dim
    M = int(particles)
    X = np.atleast_2d(
        np.asarray(spec.initial_sampler(stream(*key, TAG_INITIAL), M), dtype=np.float64)
    )
    dW = stream(*key, TAG_NOISE).normal(scale=np.sqrt(dt), size=(K, M, n))
    dB = np.diff(scen.noise.values, axis=0) @ spec.common_noise_coeff.T
    total = np.zeros(M)
    for k in range(K):
        t = nodes[k]
        law = scen.flow.frames[k]
        U = _policy_controls(policy, k, X, scenario_idx, (law.mean_state(), law.var_state()))
        total += eval_running_cost(spec, t, X, law, U) * dt
        drift = spec.drift_law(t, law)[None, :] + np.asarray(
            spec.drift_control(t, X, U), dtype=np.float64
        )
        sig = spec.sigma_at(t, X)
        X = X + drift * dt + np.einsum("mij,mj->mi", sig, dW[k]) + dB[k][None, :]
    total += eval_terminal(spec, X, scen.flow.frames[K].state_marginal())
    return total


def frozen_policy_value(spec, policy, scenarios: ScenarioEnsemble, particles, seed):
    """Monte Carlo value of a policy against frozen flows.

    Fresh particles (independent of those that produced the flows) evolve
    with the drift and objective reading the frozen frames; the result
    averages over scenarios.  Returns (value, standard error, per-scenario
    values).
    """
    per_scenario = np.empty(len(scenarios))
    var_sum = 0.0
    for si, scen in enumerate(scenarios):
        costs = _frozen_cost_paths(spec, policy, scen, si, particles, (seed, si, 101))
        per_scenario[si] = costs.mean()
        var_sum += costs.var(ddof=1) / costs.size
    value = float(per_scenario.mean())
    se = float(np.sqrt(var_sum) / len(scenarios))
    return value, se, per_scenario


def frozen_policy_gap(spec, challenger, incumbent, scenarios: ScenarioEnsemble,
                      particles, seed):
    """Paired value difference of two policies against frozen flows.

    Both policies run on identical particle draws, so the standard error
    reflects only the per-particle cost differences; a grid-value bias in
    the backward solver never enters.  Returns (gap, gap_se,
    per_scenario_gaps) with gap = value(challenger) - value(incumbent).
    """
    per_scenario = np.empty(len(scenarios))
    var_sum = 0.0
    for si, scen in enumerate(scenarios):
        key = (seed, si, 101)
        diff = _frozen_cost_paths(
            spec, challenger, scen, si, particles, key
        ) - _frozen_cost_paths(spec, incumbent, scen, si, particles, key)
        per_scenario[si] = diff.mean()
        var_sum += diff.var(ddof=1) / diff.size
    gap = float(per_scenario.mean())
    se = float(np.sqrt(var_sum) / len(scenarios))
    return gap, se, per_scenario


# ----------------------------------------------------------------------
# fixed point
# ----------------------------------------------------------------------


def _mix_flows(old: MeasureFlow, new: MeasureFlow, damping, rng):
    """Per frame, keep a (1 - damping) fraction of old atoms, fill with new."""
    m = old.frames[0].size
    n_new = int(round(damping * m))
    if n_new >= m:
        return new
    if n_new <= 0:
        return old
    frames = []
    weights = _uniform_weights(m)
    for fo, fn in zip(old.frames, new.frames):
        keep_old = rng.choice(m, m - n_new, replace=False)
        keep_new = rng.choice(m, n_new, replace=False)
        states = np.concatenate([fo.states[keep_old], fn.states[keep_new]])
        controls = np.concatenate([fo.controls[keep_old], fn.controls[keep_new]])
        frames.append(Ensemble(states, controls, weights, fo.time_stamp, check=False))
    return MeasureFlow(old.grid, tuple(frames))


@dataclass
class EquilibriumSolution:
    """Result of the damped fixed-point iteration."""

    policy: FeedbackPolicy
    scenarios: ScenarioEnsemble  # clean re-simulation under the final policy
    value: float
    value_se: float
    best_response_value: float
    epsilon: float
    epsilon_se: float
    distances: list
    converged: bool
    iterations: int
    seed: int
    particles: int
    diagnostics: dict = field(default_factory=dict)


def mfg_fixed_point(
    spec: ModelSpec,
    grid: TimeGrid,
    n_scenarios: int,
    particles: int,
    seed: int,
    damping=0.6,
    tol=0.02,
    max_iter=12,
    n_cells=73,
    quad_points=5,
    eval_particles=None,
):
    """Damped Picard iteration for the conditional equilibrium.

    Scenario common-noise paths are sampled once from the seed.  Each
    round freezes the current flows, solves the backward DP, re-simulates
    every scenario under the improved policy with common random numbers,
    and mixes old and new particle ensembles (fraction ``damping`` of new
    atoms).  Stops when the worst scenario flow movement drops below
    ``tol`` in `flow_distance`; otherwise returns the best iterate with
    ``converged=False``.

    The deviation gap ``epsilon`` is the best-response policy's value
    minus the final policy's value, both estimated by Monte Carlo replay
    on shared particle draws against the frozen final flows.  Pairing the
    draws keeps the gap's standard error far below either value's and
    avoids mixing the backward solver's grid bias into the comparison.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    n = spec.state_dim
    noises = [
        NoisePath.sample(grid, n, stream(seed, s, TAG_COMMON)) for s in range(n_scenarios)
    ]
    start = int(np.argmin(np.linalg.norm(spec.control_grid, axis=1)))
    init_policy = constant_policy(spec.control_grid[start])

    flows = [
        simulate_conditional_mkv(
            spec, init_policy, grid, noises[s], particles, (seed, s), scenario=None
        )
        for s in range(n_scenarios)
    ]

    distances = []
    best = None
    policy = None
    p = spec.moment_order
    for it in range(int(max_iter)):
        frozen = ScenarioEnsemble(
            tuple(Scenario(noises[s], flows[s]) for s in range(n_scenarios))
        )
        br = best_response_dp(spec, frozen, n_cells=n_cells, quad_points=quad_points)
        policy = br.policy
        moved = 0.0
        new_flows = []
        for s in range(n_scenarios):
            raw = simulate_conditional_mkv(
                spec, policy, grid, noises[s], particles, (seed, s), scenario=s
            )
            mixed = _mix_flows(flows[s], raw, damping, stream(seed, s, TAG_OPTIMIZER, it))
            moved = max(moved, flow_distance(flows[s], mixed, p))
            new_flows.append(mixed)
        flows = new_flows
        distances.append(moved)
        if best is None or moved <= best[0]:
            best = (moved, policy)
        if moved < tol:
            break
    converged = bool(distances and distances[-1] < tol)
    if not converged and best is not None:
        policy = best[1]

    clean = ScenarioEnsemble(
        tuple(
            Scenario(
                noises[s],
                simulate_conditional_mkv(
                    spec, policy, grid, noises[s], particles, (seed, s), scenario=s
                ),
            )
            for s in range(n_scenarios)
        )
    )
    final_br = best_response_dp(spec, clean, n_cells=n_cells, quad_points=quad_points)
    eval_m = int(eval_particles or max(2048, particles // 4))
    value, value_se, per_scen = frozen_policy_value(spec, policy, clean, eval_m, seed)
    epsilon, epsilon_se, _ = frozen_policy_gap(
        spec, final_br.policy, policy, clean, eval_m, seed
    )
    solution = EquilibriumSolution(
        policy=policy,
        scenarios=clean,
        value=value,
        value_se=value_se,
        best_response_value=value + epsilon,
        epsilon=float(epsilon),
        epsilon_se=epsilon_se,
        distances=distances,
        converged=converged,
        iterations=len(distances),
        seed=int(seed),
        particles=int(particles),
        diagnostics={
            "state_cells": final_br.state_cells,
            "extrapolated_points": final_br.extrapolated_points,
            "scenario_values": per_scen,
            "best_response_scenario_values": final_br.scenario_values,
            "dp_value": final_br.value,
        },
    )
    return solution


def project_to_moment_features(policy: FeedbackPolicy, scenarios: ScenarioEnsemble, bins=8):
    """Rewrite a scenario-featured policy over bins of the running mean.

    Per time node, each scenario's action row lands in the bin holding
    that scenario's conditional mean; collisions keep the scenario
    closest to the bin center, and empty bins copy the nearest filled
    bin.  The result reads only (time, state, mean), so it can be lifted
    to the N-player game.
    """
    if policy.features.kind != "scenario":
        raise ValueError("expected a scenario-featured policy")
    K = policy.grid.steps
    means = np.stack([s.flow.mean_path()[:, 0] for s in scenarios])  # (S, K+1)
    pooled = means[:, :K].ravel()
    qs = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    edges = np.unique(np.quantile(pooled, qs))
    if edges.size == 0:
        edges = np.array([float(pooled.mean())])
    features = FeatureSpec("moments", mean_edges=edges)
    F = features.count
    centers = np.concatenate(
        [[edges[0] - 1.0], (edges[:-1] + edges[1:]) / 2.0, [edges[-1] + 1.0]]
    )
    table = np.empty((K, F, policy.state_cells.size), dtype=np.int64)
    for k in range(K):
        filled = {}
        for si in range(means.shape[0]):
            b = int(np.digitize(means[si, k], edges))
            score = abs(means[si, k] - centers[b])
            if b not in filled or score < filled[b][0]:
                filled[b] = (score, si)
        order = sorted(filled)
        for b in range(F):
            if b in filled:
                si = filled[b][1]
            else:
                nearest = min(order, key=lambda o: (abs(o - b), o))
                si = filled[nearest][1]
            table[k, b] = policy.table[k, si]
    return FeedbackPolicy(policy.grid, policy.state_cells, policy.control_grid, table, features)


# ----------------------------------------------------------------------
# weak-form residual
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Bounded scalar test function with analytic first two derivatives."""

    name: str
    value: callable  # (m, n) -> (m,)
    grad: callable  # (m, n) -> (m, n)
    hess: callable  # (m, n) -> (m, n, n)
    bounded: bool = True


def cosine(freq):
    k = np.atleast_1d(np.asarray(freq, dtype=np.float64))
    kk = np.outer(k, k)
    return TestFunction(
        name=f"cos({','.join(f'{v:g}' for v in k)}.x)",
        value=lambda X: np.cos(X @ k),
        grad=lambda X: -np.sin(X @ k)[:, None] * k[None, :],
        hess=lambda X: -np.cos(X @ k)[:, None, None] * kk[None, :, :],
    )


def sine(freq):
    k = np.atleast_1d(np.asarray(freq, dtype=np.float64))
    kk = np.outer(k, k)
    return TestFunction(
        name=f"sin({','.join(f'{v:g}' for v in k)}.x)",
        value=lambda X: np.sin(X @ k),
        grad=lambda X: np.cos(X @ k)[:, None] * k[None, :],
        hess=lambda X: -np.sin(X @ k)[:, None, None] * kk[None, :, :],
    )


def gaussian_bump(center, width):
    c = np.atleast_1d(np.asarray(center, dtype=np.float64))
    w2 = float(width) ** 2

    def value(X):
        d = X - c
        return np.exp(-np.sum(d**2, axis=1) / (2.0 * w2))

    def grad(X):
        d = X - c
        return value(X)[:, None] * (-d / w2)

    def hess(X):
        d = X - c
        eye = np.eye(c.size)
        outer = np.einsum("mi,mj->mij", d, d) / (w2 * w2)
        return value(X)[:, None, None] * (outer - eye[None, :, :] / w2)

    return TestFunction(
        name=f"bump({','.join(f'{v:g}' for v in c)};{width:g})",
        value=value,
        grad=grad,
        hess=hess,
    )


def standard_dictionary(dim=1):
    """Default residual dictionary: low-frequency waves plus a wide bump."""
    e = np.zeros(dim)
    e[0] = 1.0
    return [cosine(e), sine(e), cosine(2.0 * e), gaussian_bump(np.zeros(dim), 1.0)]


@dataclass(frozen=True)
class ResidualTable:
    """Weak-form residuals per (test function, node)."""

    function_names: tuple
    nodes: np.ndarray
    residuals: np.ndarray  # (F, K+1)

    @property
    def max_abs(self):
        return float(np.abs(self.residuals).max())

    def per_function_max(self):
        return {
            name: float(np.abs(self.residuals[i]).max())
            for i, name in enumerate(self.function_names)
        }


def fokker_planck_residual(
    flow: MeasureFlow,
    noise: NoisePath,
    spec: ModelSpec,
    test_functions=None,
    outer_flow: MeasureFlow | None = None,
):
    """Weak-form consistency of a flow along one common-noise path.

    For each test function f the statistic at node t compares the
    increment of <f(. - s0 B_t), mu_t> with the left-Riemann integral of
    the generator terms: the law-driven drift paired with the gradient
    against mu_r, and the diffusion plus control-driven drift paired with
    the joint frames.  ``outer_flow`` supplies the law the drift reads
    (defaults to the flow itself).  A vanishing residual is the discrete
    witness that the flow solves the measure-valued dynamics for that
    path.
    """
    if test_functions is None:
        test_functions = standard_dictionary(spec.state_dim)
    for f in test_functions:
        if not f.bounded:
            raise ValueError(f"test function {f.name} is not bounded")
    outer = outer_flow or flow
    grid = flow.grid
    K, dt, nodes = grid.steps, grid.dt, grid.nodes
    s0 = spec.common_noise_coeff
    shifts = noise.values @ s0.T  # (K+1, n)

    F = len(test_functions)
    residuals = np.empty((F, K + 1))
    for fi, f in enumerate(test_functions):
        mean_f = np.empty(K + 1)
        gen = np.empty(K)
        for k in range(K + 1):
            frame = flow.frames[k]
            Y = frame.states - shifts[k]
            mean_f[k] = float(frame.weights @ f.value(Y))
            if k == K:
                continue
            t = nodes[k]
            grad = f.grad(Y)  # (m, n)
            hess = f.hess(Y)  # (m, n, n)
            drift_out = spec.drift_law(t, outer.frames[k])  # (n,)
            law_term = float(frame.weights @ (grad @ drift_out))
            ctrl = np.asarray(
                spec.drift_control(t, frame.states, frame.controls), dtype=np.float64
            )
            sig = spec.sigma_at(t, frame.states)
            gram = np.einsum("mij,mkj->mik", sig, sig)
            diffusion = 0.5 * np.einsum("mik,mik->m", gram, hess)
            joint_term = float(frame.weights @ (diffusion + np.sum(ctrl * grad, axis=1)))
            gen[k] = law_term + joint_term
        cum = np.concatenate([[0.0], np.cumsum(gen) * dt])
        residuals[fi] = mean_f - mean_f[0] - cum
    return ResidualTable(
        tuple(f.name for f in test_functions), nodes.copy(), residuals
    )


# ----------------------------------------------------------------------
# open-loop view
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class OpenLoopView:
    """Realized controls of an equilibrium, indexed by sample paths."""

    records: tuple  # one SimRecord per scenario
    noises: tuple  # matching NoisePath objects


def strong_to_openloop_view(spec: ModelSpec, solution: EquilibriumSolution):
    """Replay the equilibrium scenarios, recording per-particle controls.

    The replay is bit-exact (same streams), so the records express the
    feedback equilibrium as open-loop controls: functions of the sampled
    initial condition and both noises.
    """
    records = []
    noises = []
    for s, scen in enumerate(solution.scenarios):
        _, rec = simulate_conditional_mkv(
            spec,
            solution.policy,
            scen.flow.grid,
            scen.noise,
            solution.particles,
            (solution.seed, s),
            scenario=s,
            record=True,
        )
        records.append(rec)
        noises.append(scen.noise)
    return OpenLoopView(tuple(records), tuple(noises))
