"""Open-loop and closed-loop control of the conditional particle system.

The closed-loop problem optimizes feedback tables read on the live state
and conditional moments; the open-loop problem optimizes tables read on
the non-anticipative inputs only (initial state, idiosyncratic path so
far, common path so far).  Both report inner approximations of the
corresponding value, found by derivative-free coordinate ascent with
common random numbers, and both evaluate candidates on the same scenario
draws so the two values can be compared with a paired standard error.

The lift of a closed-loop table to an N-player profile (every player
applies it to their own state and the empirical moments) feeds the
cooperative limit experiment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measures import Ensemble, MeasureFlow
from .mfg import (
    FeatureSpec,
    FeedbackPolicy,
    SimRecord,
    _as_key,
    _uniform_weights,
    simulate_conditional_mkv,
)
from .model import ModelSpec, NoisePath, TimeGrid, eval_running_cost, eval_terminal
from .nplayer import NPlayerPolicySet, _feedback_batch
from .streams import TAG_COMMON, TAG_INITIAL, TAG_NOISE, stream

__all__ = [
    "OpenLoopPolicy",
    "ValueReport",
    "EquivalenceReport",
    "ParetoCurve",
    "flow_value",
    "simulate_open_loop",
    "closed_loop_value",
    "open_loop_value",
    "openloop_from_records",
    "equivalence_report",
    "lift_policy",
    "pareto_limit_experiment",
]


# ----------------------------------------------------------------------
# open-loop policy class
# ----------------------------------------------------------------------


def _normal_quantile(p):
    """Standard normal quantile by bisection on erf; no table, no scipy."""
    lo, hi = -12.0, 12.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _normal_quantile_edges(bins):
    """Interior edges splitting a standard normal into equal-mass bins."""
    return np.array([_normal_quantile(i / bins) for i in range(1, bins)])


@dataclass(frozen=True)
class OpenLoopPolicy:
    """Control table read on non-anticipative inputs only.

    At node k the control is ``control_grid[table[k, bx, bw, bb]]`` where
    bx bins the particle's initial state against ``xi_edges``, bw bins its
    normalized idiosyncratic path value W_{t_k} / sqrt(t_k) against
    ``path_edges``, and bb bins the normalized common path value the same
    way.  Both path summaries use increments with index < k only, so the
    lookup is predictable; at k = 0 they sit in the bin of zero.
    """

    grid: TimeGrid
    control_grid: np.ndarray  # (G, q)
    xi_edges: np.ndarray
    path_edges: np.ndarray
    table: np.ndarray  # (K, xi_bins, path_bins, path_bins) int64

    def __post_init__(self):
        cg = np.array(self.control_grid, dtype=np.float64)
        if cg.ndim == 1:
            cg = cg[:, None]
        xe = np.array(self.xi_edges, dtype=np.float64)
        pe = np.array(self.path_edges, dtype=np.float64)
        tab = np.array(self.table, dtype=np.int64)
        shape = (self.grid.steps, xe.size + 1, pe.size + 1, pe.size + 1)
        if tab.shape != shape:
            raise ValueError(f"table must have shape {shape}, got {tab.shape}")
        if tab.min() < 0 or tab.max() >= cg.shape[0]:
            raise ValueError("table entries must index the control grid")
        for a in (cg, xe, pe, tab):
            a.setflags(write=False)
        object.__setattr__(self, "control_grid", cg)
        object.__setattr__(self, "xi_edges", xe)
        object.__setattr__(self, "path_edges", pe)
        object.__setattr__(self, "table", tab)

    @property
    def feature_shape(self):
        return self.table.shape[1:]

    @classmethod
    def constant(cls, grid, control_grid, control_index, xi_edges, path_edges):
        xe = np.asarray(xi_edges, dtype=np.float64)
        pe = np.asarray(path_edges, dtype=np.float64)
        shape = (grid.steps, xe.size + 1, pe.size + 1, pe.size + 1)
        return cls(grid, control_grid, xe, pe,
                   np.full(shape, int(control_index), dtype=np.int64))


def default_xi_edges(spec: ModelSpec, bins=4, seed=0, sample=4096):
    """Quantile edges for the initial-state bins, from a calibration draw.

    The draw uses a dedicated stream so it never collides with simulation
    particles; the edges are data, stored on the policy.
    """
    xi = np.atleast_2d(
        np.asarray(spec.initial_sampler(stream(seed, 9999, TAG_INITIAL), int(sample)))
    )
    if np.ptp(xi[:, 0]) == 0.0:
        # deterministic initial state: one bin does the work
        return np.array([], dtype=np.float64)
    qs = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    return np.quantile(xi[:, 0], qs)


def _openloop_bins(policy: OpenLoopPolicy, k, xi_bin, w_running, b_value, t):
    """Feature bins at node k; summaries are zero at the start."""
    if k == 0 or t <= 0.0:
        wz = np.zeros(w_running.shape[:-1])
        bz = 0.0
    else:
        r = 1.0 / math.sqrt(t)
        wz = w_running[..., 0] * r
        bz = b_value[0] * r
    wb = np.digitize(wz, policy.path_edges)
    bb = int(np.digitize(bz, policy.path_edges))
    return wb, bb


# ----------------------------------------------------------------------
# simulation and values
# ----------------------------------------------------------------------


def simulate_open_loop(spec: ModelSpec, policy: OpenLoopPolicy, grid: TimeGrid,
                       noise: NoisePath, particles, seed, record=False):
    """Particle cloud under an open-loop table; mirrors the feedback simulator.

    Streams, Euler stepping, frame construction, and the terminal frame
    convention all match `simulate_conditional_mkv`, so flows produced by
    the two simulators under policies realizing the same controls agree.
    """
    if particles < 2:
        raise ValueError("need at least two particles")
    key = _as_key(seed)
    M, n, q = int(particles), spec.state_dim, spec.control_dim
    K, dt, nodes = grid.steps, grid.dt, grid.nodes
    if noise.dim != n or len(noise.grid) != len(grid):
        raise ValueError("noise path does not match grid/model")
    if policy.grid.steps != K:
        raise ValueError("policy grid does not match simulation grid")

    X = np.atleast_2d(
        np.asarray(spec.initial_sampler(stream(*key, TAG_INITIAL), M), dtype=np.float64)
    )
    dW = stream(*key, TAG_NOISE).normal(scale=np.sqrt(dt), size=(K, M, n))
    dB = np.diff(noise.values, axis=0) @ spec.common_noise_coeff.T

    xi_bin = np.digitize(X[:, 0], policy.xi_edges)
    w_running = np.zeros((M, n))
    weights = _uniform_weights(M)
    frames = []
    if record:
        states_rec = np.empty((K + 1, M, n))
        controls_rec = np.empty((K, M, q))
        initial = X.copy()

    def controls_at(k):
        wb, bb = _openloop_bins(policy, k, xi_bin, w_running, noise.values[k], nodes[k])
        ids = policy.table[min(k, K - 1), xi_bin, wb, bb]
        return policy.control_grid[ids]

    for k in range(K):
        t = nodes[k]
        U = controls_at(k)
        law = Ensemble(X, U, weights, t, check=False)
        frames.append(law)
        drift = spec.drift_law(t, law)[None, :] + np.asarray(
            spec.drift_control(t, X, U), dtype=np.float64
        )
        sig = spec.sigma_at(t, X)
        X = X + drift * dt + np.einsum("mij,mj->mi", sig, dW[k]) + dB[k][None, :]
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise RuntimeError(
                f"non-finite state at step {k + 1}, particle {int(bad[0])}"
            )
        if record:
            states_rec[k] = frames[k].states
            controls_rec[k] = U
        w_running = w_running + dW[k]

    U_last = controls_at(K)
    frames.append(Ensemble(X, U_last, weights, nodes[K], check=False))
    flow = MeasureFlow(grid, tuple(frames))
    if record:
        states_rec[K] = X
        return flow, SimRecord(states_rec, controls_rec, dW, initial)
    return flow


def flow_value(spec: ModelSpec, flow: MeasureFlow):
    """Objective of the population described by a flow.

    Left-Riemann running term over the joint frames plus the terminal
    term against the final state marginal: the planner's criterion as a
    functional of the flow alone.
    """
    grid = flow.grid
    total = 0.0
    for k in range(grid.steps):
        f = flow.frames[k]
        vals = eval_running_cost(spec, grid.nodes[k], f.states, f, f.controls)
        total += grid.dt * float(f.weights @ vals)
    last = flow.frames[grid.steps]
    marg = last.state_marginal()
    total += float(last.weights @ eval_terminal(spec, last.states, marg))
    return total


def _scenario_noises(spec, grid, n_scenarios, seed):
    return [
        NoisePath.sample(grid, spec.state_dim, stream(seed, s, TAG_COMMON))
        for s in range(int(n_scenarios))
    ]


def _stacked_inputs(spec, grid, n_scenarios, particles, seed):
    """Initial states and idiosyncratic increments for all scenarios.

    Streams are keyed (seed, scenario), matching the per-scenario
    simulators, so stacked and per-scenario runs consume identical draws.
    """
    S, M, n = int(n_scenarios), int(particles), spec.state_dim
    K = grid.steps
    X0 = np.empty((S, M, n))
    dW = np.empty((S, K, M, n))
    sq = np.sqrt(grid.dt)
    for s in range(S):
        X0[s] = np.atleast_2d(
            np.asarray(spec.initial_sampler(stream(seed, s, TAG_INITIAL), M),
                       dtype=np.float64)
        )
        dW[s] = stream(seed, s, TAG_NOISE).normal(scale=sq, size=(K, M, n))
    return X0, dW


def _closed_controls(policy, k, X, means, variances):
    """Controls for all scenario rows; X (S, M, n) -> (S, M, q)."""
    if isinstance(policy, FeedbackPolicy):
        return _feedback_batch(policy, k, X[..., 0], (means, variances))
    S, M = X.shape[:2]
    out = None
    for s in range(S):
        U = np.atleast_2d(np.asarray(
            policy(k, X[s], scenario=None, moments=(means[s], variances[s])),
            dtype=np.float64,
        ))
        if out is None:
            out = np.empty((S, M, U.shape[1]))
        out[s] = U
    return out


def _stacked_values(spec, grid, noises, X0, dW, controller, costs=True):
    """Vectorized multi-scenario Euler run for mean-interaction models.

    ``controller(k, X, means, variances) -> (S, M, q)``.  Requires the
    model's batch hooks; per-scenario values come back as (S,) means of
    per-particle totals.
    """
    hooks = spec.batch_hooks or {}
    drift_hook = hooks["drift_mean"]
    run_hook = hooks["running_cost_mean"]
    term_hook = hooks["terminal_mean"]
    S, M, n = X0.shape
    K, dt, nodes = grid.steps, grid.dt, grid.nodes
    dB = np.stack([np.diff(p.values, axis=0) @ spec.common_noise_coeff.T
                   for p in noises])  # (S, K, n)
    X = np.array(X0)
    totals = np.zeros((S, M))
    for k in range(K):
        t = nodes[k]
        means = X.mean(axis=1)
        variances = X.var(axis=1)
        U = controller(k, X, means, variances)
        Xf = X.reshape(S * M, n)
        Uf = U.reshape(S * M, -1)
        if costs:
            mean_u = U.mean(axis=1)
            m_rep = np.repeat(means, M, axis=0)
            mu_rep = np.repeat(mean_u, M, axis=0)
            totals += dt * run_hook(t, Xf, Uf, m_rep, mu_rep).reshape(S, M)
        bstar = drift_hook(t, means, U.mean(axis=1))[:, None, :]
        bc = np.asarray(spec.drift_control(t, Xf, Uf), dtype=np.float64).reshape(S, M, n)
        sig = np.asarray(spec.noise_coeff(t, Xf), dtype=np.float64)
        if sig.shape == (n, n):
            diffusion = (dW[:, k].reshape(S * M, n) @ sig.T).reshape(S, M, n)
        else:
            diffusion = np.einsum(
                "mij,mj->mi", sig, dW[:, k].reshape(S * M, n)
            ).reshape(S, M, n)
        X = X + (bstar + bc) * dt + diffusion + dB[:, k][:, None, :]
        if not np.all(np.isfinite(X)):
            raise RuntimeError(f"non-finite state at step {k + 1}")
    if costs:
        means = X.mean(axis=1)
        totals += term_hook(
            X.reshape(S * M, n), np.repeat(means, M, axis=0)
        ).reshape(S, M)
    return totals.mean(axis=1), X


def _has_hooks(spec):
    h = spec.batch_hooks or {}
    return all(k in h for k in ("drift_mean", "running_cost_mean", "terminal_mean"))


def _closed_scenario_values(spec, policy, grid, noises, particles, seed):
    """Per-scenario objective of a feedback policy; fast path when hooked."""
    if _has_hooks(spec) and (isinstance(policy, FeedbackPolicy)
                             and policy.features.kind != "scenario"):
        X0, dW = _stacked_inputs(spec, grid, len(noises), particles, seed)

        def controller(k, X, means, variances):
            return _closed_controls(policy, k, X, means, variances)

        vals, _ = _stacked_values(spec, grid, noises, X0, dW, controller)
        return vals
    vals = np.empty(len(noises))
    for s, noi in enumerate(noises):
        flow = simulate_conditional_mkv(
            spec, policy, grid, noi, particles, (seed, s),
            scenario=s if _reads_scenario(policy) else None,
        )
        vals[s] = flow_value(spec, flow)
    return vals


def _reads_scenario(policy):
    return isinstance(policy, FeedbackPolicy) and policy.features.kind == "scenario"


def _open_scenario_values(spec, policy, grid, noises, particles, seed):
    """Per-scenario objective of an open-loop table; fast path when hooked."""
    if _has_hooks(spec):
        S = len(noises)
        X0, dW = _stacked_inputs(spec, grid, S, particles, seed)
        K, nodes = grid.steps, grid.nodes
        M = X0.shape[1]
        xi_bin = np.stack([np.digitize(X0[s, :, 0], policy.xi_edges)
                           for s in range(S)])
        w_cum = np.concatenate(
            [np.zeros((S, 1, M, X0.shape[2])), np.cumsum(dW, axis=1)], axis=1
        )
        b_vals = np.stack([p.values for p in noises])  # (S, K+1, n)

        def controller(k, X, means, variances):
            kk = min(k, K - 1)
            t = nodes[k]
            ids = np.empty((S, M), dtype=np.int64)
            for s in range(S):
                wb, bb = _openloop_bins(
                    policy, k, xi_bin[s], w_cum[s, k], b_vals[s, k], t
                )
                ids[s] = policy.table[kk, xi_bin[s], wb, bb]
            return policy.control_grid[ids]

        vals, _ = _stacked_values(spec, grid, noises, X0, dW, controller)
        return vals
    vals = np.empty(len(noises))
    for s, noi in enumerate(noises):
        flow = simulate_open_loop(spec, policy, grid, noi, particles, (seed, s))
        vals[s] = flow_value(spec, flow)
    return vals


# ----------------------------------------------------------------------
# value reports and optimizers
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ValueReport:
    """Inner-approximation value estimate with its search trace."""

    value: float
    se: float
    per_scenario: np.ndarray
    policy: object
    trace: tuple  # value after each completed sweep
    sweeps_used: int
    scenarios: int
    particles: int
    seed: int


def _report(values, policy, trace, sweeps, particles, seed):
    values = np.asarray(values, dtype=np.float64)
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return ValueReport(
        value=float(values.mean()),
        se=se,
        per_scenario=values,
        policy=policy,
        trace=tuple(trace),
        sweeps_used=int(sweeps),
        scenarios=int(values.size),
        particles=int(particles),
        seed=int(seed),
    )


def _block_edges(K, time_blocks):
    R = K if time_blocks is None else max(1, min(int(time_blocks), K))
    return np.linspace(0, K, R + 1).astype(np.intp)


def closed_loop_value(spec: ModelSpec, grid=None, n_scenarios=8, particles=1000,
                      sweeps=2, seed=0, init_policy=None, state_cells=9,
                      mean_bins=4, time_blocks=8, sweep_controls=None,
                      steps=50):
    """Inner approximation of the cooperative value over feedback tables.

    Coordinate ascent over a moment-featured table: proposals set one
    (time block, feature row, state cell) slab to a candidate control and
    are scored by re-simulating all scenarios on fixed draws; strict
    improvements are kept, so the reported value rises monotonically over
    sweeps up to nothing (evaluations are deterministic).  The result is
    a lower bound estimate of the value over all feedback controls.

    ``init_policy`` seeds the ascent; tables of the matching shape are
    adopted directly, other policies (or None) initialize a fit from a
    pilot simulation.
    """
    if grid is None:
        grid = spec.time_grid(int(steps))
    K = grid.steps
    G = spec.control_grid.shape[0]
    noises = _scenario_noises(spec, grid, n_scenarios, seed)
    control_ids = (np.arange(G) if sweep_controls is None
                   else np.asarray(sweep_controls, dtype=np.intp))

    # calibration run: cell range and mean-bin edges from a pilot policy
    pilot = init_policy
    if pilot is None:
        mid = int(np.argmin(np.linalg.norm(spec.control_grid, axis=1)))
        pilot = FeedbackPolicy(
            grid,
            np.array([-1.0, 1.0]),
            spec.control_grid,
            np.full((K, 1, 2), mid, dtype=np.int64),
        )
    pilot_flows = [
        simulate_conditional_mkv(spec, pilot, grid, noises[s], particles, (seed, s),
                                 scenario=s if _reads_scenario(pilot) else None)
        for s in range(len(noises))
    ]
    pooled = np.concatenate(
        [f.states[:, 0] for fl in pilot_flows for f in fl.frames]
    )
    lo, hi = pooled.min(), pooled.max()
    pad = 1e-6 * max(1.0, hi - lo)
    cells = np.linspace(lo - pad, hi + pad, int(state_cells))
    means_pool = np.array(
        [f.mean_state()[0] for fl in pilot_flows for f in fl.frames]
    )
    if mean_bins > 1 and np.ptp(means_pool) > 0:
        edges = np.quantile(means_pool, np.linspace(0, 1, mean_bins + 1)[1:-1])
        edges = np.unique(edges)
    else:
        edges = np.array([], dtype=np.float64)
    feats = (FeatureSpec(kind="none", count=1)
             if edges.size == 0
             else FeatureSpec(kind="moments", count=edges.size + 1,
                              mean_edges=edges, var_edges=None))
    F = feats.count

    # initial table: project the pilot policy onto the new table support
    table = np.empty((K, F, cells.size), dtype=np.int64)
    mids = (np.concatenate([[edges[0] - 1.0], edges])
            + np.concatenate([edges, [edges[-1] + 1.0]])) / 2.0 \
        if edges.size else np.zeros(1)
    for k in range(K):
        for r in range(F):
            mom = (np.array([mids[r]]), np.array([0.0]))
            u = _policy_controls_any(pilot, k, cells[:, None], None, mom)
            table[k, r] = _grid_ids(spec.control_grid, u)
    policy = FeedbackPolicy(grid, cells, spec.control_grid, table, feats)

    def value_of(pol):
        return _closed_scenario_values(spec, pol, grid, noises, particles, seed)

    vals = value_of(policy)
    cur = vals.mean()
    trace = []
    edges_k = _block_edges(K, time_blocks)
    occupancy = _closed_occupancy(spec, policy, grid, noises, particles, seed,
                                  edges_k, cells, feats)
    sweeps_done = 0
    for sweep in range(int(sweeps)):
        sweeps_done += 1
        changed = False
        for b in range(len(edges_k) - 2, -1, -1):
            k0, k1 = int(edges_k[b]), int(edges_k[b + 1])
            for r in range(F):
                for c in range(cells.size):
                    if occupancy[b, r, c] == 0:
                        continue
                    incumbent = table[k0:k1, r, c].copy()
                    best_slab, best_mean, best_vals = incumbent, cur, vals
                    for g in control_ids:
                        if np.all(incumbent == g):
                            continue
                        table[k0:k1, r, c] = g
                        cand_vals = value_of(
                            FeedbackPolicy(grid, cells, spec.control_grid,
                                           table, feats)
                        )
                        if cand_vals.mean() > best_mean + 1e-12:
                            best_slab = np.full(k1 - k0, g, dtype=np.int64)
                            best_mean, best_vals = cand_vals.mean(), cand_vals
                    table[k0:k1, r, c] = best_slab
                    if not np.array_equal(best_slab, incumbent):
                        changed, cur, vals = True, best_mean, best_vals
        trace.append(float(cur))
        if not changed:
            break
        policy = FeedbackPolicy(grid, cells, spec.control_grid, table, feats)
        occupancy = _closed_occupancy(spec, policy, grid, noises, particles,
                                      seed, edges_k, cells, feats)
    final = FeedbackPolicy(grid, cells, spec.control_grid, table, feats)
    return _report(value_of(final), final, trace, sweeps_done, particles, seed)


def _policy_controls_any(policy, k, X, scenario, moments):
    if hasattr(policy, "controls"):
        U = policy.controls(k, X, scenario=scenario, moments=moments)
    else:
        U = policy(k, X, scenario=scenario, moments=moments)
    return np.atleast_2d(np.asarray(U, dtype=np.float64))


def _grid_ids(control_grid, values):
    """Indices of the nearest grid rows, ties to the lowest index."""
    d = np.linalg.norm(values[:, None, :] - control_grid[None, :, :], axis=2)
    return d.argmin(axis=1)


def _closed_occupancy(spec, policy, grid, noises, particles, seed, edges_k,
                      cells, feats):
    """(block, row, cell) visit counts under the current policy."""
    from .mfg import bisect_ascending

    R, F, C = len(edges_k) - 1, feats.count, cells.size
    occ = np.zeros((R, F, C), dtype=np.int64)
    for s, noi in enumerate(noises):
        flow = simulate_conditional_mkv(
            spec, policy, grid, noi, particles, (seed, s)
        )
        for b in range(R):
            k0, k1 = int(edges_k[b]), int(edges_k[b + 1])
            for k in range(k0, k1):
                f = flow.frames[k]
                if feats.kind == "none":
                    r = 0
                else:
                    r = feats.index(moments=(f.mean_state(), f.var_state()))
                idx = np.clip(bisect_ascending(cells, f.states[:, 0]), 1, C - 1)
                np.add.at(occ[b, r], idx - 1, 1)
                np.add.at(occ[b, r], idx, 1)
    return occ


def open_loop_value(spec: ModelSpec, grid=None, n_scenarios=8, particles=1000,
                    sweeps=2, seed=0, init_policy=None, xi_bins=4, path_bins=3,
                    time_blocks=8, sweep_controls=None, steps=50):
    """Inner approximation of the value over non-anticipative tables.

    Same ascent protocol as `closed_loop_value`, over (initial state,
    own-path, common-path) feature bins.  ``init_policy`` may be an
    OpenLoopPolicy (adopted directly), a feedback policy (fitted to its
    realized controls via `openloop_from_records`), or None (constant
    start).
    """
    if grid is None:
        grid = spec.time_grid(int(steps))
    K = grid.steps
    G = spec.control_grid.shape[0]
    noises = _scenario_noises(spec, grid, n_scenarios, seed)
    control_ids = (np.arange(G) if sweep_controls is None
                   else np.asarray(sweep_controls, dtype=np.intp))

    if isinstance(init_policy, OpenLoopPolicy):
        policy = init_policy
        if policy.grid.steps != K:
            raise ValueError("initial policy grid does not match")
    else:
        xe = default_xi_edges(spec, xi_bins, seed)
        pe = _normal_quantile_edges(int(path_bins))
        if init_policy is None:
            mid = int(np.argmin(np.linalg.norm(spec.control_grid, axis=1)))
            policy = OpenLoopPolicy.constant(grid, spec.control_grid, mid, xe, pe)
        else:
            records = []
            for s, noi in enumerate(noises):
                _, rec = simulate_conditional_mkv(
                    spec, init_policy, grid, noi, particles, (seed, s),
                    scenario=s if _reads_scenario(init_policy) else None,
                    record=True,
                )
                records.append(rec)
            policy = openloop_from_records(spec, grid, records, noises, xe, pe)
    table = np.array(policy.table)

    def value_of(tab):
        pol = OpenLoopPolicy(grid, policy.control_grid, policy.xi_edges,
                             policy.path_edges, tab)
        return _open_scenario_values(spec, pol, grid, noises, particles, seed), pol

    vals, pol = value_of(table)
    cur = vals.mean()
    trace = []
    edges_k = _block_edges(K, time_blocks)
    occ = _open_occupancy(spec, pol, grid, noises, particles, seed, edges_k)
    sweeps_done = 0
    shape = policy.feature_shape
    for sweep in range(int(sweeps)):
        sweeps_done += 1
        changed = False
        for b in range(len(edges_k) - 2, -1, -1):
            k0, k1 = int(edges_k[b]), int(edges_k[b + 1])
            for fx in range(shape[0]):
                for fw in range(shape[1]):
                    for fb in range(shape[2]):
                        if occ[b, fx, fw, fb] == 0:
                            continue
                        incumbent = table[k0:k1, fx, fw, fb].copy()
                        best_slab, best_mean, best_vals = incumbent, cur, vals
                        for g in control_ids:
                            if np.all(incumbent == g):
                                continue
                            table[k0:k1, fx, fw, fb] = g
                            cand_vals, _ = value_of(table)
                            if cand_vals.mean() > best_mean + 1e-12:
                                best_slab = np.full(k1 - k0, g, dtype=np.int64)
                                best_mean, best_vals = cand_vals.mean(), cand_vals
                        table[k0:k1, fx, fw, fb] = best_slab
                        if not np.array_equal(best_slab, incumbent):
                            changed, cur, vals = True, best_mean, best_vals
        trace.append(float(cur))
        if not changed:
            break
        _, pol = value_of(table)
        occ = _open_occupancy(spec, pol, grid, noises, particles, seed, edges_k)
    vals, final = value_of(table)
    return _report(vals, final, trace, sweeps_done, particles, seed)


def _open_occupancy(spec, policy, grid, noises, particles, seed, edges_k):
    """(block, xi-bin, w-bin, b-bin) visit counts under the current policy."""
    R = len(edges_k) - 1
    occ = np.zeros((R,) + policy.feature_shape, dtype=np.int64)
    K, nodes = grid.steps, grid.nodes
    for s, noi in enumerate(noises):
        key = (seed, s)
        M = int(particles)
        X0 = np.atleast_2d(np.asarray(
            spec.initial_sampler(stream(*key, TAG_INITIAL), M), dtype=np.float64
        ))
        dW = stream(*key, TAG_NOISE).normal(
            scale=np.sqrt(grid.dt), size=(K, M, spec.state_dim)
        )
        xi_bin = np.digitize(X0[:, 0], policy.xi_edges)
        w_running = np.zeros((M, spec.state_dim))
        for b in range(R):
            for k in range(int(edges_k[b]), int(edges_k[b + 1])):
                wb, bb = _openloop_bins(
                    policy, k, xi_bin, w_running, noi.values[k], nodes[k]
                )
                np.add.at(occ[b], (xi_bin, wb, np.full(M, bb)), 1)
                w_running = w_running + dW[k]
    return occ


def openloop_from_records(spec: ModelSpec, grid, records, noises, xi_edges,
                          path_edges):
    """Fit an open-loop table to recorded closed-loop behaviour.

    For every (node, feature bin) the fitted entry is the grid projection
    of the mean recorded control there; empty bins fall back to the
    node's overall mean control.  Because Euler states are functions of
    (initial state, own increments, common path), this realizes the
    embedding of feedback controls into the open-loop class, up to the
    binning resolution.
    """
    xe = np.asarray(xi_edges, dtype=np.float64)
    pe = np.asarray(path_edges, dtype=np.float64)
    K = grid.steps
    nodes = grid.nodes
    Fx, Fp = xe.size + 1, pe.size + 1
    q = spec.control_dim
    sums = np.zeros((K, Fx, Fp, Fp, q))
    counts = np.zeros((K, Fx, Fp, Fp), dtype=np.int64)
    probe = OpenLoopPolicy.constant(grid, spec.control_grid, 0, xe, pe)
    for rec, noi in zip(records, noises):
        M = rec.initial.shape[0]
        xi_bin = np.digitize(rec.initial[:, 0], xe)
        w_running = np.zeros((M, spec.state_dim))
        for k in range(K):
            wb, bb = _openloop_bins(probe, k, xi_bin, w_running,
                                    noi.values[k], nodes[k])
            np.add.at(sums[k], (xi_bin, wb, np.full(M, bb)), rec.controls[k])
            np.add.at(counts[k], (xi_bin, wb, np.full(M, bb)), 1)
            w_running = w_running + rec.noise_increments[k]
    table = np.empty((K, Fx, Fp, Fp), dtype=np.int64)
    for k in range(K):
        filled = counts[k] > 0
        node_mean = (sums[k].reshape(-1, q).sum(axis=0)
                     / max(counts[k].sum(), 1))
        fallback = _grid_ids(spec.control_grid, node_mean[None, :])[0]
        ids = np.full((Fx, Fp, Fp), fallback, dtype=np.int64)
        if filled.any():
            means = sums[k][filled] / counts[k][filled][:, None]
            ids[filled] = _grid_ids(spec.control_grid, means)
        table[k] = ids
    return OpenLoopPolicy(grid, spec.control_grid, xe, pe, table)


# ----------------------------------------------------------------------
# equivalence and cooperative limit
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceReport:
    """Closed-versus-open value comparison on shared scenario draws."""

    closed: ValueReport
    open: ValueReport
    difference: float  # closed minus open
    paired_se: float
    tolerance: float
    within_tolerance: bool


def equivalence_report(spec: ModelSpec, grid=None, n_scenarios=8, particles=1000,
                       sweeps=2, seed=0, tolerance=0.05, init_policy=None,
                       time_blocks=8, sweep_controls=None, steps=50):
    """Run both optimizers on shared draws and compare the values.

    The closed-loop winner initializes the open-loop search (its realized
    controls are non-anticipative functions of the inputs), then the gap
    |closed - open| is tested against ``tolerance`` relative to the
    closed value, with a paired per-scenario standard error.
    """
    closed = closed_loop_value(
        spec, grid=grid, n_scenarios=n_scenarios, particles=particles,
        sweeps=sweeps, seed=seed, init_policy=init_policy,
        time_blocks=time_blocks, sweep_controls=sweep_controls, steps=steps,
    )
    opened = open_loop_value(
        spec, grid=grid, n_scenarios=n_scenarios, particles=particles,
        sweeps=sweeps, seed=seed, init_policy=closed.policy,
        time_blocks=time_blocks, sweep_controls=sweep_controls, steps=steps,
    )
    diff = closed.per_scenario - opened.per_scenario
    paired_se = (float(diff.std(ddof=1) / np.sqrt(diff.size))
                 if diff.size > 1 else 0.0)
    gap = float(diff.mean())
    tol_abs = tolerance * abs(closed.value)
    return EquivalenceReport(
        closed=closed,
        open=opened,
        difference=gap,
        paired_se=paired_se,
        tolerance=float(tolerance),
        within_tolerance=bool(abs(gap) <= max(tol_abs, 2.0 * paired_se)),
    )


def lift_policy(policy: FeedbackPolicy, n_players):
    """Symmetric N-player profile: each player reads own state and moments.

    Scenario-featured tables are rejected: a game provides no scenario
    index, only the empirical measure.
    """
    if not isinstance(policy, FeedbackPolicy):
        raise TypeError("only feedback tables can be lifted")
    if policy.features.kind == "scenario":
        raise ValueError(
            "scenario-featured policies are not liftable; project onto "
            "moment features first"
        )
    return NPlayerPolicySet.symmetric(policy, int(n_players))


@dataclass(frozen=True)
class ParetoCurve:
    """Symmetric cooperative values by population size, with the limit line."""

    n_players: tuple
    values: np.ndarray
    ses: np.ndarray
    mfc_value: float
    mfc_se: float
    policy: object


def pareto_limit_experiment(spec: ModelSpec, n_list, closed_report=None,
                            grid=None, paths=64, seed=0, steps=50, **closed_kwargs):
    """Cooperative value of the lifted planner policy across population sizes.

    For each N the lifted symmetric profile is simulated over ``paths``
    games (average of the players' objectives); the curve is compared to
    the mean-field value line from `closed_loop_value` (reused when
    ``closed_report`` is given).
    """
    from .nplayer import pareto_value

    if grid is None:
        grid = spec.time_grid(int(steps))
    if closed_report is None:
        closed_report = closed_loop_value(spec, grid=grid, seed=seed,
                                          **closed_kwargs)
    policy = closed_report.policy
    ns = tuple(int(x) for x in n_list)
    if list(ns) != sorted(ns):
        raise ValueError("population sizes must be sorted")
    values = np.empty(len(ns))
    ses = np.empty(len(ns))
    for j, N in enumerate(ns):
        pset = lift_policy(policy, N)
        v, se = pareto_value(spec, pset, paths, seed, grid=grid)
        values[j], ses[j] = v, se
    return ParetoCurve(
        n_players=ns,
        values=values,
        ses=ses,
        mfc_value=closed_report.value,
        mfc_se=closed_report.se,
        policy=policy,
    )
