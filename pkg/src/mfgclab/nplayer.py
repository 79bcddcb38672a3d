"""N-player closed-loop game: simulation, costs, deviations, gap estimates.

Players share one common-noise path per game; each carries its own
idiosyncratic noise stream keyed by (seed, path index, player index), so
swapping one player's policy leaves every other draw bit-identical
(common random numbers).  Interaction runs through the same-node
empirical joint law of states and emitted controls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measures import Ensemble, MeasureFlow
from .mfg import (FeedbackPolicy, _interp_rows, _project_column,
                  _uniform_weights, bisect_ascending)
from .model import ModelSpec, NoisePath, TimeGrid, eval_running_cost, eval_terminal
from .streams import TAG_COMMON, TAG_INITIAL, TAG_NOISE, stream

__all__ = [
    "NPlayerPolicySet",
    "GameNoise",
    "draw_game_noise",
    "GameTrajectory",
    "simulate_game",
    "player_cost",
    "BestResponseResult",
    "best_response",
    "NashGapReport",
    "nash_gap",
    "pareto_value",
]


# ----------------------------------------------------------------------
# policy sets
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class NPlayerPolicySet:
    """One policy per player.

    Entries are either `FeedbackPolicy` objects (applied to the player's
    own state, with moment features read from the empirical state measure
    over all players) or callables (k, states (N, n), i) -> control.
    Feedback entries vectorize across players and game paths; callables
    are evaluated one player at a time.
    """

    policies: tuple

    def __post_init__(self):
        if len(self.policies) < 1:
            raise ValueError("need at least one player")
        for p in self.policies:
            if isinstance(p, FeedbackPolicy):
                if p.features.kind == "scenario":
                    raise ValueError(
                        "scenario-featured policies are not playable in the "
                        "N-player game; project to moment features first"
                    )
            elif not callable(p):
                raise TypeError("policies must be FeedbackPolicy or callable")

    @classmethod
    def symmetric(cls, policy, n_players):
        return cls((policy,) * int(n_players))

    @property
    def n_players(self):
        return len(self.policies)

    def replace(self, i, policy):
        entries = list(self.policies)
        entries[i] = policy
        return NPlayerPolicySet(tuple(entries))


def _policy_groups(policies):
    groups = []
    seen = {}
    for i, p in enumerate(policies):
        key = id(p)
        if key in seen:
            groups[seen[key]][1].append(i)
        else:
            seen[key] = len(groups)
            groups.append((p, [i]))
    return [(p, np.asarray(idx, dtype=np.intp)) for p, idx in groups]


def _feedback_batch(policy: FeedbackPolicy, k, xs, moments):
    """Evaluate a feedback table on (P, L) own-state slices."""
    feats = policy.features
    kk = min(k, policy.grid.steps - 1)
    if feats.kind == "none":
        rows = np.zeros(xs.shape[0], dtype=np.intp)
    else:
        means, variances = moments
        rows = np.digitize(means[:, 0], feats.mean_edges)
        if feats.var_edges is not None:
            vrow = np.digitize(variances[:, 0], feats.var_edges)
            rows = rows * (feats.var_edges.size + 1) + vrow
    table_k = policy.table[kk]  # (F, S)
    out = np.empty(xs.shape + (policy.control_grid.shape[1],))
    for d in range(policy.control_grid.shape[1]):
        vals = policy.control_grid[table_k, d]  # (F, S)
        interp = _interp_rows(policy.state_cells, vals[rows], xs)
        out[..., d] = _project_column(interp, policy.control_grid[:, d])
    return out


def _sorted_moments(states):
    """Per-path mean and variance over players, permutation-invariant.

    Reductions run over player-sorted, C-ordered copies: relabeling
    players must not change the floating-point summation order, and
    numpy's pairwise reductions split by memory layout.
    """
    xs = np.ascontiguousarray(np.sort(states, axis=1))
    return xs.mean(axis=1), xs.var(axis=1)


def _batch_controls(groups, k, states, moments):
    """Controls for every (path, player); states (P, N, n) -> (P, N, q)."""
    P, N, n = states.shape
    U = None
    for pol, idx in groups:
        if isinstance(pol, FeedbackPolicy):
            vals = _feedback_batch(pol, k, states[:, idx, 0], moments)
        else:
            first = np.atleast_1d(
                np.asarray(pol(k, states[0], int(idx[0])), dtype=np.float64)
            )
            vals = np.empty((P, idx.size, first.size))
            for p in range(P):
                for j, i in enumerate(idx):
                    vals[p, j] = np.atleast_1d(
                        np.asarray(pol(k, states[p], int(i)), dtype=np.float64)
                    )
        if U is None:
            U = np.empty((P, N, vals.shape[-1]))
        U[:, idx, :] = vals
    return U


def _sorted_law(states_p, controls_p, weights, t):
    """Joint empirical law with atoms in lexicographic order.

    The atom order is a pure function of the atom multiset, so any player
    permutation yields bit-identical law arrays (and hence identical
    coefficient evaluations) on the generic per-path route.
    """
    keys = tuple(controls_p[:, d] for d in range(controls_p.shape[1] - 1, -1, -1))
    keys = keys + tuple(states_p[:, d] for d in range(states_p.shape[1] - 1, -1, -1))
    order = np.lexsort(keys)
    return Ensemble(states_p[order], controls_p[order], weights, t, check=False)


# ----------------------------------------------------------------------
# noise
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GameNoise:
    """Pre-drawn randomness for a batch of games."""

    initial: np.ndarray  # (P, N, n)
    idio: np.ndarray  # (P, K, N, n) Brownian increments
    common: np.ndarray  # (P, K+1, n) common path values

    @property
    def paths(self):
        return self.initial.shape[0]

    @property
    def players(self):
        return self.initial.shape[1]


def draw_game_noise(spec: ModelSpec, grid: TimeGrid, players, paths, seed,
                    common=None, path_offset=0):
    """Draw all randomness for `paths` games of `players` players.

    Streams are keyed by (seed, path, player), so any single player's
    draws are reproducible independently of the rest, and a block starting
    at `path_offset` reproduces the same slice of a larger block.
    `common` fixes one shared NoisePath across every game path; by default
    each path samples its own common path from (seed, path).
    """
    N, P, K, n = int(players), int(paths), grid.steps, spec.state_dim
    initial = np.empty((P, N, n))
    idio = np.empty((P, K, N, n))
    sqdt = np.sqrt(grid.dt)
    for p in range(P):
        pa = p + path_offset
        for i in range(N):
            initial[p, i] = np.atleast_2d(
                spec.initial_sampler(stream(seed, pa, i, TAG_INITIAL), 1)
            )[0]
            idio[p, :, i, :] = stream(seed, pa, i, TAG_NOISE).normal(
                scale=sqdt, size=(K, n)
            )
    if common is not None:
        if len(common.grid) != len(grid) or common.dim != n:
            raise ValueError("common noise path does not match grid/model")
        values = np.broadcast_to(common.values, (P,) + common.values.shape).copy()
    else:
        values = np.empty((P, K + 1, n))
        for p in range(P):
            values[p] = NoisePath.sample(
                grid, n, stream(seed, p + path_offset, TAG_COMMON)
            ).values
    return GameNoise(initial, idio, values)


# ----------------------------------------------------------------------
# batch engine
# ----------------------------------------------------------------------


def _run_batch(
    spec: ModelSpec,
    policies,
    grid: TimeGrid,
    states0,
    idio,
    common_values,
    k0=0,
    costs_for=None,
    record=False,
):
    """Euler scheme over a batch of games starting at node k0.

    states0 (P, N, n); idio (P, K, N, n) full-horizon increments (only
    rows >= k0 are read); common_values (P, K+1, n).  Returns
    (final_states, costs, states_rec, controls_rec); costs is (P, C) for
    the players in `costs_for` accumulated from k0 (left Riemann plus
    terminal), or None.
    """
    P, N, n = states0.shape
    K, dt, nodes = grid.steps, grid.dt, grid.nodes
    groups = _policy_groups(policies)
    hooks = spec.batch_hooks or {}
    drift_hook = hooks.get("drift_mean")
    run_hook = hooks.get("running_cost_mean")
    term_hook = hooks.get("terminal_mean")
    dB = np.diff(common_values, axis=1) @ spec.common_noise_coeff.T  # (P, K, n)

    want = None if costs_for is None else np.asarray(costs_for, dtype=np.intp)
    costs = None if want is None else np.zeros((P, want.size))
    states_rec = np.empty((P, K + 1, N, n)) if record else None
    controls_rec = np.empty((P, K, N, spec.control_grid.shape[1])) if record else None
    w_unit = _uniform_weights(N)

    X = np.array(states0, dtype=np.float64, order="C")
    for k in range(k0, K):
        t = nodes[k]
        moments = _sorted_moments(X)
        U = _batch_controls(groups, k, X, moments)
        if record:
            states_rec[:, k] = X
            controls_rec[:, k] = U
        mean_u = np.ascontiguousarray(np.sort(U, axis=1)).mean(axis=1)
        Xf = X.reshape(P * N, n)
        Uf = U.reshape(P * N, -1)
        if want is not None:
            if run_hook is not None:
                for c, i in enumerate(want):
                    costs[:, c] += dt * run_hook(
                        t, X[:, i, :], U[:, i, :], moments[0], mean_u
                    )
            else:
                for p in range(P):
                    law = _sorted_law(X[p], U[p], w_unit, t)
                    for c, i in enumerate(want):
                        costs[p, c] += dt * float(
                            eval_running_cost(
                                spec, t, X[p, i : i + 1], law, U[p, i : i + 1]
                            )[0]
                        )
        bc = np.asarray(spec.drift_control(t, Xf, Uf), dtype=np.float64).reshape(P, N, n)
        if drift_hook is not None:
            bstar = drift_hook(t, moments[0], mean_u)[:, None, :]
        else:
            bstar = np.empty((P, 1, n))
            for p in range(P):
                law = _sorted_law(X[p], U[p], w_unit, t)
                bstar[p, 0] = spec.drift_law(t, law)
        sig = np.asarray(spec.noise_coeff(t, Xf), dtype=np.float64)
        if sig.shape == (n, n):
            diffusion = idio[:, k].reshape(P * N, n) @ sig.T
        else:
            diffusion = np.einsum("mij,mj->mi", sig, idio[:, k].reshape(P * N, n))
        X = X + (bstar + bc) * dt + diffusion.reshape(P, N, n) + dB[:, k][:, None, :]
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise RuntimeError(
                f"non-finite state at step {k + 1}, path {int(bad[0])}, "
                f"player {int(bad[1])}"
            )
    if record:
        states_rec[:, K] = X
    if want is not None:
        if term_hook is not None:
            means = np.ascontiguousarray(np.sort(X, axis=1)).mean(axis=1)
            for c, i in enumerate(want):
                costs[:, c] += term_hook(X[:, i, :], means)
        else:
            for p in range(P):
                xs = X[p][np.lexsort(tuple(X[p][:, d] for d in range(n - 1, -1, -1)))]
                marginal = Ensemble(
                    xs, np.zeros((N, 0)), w_unit, nodes[K], check=False
                )
                for c, i in enumerate(want):
                    costs[p, c] += float(
                        eval_terminal(spec, X[p, i : i + 1], marginal)[0]
                    )
    return X, costs, states_rec, controls_rec


# ----------------------------------------------------------------------
# public single-game interface
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GameTrajectory:
    """One realized game: paths, controls, noises, and empirical flows."""

    grid: TimeGrid
    states: np.ndarray  # (K+1, N, n)
    controls: np.ndarray  # (K, N, q), as applied at nodes 0..K-1
    noise_increments: np.ndarray  # (K, N, n)
    common: NoisePath

    @property
    def n_players(self):
        return self.states.shape[1]

    def joint_flow(self):
        """Empirical state-control flow; the last frame repeats the final controls."""
        K = self.grid.steps
        w = _uniform_weights(self.n_players)
        frames = [
            Ensemble(self.states[k], self.controls[min(k, K - 1)], w,
                     self.grid.nodes[k], check=False)
            for k in range(K + 1)
        ]
        return MeasureFlow(self.grid, tuple(frames))

    def state_flow(self):
        """Empirical state-marginal flow."""
        return MeasureFlow(
            self.grid,
            tuple(f.state_marginal() for f in self.joint_flow().frames),
        )


def simulate_game(spec, policy_set: NPlayerPolicySet, grid, noise=None, seed=0,
                  path_index=0):
    """Simulate one N-player game path.

    `noise` fixes the common path; when None it is sampled from
    (seed, path_index).  Idiosyncratic draws always come from
    (seed, path_index, player) streams, making runs deterministic and
    player-separable.
    """
    N = policy_set.n_players
    block = draw_game_noise(
        spec, grid, N, 1, seed, common=noise, path_offset=path_index
    )
    init = block.initial
    idio = block.idio
    common_values = block.common
    _, _, states_rec, controls_rec = _run_batch(
        spec, policy_set.policies, grid, init, idio, common_values, record=True
    )
    return GameTrajectory(
        grid=grid,
        states=states_rec[0],
        controls=controls_rec[0],
        noise_increments=idio[0],
        common=NoisePath(grid, common_values[0]),
    )


def player_cost(spec, trajectory: GameTrajectory, i):
    """Realized objective of player i: left-Riemann running plus terminal."""
    grid = trajectory.grid
    w = _uniform_weights(trajectory.n_players)
    total = 0.0
    for k in range(grid.steps):
        # sorted-atom law keeps the value invariant under player relabeling
        law = _sorted_law(
            trajectory.states[k], trajectory.controls[k], w, grid.nodes[k]
        )
        total += grid.dt * float(
            eval_running_cost(
                spec,
                grid.nodes[k],
                trajectory.states[k, i : i + 1],
                law,
                trajectory.controls[k, i : i + 1],
            )[0]
        )
    Xt = trajectory.states[-1]
    order = np.lexsort(tuple(Xt[:, d] for d in range(Xt.shape[1] - 1, -1, -1)))
    marginal = Ensemble(
        Xt[order], np.zeros((Xt.shape[0], 0)), w, grid.nodes[-1], check=False
    )
    total += float(
        eval_terminal(spec, trajectory.states[-1, i : i + 1], marginal)[0]
    )
    return total


# ----------------------------------------------------------------------
# best response and gaps
# ----------------------------------------------------------------------


def _fit_own_state_table(spec, grid, cells, states_i, controls_i):
    """Project realized (state, control) samples onto a (time, cell) table."""
    K = grid.steps
    G = spec.control_grid.shape[0]
    table = np.zeros((K, 1, cells.size), dtype=np.int64)
    for k in range(K):
        x = states_i[:, k]
        u = controls_i[:, k, 0]
        for s, c in enumerate(cells):
            width = (cells[-1] - cells[0]) / (cells.size - 1)
            w = np.maximum(0.0, 1.0 - np.abs(x - c) / max(width, 1e-12))
            if w.sum() > 0:
                target = float((w * u).sum() / w.sum())
            else:
                target = float(u.mean())
            table[k, 0, s] = int(
                np.abs(spec.control_grid[:, 0] - target).argmin()
            )
    return table


@dataclass(frozen=True)
class BestResponseResult:
    """Deviation search outcome for one player."""

    policy: FeedbackPolicy
    value: float
    value_se: float
    baseline_value: float
    baseline_se: float
    gap: float
    gap_se: float
    sweeps_used: int
    settled: bool  # False when the last sweep still found improvements
    trace: tuple


def best_response(
    spec,
    policy_set: NPlayerPolicySet,
    i,
    paths,
    seed,
    noise=None,
    n_cells=9,
    sweeps=2,
    restarts=("current",),
    sweep_controls=None,
    time_blocks=None,
    block: GameNoise | None = None,
    grid: TimeGrid | None = None,
    steps=None,
):
    """Approximate best deviation of player i over own-state tables.

    Policy improvement with common random numbers: all candidate tables
    are scored on the same pre-drawn noise block, re-simulating only the
    suffix a proposal can affect.  Proposals sweep time backward over
    `time_blocks` contiguous node blocks (defaulting to one block per
    node), cells by occupancy, controls in grid order; a block proposal
    sets every node row of the block at once, and a change is kept when
    the estimated value strictly improves.  `restarts` entries: "current"
    (table fitted to the player's realized behaviour) and/or "constants"
    (one run per constant table).  The returned value estimates
    sup over the table class, a lower bound on the true deviation sup.
    """
    N = policy_set.n_players
    if grid is None:
        grid = spec.time_grid(int(steps)) if steps else spec.time_grid(50)
    if block is None:
        block = draw_game_noise(spec, grid, N, paths, seed, common=noise)
    P, K = block.paths, grid.steps
    G = spec.control_grid.shape[0]

    base_final, base_costs, base_states, base_controls = _run_batch(
        spec, policy_set.policies, grid, block.initial, block.idio, block.common,
        costs_for=[i], record=True,
    )
    baseline = base_costs[:, 0]
    own_states = base_states[:, :, i, 0]  # (P, K+1)
    pooled = own_states.ravel()
    std = pooled.std()
    lo = min(pooled.min(), pooled.mean() - 3 * std)
    hi = max(pooled.max(), pooled.mean() + 3 * std)
    pad = 1e-6 * max(1.0, hi - lo)
    cells = np.linspace(lo - pad, hi + pad, n_cells)

    if sweep_controls is None:
        control_ids = np.arange(G)
    else:
        control_ids = np.asarray(sweep_controls, dtype=np.intp)
    n_blocks = K if time_blocks is None else max(1, min(int(time_blocks), K))
    block_edges = np.linspace(0, K, n_blocks + 1).astype(np.intp)

    start_tables = []
    for r in restarts:
        if r == "current":
            start_tables.append(
                _fit_own_state_table(
                    spec, grid, cells, own_states[:, :-1], base_controls[:, :, i, :]
                )
            )
        elif r == "constants":
            for g in range(G):
                start_tables.append(np.full((K, 1, cells.size), g, dtype=np.int64))
        else:
            raise ValueError(f"unknown restart kind: {r!r}")

    def evaluate_from(table, k0, prefix_states, prefix_cost):
        policy = FeedbackPolicy(grid, cells, spec.control_grid, table)
        entries = list(policy_set.policies)
        entries[i] = policy
        _, costs, _, _ = _run_batch(
            spec, entries, grid, prefix_states, block.idio, block.common,
            k0=k0, costs_for=[i],
        )
        return prefix_cost + costs[:, 0]

    best_table = None
    best_costs = None
    trace = []
    sweeps_used = 0
    settled = True
    for table in start_tables:
        table = table.copy()
        policy = FeedbackPolicy(grid, cells, spec.control_grid, table)
        entries = list(policy_set.policies)
        entries[i] = policy
        _, costs, rec_states, _ = _run_batch(
            spec, entries, grid, block.initial, block.idio, block.common,
            costs_for=[i], record=True,
        )
        cur = costs[:, 0]
        # prefix running costs of player i under the current table, per node
        prefix_costs = _prefix_costs(spec, entries, grid, rec_states, block, i)
        for sweep in range(int(sweeps)):
            sweeps_used += 1
            changed = False
            for b in range(n_blocks - 1, -1, -1):
                k0, k1 = int(block_edges[b]), int(block_edges[b + 1])
                occupancy = _cell_occupancy(
                    cells, rec_states[:, k0:k1, i, 0].ravel()
                )
                order = np.argsort(-occupancy, kind="stable")
                for s in order:
                    if occupancy[s] == 0 and cells.size > 2:
                        continue
                    incumbent = table[k0:k1, 0, s].copy()
                    best_slab, best_mean = incumbent, cur.mean()
                    for g in control_ids:
                        if np.all(incumbent == g):
                            continue
                        table[k0:k1, 0, s] = g
                        cand = evaluate_from(
                            table, k0, rec_states[:, k0], prefix_costs[:, k0]
                        )
                        if cand.mean() > best_mean + 1e-12:
                            best_slab = np.full(k1 - k0, g, dtype=np.int64)
                            best_mean, cur = cand.mean(), cand
                    table[k0:k1, 0, s] = best_slab
                    if not np.array_equal(best_slab, incumbent):
                        changed = True
            if changed:
                # re-record prefix states once per sweep with the new table
                policy = FeedbackPolicy(grid, cells, spec.control_grid, table)
                entries[i] = policy
                _, costs, rec_states, _ = _run_batch(
                    spec, entries, grid, block.initial, block.idio, block.common,
                    costs_for=[i], record=True,
                )
                cur = costs[:, 0]
                prefix_costs = _prefix_costs(spec, entries, grid, rec_states, block, i)
            trace.append(float(cur.mean()))
            if not changed:
                break
        else:
            settled = settled and not changed
        if best_costs is None or cur.mean() > best_costs.mean():
            best_costs = cur
            best_table = table.copy()

    diff = best_costs - baseline
    return BestResponseResult(
        policy=FeedbackPolicy(grid, cells, spec.control_grid, best_table),
        value=float(best_costs.mean()),
        value_se=float(best_costs.std(ddof=1) / np.sqrt(P)),
        baseline_value=float(baseline.mean()),
        baseline_se=float(baseline.std(ddof=1) / np.sqrt(P)),
        gap=float(diff.mean()),
        gap_se=float(diff.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0,
        sweeps_used=sweeps_used,
        settled=settled,
        trace=tuple(trace),
    )


def _cell_occupancy(cells, x):
    idx = np.clip(bisect_ascending(cells, x), 1, cells.size - 1)
    counts = np.zeros(cells.size, dtype=np.int64)
    np.add.at(counts, idx - 1, 1)
    np.add.at(counts, idx, 1)
    return counts


def _prefix_costs(spec, entries, grid, rec_states, block, i):
    """Cumulative running cost of player i before each node (P, K+1)."""
    P = rec_states.shape[0]
    K = grid.steps
    groups = _policy_groups(entries)
    hooks = spec.batch_hooks or {}
    run_hook = hooks.get("running_cost_mean")
    out = np.zeros((P, K + 1))
    w_unit = _uniform_weights(rec_states.shape[2])
    for k in range(K):
        t = grid.nodes[k]
        X = rec_states[:, k]
        moments = _sorted_moments(X)
        U = _batch_controls(groups, k, X, moments)
        if run_hook is not None:
            mean_u = np.ascontiguousarray(np.sort(U, axis=1)).mean(axis=1)
            vals = run_hook(t, X[:, i, :], U[:, i, :], moments[0], mean_u)
        else:
            vals = np.empty(P)
            for p in range(P):
                law = _sorted_law(X[p], U[p], w_unit, t)
                vals[p] = eval_running_cost(
                    spec, t, X[p, i : i + 1], law, U[p, i : i + 1]
                )[0]
        out[:, k + 1] = out[:, k] + grid.dt * vals
    return out


@dataclass(frozen=True)
class NashGapReport:
    """Per-player deviation gains with standard errors."""

    gaps: np.ndarray
    gap_ses: np.ndarray
    players: tuple
    max_gap: float
    mean_gap: float
    responses: tuple = field(repr=False, default=())


def nash_gap(spec, policy_set, paths, seed, players=None, grid=None, noise=None,
             **br_kwargs):
    """Estimate deviation gains; a profile is epsilon-Nash at max_gap.

    By default only player 0 is probed (exchangeable profiles make the
    players' gaps identically distributed); pass `players` for more.
    Gaps pair best-response and baseline costs on identical noise draws,
    so their standard errors reflect the difference, not the levels.
    """
    if players is None:
        players = (0,)
    results = []
    for i in players:
        results.append(
            best_response(
                spec, policy_set, i, paths, seed, grid=grid, noise=noise, **br_kwargs
            )
        )
    gaps = np.array([r.gap for r in results])
    ses = np.array([r.gap_se for r in results])
    return NashGapReport(
        gaps=gaps,
        gap_ses=ses,
        players=tuple(players),
        max_gap=float(gaps.max()),
        mean_gap=float(gaps.mean()),
        responses=tuple(results),
    )


def pareto_value(spec, policy_set, paths, seed, grid=None, noise=None,
                 block=None):
    """Average per-player objective across players and game paths."""
    N = policy_set.n_players
    if grid is None:
        grid = spec.time_grid(50)
    if block is None:
        block = draw_game_noise(spec, grid, N, paths, seed, common=noise)
    _, costs, _, _ = _run_batch(
        spec, policy_set.policies, grid, block.initial, block.idio, block.common,
        costs_for=np.arange(N),
    )
    per_path = costs.mean(axis=1)
    return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(len(per_path)))
