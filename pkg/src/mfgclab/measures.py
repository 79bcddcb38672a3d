"""Weighted atom clouds over state-control space, flows of them, and metrics.

An Ensemble is a finitely supported joint law on R^n x U: atom positions
(states), atom controls, and nonnegative weights summing to one.  A
MeasureFlow attaches one ensemble per node of a time grid; a
ScenarioEnsemble pairs flows with the common-noise paths that produced
them, with equal scenario weights.

Distances: exact one-dimensional Wasserstein via the quantile coupling,
a seeded sliced surrogate for multi-dimensional clouds, a deterministic
flow pseudometric (sup of state distances plus a time-integrated joint
term, both combined per coordinate), and an assignment-based distance
between scenario ensembles.
"""

from __future__ import annotations

import struct
from dataclasses import InitVar, dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .model import NoisePath, TimeGrid
from .streams import TAG_DIRECTIONS, stream

__all__ = [
    "Ensemble",
    "MeasureFlow",
    "Scenario",
    "ScenarioEnsemble",
    "wasserstein_1d",
    "sliced_wasserstein",
    "flow_distance",
    "shift_flow",
    "ensemble_law_distance",
    "ensemble_to_csv",
    "ensemble_from_csv",
    "flow_to_csv",
    "flow_from_csv",
    "write_flow",
    "read_flow",
]

_WEIGHT_TOL = 1e-12


def _clean_array(arr, name, dtype=np.float64):
    out = np.ascontiguousarray(arr, dtype=dtype)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


@dataclass(frozen=True)
class Ensemble:
    """Weighted atoms (state, control, weight) observed at one time."""

    states: np.ndarray  # (m, n)
    controls: np.ndarray  # (m, q); q may be 0 for a state-only marginal
    weights: np.ndarray  # (m,), nonnegative, sums to 1 within 1e-12
    time_stamp: float = 0.0
    check: InitVar[bool] = True

    def __post_init__(self, check):
        if not check:
            return
        states = _clean_array(self.states, "states")
        if states.ndim == 1:
            states = states[:, None]
        controls = _clean_array(self.controls, "controls")
        if controls.ndim == 1:
            controls = controls[:, None]
        weights = _clean_array(self.weights, "weights")
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValueError("states must be a nonempty (m, n) array")
        m = states.shape[0]
        if controls.shape[0] != m or controls.ndim != 2:
            raise ValueError("controls must align with states")
        if weights.shape != (m,):
            raise ValueError("weights must be a length-m vector")
        if np.any(weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError("weights must sum to one within 1e-12")
        for arr in (states, controls, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "time_stamp", float(self.time_stamp))

    # -- constructors ---------------------------------------------------

    @classmethod
    def uniform(cls, states, controls, time_stamp=0.0):
        """Equal-weight cloud."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        m = states.shape[0]
        return cls(states, controls, np.full(m, 1.0 / m), time_stamp)

    # -- basic queries ----------------------------------------------------

    @property
    def size(self):
        return self.states.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def control_dim(self):
        return self.controls.shape[1]

    def mean_state(self):
        return self.weights @ self.states

    def mean_control(self):
        if self.control_dim == 0:
            return np.zeros(0)
        return self.weights @ self.controls

    def var_state(self):
        mean = self.mean_state()
        centered = self.states - mean
        return self.weights @ (centered**2)

    def state_marginal(self):
        """Drop the control coordinates; same atoms and weights."""
        return Ensemble(
            self.states,
            np.zeros((self.size, 0)),
            self.weights,
            self.time_stamp,
            check=False,
        )


@dataclass(frozen=True)
class MeasureFlow:
    """One ensemble per node of a time grid."""

    grid: TimeGrid
    frames: tuple
    shift_origin: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) != len(self.grid):
            raise ValueError("need one frame per grid node")
        nodes = self.grid.nodes
        n, q = frames[0].state_dim, frames[0].control_dim
        for k, frame in enumerate(frames):
            if frame.state_dim != n or frame.control_dim != q:
                raise ValueError("frames must share state and control dims")
            if abs(frame.time_stamp - nodes[k]) > 1e-9 * max(1.0, self.grid.horizon):
                raise ValueError(f"frame {k} time stamp is off its grid node")
        object.__setattr__(self, "frames", frames)

    def frame(self, k):
        return self.frames[k]

    def __len__(self):
        return len(self.frames)

    @property
    def state_dim(self):
        return self.frames[0].state_dim

    @property
    def control_dim(self):
        return self.frames[0].control_dim

    def mean_path(self):
        """Per-node weighted state means, shape (K+1, n)."""
        return np.stack([f.mean_state() for f in self.frames])


@dataclass(frozen=True)
class Scenario:
    """A common-noise path together with the flow realised along it."""

    noise: NoisePath
    flow: MeasureFlow

    def __post_init__(self):
        if len(self.noise.grid) != len(self.flow.grid) or not np.isclose(
            self.noise.grid.horizon, self.flow.grid.horizon
        ):
            raise ValueError("noise path and flow live on different grids")


@dataclass(frozen=True)
class ScenarioEnsemble:
    """Equally weighted scenarios on a shared grid."""

    scenarios: tuple

    def __post_init__(self):
        scenarios = tuple(self.scenarios)
        if not scenarios:
            raise ValueError("need at least one scenario")
        g0 = scenarios[0].flow.grid
        for s in scenarios:
            g = s.flow.grid
            if g.steps != g0.steps or not np.isclose(g.horizon, g0.horizon):
                raise ValueError("scenarios must share one time grid")
        object.__setattr__(self, "scenarios", scenarios)

    @property
    def grid(self):
        return self.scenarios[0].flow.grid

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)


# ----------------------------------------------------------------------
# exact 1-D distance and sorted caches
# ----------------------------------------------------------------------


def _check_order(p):
    p = float(p)
    if not p >= 1.0:
        raise ValueError("order p must be >= 1")
    return p


@lru_cache(maxsize=64)
def _uniform_cum(m):
    cum = np.arange(1, m + 1) / m
    cum[-1] = 1.0
    cum.setflags(write=False)
    return cum


def _cum_from_weights(w_sorted):
    cum = np.cumsum(w_sorted)
    cum /= cum[-1]
    cum[-1] = 1.0
    return cum


def wasserstein_1d(xa, xb, wa=None, wb=None, p=1.0):
    """Exact W_p between two weighted atom sets on the line.

    Parameters
    ----------
    xa, xb : array_like
        Atom positions.
    wa, wb : array_like or None
        Weights summing to one within 1e-12; None means uniform.
    p : float
        Order >= 1.

    Returns
    -------
    float
        The quantile-coupling cost to the power 1/p, which is the exact
        Wasserstein distance on the line.
    """
    p = _check_order(p)
    xa = _clean_array(np.ravel(xa), "xa")
    xb = _clean_array(np.ravel(xb), "xb")
    if xa.size == 0 or xb.size == 0:
        raise ValueError("atom sets must be nonempty")
    if wa is None and wb is None and xa.size == xb.size:
        cost = kernels.coupling_cost_uniform(np.sort(xa), np.sort(xb), p)
        return float(cost ** (1.0 / p))
    sides = []
    for x, w, name in ((xa, wa, "wa"), (xb, wb, "wb")):
        if w is None:
            order = np.argsort(x, kind="stable")
            sides.append((x[order], _uniform_cum(x.size).copy()))
        else:
            w = _clean_array(np.ravel(w), name)
            if w.shape != x.shape or np.any(w < 0.0):
                raise ValueError(f"{name} must be nonnegative and align with atoms")
            if abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
                raise ValueError(f"{name} must sum to one within 1e-12")
            order = np.argsort(x, kind="stable")
            sides.append((x[order], _cum_from_weights(w[order])))
    (sxa, ca), (sxb, cb) = sides
    cost = kernels.coupling_cost_sorted(sxa, ca, sxb, cb, p)
    return float(cost ** (1.0 / p))


def _columns(ens, part):
    if part == "state":
        return [ens.states[:, j] for j in range(ens.state_dim)]
    if part == "joint":
        return [ens.states[:, j] for j in range(ens.state_dim)] + [
            ens.controls[:, j] for j in range(ens.control_dim)
        ]
    raise ValueError("part must be 'state' or 'joint'")


def sliced_wasserstein(a, b, p=1.0, directions=256, seed=0, part="joint"):
    """Average over seeded unit directions of the 1-D W_p of projections.

    A surrogate distance for clouds in more than one dimension.  The
    direction set is fixed by the seed, so the value is deterministic and
    the triangle inequality holds exactly for a shared seed.
    """
    p = _check_order(p)
    cols_a, cols_b = _columns(a, part), _columns(b, part)
    if len(cols_a) != len(cols_b):
        raise ValueError("ensembles live in different dimensions")
    pts_a = np.column_stack(cols_a)
    pts_b = np.column_stack(cols_b)
    d = pts_a.shape[1]
    if d == 1:
        return wasserstein_1d(pts_a[:, 0], pts_b[:, 0], a.weights, b.weights, p)
    rng = stream(seed, TAG_DIRECTIONS)
    dirs = rng.normal(size=(int(directions), d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for direction in dirs:
        total += wasserstein_1d(
            pts_a @ direction, pts_b @ direction, a.weights, b.weights, p
        )
    return float(total / len(dirs))


# ----------------------------------------------------------------------
# flow pseudometric
# ----------------------------------------------------------------------


def _presort_frame(ens):
    cols = _columns(ens, "joint")
    uniform = bool(np.all(ens.weights == ens.weights[0]))
    xs, cums = [], []
    ucum = _uniform_cum(ens.size) if uniform else None
    for col in cols:
        order = np.argsort(col, kind="stable")
        xs.append(np.ascontiguousarray(col[order]))
        cums.append(ucum if uniform else _cum_from_weights(ens.weights[order]))
    return xs, cums, uniform, ens.size


def _presort_flow(flow):
    return [_presort_frame(f) for f in flow.frames]


def _coordinate_cost(sa, sb, j, p):
    xs_a, cum_a, uni_a, ma = sa
    xs_b, cum_b, uni_b, mb = sb
    if uni_a and uni_b and ma == mb:
        return kernels.coupling_cost_uniform(xs_a[j], xs_b[j], p)
    return kernels.coupling_cost_sorted(xs_a[j], cum_a[j], xs_b[j], cum_b[j], p)


def _flow_distance_sorted(sorted_a, sorted_b, n, q, p, dt):
    sup_state = 0.0
    joint_sum = 0.0
    for sa, sb in zip(sorted_a, sorted_b):
        costs = [_coordinate_cost(sa, sb, j, p) for j in range(n + q)]
        state = float(sum(costs[:n])) ** (1.0 / p)
        joint = float(sum(costs)) ** (1.0 / p)
        sup_state = max(sup_state, state)
        joint_sum += joint
    return sup_state + dt * joint_sum


def flow_distance(a: MeasureFlow, b: MeasureFlow, p=2.0):
    """Deterministic pseudometric between two flows on the same grid.

    Per node, each coordinate marginal (states first, then controls) is
    compared with the exact 1-D W_p and the powers are combined in ell^p;
    the distance is the sup over nodes of the state part plus dt times the
    sum over nodes of the joint part.
    """
    p = _check_order(p)
    if a.grid.steps != b.grid.steps or not np.isclose(a.grid.horizon, b.grid.horizon):
        raise ValueError("flows must share one time grid")
    if a.state_dim != b.state_dim or a.control_dim != b.control_dim:
        raise ValueError("flows must share state and control dims")
    return float(
        _flow_distance_sorted(
            _presort_flow(a), _presort_flow(b), a.state_dim, a.control_dim, p, a.grid.dt
        )
    )


# ----------------------------------------------------------------------
# shifts
# ----------------------------------------------------------------------


def shift_flow(flow: MeasureFlow, path: NoisePath, sign=1, sigma0=None):
    """Push every frame's states by ``sign * sigma0 @ path(t_k)``.

    Controls and weights are untouched.  Shifts accumulate through a
    provenance record, so shifting by a path and then by its negation
    returns the original flow object (exact round trip), and successive
    shifts compose like a group action.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if len(path.grid) != len(flow.grid) or not np.isclose(
        path.grid.horizon, flow.grid.horizon
    ):
        raise ValueError("path and flow live on different grids")
    if sigma0 is None:
        offsets = float(sign) * path.values
    else:
        sigma0 = np.asarray(sigma0, dtype=np.float64)
        offsets = float(sign) * (path.values @ sigma0.T)
    if offsets.shape[1] != flow.state_dim:
        raise ValueError("shift dimension does not match states")

    if flow.shift_origin is not None:
        base, cum = flow.shift_origin
    else:
        base, cum = flow, np.zeros_like(offsets)
    cum = cum + offsets
    if np.all(cum == 0.0):
        return base
    frames = tuple(
        Ensemble(
            f.states + cum[k],
            f.controls,
            f.weights,
            f.time_stamp,
            check=False,
        )
        for k, f in enumerate(base.frames)
    )
    return MeasureFlow(flow.grid, frames, shift_origin=(base, cum))


# ----------------------------------------------------------------------
# distance between scenario ensembles
# ----------------------------------------------------------------------

MAX_SCENARIOS = 64


def ensemble_law_distance(a: ScenarioEnsemble, b: ScenarioEnsemble, p=2.0):
    """W_p between two equally weighted laws of flows, by optimal assignment.

    The ground metric between flows is `flow_distance`.  Both ensembles
    must hold the same number of scenarios (at most 64); the assignment
    is solved exactly.
    """
    from scipy.optimize import linear_sum_assignment

    p = _check_order(p)
    if len(a) != len(b):
        raise ValueError("scenario ensembles must have equal size")
    if len(a) > MAX_SCENARIOS:
        raise ValueError(f"at most {MAX_SCENARIOS} scenarios are supported")
    ga, gb = a.grid, b.grid
    if ga.steps != gb.steps or not np.isclose(ga.horizon, gb.horizon):
        raise ValueError("scenario ensembles must share one time grid")
    flows_a = [s.flow for s in a]
    flows_b = [s.flow for s in b]
    n, q = flows_a[0].state_dim, flows_a[0].control_dim
    sorted_a = [_presort_flow(f) for f in flows_a]
    sorted_b = [_presort_flow(f) for f in flows_b]
    cost = np.empty((len(a), len(b)))
    for i, sa in enumerate(sorted_a):
        for j, sb in enumerate(sorted_b):
            cost[i, j] = _flow_distance_sorted(sa, sb, n, q, p, ga.dt)
    rows, cols = linear_sum_assignment(cost**p)
    return float(np.mean(cost[rows, cols] ** p) ** (1.0 / p))


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------


def _csv_header(n, q):
    return ",".join(
        ["t"] + [f"x_{j + 1}" for j in range(n)] + [f"u_{j + 1}" for j in range(q)] + ["w"]
    )


def _frame_rows(frame):
    for i in range(frame.size):
        cells = [f"{frame.time_stamp:.17g}"]
        cells += [f"{v:.17g}" for v in frame.states[i]]
        cells += [f"{v:.17g}" for v in frame.controls[i]]
        cells.append(f"{frame.weights[i]:.17g}")
        yield ",".join(cells)


def ensemble_to_csv(ens: Ensemble, path):
    with open(path, "w") as fh:
        fh.write(_csv_header(ens.state_dim, ens.control_dim) + "\n")
        for row in _frame_rows(ens):
            fh.write(row + "\n")


def flow_to_csv(flow: MeasureFlow, path):
    with open(path, "w") as fh:
        fh.write(_csv_header(flow.state_dim, flow.control_dim) + "\n")
        for frame in flow.frames:
            for row in _frame_rows(frame):
                fh.write(row + "\n")


def _parse_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n = sum(1 for c in header if c.startswith("x_"))
        q = sum(1 for c in header if c.startswith("u_"))
        if header != _csv_header(n, q).split(","):
            raise ValueError(f"unrecognised ensemble CSV header in {path}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[1] != 2 + n + q:
        raise ValueError(f"bad column count in {path}")
    return data, n, q


def _frames_from_table(data, n, q):
    ts = data[:, 0]
    starts = np.flatnonzero(np.diff(ts) != 0.0) + 1
    blocks = np.split(np.arange(len(ts)), starts)
    frames = []
    for idx in blocks:
        rows = data[idx]
        frames.append(
            Ensemble(
                rows[:, 1 : 1 + n],
                rows[:, 1 + n : 1 + n + q],
                rows[:, -1],
                rows[0, 0],
            )
        )
    return frames


def ensemble_from_csv(path) -> Ensemble:
    data, n, q = _parse_csv(path)
    frames = _frames_from_table(data, n, q)
    if len(frames) != 1:
        raise ValueError("file holds a flow, not a single ensemble")
    return frames[0]


def flow_from_csv(path) -> MeasureFlow:
    data, n, q = _parse_csv(path)
    frames = _frames_from_table(data, n, q)
    if len(frames) < 2:
        raise ValueError("a flow needs at least two frames")
    grid = TimeGrid(len(frames) - 1, frames[-1].time_stamp)
    return MeasureFlow(grid, tuple(frames))


_MAGIC = b"MFL1"


def write_flow(flow: MeasureFlow, path):
    """Framed little-endian binary dump of a flow."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IdII",
                len(flow.frames),
                flow.grid.horizon,
                flow.state_dim,
                flow.control_dim,
            )
        )
        for frame in flow.frames:
            payload = struct.pack("<dQ", frame.time_stamp, frame.size)
            payload += frame.states.astype("<f8").tobytes()
            payload += frame.controls.astype("<f8").tobytes()
            payload += frame.weights.astype("<f8").tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_flow(path) -> MeasureFlow:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a flow file")
        count, horizon, n, q = struct.unpack("<IdII", fh.read(20))
        frames = []
        for _ in range(count):
            (length,) = struct.unpack("<Q", fh.read(8))
            payload = fh.read(length)
            if len(payload) != length:
                raise ValueError("truncated flow file")
            t, m = struct.unpack_from("<dQ", payload, 0)
            offset = 16
            expect = offset + 8 * m * (n + q + 1)
            if length != expect:
                raise ValueError("frame payload length mismatch")
            states = np.frombuffer(payload, "<f8", m * n, offset).reshape(m, n)
            offset += 8 * m * n
            controls = np.frombuffer(payload, "<f8", m * q, offset).reshape(m, q)
            offset += 8 * m * q
            weights = np.frombuffer(payload, "<f8", m, offset)
            frames.append(Ensemble(states, controls, weights, t))
    grid = TimeGrid(count - 1, horizon)
    return MeasureFlow(grid, tuple(frames))
