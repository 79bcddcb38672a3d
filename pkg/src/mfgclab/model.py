"""Model primitives: time grids, noise paths, coefficient bundles.

A model couples per-particle dynamics with interaction terms that read the
population's joint state-control law.  Drift and objective both split into a
law-driven part and a control-driven part:

    drift(t, x, law, u)     = drift_law(t, law) + drift_control(t, x, u)
    objective(t, x, law, u) = objective_law(t, x, law)
                              + objective_control(t, x, state_marginal, u)

where ``law`` is a weighted atom cloud over state-control space and the
control part of the objective reads only the state marginal.  Objectives are
rewards: players and planners maximise.  The idiosyncratic noise coefficient
may depend on (t, x); the common noise coefficient is a constant invertible
matrix.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .streams import TAG_VALIDATE, stream

__all__ = [
    "TimeGrid",
    "NoisePath",
    "DeclaredBounds",
    "ModelSpec",
    "ConditionCheck",
    "ValidationReport",
    "eval_drift",
    "eval_running_cost",
    "eval_terminal",
    "validate_model",
    "catalog",
    "make_model",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_K = horizon."""

    steps: int
    horizon: float

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one step")
        if not np.isfinite(self.horizon) or self.horizon <= 0.0:
            raise ValueError("horizon must be positive and finite")

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def nodes(self):
        # horizon * k / steps, so t_0 == 0 and t_K == horizon exactly
        return self.horizon * np.arange(self.steps + 1) / self.steps

    def __len__(self):
        return self.steps + 1


@dataclass(frozen=True)
class NoisePath:
    """A sampled common-noise path on a TimeGrid, starting at zero."""

    grid: TimeGrid
    values: np.ndarray  # (K+1, d)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != len(self.grid):
            raise ValueError("path length does not match grid")
        if not np.all(values[0] == 0.0):
            raise ValueError("path must start at zero")
        if not np.all(np.isfinite(values)):
            raise ValueError("path contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def increments(self):
        return np.diff(self.values, axis=0)

    @classmethod
    def sample(cls, grid: TimeGrid, dim: int, rng: np.random.Generator):
        """Draw a Brownian path: independent N(0, dt) increments per axis."""
        inc = rng.normal(scale=np.sqrt(grid.dt), size=(grid.steps, dim))
        values = np.vstack([np.zeros((1, dim)), np.cumsum(inc, axis=0)])
        return cls(grid, values)

    @classmethod
    def zero(cls, grid: TimeGrid, dim: int):
        return cls(grid, np.zeros((len(grid), dim)))

    def restricted(self, upto: int):
        """Path frozen after node ``upto`` (values held constant)."""
        values = self.values.copy()
        values[upto + 1 :] = values[upto]
        return NoisePath(self.grid, values)


@dataclass(frozen=True)
class DeclaredBounds:
    """Sup-norm and regularity constants the model claims on its standard box."""

    drift_sup: float
    noise_sup: float
    objective_sup: float
    terminal_sup: float
    drift_lip: float
    noise_lip: float
    ellipticity_floor: float


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient bundle for one game/control problem."""

    name: str
    state_dim: int
    control_dim: int
    horizon: float
    moment_order: float
    control_grid: np.ndarray
    initial_sampler: Callable
    drift_law: Callable
    drift_control: Callable
    noise_coeff: Callable
    common_noise_coeff: np.ndarray
    objective_law: Callable
    objective_control: Callable
    terminal_objective: Callable
    bounds: DeclaredBounds
    params: dict = field(default_factory=dict)
    # Optional vectorized fast paths for batch engines, for models whose
    # measure dependence factors through the mean state and mean control:
    #   drift_mean(t, means (B,n), mean_controls (B,q)) -> (B,n)
    #   running_cost_mean(t, X (B,n), U (B,q), means, mean_controls) -> (B,)
    #   terminal_mean(X (B,n), means (B,n)) -> (B,)
    # Engines fall back to the per-measure callables when absent; the two
    # routes must agree (checked in tests).
    batch_hooks: dict | None = None

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state and control dimensions must be >= 1")
        if self.moment_order < 2.0:
            raise ValueError("moment order must be >= 2")
        grid = np.ascontiguousarray(self.control_grid, dtype=np.float64)
        if grid.ndim == 1:
            grid = grid[:, None]
        if grid.ndim != 2 or grid.shape[1] != self.control_dim:
            raise ValueError("control grid must have shape (points, control_dim)")
        if grid.shape[0] < 1 or not np.all(np.isfinite(grid)):
            raise ValueError("control grid must be nonempty and finite")
        grid.setflags(write=False)
        object.__setattr__(self, "control_grid", grid)
        s0 = np.ascontiguousarray(self.common_noise_coeff, dtype=np.float64)
        if s0.ndim == 0:
            s0 = s0.reshape(1, 1)
        if s0.shape != (self.state_dim, self.state_dim):
            raise ValueError("common noise coefficient must be (n, n)")
        s0.setflags(write=False)
        object.__setattr__(self, "common_noise_coeff", s0)

    def time_grid(self, steps: int) -> TimeGrid:
        return TimeGrid(steps, self.horizon)

    def sigma_at(self, t, states):
        """Idiosyncratic noise coefficient broadcast to (m, n, n)."""
        states = np.atleast_2d(states)
        out = np.asarray(self.noise_coeff(t, states), dtype=np.float64)
        n = self.state_dim
        if out.shape == (n, n):
            out = np.broadcast_to(out, (states.shape[0], n, n))
        if out.shape != (states.shape[0], n, n):
            raise ValueError("noise coefficient returned a bad shape")
        return out


# ----------------------------------------------------------------------
# pointwise evaluation
# ----------------------------------------------------------------------


def _as_batch(x, dim, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} columns")
    return arr


def eval_drift(spec: ModelSpec, t, x, joint_law, u):
    """Full drift b(t, x, law, u) for a batch of particles, shape (m, n)."""
    X = _as_batch(x, spec.state_dim, "states")
    U = _as_batch(u, spec.control_dim, "controls")
    law_part = np.asarray(spec.drift_law(t, joint_law), dtype=np.float64)
    ctrl_part = np.asarray(spec.drift_control(t, X, U), dtype=np.float64)
    return law_part[None, :] + ctrl_part


def eval_running_cost(spec: ModelSpec, t, x, joint_law, u):
    """Running objective at (t, x, u) against a frozen joint law, shape (m,).

    The control-driven part reads only the state marginal of the supplied
    law, matching the objective split.
    """
    X = _as_batch(x, spec.state_dim, "states")
    U = _as_batch(u, spec.control_dim, "controls")
    law_part = np.asarray(spec.objective_law(t, X, joint_law), dtype=np.float64)
    marginal = joint_law.state_marginal()
    ctrl_part = np.asarray(
        spec.objective_control(t, X, marginal, U), dtype=np.float64
    )
    return law_part + ctrl_part


def eval_terminal(spec: ModelSpec, x, state_law):
    X = _as_batch(x, spec.state_dim, "states")
    return np.asarray(spec.terminal_objective(X, state_law), dtype=np.float64)


# ----------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionCheck:
    name: str
    passed: bool
    observed: float
    declared: float
    witness: str = ""


@dataclass(frozen=True)
class ValidationReport:
    model: str
    checks: tuple

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    def summary(self):
        lines = [f"validation of '{self.model}':"]
        for c in self.checks:
            status = "ok" if c.passed else "FAIL"
            lines.append(
                f"  [{status}] {c.name}: observed {c.observed:.6g}"
                f" vs declared {c.declared:.6g}"
                + (f" at {c.witness}" if c.witness else "")
            )
        return "\n".join(lines)


def validate_model(spec: ModelSpec, sample_size: int = 256, seed: int = 0):
    """Monte Carlo check of the declared bounds and structure.

    Returns a ValidationReport; failures are carried in the report rather
    than raised.  A singular common-noise matrix is a hard failure that
    short-circuits the remaining checks.
    """
    from .measures import Ensemble

    rng = stream(seed, TAG_VALIDATE)
    n, q = spec.state_dim, spec.control_dim

    sv = np.linalg.svd(spec.common_noise_coeff, compute_uv=False)
    if sv[-1] <= 1e-12 * max(1.0, sv[0]):
        check = ConditionCheck(
            "common noise invertible", False, float(sv[-1]), 0.0, "noise matrix singular"
        )
        return ValidationReport(spec.name, (check,))
    checks = [
        ConditionCheck("common noise invertible", True, float(sv[-1]), 0.0)
    ]

    xi = spec.initial_sampler(rng, sample_size)
    xi = _as_batch(xi, n, "initial sample")
    center = xi.mean(axis=0)
    spread = xi.std(axis=0) + 1.0
    X = center + 4.0 * spread * rng.uniform(-1.0, 1.0, size=(sample_size, n))
    U = spec.control_grid[rng.integers(0, len(spec.control_grid), size=sample_size)]
    ts = rng.uniform(0.0, spec.horizon, size=8)

    def random_law(m=64):
        pts = center + 4.0 * spread * rng.uniform(-1.0, 1.0, size=(m, n))
        ctr = spec.control_grid[rng.integers(0, len(spec.control_grid), size=m)]
        return Ensemble.uniform(pts, ctr, 0.0)

    laws = [random_law() for _ in range(4)]
    b = spec.bounds

    worst = (0.0, "")
    for t in ts:
        for law in laws:
            mag = np.abs(eval_drift(spec, t, X, law, U)).max()
            if mag > worst[0]:
                worst = (float(mag), f"t={t:.3g}")
    checks.append(
        ConditionCheck("drift bound", worst[0] <= b.drift_sup, worst[0], b.drift_sup, worst[1])
    )

    sig_max, ell_min = 0.0, np.inf
    for t in ts:
        sig = spec.sigma_at(t, X)
        sig_max = max(sig_max, float(np.abs(sig).max()))
        gram = np.einsum("mij,mkj->mik", sig, sig)
        ell_min = min(ell_min, float(np.linalg.eigvalsh(gram)[:, 0].min()))
    checks.append(
        ConditionCheck("noise bound", sig_max <= b.noise_sup, sig_max, b.noise_sup)
    )
    checks.append(
        ConditionCheck(
            "ellipticity floor", ell_min >= b.ellipticity_floor, ell_min, b.ellipticity_floor
        )
    )

    obj_max = 0.0
    for t in ts:
        for law in laws:
            obj_max = max(obj_max, float(np.abs(eval_running_cost(spec, t, X, law, U)).max()))
    checks.append(
        ConditionCheck("objective bound", obj_max <= b.objective_sup, obj_max, b.objective_sup)
    )
    term_max = max(
        float(np.abs(eval_terminal(spec, X, law.state_marginal())).max()) for law in laws
    )
    checks.append(
        ConditionCheck("terminal bound", term_max <= b.terminal_sup, term_max, b.terminal_sup)
    )

    # Lipschitz ratios from sampled pairs; a zero-distance pair is skipped.
    Y = center + 4.0 * spread * rng.uniform(-1.0, 1.0, size=(sample_size, n))
    gaps = np.linalg.norm(X - Y, axis=1)
    keep = gaps > 1e-9
    lip_drift, lip_noise = 0.0, 0.0
    for t in ts:
        law = laws[0]
        db = np.linalg.norm(
            eval_drift(spec, t, X[keep], law, U[keep])
            - eval_drift(spec, t, Y[keep], law, U[keep]),
            axis=1,
        )
        lip_drift = max(lip_drift, float((db / gaps[keep]).max()))
        ds = np.abs(spec.sigma_at(t, X[keep]) - spec.sigma_at(t, Y[keep])).max(axis=(1, 2))
        lip_noise = max(lip_noise, float((ds / gaps[keep]).max()))
    checks.append(
        ConditionCheck("drift Lipschitz", lip_drift <= b.drift_lip, lip_drift, b.drift_lip)
    )
    checks.append(
        ConditionCheck("noise Lipschitz", lip_noise <= b.noise_lip, lip_noise, b.noise_lip)
    )

    # Initial law must have a finite moment one order above the metric order.
    mom = float(np.mean(np.linalg.norm(xi, axis=1) ** (spec.moment_order + 1.0)))
    checks.append(ConditionCheck("initial moment finite", np.isfinite(mom), mom, np.inf))

    # Separability is structural: law-driven and control-driven parts are
    # distinct fields, so the split holds by construction.
    checks.append(ConditionCheck("separable drift and objective", True, 0.0, 0.0))

    return ValidationReport(spec.name, tuple(checks))


# ----------------------------------------------------------------------
# model catalog
# ----------------------------------------------------------------------


def _gaussian_sampler(mean, std, dim):
    def sample(rng, m):
        return rng.normal(mean, std, size=(m, dim))

    return sample


def linear_quadratic_1d(
    kappa_x=0.4,
    kappa_u=0.3,
    c_x=1.0,
    c_m=0.5,
    gamma_term=0.5,
    c_g=0.0,
    sigma=0.7,
    sigma0=0.5,
    horizon=1.0,
    mean0=1.0,
    std0=0.5,
    control_max=3.0,
    control_points=21,
    moment_order=2.0,
):
    """Linear state dynamics, quadratic objective, scalar state and control.

    Drift: kappa_x * <x, law> + kappa_u * <u, law> + u.
    Running objective: -u^2 - c_x * (x - c_m * <x, marginal>)^2.
    Terminal objective: -gamma_term * (x - c_g * <x, marginal>)^2.
    """
    params = dict(
        kappa_x=kappa_x, kappa_u=kappa_u, c_x=c_x, c_m=c_m,
        gamma_term=gamma_term, c_g=c_g, sigma=sigma, sigma0=sigma0,
        horizon=horizon, mean0=mean0, std0=std0,
        control_max=control_max, control_points=control_points,
        moment_order=moment_order,
    )
    sig_mat = np.array([[float(sigma)]])

    def drift_law(t, law):
        out = kappa_x * law.mean_state()
        if kappa_u != 0.0:
            out = out + kappa_u * law.mean_control()
        return out

    def drift_control(t, X, U):
        return U

    def objective_law(t, X, law):
        return np.zeros(X.shape[0])

    def objective_control(t, X, marginal, U):
        anchor = c_m * marginal.mean_state()[0] if c_m != 0.0 else 0.0
        return -(U[:, 0] ** 2) - c_x * (X[:, 0] - anchor) ** 2

    def terminal_objective(X, marginal):
        anchor = c_g * marginal.mean_state()[0] if c_g != 0.0 else 0.0
        return -gamma_term * (X[:, 0] - anchor) ** 2

    batch_hooks = {
        "drift_mean": lambda t, means, mean_controls: (
            kappa_x * means + kappa_u * mean_controls
        ),
        "running_cost_mean": lambda t, X, U, means, mean_controls: (
            -(U[:, 0] ** 2) - c_x * (X[:, 0] - c_m * means[:, 0]) ** 2
        ),
        "terminal_mean": lambda X, means: (
            -gamma_term * (X[:, 0] - c_g * means[:, 0]) ** 2
        ),
    }

    box = abs(mean0) + 4.0 * (std0 + 1.0)
    umax = float(control_max)
    bounds = DeclaredBounds(
        drift_sup=abs(kappa_x) * box + (1.0 + abs(kappa_u)) * umax + 1.0,
        noise_sup=abs(sigma) + 1e-9,
        objective_sup=umax**2 + c_x * ((1.0 + abs(c_m)) * box) ** 2 + 1.0,
        terminal_sup=gamma_term * ((1.0 + abs(c_g)) * box) ** 2 + 1.0,
        drift_lip=1.0 + abs(kappa_x) + abs(kappa_u),
        noise_lip=1e-9,
        ellipticity_floor=sigma**2 * (1.0 - 1e-9),
    )
    return ModelSpec(
        name="lq1d",
        state_dim=1,
        control_dim=1,
        horizon=horizon,
        moment_order=moment_order,
        control_grid=np.linspace(-control_max, control_max, control_points)[:, None],
        initial_sampler=_gaussian_sampler(mean0, std0, 1),
        drift_law=drift_law,
        drift_control=drift_control,
        noise_coeff=lambda t, X: sig_mat,
        common_noise_coeff=np.array([[float(sigma0)]]),
        objective_law=objective_law,
        objective_control=objective_control,
        terminal_objective=terminal_objective,
        bounds=bounds,
        params=params,
        batch_hooks=batch_hooks,
    )


def zero_drift_1d(
    sigma=1.0, sigma0=1.0, horizon=1.0, mean0=0.0, std0=1.0, moment_order=2.0
):
    """Driftless diffusion with idiosyncratic and common noise; null objective."""
    params = dict(
        sigma=sigma, sigma0=sigma0, horizon=horizon,
        mean0=mean0, std0=std0, moment_order=moment_order,
    )
    sig_mat = np.array([[float(sigma)]])
    zero = lambda t, X, *rest: np.zeros(np.atleast_2d(X).shape[0])
    bounds = DeclaredBounds(
        drift_sup=1e-12,
        noise_sup=abs(sigma) + 1e-9,
        objective_sup=1e-12,
        terminal_sup=1e-12,
        drift_lip=1e-12,
        noise_lip=1e-9,
        ellipticity_floor=sigma**2 * (1.0 - 1e-9) if sigma != 0.0 else 0.0,
    )
    return ModelSpec(
        name="zero-drift",
        state_dim=1,
        control_dim=1,
        horizon=horizon,
        moment_order=moment_order,
        control_grid=np.array([[0.0]]),
        initial_sampler=_gaussian_sampler(mean0, std0, 1),
        drift_law=lambda t, law: np.zeros(1),
        drift_control=lambda t, X, U: np.zeros_like(np.atleast_2d(X)),
        noise_coeff=lambda t, X: sig_mat,
        common_noise_coeff=np.array([[float(sigma0)]]),
        objective_law=zero,
        objective_control=lambda t, X, marginal, U: zero(t, X),
        terminal_objective=lambda X, marginal: zero(0.0, X),
        bounds=bounds,
        params=params,
        batch_hooks={
            "drift_mean": lambda t, means, mean_controls: np.zeros_like(means),
            "running_cost_mean": lambda t, X, U, means, mean_controls: np.zeros(
                X.shape[0]
            ),
            "terminal_mean": lambda X, means: np.zeros(X.shape[0]),
        },
    )


def congestion_1d(
    crowd_weight=0.8,
    crowd_width=0.5,
    effort_weight=1.0,
    sigma=0.6,
    sigma0=0.4,
    horizon=1.0,
    mean0=0.0,
    std0=1.0,
    control_max=2.0,
    control_points=17,
    moment_order=2.0,
):
    """Crowd-averse model: motion is cheap, sitting in dense regions is not.

    The running objective penalises a Gaussian-kernel estimate of local
    density around the particle, so the interaction is genuinely nonlinear
    in the measure (not a moment functional).
    """
    params = dict(
        crowd_weight=crowd_weight, crowd_width=crowd_width,
        effort_weight=effort_weight, sigma=sigma, sigma0=sigma0,
        horizon=horizon, mean0=mean0, std0=std0,
        control_max=control_max, control_points=control_points,
        moment_order=moment_order,
    )
    sig_mat = np.array([[float(sigma)]])
    inv2w2 = 1.0 / (2.0 * crowd_width**2)

    def objective_control(t, X, marginal, U):
        # kernel density at each particle, against the supplied marginal
        gaps = X[:, 0][:, None] - marginal.states[:, 0][None, :]
        dens = np.exp(-(gaps**2) * inv2w2) @ marginal.weights
        return -effort_weight * U[:, 0] ** 2 - crowd_weight * dens

    box = abs(mean0) + 4.0 * (std0 + 1.0)
    bounds = DeclaredBounds(
        drift_sup=control_max + 1e-9,
        noise_sup=abs(sigma) + 1e-9,
        objective_sup=effort_weight * control_max**2 + crowd_weight + 1.0,
        terminal_sup=box**2 + 1.0,
        drift_lip=1e-12,
        noise_lip=1e-9,
        ellipticity_floor=sigma**2 * (1.0 - 1e-9),
    )
    return ModelSpec(
        name="congestion1d",
        state_dim=1,
        control_dim=1,
        horizon=horizon,
        moment_order=moment_order,
        control_grid=np.linspace(-control_max, control_max, control_points)[:, None],
        initial_sampler=_gaussian_sampler(mean0, std0, 1),
        drift_law=lambda t, law: np.zeros(1),
        drift_control=lambda t, X, U: U,
        noise_coeff=lambda t, X: sig_mat,
        common_noise_coeff=np.array([[float(sigma0)]]),
        objective_law=lambda t, X, law: np.zeros(np.atleast_2d(X).shape[0]),
        objective_control=objective_control,
        terminal_objective=lambda X, marginal: -0.5 * X[:, 0] ** 2,
        bounds=bounds,
        params=params,
    )


_CATALOG = {
    "lq1d": linear_quadratic_1d,
    "zero-drift": zero_drift_1d,
    "congestion1d": congestion_1d,
}


def catalog():
    """Mapping of built-in model names to their builders."""
    return dict(_CATALOG)


def make_model(name: str, **params) -> ModelSpec:
    """Instantiate a catalog model, overriding any subset of its defaults."""
    try:
        builder = _CATALOG[name]
    except KeyError:
        known = ", ".join(sorted(_CATALOG))
        raise ValueError(f"unknown model '{name}' (known: {known})") from None
    return builder(**params)
