"""Closed-form benchmark for the linear-quadratic family.

Solves the scenario-wise backward ODE systems of the scalar LQ crowd
model directly from its raw coefficients: a Riccati equation for the
quadratic value coefficient, linear backward equations for the slope
induced by the conditional mean, and a forward equation for that mean
driven by the realized common-noise path (piecewise-constant derivative
matching the Euler convention of the simulator).  Nothing here touches
the particle code paths, so agreement between the two is evidence, not
tautology.

Game quantities: value coefficient P with dP/dt = P^2 - c_x, slope
s = a m + psi, equilibrium feedback u = -(P x + s / 2), and the
conditional mean m driven by the aggregate of that feedback.  Planner
quantities: the same Riccati for the centered fluctuation, plus a
separate quadratic system (Q, zeta, rho) for the controlled mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LQCoefficients",
    "coefficients_from_params",
    "LQGameScenario",
    "LQControlScenario",
    "game_solution",
    "game_value",
    "control_solution",
    "control_value",
]


@dataclass(frozen=True)
class LQCoefficients:
    """Raw scalar LQ model coefficients.

    Drift kappa_x * mean + kappa_u * mean_control + u, idiosyncratic
    volatility sigma, common volatility sigma0, running reward
    -u^2 - c_x (x - c_m * mean)^2, terminal reward
    -gamma_term (x - c_g * mean)^2, initial law N(mean0, std0^2).
    """

    kappa_x: float
    kappa_u: float
    c_x: float
    c_m: float
    gamma_term: float
    c_g: float
    sigma: float
    sigma0: float
    horizon: float
    mean0: float
    std0: float


def coefficients_from_params(params):
    """Build coefficients from a plain mapping with the same key names."""
    keys = (
        "kappa_x",
        "kappa_u",
        "c_x",
        "c_m",
        "gamma_term",
        "c_g",
        "sigma",
        "sigma0",
        "horizon",
        "mean0",
        "std0",
    )
    return LQCoefficients(**{k: float(params[k]) for k in keys})


def _segment_bdot(noise_values, dt):
    """Piecewise-constant derivative of the common path per coarse step."""
    inc = np.diff(np.asarray(noise_values, dtype=np.float64).ravel())
    return inc / dt


def _rk4_segmented(rhs, y_end, K, dt, sub, bdot, forward):
    """RK4 on a lattice of `sub` substeps per coarse segment.

    The scalar `bdot` coefficient is frozen per coarse segment, so every
    stage of a step inside that segment sees the same value; this matches
    an Euler scheme that applies each common increment over its own step.
    Returns the trajectory on the fine lattice, index 0 at time zero.
    """
    h = dt / sub
    total = K * sub
    y = np.empty((total + 1, np.size(y_end)))
    if forward:
        y[0] = y_end
        for k in range(K):
            b = bdot[k]
            for j in range(sub):
                i = k * sub + j
                t = (k + j / sub) * dt
                z = y[i]
                k1 = rhs(t, z, b)
                k2 = rhs(t + h / 2, z + h * k1 / 2, b)
                k3 = rhs(t + h / 2, z + h * k2 / 2, b)
                k4 = rhs(t + h, z + h * k3, b)
                y[i + 1] = z + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    else:
        y[total] = y_end
        for k in range(K - 1, -1, -1):
            b = bdot[k]
            for j in range(sub - 1, -1, -1):
                i = k * sub + j + 1
                t = (k + (j + 1) / sub) * dt
                z = y[i]
                k1 = rhs(t, z, b)
                k2 = rhs(t - h / 2, z - h * k1 / 2, b)
                k3 = rhs(t - h / 2, z - h * k2 / 2, b)
                k4 = rhs(t - h, z - h * k3, b)
                y[i - 1] = z - (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def _simpson_per_segment(values, K, sub, dt):
    """Composite Simpson rule applied segment by segment (sub must be even)."""
    h = dt / sub
    total = 0.0
    for k in range(K):
        seg = values[k * sub : (k + 1) * sub + 1]
        total += (h / 3.0) * (
            seg[0] + seg[-1] + 4.0 * seg[1:-1:2].sum() + 2.0 * seg[2:-1:2].sum()
        )
    return total


@dataclass(frozen=True)
class LQGameScenario:
    """Equilibrium quantities along one common-noise path (coarse nodes)."""

    nodes: np.ndarray
    quad: np.ndarray  # P
    slope: np.ndarray  # s = a m + psi
    mean: np.ndarray  # conditional mean m
    mean_control: np.ndarray  # aggregate control -(P m + s/2)
    value: float  # averaged over the initial law, this scenario

    def feedback(self, k, x):
        x = np.asarray(x, dtype=np.float64)
        return -(self.quad[k] * x + self.slope[k] / 2.0)


def game_solution(coeffs: LQCoefficients, steps, noise_values, refine=10):
    """Solve the equilibrium system for one realized common path.

    `noise_values` are the path's values on the coarse grid (steps + 1
    entries, starting at zero).  `refine` fine substeps per coarse step
    (rounded up to even) drive the RK4 and Simpson passes.
    """
    c = coeffs
    K = int(steps)
    dt = c.horizon / K
    sub = int(refine) + (int(refine) % 2)
    half = 2 * sub  # backward lattice twice as fine, so midpoints are stored
    bdot = _segment_bdot(noise_values, dt) * c.sigma0
    if bdot.size != K:
        raise ValueError("noise path does not match the step count")
    ku1 = 1.0 + c.kappa_u

    def backward_rhs(t, y, b):
        P, a, psi = y
        dP = P * P - c.c_x
        da = (
            ku1 * a * a / 2.0
            + a * (2.0 * ku1 * P - c.kappa_x)
            - 2.0 * c.kappa_x * P
            + 2.0 * c.kappa_u * P * P
            + 2.0 * c.c_x * c.c_m
        )
        dpsi = ku1 * (P + a / 2.0) * psi - (2.0 * P + a) * b
        return np.array([dP, da, dpsi])

    y_end = np.array([c.gamma_term, -2.0 * c.gamma_term * c.c_g, 0.0])
    back = _rk4_segmented(backward_rhs, y_end, K, dt, half, bdot, forward=False)
    P_h2, a_h2, psi_h2 = back[:, 0], back[:, 1], back[:, 2]

    # mean forward on the coarser sub-lattice, stages read stored midpoints
    alpha = c.kappa_x - ku1 * (P_h2 + a_h2 / 2.0)
    m = np.empty(K * sub + 1)
    m[0] = c.mean0
    h = dt / sub
    for k in range(K):
        for j in range(sub):
            i = k * sub + j
            g0, g1, g2 = alpha[2 * i], alpha[2 * i + 1], alpha[2 * i + 2]
            c0 = -ku1 * psi_h2[2 * i] / 2.0 + bdot[k]
            c1 = -ku1 * psi_h2[2 * i + 1] / 2.0 + bdot[k]
            c2 = -ku1 * psi_h2[2 * i + 2] / 2.0 + bdot[k]
            z = m[i]
            k1 = g0 * z + c0
            k2 = g1 * (z + h * k1 / 2) + c1
            k3 = g1 * (z + h * k2 / 2) + c1
            k4 = g2 * (z + h * k3) + c2
            m[i + 1] = z + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)

    P_h = P_h2[::2]
    a_h = a_h2[::2]
    psi_h = psi_h2[::2]
    s_h = a_h * m + psi_h

    # constant value term r solves dr/dt = g(t) backward from gamma c_g^2 m_T^2
    bdot_h = np.repeat(bdot, sub)
    bdot_h = np.append(bdot_h, bdot[-1])  # right endpoint uses last segment
    h_drift = (c.kappa_x - c.kappa_u * P_h) * m - c.kappa_u * s_h / 2.0 + bdot_h
    integrand = (
        s_h**2 / 4.0
        - s_h * h_drift
        - c.sigma**2 * P_h
        - c.c_x * c.c_m**2 * m**2
    )
    r_T = c.gamma_term * c.c_g**2 * m[-1] ** 2
    r0 = r_T - _simpson_per_segment(integrand, K, sub, dt)

    second_moment = c.mean0**2 + c.std0**2
    value = -(P_h[0] * second_moment + s_h[0] * c.mean0 + r0)

    stride = sub
    nodes = np.arange(K + 1) * dt
    P_c, s_c, m_c = P_h[::stride], s_h[::stride], m[::stride]
    return LQGameScenario(
        nodes=nodes,
        quad=P_c,
        slope=s_c,
        mean=m_c,
        mean_control=-(P_c * m_c + s_c / 2.0),
        value=float(value),
    )


def game_value(coeffs, steps, noise_paths, refine=10):
    """Scenario-averaged equilibrium value and per-scenario solutions."""
    scenarios = [game_solution(coeffs, steps, v, refine) for v in noise_paths]
    values = np.array([s.value for s in scenarios])
    return float(values.mean()), values, scenarios


@dataclass(frozen=True)
class LQControlScenario:
    """Planner optimum along one common-noise path (coarse nodes)."""

    nodes: np.ndarray
    quad_fluct: np.ndarray  # P_z, centered-fluctuation Riccati
    quad_mean: np.ndarray  # Q
    slope_mean: np.ndarray  # zeta
    mean: np.ndarray  # optimal controlled mean
    mean_control: np.ndarray  # -(1 + kappa_u)(Q m + zeta/2)
    value: float

    def feedback(self, k, x, mean):
        x = np.asarray(x, dtype=np.float64)
        return self.mean_control[k] - self.quad_fluct[k] * (x - mean)


def control_solution(coeffs: LQCoefficients, steps, noise_values, refine=10):
    """Solve the planner system for one realized common path.

    The optimum splits into a centered-fluctuation regulator (Riccati
    identical to the game's quad coefficient) and a scenario-dependent
    control of the conditional mean.
    """
    c = coeffs
    K = int(steps)
    dt = c.horizon / K
    sub = int(refine) + (int(refine) % 2)
    half = 2 * sub
    bdot = _segment_bdot(noise_values, dt) * c.sigma0
    if bdot.size != K:
        raise ValueError("noise path does not match the step count")
    ku1 = 1.0 + c.kappa_u
    cm1 = 1.0 - c.c_m
    cg1 = 1.0 - c.c_g

    def backward_rhs(t, y, b):
        Pz, Q, zeta, rho = y
        dPz = Pz * Pz - c.c_x
        dQ = ku1 * ku1 * Q * Q - 2.0 * c.kappa_x * Q - c.c_x * cm1 * cm1
        dzeta = ku1 * ku1 * Q * zeta - c.kappa_x * zeta - 2.0 * Q * b
        drho = ku1 * ku1 * zeta * zeta / 4.0 - b * zeta
        return np.array([dPz, dQ, dzeta, drho])

    y_end = np.array([c.gamma_term, c.gamma_term * cg1 * cg1, 0.0, 0.0])
    back = _rk4_segmented(backward_rhs, y_end, K, dt, half, bdot, forward=False)
    Pz_h2, Q_h2, zeta_h2 = back[:, 0], back[:, 1], back[:, 2]
    rho0 = back[0, 3]

    m = np.empty(K * sub + 1)
    m[0] = c.mean0
    h = dt / sub
    for k in range(K):
        for j in range(sub):
            i = k * sub + j
            g = (
                c.kappa_x - ku1 * ku1 * Q_h2[2 * i],
                c.kappa_x - ku1 * ku1 * Q_h2[2 * i + 1],
                c.kappa_x - ku1 * ku1 * Q_h2[2 * i + 2],
            )
            cc = (
                -ku1 * ku1 * zeta_h2[2 * i] / 2.0 + bdot[k],
                -ku1 * ku1 * zeta_h2[2 * i + 1] / 2.0 + bdot[k],
                -ku1 * ku1 * zeta_h2[2 * i + 2] / 2.0 + bdot[k],
            )
            z = m[i]
            k1 = g[0] * z + cc[0]
            k2 = g[1] * (z + h * k1 / 2) + cc[1]
            k3 = g[1] * (z + h * k2 / 2) + cc[1]
            k4 = g[2] * (z + h * k3) + cc[2]
            m[i + 1] = z + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)

    fluct_cost = _simpson_per_segment(c.sigma**2 * Pz_h2, K, half, dt)
    total = (
        Pz_h2[0] * c.std0**2
        + fluct_cost
        + Q_h2[0] * c.mean0**2
        + zeta_h2[0] * c.mean0
        + rho0
    )
    stride = sub
    nodes = np.arange(K + 1) * dt
    Pz_c, Q_c, zeta_c = Pz_h2[::half], Q_h2[::half], zeta_h2[::half]
    m_c = m[::stride]
    return LQControlScenario(
        nodes=nodes,
        quad_fluct=Pz_c,
        quad_mean=Q_c,
        slope_mean=zeta_c,
        mean=m_c,
        mean_control=-ku1 * (Q_c * m_c + zeta_c / 2.0),
        value=float(-total),
    )


def control_value(coeffs, steps, noise_paths, refine=10):
    """Scenario-averaged planner value and per-scenario solutions."""
    scenarios = [control_solution(coeffs, steps, v, refine) for v in noise_paths]
    values = np.array([s.value for s in scenarios])
    return float(values.mean()), values, scenarios
