"""Quadrotor model: physical parameters, the linearized planar chains, and a
nonlinear closed-loop check of the linearization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ParameterError, ValidationFailure


@dataclass(frozen=True)
class QuadrotorParams:
    """Physical constants and pre-feedback gains.

    The defaults are representative small-quadrotor magnitudes, not the
    numbers of any specific airframe.
    """

    m: float = 0.5
    g: float = 9.81
    ell: float = 0.2
    I: float = 5e-3
    Iz: float = 9e-3
    J: float = 3.4e-5
    kappa_b: float = 3e-5
    kappa_tau: float = 7.5e-7
    az1: float = 4.0
    az2: float = 4.0
    apsi1: float = 4.0
    apsi2: float = 4.0

    def __post_init__(self):
        for name in ("m", "g", "ell", "I", "Iz", "J", "kappa_b", "kappa_tau"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"{name} must be finite and > 0, got {v}")
        # s^2 + a1 s + a2 is Hurwitz iff a1 > 0 and a2 > 0
        for a1, a2, label in ((self.az1, self.az2, "z"), (self.apsi1, self.apsi2, "psi")):
            if not (a1 > 0 and a2 > 0):
                raise ParameterError(f"{label} feedback polynomial is not Hurwitz: a1={a1}, a2={a2}")


@dataclass(frozen=True)
class LinearPlanarModel:
    A_x: np.ndarray
    B_x: np.ndarray
    C_x: np.ndarray
    A_y: np.ndarray
    B_y: np.ndarray
    C_y: np.ndarray
    A_z: np.ndarray
    A_psi: np.ndarray
    params: QuadrotorParams = field(repr=False)

    def axis(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(A, B) of planar axis 0 (x) or 1 (y)."""
        if i == 0:
            return self.A_x, self.B_x
        if i == 1:
            return self.A_y, self.B_y
        raise ValueError(f"axis must be 0 or 1, got {i}")


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def build_linear_model(params: QuadrotorParams) -> LinearPlanarModel:
    g, b = params.g, params.ell / params.I

    def chain(sign):
        A = np.zeros((4, 4))
        A[0, 1] = 1.0
        A[1, 2] = sign * g
        A[2, 3] = 1.0
        return A

    B = np.array([[0.0], [0.0], [0.0], [b]])
    C = np.array([[1.0, 0.0, 0.0, 0.0]])
    A_z = np.array([[0.0, 1.0], [-params.az2, -params.az1]])
    A_psi = np.array([[0.0, 1.0], [-params.apsi2, -params.apsi1]])
    return LinearPlanarModel(
        A_x=_readonly(chain(+1.0)), B_x=_readonly(B), C_x=_readonly(C),
        A_y=_readonly(chain(-1.0)), B_y=_readonly(B), C_y=_readonly(C),
        A_z=_readonly(A_z), A_psi=_readonly(A_psi), params=params,
    )


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    cols = [B]
    for _ in range(n - 1):
        cols.append(A @ cols[-1])
    return np.hstack(cols)


def _check_nilpotent(A: np.ndarray) -> None:
    A2 = A @ A
    A4 = A2 @ A2
    scale = max(1.0, float(np.abs(A).max()) ** 4)
    if A.shape != (4, 4) or np.abs(A4).max() > 1e-12 * scale:
        raise ParameterError("expm_planar requires a 4x4 matrix with A^4 = 0")


def expm_planar(A: np.ndarray, t) -> np.ndarray:
    """exp(A t) for a nilpotent 4x4 matrix, by the finite power series.

    ``t`` may be a scalar or an array; an array gives a stack of shape
    ``t.shape + (4, 4)``.
    """
    A = np.asarray(A, dtype=float)
    _check_nilpotent(A)
    A2 = A @ A
    A3 = A2 @ A
    t = np.asarray(t, dtype=float)[..., None, None]
    return np.eye(4) + A * t + A2 * (t**2 / 2.0) + A3 * (t**3 / 6.0)


def sample_control(control: Callable, ts: np.ndarray) -> np.ndarray:
    """Evaluate ``control`` on a time grid, vectorized when it supports arrays."""
    ts = np.asarray(ts, dtype=float)
    try:
        u = np.asarray(control(ts), dtype=float)
        if u.shape == ts.shape + (2,):
            return u
    except (TypeError, ValueError):
        pass
    return np.array([np.asarray(control(t), dtype=float) for t in ts]).reshape(ts.shape + (2,))


def simulate_linear(model: LinearPlanarModel, zeta0, control: Callable[[float], np.ndarray],
                    t_span: tuple[float, float], dt: float = 1e-3):
    """Fixed-step RK4 on both planar chains.

    ``zeta0`` is a (2, 4) array of (x-chain, y-chain) states and ``control(t)``
    returns the 2-vector of virtual inputs. Returns ``(t, states)`` with
    ``states`` of shape (n_steps + 1, 2, 4).
    """
    if not dt > 0:
        raise ParameterError(f"dt must be > 0, got {dt}")
    t0, t1 = map(float, t_span)
    n = max(1, int(round((t1 - t0) / dt)))
    h = (t1 - t0) / n
    A = np.zeros((8, 8))
    A[:4, :4] = model.A_x
    A[4:, 4:] = model.A_y
    Bm = np.zeros((8, 2))
    Bm[:4, 0] = model.B_x[:, 0]
    Bm[4:, 1] = model.B_y[:, 0]

    ts = t0 + h * np.arange(n + 1)
    u_nodes = sample_control(control, ts) @ Bm.T
    u_mid = sample_control(control, ts[:-1] + h / 2) @ Bm.T

    # The RK4 stages are linear in (z, u_k, u_mid, u_k+1); running them once on
    # identity blocks gives the step operators, so each step is one affine map.
    I8, O8 = np.eye(8), np.zeros((8, 8))

    def stages(z, u0, um, u1):
        k1 = A @ z + u0
        k2 = A @ (z + h / 2 * k1) + um
        k3 = A @ (z + h / 2 * k2) + um
        k4 = A @ (z + h * k3) + u1
        return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    P = stages(I8, O8, O8, O8)
    G0 = stages(O8, I8, O8, O8)
    Gm = stages(O8, O8, I8, O8)
    G1 = stages(O8, O8, O8, I8)
    drive = u_nodes[:-1] @ G0.T + u_mid @ Gm.T + u_nodes[1:] @ G1.T

    z = np.array(zeta0, dtype=float).reshape(8)
    out = np.empty((n + 1, 8))
    out[0] = z
    for k in range(n):
        z = P @ z + drive[k]
        out[k + 1] = z
    return ts, out.reshape(n + 1, 2, 4)


# --- nonlinear model --------------------------------------------------------

# Full state layout: x, y, z, vx, vy, vz, phi, theta, psi, p_phi, p_theta, p_psi
X, Y, Z, VX, VY, VZ, PHI, THETA, PSI, DPHI, DTHETA, DPSI = range(12)


def perturbations(params: QuadrotorParams, s, q_w: float = 0.0) -> tuple[float, float, float, float]:
    """(q_x, q_y, q_theta, q_phi) at full state ``s`` after the altitude/yaw feedback."""
    g = params.g
    phi, theta, psi = s[PHI], s[THETA], s[PSI]
    cphi, sphi = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cpsi, spsi = math.cos(psi), math.sin(psi)
    # altitude feedback factor: (g + F_z x_z)/g with F_z = [-az2, -az1]
    lift = 1.0 - (params.az2 * s[Z] + params.az1 * s[VZ]) / g
    q_x = (sphi * spsi / (cphi * cth) + sth * cpsi / cth) * lift - theta
    q_y = (sth * spsi / cth - sphi * cpsi / (cphi * cth)) * (-lift) - phi
    k = params.Iz / params.I - 1.0
    jr = params.J / params.I
    q_theta = k * s[DPHI] * s[DPSI] + jr * s[DPHI] * q_w
    q_phi = -k * s[DTHETA] * s[DPSI] - jr * s[DTHETA] * q_w
    return q_x, q_y, q_theta, q_phi


def mixer_matrix(params: QuadrotorParams) -> np.ndarray:
    kb, kt = params.kappa_b, params.kappa_tau
    return np.array([
        [-kb, 0.0, kb, 0.0],
        [0.0, kb, 0.0, -kb],
        [kb, kb, kb, kb],
        [kt, -kt, kt, -kt],
    ])


def rotor_speeds_squared(params: QuadrotorParams, u) -> np.ndarray:
    """Squared rotor speeds from (u_x, u_y, u_z, u_psi)."""
    return np.linalg.solve(mixer_matrix(params), np.asarray(u, dtype=float))


def _feedback_inputs(params: QuadrotorParams, s):
    """u_z and u_psi from the altitude and yaw pre-feedback."""
    u_z = params.m * (params.g - params.az2 * s[Z] - params.az1 * s[VZ]) / (
        math.cos(s[PHI]) * math.cos(s[THETA]))
    u_psi = params.Iz * (-params.apsi2 * s[PSI] - params.apsi1 * s[DPSI])
    return u_z, u_psi


def nonlinear_rhs(params: QuadrotorParams, s, u_x: float, u_y: float, q_w: float = 0.0) -> np.ndarray:
    """Time derivative of the full state under the altitude/yaw pre-feedback."""
    u_z, u_psi = _feedback_inputs(params, s)
    phi, theta, psi = s[PHI], s[THETA], s[PSI]
    cphi, sphi = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    cpsi, spsi = math.cos(psi), math.sin(psi)
    a = u_z / params.m
    I, Iz, J, ell = params.I, params.Iz, params.J, params.ell
    d = np.empty(12)
    d[X], d[Y], d[Z] = s[VX], s[VY], s[VZ]
    d[VX] = (cphi * sth * cpsi + sphi * spsi) * a
    d[VY] = (cphi * sth * spsi - sphi * cpsi) * a
    d[VZ] = cphi * cth * a - params.g
    d[PHI], d[THETA], d[PSI] = s[DPHI], s[DTHETA], s[DPSI]
    d[DPHI] = (I - Iz) / I * s[DTHETA] * s[DPSI] - J / I * s[DTHETA] * q_w + ell * u_y / I
    d[DTHETA] = (Iz - I) / I * s[DPHI] * s[DPSI] + J / I * s[DPHI] * q_w + ell * u_x / I
    d[DPSI] = u_psi / Iz
    return d


def _second_derivative(y: np.ndarray, h: float) -> np.ndarray:
    """Five-point central second difference; one-sided near the ends."""
    n = len(y)
    d2 = np.zeros(n)
    if n >= 5:
        d2[2:-2] = (-y[4:] + 16 * y[3:-1] - 30 * y[2:-2] + 16 * y[1:-3] - y[:-4]) / (12 * h * h)
    if n >= 3:
        inner = (y[2:] - 2 * y[1:-1] + y[:-2]) / (h * h)
        d2[1] = inner[0]
        d2[-2] = inner[-1]
        d2[0] = inner[0]
        d2[-1] = inner[-1]
        if n < 5:
            d2[1:-1] = inner
    return d2


@dataclass
class ValidationReport:
    t: np.ndarray
    states: np.ndarray
    linear_positions: np.ndarray
    max_deviation: float
    path_length: float
    relative_deviation: float
    max_tilt: float
    min_rotor_speed_sq: float
    rotor_feasible: bool
    iterations: int

    def summary(self) -> dict:
        return {
            "max_deviation_m": self.max_deviation,
            "path_length_m": self.path_length,
            "relative_deviation": self.relative_deviation,
            "max_tilt_rad": self.max_tilt,
            "min_rotor_speed_sq": self.min_rotor_speed_sq,
            "rotor_feasible": self.rotor_feasible,
            "iterations": self.iterations,
        }


def simulate_nonlinear_validated(params: QuadrotorParams, control: Callable[[float], np.ndarray],
                                 t_span: tuple[float, float], dt: float = 1e-3,
                                 start=(0.0, 0.0), z0: tuple[float, float] = (0.0, 0.0),
                                 angle_bound: float = math.pi / 3, iterations: int = 3,
                                 model: LinearPlanarModel | None = None) -> ValidationReport:
    """Fly the full nonlinear model with the cancelling input u = u_bar - q_*.

    q_* needs second time derivatives of q_x and q_y, which are taken by finite
    differences along the previous pass's trajectory; the first pass uses
    q_* = 0 and each later pass refines it.
    """
    if model is None:
        model = build_linear_model(params)
    t0, t1 = map(float, t_span)
    n = max(1, int(round((t1 - t0) / dt)))
    h = (t1 - t0) / n
    ts = t0 + h * np.arange(n + 1)
    ubar = sample_control(control, ts)
    ubar_mid = sample_control(control, ts[:-1] + h / 2)

    s0 = np.zeros(12)
    s0[X], s0[Y] = start
    s0[Z], s0[VZ] = z0
    corr = np.zeros((n + 1, 2))   # q_* on the grid
    qw = np.zeros(n + 1)
    I_over_l = params.I / params.ell
    mix_inv = np.linalg.inv(mixer_matrix(params))

    def run(corr, qw):
        states = np.empty((n + 1, 12))
        states[0] = s0
        s = s0.copy()
        for k in range(n):
            cm = 0.5 * (corr[k] + corr[k + 1])
            qm = 0.5 * (qw[k] + qw[k + 1])
            u0 = ubar[k] - corr[k]
            um = ubar_mid[k] - cm
            u1 = ubar[k + 1] - corr[k + 1]
            k1 = nonlinear_rhs(params, s, u0[0], u0[1], qw[k])
            k2 = nonlinear_rhs(params, s + h / 2 * k1, um[0], um[1], qm)
            k3 = nonlinear_rhs(params, s + h / 2 * k2, um[0], um[1], qm)
            k4 = nonlinear_rhs(params, s + h * k3, u1[0], u1[1], qw[k + 1])
            s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            tilt = max(abs(s[PHI]), abs(s[THETA]))
            if not math.isfinite(tilt) or tilt >= angle_bound:
                raise ValidationFailure(
                    f"tilt {tilt:.3f} rad exceeds bound {angle_bound:.3f} rad", time=float(ts[k + 1]))
            states[k + 1] = s
        return states

    states = run(corr, qw)
    done = 1
    for _ in range(max(0, iterations - 1)):
        q = np.array([perturbations(params, s, w) for s, w in zip(states, qw)])
        corr = np.column_stack([
            I_over_l * (_second_derivative(q[:, 0], h) + q[:, 2]),
            I_over_l * (_second_derivative(q[:, 1], h) + q[:, 3]),
        ])
        omega_sq = _rotor_speeds_sq_series(params, states, ubar - corr, mix_inv)
        omega = np.sqrt(np.clip(omega_sq, 0.0, None))
        qw = omega[:, 0] - omega[:, 1] + omega[:, 2] - omega[:, 3]
        states = run(corr, qw)
        done += 1

    omega_sq = _rotor_speeds_sq_series(params, states, ubar - corr, mix_inv)
    zeta0 = np.zeros((2, 4))
    zeta0[0, 0], zeta0[1, 0] = start
    _, lin = simulate_linear(model, zeta0, control, (t0, t1), h)
    lin_pos = lin[:, :, 0]
    dev = np.hypot(states[:, X] - lin_pos[:, 0], states[:, Y] - lin_pos[:, 1])
    seg = np.diff(lin_pos, axis=0)
    length = float(np.hypot(seg[:, 0], seg[:, 1]).sum())
    max_dev = float(dev.max())
    return ValidationReport(
        t=ts, states=states, linear_positions=lin_pos, max_deviation=max_dev,
        path_length=length, relative_deviation=max_dev / length if length > 0 else 0.0,
        max_tilt=float(np.abs(states[:, [PHI, THETA]]).max()),
        min_rotor_speed_sq=float(omega_sq.min()), rotor_feasible=bool(omega_sq.min() >= 0.0),
        iterations=done,
    )


def _rotor_speeds_sq_series(params, states, u_planar, mix_inv):
    u = np.empty((len(states), 4))
    for k, s in enumerate(states):
        u_z, u_psi = _feedback_inputs(params, s)
        u[k] = (u_planar[k, 0], u_planar[k, 1], u_z, u_psi)
    return u @ mix_inv.T
