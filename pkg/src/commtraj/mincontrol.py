"""Minimum-norm state transfer in fixed time on the nilpotent planar chains."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dynamics import LinearPlanarModel, expm_planar
from .errors import ConditioningError, DegenerateSegmentError, ParameterError

TAU_MIN = 0.25
COND_CAP = 1e12
_TAU_QUANTUM = 1e-9


@dataclass(frozen=True)
class SegmentSpec:
    zeta_start: np.ndarray  # (2, 4): x-chain, y-chain
    zeta_end: np.ndarray
    tau: float

    def __post_init__(self):
        for name in ("zeta_start", "zeta_end"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(2, 4)
            if not np.all(np.isfinite(v)):
                raise ParameterError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class Gramian:
    W: np.ndarray
    tau: float


@lru_cache(maxsize=64)
def _m_coefficients(a_bytes: bytes, b_bytes: bytes) -> np.ndarray:
    A = np.frombuffer(a_bytes).reshape(4, 4)
    B = np.frombuffer(b_bytes).reshape(4, -1)
    BB = B @ B.T
    A2, A3 = A @ A, A @ A @ A
    At, A2t, A3t = A.T, A2.T, A3.T
    c1 = BB
    c2 = A @ BB + BB @ At
    c3 = 0.5 * A2 @ BB + A @ BB @ At + 0.5 * BB @ A2t
    c4 = A3 @ BB / 6 + 0.5 * A2 @ BB @ At + 0.5 * A @ BB @ A2t + BB @ A3t / 6
    c5 = A3 @ BB @ At / 6 + 0.25 * A2 @ BB @ A2t + A @ BB @ A3t / 6
    c6 = A3 @ BB @ A2t / 12 + A2 @ BB @ A3t / 12
    c7 = A3 @ BB @ A3t / 36
    # alternating signs and 1/k from integrating s^(k-1)
    coef = np.stack([c1, -c2 / 2, c3 / 3, -c4 / 4, c5 / 5, -c6 / 6, c7 / 7])
    coef.flags.writeable = False
    return coef


def m_matrix(A: np.ndarray, B: np.ndarray, t, t_n=0.0) -> np.ndarray:
    """Integral of exp(-As) B B^T exp(-A^T s) over s in [t_n, t], as the
    degree-7 polynomial obtained from the terminating exponential series."""
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    coef = _m_coefficients(A.tobytes(), B.tobytes())
    t = np.asarray(t, dtype=float)
    k = np.arange(1, 8)
    d = t[..., None] ** k - float(t_n) ** k
    return np.tensordot(d, coef, axes=([-1], [0]))


def gramian_closed_form(A: np.ndarray, B: np.ndarray, tau: float,
                        tau_min: float = TAU_MIN) -> Gramian:
    """Reachability Gramian over a window of length ``tau``."""
    if not tau >= tau_min:
        raise DegenerateSegmentError(f"tau={tau} below tau_min={tau_min}")
    E = expm_planar(A, tau)
    W = E @ m_matrix(A, B, tau) @ E.T
    W = 0.5 * (W + W.T)
    return Gramian(W=W, tau=float(tau))


class _Factor:
    """Cholesky factor of the diagonally equilibrated Gramian.

    W spans many orders of magnitude across the chain (position vs. attitude
    rate), so conditioning is judged after scaling by diag(W)^-1/2.
    """

    def __init__(self, W: np.ndarray, axis: int, tau: float, cond_cap: float):
        d = 1.0 / np.sqrt(np.diag(W))
        Ws = W * d[:, None] * d[None, :]
        cond = np.linalg.cond(Ws)
        if not np.isfinite(cond) or cond > cond_cap:
            raise ConditioningError(
                f"Gramian for axis {'xy'[axis]} at tau={tau:g} has condition {cond:.3g} > {cond_cap:g}",
                axis=axis, tau=tau)
        self.W = W
        self.d = d
        self.cho = cho_factor(Ws)
        self.cond = cond
        self.Winv = self.solve(np.eye(4))
        self.Winv = 0.5 * (self.Winv + self.Winv.T)

    def solve(self, r):
        r = np.asarray(r, dtype=float)
        if r.ndim == 1:
            return self.d * cho_solve(self.cho, self.d * r)
        return self.d[:, None] * cho_solve(self.cho, self.d[:, None] * r)


@lru_cache(maxsize=4096)
def _cached_factor(a_bytes: bytes, b_bytes: bytes, axis: int, tau_key: int,
                   tau_min: float, cond_cap: float) -> tuple[np.ndarray, _Factor]:
    A = np.frombuffer(a_bytes).reshape(4, 4)
    B = np.frombuffer(b_bytes).reshape(4, 1)
    tau = tau_key * _TAU_QUANTUM
    W = gramian_closed_form(A, B, tau, tau_min).W
    return expm_planar(A, tau), _Factor(W, axis, tau, cond_cap)


def segment_operators(model: LinearPlanarModel, axis: int, tau: float,
                      tau_min: float = TAU_MIN, cond_cap: float = COND_CAP):
    """(exp(A tau), factored Gramian) for one axis, cached on tau to 1e-9 s."""
    if not tau >= tau_min:
        raise DegenerateSegmentError(f"tau={tau} below tau_min={tau_min}")
    A, B = model.axis(axis)
    key = int(round(tau / _TAU_QUANTUM))
    return _cached_factor(A.tobytes(), B.tobytes(), axis, key, float(tau_min), float(cond_cap))


@dataclass(frozen=True)
class SegmentControlLaw:
    """u*(t) = B^T exp(A^T (t_end - t)) W^-1 (zeta_end - exp(A tau) zeta_start), per axis."""

    model: LinearPlanarModel
    t_start: float
    tau: float
    zeta_start: np.ndarray   # (2, 4)
    zeta_end: np.ndarray     # (2, 4)
    residual: np.ndarray     # (2, 4) zeta_end - exp(A tau) zeta_start
    weights: np.ndarray      # (2, 4) W^-1 residual
    energy: float

    @property
    def t_end(self) -> float:
        return self.t_start + self.tau

    @cached_property
    def poly(self) -> np.ndarray:
        """(2, 4) coefficients of u*(t) as a cubic in s = t_end - t."""
        c = np.empty((2, 4))
        for i in range(2):
            A, B = self.model.axis(i)
            v = B[:, 0].copy()
            fact = 1.0
            for k in range(4):
                c[i, k] = v @ self.weights[i] / fact
                v = A @ v
                fact *= k + 1
        return c

    def control(self, t) -> np.ndarray:
        """Virtual input at time(s) t; shape t.shape + (2,)."""
        s = self.t_end - np.asarray(t, dtype=float)
        c = self.poly
        u = ((c[:, 3] * s[..., None] + c[:, 2]) * s[..., None] + c[:, 1]) * s[..., None] + c[:, 0]
        return u


def min_norm_segment(spec: SegmentSpec, model: LinearPlanarModel, t_start: float = 0.0,
                     tau_min: float = TAU_MIN, cond_cap: float = COND_CAP) -> SegmentControlLaw:
    res = np.empty((2, 4))
    wts = np.empty((2, 4))
    energy = 0.0
    for i in range(2):
        E, fac = segment_operators(model, i, spec.tau, tau_min, cond_cap)
        r = spec.zeta_end[i] - E @ spec.zeta_start[i]
        w = fac.solve(r)
        res[i], wts[i] = r, w
        energy += float(r @ w)
    return SegmentControlLaw(model=model, t_start=float(t_start), tau=float(spec.tau),
                             zeta_start=spec.zeta_start, zeta_end=spec.zeta_end,
                             residual=res, weights=wts, energy=max(energy, 0.0))


def segment_energy(law: SegmentControlLaw) -> float:
    """Integral of |u*|^2 over the window, i.e. sum over axes of r^T W^-1 r."""
    return law.energy


def propagate_state(law: SegmentControlLaw, t) -> np.ndarray:
    """Closed-form state along the optimal segment; shape t.shape + (2, 4)."""
    t = np.asarray(t, dtype=float)
    tol = 1e-9 * max(1.0, abs(law.t_end))
    if np.any(t < law.t_start - tol) or np.any(t > law.t_end + tol):
        raise ParameterError(f"t outside segment window [{law.t_start}, {law.t_end}]")
    s = np.clip(t - law.t_start, 0.0, law.tau)
    out = []
    for i in range(2):
        A, B = law.model.axis(i)
        Es = expm_planar(A, s)
        Et = expm_planar(A, law.tau)
        inner = np.einsum("...ij,j->...i", m_matrix(A, B, s), Et.T @ law.weights[i]) + law.zeta_start[i]
        out.append(np.einsum("...ij,...j->...i", Es, inner))
    return np.stack(out, axis=-2)
