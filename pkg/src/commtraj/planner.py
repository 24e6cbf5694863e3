"""Communication-aware trajectory optimizer.

For each depth j the path is forced through crossing points on the first j
quantization borders. Given crossing angles and leg durations, the interior
knot states are found by a convex quadratic solve and the communications term
reduces to a weighted sum of leg durations. Simulated annealing searches the
angles and durations; the best depth wins.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded
from scipy.optimize import minimize

from .channel import QuantizedRateMap, RateLadder
from .dynamics import LinearPlanarModel, expm_planar
from .errors import ConditioningError, DegenerateSegmentError, ParameterError, PlanningError
from .mincontrol import (COND_CAP, TAU_MIN, SegmentControlLaw, SegmentSpec, m_matrix,
                         min_norm_segment, propagate_state)

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
_SEL = np.eye(4)[:, 1:]  # knot-state components free for optimization


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float
    K1: float = 1000.0
    K2: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if not self.radius > 0:
            raise ParameterError(f"obstacle radius must be > 0, got {self.radius}")
        if not (self.K1 > 0 and self.K2 > 0):
            raise ParameterError("obstacle gains K1, K2 must be > 0")


@dataclass(frozen=True)
class PlanProblem:
    s: tuple[float, float]
    g: tuple[float, float]
    t_f: float
    lam: float
    w_kind: str = "max_data"
    quota: float | None = None
    eta: float | None = None
    obstacles: tuple[Obstacle, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "s", tuple(float(v) for v in self.s))
        object.__setattr__(self, "g", tuple(float(v) for v in self.g))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must be in [0, 1], got {self.lam}")
        if not self.t_f > 0:
            raise ParameterError(f"t_f must be > 0, got {self.t_f}")
        if self.w_kind not in ("max_data", "quota"):
            raise ParameterError(f"w_kind must be 'max_data' or 'quota', got {self.w_kind!r}")
        if self.w_kind == "quota" and (self.quota is None or self.eta is None or not self.eta > 0):
            raise ParameterError("quota mode needs quota N_0 and eta > 0")


@dataclass(frozen=True)
class SAConfig:
    iterations: int = 5000
    cooling: float = 0.995
    n_init: int = 50
    sigma_beta: float = 0.15
    sigma_weight: float = 0.10
    tau_min: float = TAU_MIN
    cond_cap: float = COND_CAP
    trace_every: int = 50
    # relative cost increase per metre a leg strays outside the region its
    # bits are booked to
    region_penalty: float = 10.0
    region_samples: int = 16
    # anneal on ln(cost): costs of random candidates span many decades
    log_cost: bool = True
    # proposal widths are rescaled every adapt_every iterations to keep the
    # acceptance rate inside the target band (0 disables)
    adapt_every: int = 100
    target_acceptance: tuple[float, float] = (0.2, 0.45)
    step_bounds: tuple[float, float] = (0.05, 20.0)
    # jump back to the best-ever state this often (0 disables)
    restart_every: int = 500
    # Nelder-Mead refinement of the annealed best (0 disables)
    polish_evals: int = 1500

    def __post_init__(self):
        if self.iterations < 0 or self.n_init < 1:
            raise ParameterError("iterations must be >= 0 and n_init >= 1")
        if not 0.0 < self.cooling < 1.0:
            raise ParameterError(f"cooling must be in (0, 1), got {self.cooling}")
        if not self.tau_min > 0:
            raise ParameterError("tau_min must be > 0")
        if self.region_penalty < 0 or self.region_samples < 1:
            raise ParameterError("region_penalty must be >= 0 and region_samples >= 1")


@dataclass(frozen=True)
class DepthLayout:
    """Crossing-point radii and the rate level of every leg for one depth."""

    depth: int
    radii: tuple[float, ...]         # one per crossing point, in visiting order
    leg_levels: tuple[int, ...]      # 1-based quantizer level per leg

    @property
    def n_legs(self) -> int:
        return len(self.leg_levels)


def depth_layout(qmap: QuantizedRateMap, s, g, depth: int) -> DepthLayout:
    """Crossing points for a path that reaches region depth+1.

    Borders the start (goal) already lies inside contribute no inbound
    (outbound) crossing.
    """
    ap = np.asarray(qmap.ap_position)
    Ls = int(qmap.level_index(np.hypot(*(np.asarray(s) - ap))))
    Lg = int(qmap.level_index(np.hypot(*(np.asarray(g) - ap))))
    if depth + 1 < max(Ls, Lg) or depth > qmap.Q - 1:
        raise ParameterError(f"depth {depth} not reachable (start level {Ls}, goal level {Lg}, Q={qmap.Q})")
    inbound = list(range(Ls, depth + 1))
    outbound = list(range(depth, Lg - 1, -1))
    radii = [qmap.radii[k - 1] for k in inbound] + [qmap.radii[k - 1] for k in outbound]
    levels = [Ls] + [k + 1 for k in inbound]
    levels += [k for k in outbound]
    return DepthLayout(depth=depth, radii=tuple(radii), leg_levels=tuple(levels))


def reachable_depths(qmap: QuantizedRateMap, s, g) -> range:
    ap = np.asarray(qmap.ap_position)
    Ls = int(qmap.level_index(np.hypot(*(np.asarray(s) - ap))))
    Lg = int(qmap.level_index(np.hypot(*(np.asarray(g) - ap))))
    return range(max(Ls, Lg) - 1, qmap.Q)


@dataclass
class WaypointPlan:
    depth: int
    betas: np.ndarray          # crossing angles
    radii: np.ndarray
    taus: np.ndarray           # leg durations, sum t_f
    points: np.ndarray         # (n_points, 2) including s and g
    leg_levels: tuple[int, ...]
    alpha: np.ndarray | None = None   # (2, n_interior, 3) optimized knot parameters
    energy: float | None = None

    def knot_states(self) -> np.ndarray:
        """(n_points, 2, 4) full boundary states at every knot."""
        z = np.zeros((len(self.points), 2, 4))
        z[:, :, 0] = self.points
        if self.alpha is not None and len(self.points) > 2:
            z[1:-1, :, 1:] = np.transpose(self.alpha, (1, 0, 2))
        return z


# --- inner problem -----------------------------------------------------------

class _AxisOps:
    """Batched transition matrices and inverse Gramians for one chain."""

    def __init__(self, A: np.ndarray, B: np.ndarray):
        self.A, self.B = np.array(A), np.array(B)

    def __call__(self, taus: np.ndarray, cond_cap: float, axis: int):
        E = expm_planar(self.A, taus)
        W = E @ m_matrix(self.A, self.B, taus) @ np.swapaxes(E, -1, -2)
        d = 1.0 / np.sqrt(np.einsum("nii->ni", W))
        Ws = W * d[:, :, None] * d[:, None, :]
        Ws = 0.5 * (Ws + np.swapaxes(Ws, -1, -2))
        ev = np.linalg.eigvalsh(Ws)
        cond = ev[:, -1] / np.maximum(ev[:, 0], 1e-300)
        if np.any(ev[:, 0] <= 0) or np.any(cond > cond_cap):
            k = int(np.argmax(cond))
            raise ConditioningError(
                f"Gramian for axis {'xy'[axis]} at tau={taus[k]:g} has condition {cond[k]:.3g}",
                axis=axis, tau=float(taus[k]))
        Vinv = np.linalg.inv(Ws) * d[:, :, None] * d[:, None, :]
        return E, 0.5 * (Vinv + np.swapaxes(Vinv, -1, -2))


def _axis_ops(model: LinearPlanarModel):
    return [_AxisOps(*model.axis(0)), _AxisOps(*model.axis(1))]


def _solve_axis(c: np.ndarray, E: np.ndarray, V: np.ndarray):
    """Minimize sum_n r_n^T V_n r_n over the free knot components of one axis.

    ``c`` are knot positions (N+1,), E and V the per-leg transition matrices
    and inverse Gramians (N, 4, 4). Returns (alpha (N-1, 3), energy, knot
    states (N+1, 4), residuals (N, 4)).
    """
    N = len(E)
    e1 = np.array([1.0, 0.0, 0.0, 0.0])
    # fixed part of each residual: c_{n+1} e1 - c_n E_n e1
    f = c[1:, None] * e1 - c[:-1, None] * E[:, :, 0]
    m = N - 1
    if m == 0:
        knots = np.zeros((2, 4))
        knots[:, 0] = c
        return np.zeros((0, 3)), float(np.einsum("i,ij,j->", f[0], V[0], f[0])), knots, f
    ES = E @ _SEL                                # (N, 4, 3)
    VS = V @ _SEL                                # (N, 4, 3)
    EtV = np.swapaxes(ES, -1, -2) @ V            # (N, 3, 4)
    # knot n enters residual n-1 as +S a_n and residual n as -E_n S a_n
    diag = VS[:-1, 1:, :] + EtV[1:] @ ES[1:]
    off = -(EtV[1:-1] @ _SEL)
    rhs = (-np.einsum("nij,nj->ni", V[:-1, 1:, :], f[:-1])
           + np.einsum("nij,nj->ni", EtV[1:], f[1:])).ravel()
    H = np.zeros((3 * m, 3 * m))
    for k in range(m):
        i = 3 * k
        H[i:i + 3, i:i + 3] = diag[k]
        if k < m - 1:
            H[i:i + 3, i + 3:i + 6] = off[k]
            H[i + 3:i + 6, i:i + 3] = off[k].T
    # Jacobi scaling before the banded Cholesky solve
    dg = np.diag(H)
    if np.any(dg <= 0):
        raise ConditioningError("normal matrix has a non-positive diagonal")
    sc = 1.0 / np.sqrt(dg)
    Hs = H * sc[:, None] * sc[None, :]
    bw = 5
    ab = np.zeros((bw + 1, 3 * m))
    for k in range(bw + 1):
        ab[bw - k, k:] = np.diagonal(Hs, k)
    try:
        x = solveh_banded(ab, sc * rhs, lower=False)
    except (LinAlgError, ValueError) as exc:
        raise ConditioningError(f"normal equations not positive definite: {exc}") from exc
    a = (sc * x).reshape(m, 3)
    knots = np.zeros((N + 1, 4))
    knots[:, 0] = c
    knots[1:-1, 1:] = a
    r = knots[1:] - np.einsum("nij,nj->ni", E, knots[:-1])
    energy = float(np.einsum("ni,nij,nj->", r, V, r))
    return a, max(energy, 0.0), knots, r


def _solve_inner(points, taus, ops, cond_cap):
    per_axis, total = [], 0.0
    for i in range(2):
        E, V = ops[i](taus, cond_cap, i)
        a, e, knots, r = _solve_axis(points[:, i], E, V)
        per_axis.append((a, knots, V @ r[..., None]))
        total += e
    return per_axis, total


def solve_alpha(points: np.ndarray, taus: np.ndarray, model: LinearPlanarModel,
                tau_min: float = TAU_MIN, cond_cap: float = COND_CAP, _ops=None):
    """Optimal interior knot states for fixed waypoints and durations.

    Returns ``(alpha, energy)`` with alpha of shape (2, n_interior, 3); the
    start and goal knots are held at rest.
    """
    taus = np.asarray(taus, dtype=float)
    points = np.asarray(points, dtype=float)
    if len(points) != len(taus) + 1:
        raise ParameterError("need one more point than durations")
    if np.any(taus < tau_min):
        raise DegenerateSegmentError(f"leg duration {taus.min():g} below tau_min={tau_min}")
    per_axis, total = _solve_inner(points, taus, ops=_ops or _axis_ops(model), cond_cap=cond_cap)
    return np.stack([pa[0] for pa in per_axis]), total


def _leg_positions(model: LinearPlanarModel, taus: np.ndarray, per_axis, fractions: np.ndarray):
    """Positions (N, K, 2) at the given fractions of every leg."""
    s = taus[:, None] * fractions[None, :]
    out = []
    for i, (_, knots, w) in enumerate(per_axis):
        A, B = model.axis(i)
        v = np.swapaxes(expm_planar(A, taus), -1, -2) @ w          # (N, 4, 1)
        inner = m_matrix(A, B, s) @ v[:, None] + knots[:-1, None, :, None]
        out.append((expm_planar(A, s)[..., 0:1, :] @ inner)[..., 0, 0])
    return np.stack(out, axis=-1)


def region_excursion(positions: np.ndarray, layout: DepthLayout, qmap: QuantizedRateMap) -> float:
    """Largest distance (m) by which a leg leaves the region its bits are booked to."""
    r = np.concatenate([[np.inf], np.asarray(qmap.radii), [0.0]])
    lv = np.asarray(layout.leg_levels)
    hi, lo = r[lv - 1], r[lv]
    d = np.hypot(positions[..., 0] - qmap.ap_position[0], positions[..., 1] - qmap.ap_position[1])
    exc = np.maximum(lo[:, None] - d, d - hi[:, None])
    return float(max(exc.max(), 0.0))


# --- communications and penalties ----------------------------------------------

def approx_bits(taus: Sequence[float], leg_levels: Sequence[int], qmap: QuantizedRateMap,
                ladder: RateLadder) -> float:
    """Bits sent if each leg stays in one quantization region for its whole duration."""
    lv = np.asarray(qmap.levels)[np.asarray(leg_levels, dtype=int) - 1]
    return float(ladder.t_tx / ladder.period * np.dot(np.asarray(taus, dtype=float), lv))


def closest_point_on_segment(c0, c1, q) -> tuple[np.ndarray, float]:
    """Closest point to q on the segment theta*c0 + (1-theta)*c1, theta in [0, 1]."""
    c0, c1, q = (np.asarray(v, dtype=float) for v in (c0, c1, q))
    d = c1 - c0
    L2 = float(d @ d)
    if L2 == 0.0:
        theta = 1.0
    else:
        theta = min(max(float((c0 - c1) @ (q - c1)) / L2, 0.0), 1.0)
    return theta * c0 + (1.0 - theta) * c1, theta


def obstacle_penalty(points: np.ndarray, obstacles: Sequence[Obstacle]) -> float:
    """Barrier that is large when a polyline segment comes within r_o of an
    obstacle centre and decays exponentially outside."""
    total = 0.0
    points = np.asarray(points, dtype=float)
    for ob in obstacles:
        q = np.asarray(ob.center)
        for n in range(len(points) - 1):
            a, _ = closest_point_on_segment(points[n], points[n + 1], q)
            dist = float(np.hypot(*(q - a)))
            x = -ob.K2 * (dist - ob.radius) / ob.radius
            total += ob.K1 * math.exp(min(x, 700.0))
    return total


def min_obstacle_distance(points: np.ndarray, ob: Obstacle) -> float:
    q = np.asarray(ob.center)
    return min(float(np.hypot(*(q - closest_point_on_segment(points[n], points[n + 1], q)[0])))
               for n in range(len(points) - 1))


def comm_term(problem: PlanProblem, bits: float, W_0: float) -> float:
    if problem.w_kind == "max_data":
        return W_0 / bits if bits > 0 else math.inf
    x = problem.eta * (problem.quota - bits)
    return math.exp(x) if x < 700 else math.inf


def data_normalization(t_f: float, ladder: RateLadder) -> float:
    """Most bits the ladder could send in t_f: T_tx R_J (floor(t_f/T) + 1)."""
    return ladder.t_tx * ladder.r_max * (math.floor(t_f / ladder.period) + 1)


# --- baseline and cost -------------------------------------------------------------

def met_baseline(s, g, t_f: float, model: LinearPlanarModel, tau_min: float = TAU_MIN,
                 cond_cap: float = COND_CAP) -> tuple[SegmentControlLaw, float]:
    """Minimum-energy rest-to-rest transfer s -> g in t_f and its energy E_0."""
    s, g = np.asarray(s, dtype=float), np.asarray(g, dtype=float)
    if np.allclose(s, g, rtol=0.0, atol=0.0):
        raise ParameterError("start equals goal: the energy normalization is undefined")
    z0 = np.zeros((2, 4))
    z1 = np.zeros((2, 4))
    z0[:, 0], z1[:, 0] = s, g
    law = min_norm_segment(SegmentSpec(z0, z1, t_f), model, 0.0, tau_min, cond_cap)
    if not law.energy > 0:
        raise ParameterError("degenerate baseline energy")
    return law, law.energy


@dataclass
class PlanContext:
    """Everything the cost needs, built once per problem."""

    problem: PlanProblem
    model: LinearPlanarModel
    qmap: QuantizedRateMap
    ladder: RateLadder
    config: SAConfig = field(default_factory=SAConfig)
    E_0: float = field(init=False)
    W_0: float = field(init=False)

    def __post_init__(self):
        _, self.E_0 = met_baseline(self.problem.s, self.problem.g, self.problem.t_f, self.model,
                                   self.config.tau_min, self.config.cond_cap)
        self.W_0 = data_normalization(self.problem.t_f, self.ladder)
        self._ops = _axis_ops(self.model)
        k = self.config.region_samples
        self._fractions = (np.arange(k) + 0.5) / k

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_ops", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._ops = _axis_ops(self.model)

    def points(self, layout: DepthLayout, betas: np.ndarray) -> np.ndarray:
        ap = np.asarray(self.qmap.ap_position)
        r = np.asarray(layout.radii)
        mid = ap + r[:, None] * np.column_stack([np.cos(betas), np.sin(betas)])
        return np.vstack([self.problem.s, mid, self.problem.g])

    def taus(self, weights: np.ndarray) -> np.ndarray:
        n = len(weights)
        tmin = self.config.tau_min
        spare = self.problem.t_f - n * tmin
        if spare < 0:
            raise DegenerateSegmentError(f"t_f={self.problem.t_f} too short for {n} legs of tau_min={tmin}")
        w = np.asarray(weights, dtype=float)
        return tmin + spare * w / w.sum()

    def evaluate(self, layout: DepthLayout, betas, taus) -> tuple[float, dict]:
        """Cost of a candidate plus its parts; infeasible candidates cost +inf."""
        pts = self.points(layout, np.asarray(betas, dtype=float))
        taus = np.asarray(taus, dtype=float)
        try:
            if np.any(taus < self.config.tau_min):
                raise DegenerateSegmentError(f"leg duration {taus.min():g} below tau_min")
            per_axis, energy = _solve_inner(pts, taus, self._ops, self.config.cond_cap)
        except (ConditioningError, DegenerateSegmentError) as exc:
            return math.inf, {"error": str(exc)}
        alpha = np.stack([pa[0] for pa in per_axis])
        bits = approx_bits(taus, layout.leg_levels, self.qmap, self.ladder)
        excursion = 0.0
        if self.problem.lam < 1.0 and self.config.region_penalty > 0:
            pos = _leg_positions(self.model, taus, per_axis, self._fractions)
            excursion = region_excursion(pos, layout, self.qmap)
        cost = self.cost_from_parts(energy, bits, pts) * (1.0 + self.config.region_penalty * excursion)
        return cost, {"alpha": alpha, "energy": energy, "bits": bits, "points": pts,
                      "excursion": excursion}

    def cost_from_parts(self, energy: float, bits: float, points: np.ndarray) -> float:
        lam = self.problem.lam
        cost = lam * energy / self.E_0
        if lam < 1.0:
            cost += (1.0 - lam) * comm_term(self.problem, bits, self.W_0)
        if self.problem.obstacles:
            cost += obstacle_penalty(points, self.problem.obstacles)
        return cost


def plan_cost(candidate: WaypointPlan, ctx: PlanContext) -> float:
    """Composite cost of a waypoint candidate (alpha is re-solved)."""
    layout = DepthLayout(candidate.depth, tuple(candidate.radii), tuple(candidate.leg_levels))
    cost, parts = ctx.evaluate(layout, candidate.betas, candidate.taus)
    if "alpha" in parts:
        candidate.alpha, candidate.energy = parts["alpha"], parts["energy"]
    return cost


# --- simulated annealing -----------------------------------------------------------

@dataclass
class AnnealResult:
    plan: WaypointPlan | None
    cost: float
    iterations: int
    acceptance_rate: float
    trace: list[float]
    T0: float
    reason: str = ""
    excursion: float = 0.0


def _bearing(ctx: PlanContext, p) -> float:
    d = np.asarray(p, dtype=float) - np.asarray(ctx.qmap.ap_position)
    return math.atan2(d[1], d[0])


def _structured_guesses(ctx: PlanContext, layout: DepthLayout) -> list[tuple[np.ndarray, np.ndarray]]:
    """Two deterministic starting points with constant-speed durations.

    "spread" staggers the crossing angles evenly between the start and goal
    bearings; "dive" crosses inbound along the start bearing, sweeps the
    angle on the innermost leg and leaves along the goal bearing.
    """
    a0, a1 = _bearing(ctx, ctx.problem.s), _bearing(ctx, ctx.problem.g)
    da = (a1 - a0 + math.pi) % TWO_PI - math.pi
    m = len(layout.radii)
    n_in = sum(1 for lv0, lv1 in zip(layout.leg_levels, layout.leg_levels[1:]) if lv1 > lv0)
    spread = a0 + da * (np.arange(1, m + 1) / (m + 1))
    dive = np.where(np.arange(m) < n_in, a0, a1)
    out = []
    for betas in (spread, dive):
        betas = np.mod(betas, TWO_PI)
        pts = ctx.points(layout, betas)
        lengths = np.hypot(*np.diff(pts, axis=0).T)
        out.append((betas, lengths + 1.0))
    return out


def anneal(ctx: PlanContext, depth: int, rng: np.random.Generator) -> AnnealResult:
    cfg = ctx.config
    layout = depth_layout(ctx.qmap, ctx.problem.s, ctx.problem.g, depth)
    m, n_legs = len(layout.radii), layout.n_legs
    try:
        ctx.taus(np.ones(n_legs))
    except DegenerateSegmentError as exc:
        return AnnealResult(None, math.inf, 0, 0.0, [], 0.0, reason=str(exc))

    def make_plan(betas, weights, parts):
        taus = ctx.taus(weights)
        return WaypointPlan(depth=depth, betas=np.array(betas), radii=np.array(layout.radii),
                            taus=taus, points=parts["points"], leg_levels=layout.leg_levels,
                            alpha=parts["alpha"], energy=parts["energy"])

    # initial population: structured guesses plus random draws
    pop = _structured_guesses(ctx, layout)[:cfg.n_init]
    while len(pop) < cfg.n_init:
        pop.append((rng.uniform(0.0, TWO_PI, m), rng.exponential(1.0, n_legs) + 1e-3))
    scored = []
    for b, w in pop:
        c, parts = ctx.evaluate(layout, b, ctx.taus(w))
        scored.append((c, b, w, parts))
    finite = np.array([c for c, *_ in scored if math.isfinite(c)])
    if finite.size == 0:
        return AnnealResult(None, math.inf, 0, 0.0, [], 0.0,
                            reason="no feasible initial candidate: " + scored[0][3].get("error", "infinite cost"))
    scale = (lambda c: math.log(c) if c > 0 else -math.inf) if cfg.log_cost else (lambda c: c)
    q75, q25 = np.percentile([scale(c) for c in finite], [75, 25])
    T0 = float(q75 - q25)
    if not T0 > 0:
        T0 = 1e-3 if cfg.log_cost else max(1e-3 * abs(float(np.median(finite))), 1e-9)
    k0 = int(np.argmin([c for c, *_ in scored]))
    cost, betas, weights, parts = scored[k0]
    best = (cost, betas.copy(), weights.copy(), parts)
    trace = [cost]
    if m == 0 and n_legs == 1:
        return AnnealResult(make_plan(betas, weights, parts), cost, 0, 0.0, trace, T0,
                            excursion=parts.get("excursion", 0.0))

    temp = T0
    accepted = window = 0
    step = 1.0
    n_coord = m + n_legs
    for it in range(cfg.iterations):
        k = int(rng.integers(n_coord))
        b_new, w_new = betas, weights
        if k < m:
            b_new = betas.copy()
            b_new[k] = (b_new[k] + step * cfg.sigma_beta * rng.standard_normal()) % TWO_PI
        else:
            w_new = weights.copy()
            w_new[k - m] *= math.exp(step * cfg.sigma_weight * rng.standard_normal())
        c_new, p_new = ctx.evaluate(layout, b_new, ctx.taus(w_new))
        u = rng.random()
        if c_new <= cost or (math.isfinite(c_new)
                             and u < math.exp(-(scale(c_new) - scale(cost)) / temp)):
            betas, weights, cost, parts = b_new, w_new, c_new, p_new
            accepted += 1
            window += 1
            if cost < best[0]:
                best = (cost, betas.copy(), weights.copy(), parts)
        temp *= cfg.cooling
        if cfg.adapt_every and (it + 1) % cfg.adapt_every == 0:
            rate = window / cfg.adapt_every
            if rate > cfg.target_acceptance[1]:
                step = min(step * 1.5, cfg.step_bounds[1])
            elif rate < cfg.target_acceptance[0]:
                step = max(step / 1.5, cfg.step_bounds[0])
            window = 0
        if cfg.restart_every and (it + 1) % cfg.restart_every == 0 and cost > best[0]:
            cost, betas, weights, parts = best[0], best[1].copy(), best[2].copy(), best[3]
        if (it + 1) % cfg.trace_every == 0:
            trace.append(best[0])
            if log.isEnabledFor(logging.DEBUG) and (it + 1) % (10 * cfg.trace_every) == 0:
                log.debug("depth %d it %d T=%.3g step=%.3g cost=%.6g best=%.6g exc=%.3g",
                          depth, it + 1, temp, step, cost, best[0], parts.get("excursion", 0.0))
    c, b, w, p = best
    if cfg.polish_evals > 0:
        c, b, w, p = _polish(ctx, layout, best, cfg.polish_evals)
        trace.append(c)
    return AnnealResult(make_plan(b, w, p), c, cfg.iterations,
                        accepted / max(cfg.iterations, 1), trace, T0,
                        excursion=p.get("excursion", 0.0))


def _polish(ctx: PlanContext, layout: DepthLayout, best, max_evals: int):
    """Local simplex refinement in (angles, log-weights); never worsens ``best``."""
    c0, b0, w0, p0 = best
    m = len(b0)
    found = {"c": c0, "b": b0, "w": w0, "p": p0}

    def f(x):
        b = np.mod(x[:m], TWO_PI)
        w = np.exp(np.clip(x[m:], -50.0, 50.0))
        c, parts = ctx.evaluate(layout, b, ctx.taus(w))
        if c < found["c"]:
            found.update(c=c, b=b, w=w, p=parts)
        return math.log(c) if 0 < c < math.inf else 1e300

    # restarting the simplex from its own optimum escapes premature collapse
    budget = max_evals
    while budget > 0:
        before = found["c"]
        x0 = np.concatenate([found["b"], np.log(found["w"])])
        res = minimize(f, x0, method="Nelder-Mead",
                       options={"maxfev": budget, "xatol": 1e-6, "fatol": 1e-10, "adaptive": True})
        budget -= res.nfev
        if not found["c"] < before * (1 - 1e-6):
            break
    return found["c"], found["b"], found["w"], found["p"]


# --- full planner ------------------------------------------------------------------

@dataclass
class PlanResult:
    depth: int
    waypoints: WaypointPlan
    laws: list[SegmentControlLaw]
    energy: float
    bits_approx: float
    cost: float
    E_0: float
    W_0: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def t_f(self) -> float:
        return self.laws[-1].t_end

    @property
    def knot_times(self) -> np.ndarray:
        return np.array([law.t_start for law in self.laws] + [self.laws[-1].t_end])

    def _segment_index(self, t: np.ndarray) -> np.ndarray:
        edges = self.knot_times
        return np.clip(np.searchsorted(edges, t, side="right") - 1, 0, len(self.laws) - 1)

    def control(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = self._segment_index(t)
        out = np.empty(t.shape + (2,))
        for k, law in enumerate(self.laws):
            mask = idx == k
            if np.any(mask):
                out[mask] = law.control(t[mask])
        return out

    def state(self, t) -> np.ndarray:
        """(…, 2, 4) planar states at times t in [0, t_f]."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.t_f)
        idx = self._segment_index(t)
        out = np.empty(t.shape + (2, 4))
        for k, law in enumerate(self.laws):
            mask = idx == k
            if np.any(mask):
                out[mask] = propagate_state(law, t[mask])
        return out

    def position(self, t) -> np.ndarray:
        return self.state(t)[..., 0]

    def velocity(self, t) -> np.ndarray:
        return self.state(t)[..., 1]


def segment_laws(wp: WaypointPlan, model: LinearPlanarModel, tau_min: float = TAU_MIN,
                 cond_cap: float = COND_CAP) -> list[SegmentControlLaw]:
    """Minimum-norm law for every leg of a solved waypoint plan, back to back in time."""
    knots = wp.knot_states()
    laws, t = [], 0.0
    for n, tau in enumerate(wp.taus):
        spec = SegmentSpec(knots[n], knots[n + 1], float(tau))
        laws.append(min_norm_segment(spec, model, t, tau_min, cond_cap))
        t += float(tau)
    return laws


def assemble_plan(wp: WaypointPlan, model: LinearPlanarModel, qmap: QuantizedRateMap,
                  ladder: RateLadder, cost: float, E_0: float, W_0: float,
                  tau_min: float = TAU_MIN, cond_cap: float = COND_CAP,
                  diagnostics: dict | None = None) -> PlanResult:
    laws = segment_laws(wp, model, tau_min, cond_cap)
    energy = float(sum(law.energy for law in laws))
    bits = approx_bits(wp.taus, wp.leg_levels, qmap, ladder)
    return PlanResult(depth=wp.depth, waypoints=wp, laws=laws, energy=energy, bits_approx=bits,
                      cost=cost, E_0=E_0, W_0=W_0, diagnostics=dict(diagnostics or {}))


def build_plan_result(ctx: PlanContext, wp: WaypointPlan, cost: float,
                      diagnostics: dict | None = None) -> PlanResult:
    return assemble_plan(wp, ctx.model, ctx.qmap, ctx.ladder, cost, ctx.E_0, ctx.W_0,
                         ctx.config.tau_min, ctx.config.cond_cap, diagnostics)


def depth_seed(master_seed: int, depth: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, depth])


def _anneal_job(args):
    ctx, depth, seed = args
    return depth, anneal(ctx, depth, np.random.default_rng(depth_seed(seed, depth)))


_TIE_RTOL = 1e-9


def depth_lower_bound(ctx: PlanContext, depth: int) -> float:
    """Cost no depth-``depth`` plan can beat: energy >= E_0, bits at most the
    whole horizon at the deepest level reached, penalties >= 0."""
    lam = ctx.problem.lam
    if lam >= 1.0:
        return 1.0
    top = ctx.qmap.levels[depth]
    bits_max = ctx.ladder.t_tx / ctx.ladder.period * ctx.problem.t_f * top
    return lam + (1.0 - lam) * comm_term(ctx.problem, bits_max, ctx.W_0)


def plan(problem: PlanProblem, model: LinearPlanarModel, qmap: QuantizedRateMap, ladder: RateLadder,
         sa_config: SAConfig | None = None, seed: int = 0, workers: int = 1,
         depths: Sequence[int] | None = None) -> PlanResult:
    """Anneal every reachable depth and keep the cheapest plan (lowest depth on ties).

    The shallowest depth is solved first; deeper depths whose lower bound
    cannot beat it are skipped, which never changes the selected plan.
    """
    ctx = PlanContext(problem, model, qmap, ladder, sa_config or SAConfig())
    if depths is None:
        depths = list(reachable_depths(qmap, problem.s, problem.g))
    depths = sorted(depths)
    if not depths:
        raise PlanningError("no reachable depth")
    results = dict([_anneal_job((ctx, depths[0], seed))])
    first = results[depths[0]].cost
    skipped = {j: depth_lower_bound(ctx, j) for j in depths[1:]
               if depth_lower_bound(ctx, j) >= first * (1 - _TIE_RTOL)}
    jobs = [(ctx, j, seed) for j in depths[1:] if j not in skipped]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results.update(pool.map(_anneal_job, jobs))
    else:
        results.update(map(_anneal_job, jobs))

    best = None
    reasons = {}
    for j in depths:
        if j in skipped:
            continue
        r = results[j]
        log.debug("depth %d: cost %.6g (%s)", j, r.cost, r.reason or "ok")
        if r.plan is None or not math.isfinite(r.cost):
            reasons[j] = r.reason or "infinite cost"
            continue
        if best is None or r.cost < best.cost * (1 - _TIE_RTOL):
            best = r
    if best is None:
        raise PlanningError("no depth produced a finite-cost plan", reasons)

    diag = {
        "depth_costs": {j: (results[j].cost if j in results else None) for j in depths},
        "skipped_by_bound": skipped,
        "iterations": {j: results[j].iterations for j in results},
        "acceptance_rate": {j: results[j].acceptance_rate for j in results},
        "best_cost_trace": best.trace,
        "T0": best.T0,
        "region_excursion": best.excursion,
        "infeasible": reasons,
    }
    return build_plan_result(ctx, best.plan, best.cost, diag)


def met_plan(problem: PlanProblem, model: LinearPlanarModel, qmap: QuantizedRateMap,
             ladder: RateLadder, sa_config: SAConfig | None = None) -> PlanResult:
    """The minimum-energy trajectory wrapped as a plan (single leg, no crossings)."""
    ctx = PlanContext(problem, model, qmap, ladder, sa_config or SAConfig())
    law, E_0 = met_baseline(problem.s, problem.g, problem.t_f, model, ctx.config.tau_min,
                            ctx.config.cond_cap)
    ap = np.asarray(qmap.ap_position)
    levels = (int(qmap.level_index(np.hypot(*(np.asarray(problem.s) - ap)))),)
    wp = WaypointPlan(depth=0, betas=np.zeros(0), radii=np.zeros(0), taus=np.array([problem.t_f]),
                      points=np.array([problem.s, problem.g]), leg_levels=levels,
                      alpha=np.zeros((2, 0, 3)), energy=E_0)
    bits = approx_bits(wp.taus, levels, qmap, ladder)
    cost = ctx.cost_from_parts(E_0, bits, wp.points)
    return PlanResult(depth=0, waypoints=wp, laws=[law], energy=E_0, bits_approx=bits, cost=cost,
                      E_0=E_0, W_0=ctx.W_0)
