"""Path loss with lognormal shadowing, adaptive-modulation rate ladder, and the
radially quantized expected-rate map."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.optimize import brentq, minimize_scalar
from scipy.special import erfc
from scipy.stats import norm

from .errors import ParameterError

STANDOFF = 1.0


@dataclass(frozen=True)
class ChannelParams:
    alpha: float = 2.0
    snr_ref_db: float = 40.0
    shadow_var_db: float = 1.0
    ap_position: tuple[float, float] = (0.0, 0.0)
    standoff: float = STANDOFF

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if not self.shadow_var_db >= 0:
            raise ParameterError(f"shadow_var_db must be >= 0, got {self.shadow_var_db}")
        if not self.standoff > 0:
            raise ParameterError(f"standoff must be > 0, got {self.standoff}")
        object.__setattr__(self, "ap_position", tuple(float(v) for v in self.ap_position))

    @property
    def shadow_std_db(self) -> float:
        return math.sqrt(self.shadow_var_db)

    def distance(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.hypot(p[..., 0] - self.ap_position[0], p[..., 1] - self.ap_position[1])

    def mean_snr_db(self, d) -> np.ndarray:
        """SNR in dB at distance d with no shadowing."""
        return self.snr_ref_db - 10.0 * self.alpha * np.log10(d)


@dataclass(frozen=True)
class RateLadder:
    """Rates R_0 = 0 < R_1 < ... < R_J selected by linear SNR thresholds
    gamma_0 = 0 < gamma_1 < ... < gamma_J."""

    rates: tuple[float, ...]
    thresholds: tuple[float, ...]
    symbol_rate: float = 1.0
    period: float = 1.0
    t_tx: float = 0.5

    def __post_init__(self):
        r = tuple(float(v) for v in self.rates)
        g = tuple(float(v) for v in self.thresholds)
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "thresholds", g)
        if len(r) != len(g) or len(r) < 2:
            raise ParameterError("rates and thresholds need equal length >= 2")
        if r[0] != 0.0 or g[0] != 0.0:
            raise ParameterError("R_0 and gamma_0 must be 0")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ParameterError(f"rates must strictly increase: {r}")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ParameterError(f"thresholds must strictly increase: {g}")
        if not (0 < self.t_tx < self.period):
            raise ParameterError(f"need 0 < t_tx < period, got t_tx={self.t_tx}, period={self.period}")
        if not self.symbol_rate > 0:
            raise ParameterError("symbol_rate must be > 0")

    @property
    def r_max(self) -> float:
        return self.rates[-1]

    @property
    def thresholds_db(self) -> np.ndarray:
        g = np.asarray(self.thresholds[1:])
        return 10.0 * np.log10(g)

    def rate(self, snr) -> np.ndarray:
        """R(snr): the highest rate whose threshold is met."""
        snr = np.asarray(snr, dtype=float)
        idx = np.searchsorted(np.asarray(self.thresholds), snr, side="right") - 1
        return np.asarray(self.rates)[np.clip(idx, 0, None)]


def snr(p, h, params: ChannelParams) -> np.ndarray:
    """Linear SNR at position p with shadowing amplitude gain h."""
    d = params.distance(p)
    if np.any(d < params.standoff):
        raise ParameterError(f"position within {params.standoff} m of the access point")
    return np.asarray(h, dtype=float) ** 2 * 10.0 ** (params.snr_ref_db / 10.0) / d**params.alpha


def _gauss_tail(x):
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def qam_ber(snr, bits: int) -> np.ndarray:
    """Gray-coded square M-QAM bit error rate approximation, M = 2**bits."""
    M = 2.0**bits
    return (4.0 / bits) * (1.0 - 1.0 / math.sqrt(M)) * _gauss_tail(
        np.sqrt(3.0 * np.asarray(snr, dtype=float) / (M - 1.0)))


def qam_thresholds(target_ber: float, modulations=(2, 4, 6)) -> list[float]:
    """Smallest linear SNR giving BER <= target for each bits-per-symbol entry."""
    if not 0.0 < target_ber <= 0.5:
        raise ParameterError(f"target_ber must be in (0, 0.5], got {target_ber}")
    out = []
    for b in modulations:
        if qam_ber(0.0, b) <= target_ber:
            out.append(0.0)
            continue
        hi = 1.0
        while qam_ber(hi, b) > target_ber:
            hi *= 2.0
        out.append(brentq(lambda s: float(qam_ber(s, b)) - target_ber, 0.0, hi, xtol=1e-14, rtol=1e-14))
    if any(b < a for a, b in zip(out, out[1:])):
        raise ArithmeticError(f"QAM thresholds not monotone: {out}")
    return out


def reference_ladder(target_ber: float = 1e-3, symbol_rate: float = 1.0, period: float = 1.0,
                 t_tx: float = 0.5, modulations=(2, 4, 6)) -> RateLadder:
    """Ladder of square QAM modes with thresholds at the target BER."""
    gam = qam_thresholds(target_ber, modulations)
    return RateLadder(rates=(0.0,) + tuple(b * symbol_rate for b in modulations),
                      thresholds=(0.0,) + tuple(gam), symbol_rate=symbol_rate,
                      period=period, t_tx=t_tx)


def expected_rate_radial(d, params: ChannelParams, ladder: RateLadder) -> np.ndarray:
    """E[R(Gamma)] at distance d from the AP.

    Shadowing is N(0, shadow_var_db) in dB, so each P[Gamma >= gamma_j] is a
    Gaussian tail and the expectation telescopes over the ladder steps.
    """
    d = np.asarray(d, dtype=float)
    mu = params.mean_snr_db(d)
    steps = np.diff(np.asarray(ladder.rates))
    thr = ladder.thresholds_db
    sd = params.shadow_std_db
    if sd == 0.0:
        p = (mu[..., None] >= thr).astype(float)
    else:
        p = norm.cdf((mu[..., None] - thr) / sd)
    return p @ steps


def expected_rate(p, params: ChannelParams, ladder: RateLadder) -> np.ndarray:
    d = params.distance(p)
    if np.any(d < params.standoff):
        raise ParameterError(f"position within {params.standoff} m of the access point")
    return expected_rate_radial(d, params, ladder)


def deterministic_switch_radii(params: ChannelParams, ladder: RateLadder) -> np.ndarray:
    """Radii where the unshadowed SNR equals each threshold, outermost first."""
    return 10.0 ** ((params.snr_ref_db - ladder.thresholds_db) / (10.0 * params.alpha))


@dataclass(frozen=True)
class QuantizedRateMap:
    """Piecewise-constant radial rate map.

    ``radii`` are the Q-1 border radii d_1 > ... > d_{Q-1}; ``levels`` are
    R^Q_1 = 0 <= ... <= R^Q_Q = max rate, level j occupying (d_j, d_{j-1}]
    with d_0 = inf and d_Q = 0.
    """

    radii: tuple[float, ...]
    levels: tuple[float, ...]
    error: float
    domain_radius: float
    ap_position: tuple[float, float] = (0.0, 0.0)
    warnings: tuple[str, ...] = field(default=())

    @property
    def Q(self) -> int:
        return len(self.levels)

    def level_index(self, d) -> np.ndarray:
        """1-based level index for distance(s) d."""
        d = np.asarray(d, dtype=float)
        # count borders strictly inside the point: d <= d_k means inside border k
        r = np.asarray(self.radii)
        return 1 + np.sum(d[..., None] <= r, axis=-1)

    def level_at_radius(self, d) -> np.ndarray:
        return np.asarray(self.levels)[self.level_index(d) - 1]

    def evaluate(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        d = np.hypot(p[..., 0] - self.ap_position[0], p[..., 1] - self.ap_position[1])
        return self.level_at_radius(d)

    def to_dict(self) -> dict:
        return {"Q": self.Q, "radii": list(self.radii), "levels": list(self.levels),
                "error": self.error, "domain_radius": self.domain_radius,
                "ap_position": list(self.ap_position)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizedRateMap":
        return cls(radii=tuple(d["radii"]), levels=tuple(d["levels"]), error=float(d["error"]),
                   domain_radius=float(d["domain_radius"]),
                   ap_position=tuple(d.get("ap_position", (0.0, 0.0))))


def region_radius(qmap: QuantizedRateMap, j: int) -> float:
    """Radius of border j, between regions j and j+1 (1-based)."""
    if not 1 <= j <= qmap.Q - 1:
        raise IndexError(f"border index {j} outside 1..{qmap.Q - 1}")
    return qmap.radii[j - 1]


class _RadialError:
    """Squared error of a radial step function against the expected-rate curve,
    from cumulative Simpson integrals on a fixed grid."""

    def __init__(self, params: ChannelParams, ladder: RateLadder, radius: float, n_grid: int):
        n_grid += (n_grid + 1) % 2  # odd point count, even interval count
        self.nu = np.linspace(0.0, radius, n_grid)
        curve = expected_rate_radial(np.maximum(self.nu, params.standoff), params, ladder)
        self.curve = curve
        self.S1 = np.concatenate([[0.0], cumulative_simpson(curve, x=self.nu)])
        self.S2 = np.concatenate([[0.0], cumulative_simpson(curve**2, x=self.nu)])
        self.radius = radius
        self.r_max = ladder.r_max

    def _cum(self, x):
        return np.interp(x, self.nu, self.S1), np.interp(x, self.nu, self.S2)

    def evaluate(self, radii: np.ndarray):
        """Error and optimal levels for borders ``radii`` (descending)."""
        edges = np.concatenate([[self.radius], radii, [0.0]])  # outer -> inner
        c1, c2 = self._cum(edges)
        s1 = c1[:-1] - c1[1:]
        s2 = c2[:-1] - c2[1:]
        length = edges[:-1] - edges[1:]
        levels = np.empty(len(length))
        levels[0] = 0.0
        levels[-1] = self.r_max
        inner = length[1:-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            mid = np.where(inner > 0, s1[1:-1] / np.where(inner > 0, inner, 1.0), np.nan)
        # zero-width pieces take the curve value at their location
        if np.any(np.isnan(mid)):
            at = np.interp(edges[1:-1][:-1], self.nu, self.curve)
            mid = np.where(np.isnan(mid), at[: len(mid)], mid)
        levels[1:-1] = mid
        err = s2 - 2 * levels * s1 + levels**2 * length
        return float(max(err.sum(), 0.0)), levels


def quantize_expected_rate(params: ChannelParams, ladder: RateLadder, Q: int, domain_radius: float,
                           rng: np.random.Generator | None = None, n_grid: int = 4001,
                           sa_iterations: int = 2000) -> QuantizedRateMap:
    """Optimal Q-level radial quantizer of the expected-rate curve.

    Borders are searched by simulated annealing plus coordinate-descent
    polishing; the free interior levels are the interval means, which are
    optimal for fixed borders. The search for Q levels is warm-started from the
    (Q-1)-level optimum with one border inserted, so E_Q never exceeds E_{Q-1}.
    """
    if Q < 2:
        raise ParameterError(f"Q must be >= 2, got {Q}")
    if not domain_radius > 0:
        raise ParameterError(f"domain_radius must be > 0, got {domain_radius}")
    rng = np.random.default_rng(0) if rng is None else rng
    obj = _RadialError(params, ladder, float(domain_radius), n_grid)
    R = float(domain_radius)

    def cost(r):
        return obj.evaluate(r)[0]

    # Q = 2: one border, exhaustive over the grid then refined
    grid_cost = [cost(np.array([x])) for x in obj.nu]
    best = np.array([obj.nu[int(np.argmin(grid_cost))]])
    best, best_err = _polish(cost, best, R)

    for q in range(3, Q + 1):
        edges = np.concatenate([[R], best, [0.0]])
        candidates = []
        for k in range(len(edges) - 1):
            trial = np.sort(np.concatenate([best, [0.5 * (edges[k] + edges[k + 1])]]))[::-1]
            candidates.append(_polish(cost, trial, R))
        start, start_err = min(candidates, key=lambda c: c[1])
        r, e = _anneal_radii(cost, start, start_err, R, rng, sa_iterations)
        best, best_err = _polish(cost, r, R)
        if best_err > start_err:
            best, best_err = start, start_err

    err, levels = obj.evaluate(best)
    notes = []
    span = ladder.r_max
    if np.any(np.diff(levels) <= 1e-6 * span):
        msg = f"Q={Q} exceeds the distinguishable plateaus: duplicated levels {np.round(levels, 6).tolist()}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    return QuantizedRateMap(radii=tuple(float(x) for x in best), levels=tuple(float(x) for x in levels),
                            error=err, domain_radius=R, ap_position=params.ap_position,
                            warnings=tuple(notes))


def _polish(cost, radii, R, sweeps: int = 50, tol: float = 1e-12):
    """Cyclic coordinate descent over the borders, each within its neighbours."""
    r = np.array(radii, dtype=float)
    e = cost(r)
    for _ in range(sweeps):
        e_prev = e
        for k in range(len(r)):
            hi = R if k == 0 else r[k - 1]
            lo = 0.0 if k == len(r) - 1 else r[k + 1]
            if hi - lo <= 0:
                continue

            def f(x, k=k):
                trial = r.copy()
                trial[k] = x
                return cost(trial)

            res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-9 * max(R, 1.0)})
            if res.fun < e:
                r[k], e = res.x, res.fun
        if e_prev - e <= tol * max(e_prev, 1e-300):
            break
    return r, e


def _anneal_radii(cost, r0, e0, R, rng, iterations, cooling=0.997):
    r, e = r0.copy(), e0
    best, best_e = r.copy(), e
    temp = max(e0, 1e-12) * 0.1
    step = 0.05 * R
    for _ in range(iterations):
        k = rng.integers(len(r))
        trial = r.copy()
        trial[k] = np.clip(trial[k] + step * rng.standard_normal(), 0.0, R)
        trial = np.sort(trial)[::-1]
        et = cost(trial)
        if et <= e or rng.random() < math.exp(-(et - e) / temp):
            r, e = trial, et
            if e < best_e:
                best, best_e = r.copy(), e
        temp *= cooling
    return best, best_e


def rate_curve_table(params: ChannelParams, ladder: RateLadder, qmap: QuantizedRateMap,
                     n: int = 801) -> np.ndarray:
    """Columns (radius, expected rate, quantized rate) on [standoff, domain radius]."""
    d = np.linspace(params.standoff, qmap.domain_radius, n)
    return np.column_stack([d, expected_rate_radial(d, params, ladder), qmap.level_at_radius(d)])
