"""Monte-Carlo evaluation of planned trajectories under random shadowing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from .channel import ChannelParams, QuantizedRateMap, RateLadder
from .dynamics import LinearPlanarModel
from .errors import CommTrajError, ConfigError, ParameterError
from .planner import PlanProblem, PlanResult, SAConfig, met_plan, plan

log = logging.getLogger(__name__)

TRIAL_BLOCK = 1000


@dataclass(frozen=True)
class SimConfig:
    n_trials: int = 10_000
    seed: int = 0
    dt_sample: float | None = None     # defaults to the duplexing period
    report_units: str = "normalized"   # or "bits"

    def __post_init__(self):
        if int(self.n_trials) < 1:
            raise ParameterError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.dt_sample is not None and not self.dt_sample > 0:
            raise ParameterError("dt_sample must be > 0")
        if self.report_units not in ("normalized", "bits"):
            raise ParameterError(f"report_units must be 'normalized' or 'bits', got {self.report_units!r}")


@dataclass
class SimReport:
    energy_ratio: float
    transmission_ratio: float
    bits_approx: float
    bits_measured: float
    bits_stderr: float
    met_bits_measured: float
    n_trials: int
    units: str

    def row(self) -> dict:
        return {"energy_ratio": self.energy_ratio, "transmission_ratio": self.transmission_ratio,
                "bits_approx": self.bits_approx, "bits_measured": self.bits_measured,
                "bits_stderr": self.bits_stderr}


def sample_times(t_f: float, dt: float) -> np.ndarray:
    """k*dt for k = 0..floor(t_f/dt), inclusive."""
    n = int(math.floor(t_f / dt + 1e-9))
    return dt * np.arange(n + 1)


def measure_bits(positions: np.ndarray, chan: ChannelParams, ladder: RateLadder, n_trials: int,
                 seed: int, dt_sample: float | None = None) -> np.ndarray:
    """Bits delivered per trial along sampled positions (K, 2).

    Each sample gets an independent dB-Gaussian shadowing draw and the true
    rate ladder. Trials run in fixed blocks, each with its own generator, so
    the draws do not depend on how the blocks are scheduled.
    """
    dt = ladder.period if dt_sample is None else dt_sample
    weight = ladder.t_tx * dt / ladder.period
    d = np.maximum(chan.distance(positions), chan.standoff)
    mu = chan.mean_snr_db(d)
    sd = chan.shadow_std_db
    thr = np.asarray(ladder.thresholds)
    rates = np.asarray(ladder.rates)
    out = np.empty(n_trials)
    for b, start in enumerate(range(0, n_trials, TRIAL_BLOCK)):
        n = min(TRIAL_BLOCK, n_trials - start)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, b]))
        snr_db = mu + sd * rng.standard_normal((n, len(mu))) if sd > 0 else np.broadcast_to(mu, (n, len(mu)))
        idx = np.searchsorted(thr, 10.0 ** (snr_db / 10.0), side="right") - 1
        out[start:start + n] = weight * rates[idx].sum(axis=1)
    return out


def unit_scale(ladder: RateLadder, units: str) -> float:
    """Divisor converting bits to the requested report units."""
    if units == "bits":
        return 1.0
    return ladder.symbol_rate * ladder.t_tx / ladder.period


def run_sim(plan_result: PlanResult, met: PlanResult, chan: ChannelParams, ladder: RateLadder,
            cfg: SimConfig | None = None) -> SimReport:
    cfg = cfg or SimConfig()
    if not math.isclose(plan_result.t_f, met.t_f, rel_tol=1e-12, abs_tol=1e-12):
        raise ConfigError(f"plan t_f={plan_result.t_f} differs from baseline t_f={met.t_f}")
    dt = ladder.period if cfg.dt_sample is None else cfg.dt_sample
    ts = sample_times(plan_result.t_f, dt)
    bits = measure_bits(plan_result.position(ts), chan, ladder, cfg.n_trials, cfg.seed, dt)
    met_bits = measure_bits(met.position(ts), chan, ladder, cfg.n_trials, cfg.seed, dt)
    scale = unit_scale(ladder, cfg.report_units)
    mean = float(bits.mean())
    stderr = float(bits.std(ddof=1) / math.sqrt(len(bits))) if len(bits) > 1 else 0.0
    met_mean = float(met_bits.mean())
    if met_mean > 0:
        ratio = mean / met_mean
    else:
        ratio = 1.0 if mean == 0 else math.inf
    return SimReport(energy_ratio=plan_result.energy / met.energy, transmission_ratio=ratio,
                     bits_approx=plan_result.bits_approx / scale, bits_measured=mean / scale,
                     bits_stderr=stderr / scale, met_bits_measured=met_mean / scale,
                     n_trials=int(cfg.n_trials), units=cfg.report_units)


def speed_profile(plan_result: PlanResult, dt: float) -> tuple[np.ndarray, np.ndarray]:
    if not dt > 0:
        raise ParameterError(f"dt must be > 0, got {dt}")
    t = np.arange(0.0, plan_result.t_f, dt)
    t = np.append(t, plan_result.t_f) if t[-1] < plan_result.t_f else t
    v = plan_result.velocity(t)
    return t, np.hypot(v[:, 0], v[:, 1])


def count_speed_peaks(speed: np.ndarray, rel_prominence: float = 1e-3) -> int:
    """Number of local maxima standing out by a fraction of the peak speed."""
    speed = np.asarray(speed, dtype=float)
    top = float(speed.max()) if speed.size else 0.0
    if top <= 0:
        return 0
    padded = np.concatenate([[0.0], speed, [0.0]])
    peaks, _ = find_peaks(padded, prominence=rel_prominence * top)
    return len(peaks)


@dataclass
class SweepRow:
    lam: float
    report: SimReport | None = None
    plan: PlanResult | None = None
    error: str | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow]
    met: PlanResult
    extras: dict = field(default_factory=dict)


def lambda_sweep(problem: PlanProblem, lambdas: Sequence[float], model: LinearPlanarModel,
                 qmap: QuantizedRateMap, ladder: RateLadder, chan: ChannelParams,
                 sa_config: SAConfig | None = None, sim_config: SimConfig | None = None,
                 seed: int = 0, workers: int = 1) -> SweepResult:
    """Plan and simulate each lambda; failures are recorded per row."""
    if len(lambdas) == 0:
        raise ConfigError("lambda list is empty")
    sim_config = sim_config or SimConfig(seed=seed)
    met = met_plan(problem, model, qmap, ladder, sa_config)
    rows = []
    for lam in lambdas:
        row = SweepRow(lam=float(lam))
        try:
            prob = PlanProblem(problem.s, problem.g, problem.t_f, float(lam), problem.w_kind,
                               problem.quota, problem.eta, problem.obstacles)
            row.plan = plan(prob, model, qmap, ladder, sa_config, seed=seed, workers=workers)
            row.report = run_sim(row.plan, met, chan, ladder, sim_config)
        except (CommTrajError, ArithmeticError) as exc:
            log.warning("lambda=%g failed: %s", lam, exc)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return SweepResult(rows=rows, met=met)
