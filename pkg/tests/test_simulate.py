import numpy as np
import pytest

import commtraj.simulate as simmod
from commtraj.channel import ChannelParams, deterministic_switch_radii
from commtraj.errors import ConfigError, ParameterError, PlanningError
from commtraj.planner import PlanProblem, WaypointPlan, assemble_plan, met_plan
from commtraj.simulate import (
    SimConfig, count_speed_peaks, lambda_sweep, measure_bits, run_sim, sample_times, speed_profile,
    unit_scale,
)

from conftest import GOAL, START

NEAR_S, NEAR_G = (10.0, 0.0), (0.0, 12.0)


def hover_plan(p, t_f, model, qmap, ladder):
    wp = WaypointPlan(depth=0, betas=np.zeros(0), radii=np.zeros(0), taus=np.array([t_f]),
                      points=np.array([p, p]), leg_levels=(int(qmap.level_index(np.hypot(*p))),),
                      alpha=np.zeros((2, 0, 3)), energy=0.0)
    return assemble_plan(wp, model, qmap, ladder, cost=0.0, E_0=1.0, W_0=1.0)


def test_sim_config_validation():
    with pytest.raises(ParameterError):
        SimConfig(n_trials=0)
    with pytest.raises(ParameterError):
        SimConfig(report_units="furlongs")
    with pytest.raises(ParameterError):
        SimConfig(dt_sample=0.0)


def test_sample_times_inclusive():
    assert np.array_equal(sample_times(100.0, 1.0), np.arange(101.0))
    assert len(sample_times(10.5, 1.0)) == 11
    assert sample_times(1.0, 0.1)[-1] == pytest.approx(1.0)


def test_unit_scale(ladder):
    assert unit_scale(ladder, "bits") == 1.0
    assert unit_scale(ladder, "normalized") == pytest.approx(0.5)


def test_static_hover_deterministic(model, qmap6, ladder):
    chan = ChannelParams(shadow_var_db=0.0)
    radii = deterministic_switch_radii(chan, ladder)
    p = (0.5 * (radii[0] + radii[1]), 0.0)   # true ladder gives R_1 = 2 bits/symbol
    hover = hover_plan(p, 20.0, model, qmap6, ladder)
    bits = measure_bits(hover.position(sample_times(20.0, 1.0)), chan, ladder, 5, seed=1)
    assert np.all(bits == (20 + 1) * ladder.t_tx * 2.0)


def test_zero_variance_limit(model, qmap6, ladder):
    """Tiny shadowing converges to the deterministic sampled sum."""
    met = met_plan(PlanProblem(NEAR_S, (30.0, 25.0), 50.0, 1.0), model, qmap6, ladder)
    pos = met.position(sample_times(50.0, 1.0))
    chan0 = ChannelParams(shadow_var_db=0.0)
    ref = ladder.t_tx * ladder.rate(10 ** (chan0.mean_snr_db(chan0.distance(pos)) / 10)).sum()
    assert measure_bits(pos, chan0, ladder, 3, 0)[0] == ref
    tiny = measure_bits(pos, ChannelParams(shadow_var_db=1e-12), ladder, 200, 0)
    assert tiny.mean() == pytest.approx(ref, rel=1e-3)


def test_met_vs_itself(model, qmap6, ladder, chan):
    met = met_plan(PlanProblem(NEAR_S, NEAR_G, 30.0, 1.0), model, qmap6, ladder)
    rep = run_sim(met, met, chan, ladder, SimConfig(n_trials=500))
    assert rep.energy_ratio == 1.0 and rep.transmission_ratio == 1.0
    assert rep.bits_measured > 0


def test_zero_bits_both_gives_unit_ratio(model, qmap6, ladder, chan):
    met = met_plan(PlanProblem(START, GOAL, 100.0, 1.0), model, qmap6, ladder)
    rep = run_sim(met, met, chan, ladder, SimConfig(n_trials=100))
    assert rep.met_bits_measured == 0.0 and rep.transmission_ratio == 1.0


def test_seed_determinism_and_stderr(model, qmap6, ladder, chan):
    met = met_plan(PlanProblem(NEAR_S, (40.0, 5.0), 40.0, 1.0), model, qmap6, ladder)
    a = run_sim(met, met, chan, ladder, SimConfig(n_trials=2500, seed=9))
    b = run_sim(met, met, chan, ladder, SimConfig(n_trials=2500, seed=9))
    assert a == b
    big = run_sim(met, met, chan, ladder, SimConfig(n_trials=10_000, seed=9))
    assert big.bits_stderr == pytest.approx(a.bits_stderr / 2, rel=0.15)
    assert big.bits_measured >= 0
    bits = run_sim(met, met, chan, ladder, SimConfig(n_trials=2500, seed=9, report_units="bits"))
    assert bits.bits_measured == pytest.approx(a.bits_measured * 0.5, rel=1e-12)


def test_blocks_are_prefix_stable(chan, ladder):
    """Trial draws do not depend on the total trial count."""
    pos = np.column_stack([np.linspace(5, 40, 30), np.zeros(30)])
    a = measure_bits(pos, chan, ladder, 1500, seed=4)
    b = measure_bits(pos, chan, ladder, 3000, seed=4)
    assert np.array_equal(a, b[:1500])


def test_tf_mismatch(model, qmap6, ladder, chan):
    a = met_plan(PlanProblem(NEAR_S, NEAR_G, 30.0, 1.0), model, qmap6, ladder)
    b = met_plan(PlanProblem(NEAR_S, NEAR_G, 31.0, 1.0), model, qmap6, ladder)
    with pytest.raises(ConfigError):
        run_sim(a, b, chan, ladder)


def test_speed_profiles(model, qmap6, ladder):
    met = met_plan(PlanProblem(START, GOAL, 100.0, 1.0), model, qmap6, ladder)
    t, v = speed_profile(met, 0.5)
    assert t[0] == 0.0 and t[-1] == 100.0
    assert v[0] == pytest.approx(0.0, abs=1e-9) and v[-1] == pytest.approx(0.0, abs=1e-9)
    assert count_speed_peaks(v) == 1
    hover = hover_plan((20.0, 5.0), 10.0, model, qmap6, ladder)
    _, v0 = speed_profile(hover, 0.5)
    assert not v0.any() and count_speed_peaks(v0) == 0
    with pytest.raises(ParameterError):
        speed_profile(met, 0.0)


def test_count_speed_peaks_synthetic():
    t = np.linspace(0, 1, 1001)
    two = np.sin(np.pi * t) * (1 - 0.5 * np.sin(np.pi * t) ** 8) + 0.3 * np.sin(3 * np.pi * t) ** 2
    assert count_speed_peaks(np.sin(np.pi * t)) == 1
    assert count_speed_peaks(np.sin(2 * np.pi * t) ** 2) == 2
    assert count_speed_peaks(two) >= 2


def test_lambda_sweep(model, qmap6, ladder, chan, fast_sa, monkeypatch):
    prob = PlanProblem(START, GOAL, 100.0, 1.0)
    with pytest.raises(ConfigError):
        lambda_sweep(prob, [], model, qmap6, ladder, chan, fast_sa)
    real_plan = simmod.plan

    def flaky(p, *a, **kw):
        if p.lam == 0.5:
            raise PlanningError("boom", {1: "nope"})
        return real_plan(p, *a, **kw)

    monkeypatch.setattr(simmod, "plan", flaky)
    res = lambda_sweep(prob, [1.0, 0.5], model, qmap6, ladder, chan, fast_sa, SimConfig(n_trials=200))
    first, second = res.rows
    assert first.report.energy_ratio == pytest.approx(1.0, abs=1e-9)
    assert first.report.transmission_ratio == 1.0
    assert second.report is None and "PlanningError" in second.error
