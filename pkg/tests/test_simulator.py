import math

import numpy as np
import pytest
from scipy import stats

from pnrarray.array_model import (
    CrosstalkModel,
    DetectorArrayConfig,
    RecoveryCurve,
    chain_adjacency,
)
from pnrarray.pmatrix import estimate_pmatrix_mc
from pnrarray.rng import substream
from pnrarray.simulator import (
    LightSourceSpec,
    SimulationRun,
    generate_arrivals,
    simulate,
    source_from_dict,
)
from pnrarray.tagstream import time_profile_histogram, window_clicks

ALMOST_ONE = math.nextafter(1.0, 0.0)


def quiet(cfg, **kw):
    """Run toggles with every stochastic nuisance switched off."""
    base = dict(crosstalk=False, darks=False, jitter=False)
    base.update(kw)
    return base


def test_delta_fock_arrivals_share_a_timestamp():
    src = LightSourceSpec(mu=3, statistics="fock")
    arr = generate_arrivals(src, [0.5, 0.5], substream(1, 0), n_pulses=1, trigger_delay_ps=700)
    assert arr.times.size == 3
    assert np.all(arr.times == 700.0)
    assert set(arr.pixels) <= {0, 1}


def test_square_pulse_arrivals_are_uniform():
    src = LightSourceSpec(mu=1, statistics="fock", pulse_shape="square", pulse_width=10.0)
    arr = generate_arrivals(src, [1.0], substream(2, 0), n_pulses=10**6)
    phase = arr.times - arr.pulses * src.period_ps
    assert phase.min() >= 0 and phase.max() < 10_000
    counts, _ = np.histogram(phase, bins=100, range=(0, 10_000))
    assert stats.chisquare(counts).pvalue > 0.01


def test_exponential_pulse_mean_delay():
    src = LightSourceSpec(mu=1, statistics="fock", pulse_shape="exponential", pulse_tau=2.0)
    arr = generate_arrivals(src, [1.0], substream(3, 0), n_pulses=10**5)
    phase = arr.times - arr.pulses * src.period_ps
    assert phase.min() >= 0
    assert abs(phase.mean() - 2000.0) < 4 * 2000.0 / math.sqrt(10**5)


def test_cw_counts_are_poisson():
    rate, T = 5e6, 2_000_000  # photons/s, window in ps
    src = LightSourceSpec(mode="cw", cw_rate=rate)
    rng = substream(4, 0)
    counts = np.array([generate_arrivals(src, [1.0], rng, window=(0, T)).times.size for _ in range(10_000)])
    expected = rate * T * 1e-12
    assert abs(counts.mean() - expected) < 3 * math.sqrt(expected / counts.size)


@pytest.mark.parametrize("statistics, mu", [("poisson", 1.5), ("thermal", 0.8)])
def test_photon_number_mean(statistics, mu):
    src = LightSourceSpec(mu=mu, statistics=statistics)
    arr = generate_arrivals(src, [1.0], substream(5, 0), n_pulses=200_000)
    var = mu if statistics == "poisson" else mu * (1 + mu)
    assert abs(arr.times.size / 200_000 - mu) < 4 * math.sqrt(var / 200_000)


def test_arrival_argument_checks():
    with pytest.raises(ValueError):
        generate_arrivals(LightSourceSpec(), [1.0], substream(0), window=(0, 10))
    with pytest.raises(ValueError):
        generate_arrivals(LightSourceSpec(mode="cw", cw_rate=1.0), [1.0], substream(0), n_pulses=3)


def test_landing_pixels_follow_weights():
    w = np.array([0.1, 0.6, 0.3])
    src = LightSourceSpec(mu=1, statistics="fock")
    arr = generate_arrivals(src, w, substream(6, 0), n_pulses=100_000)
    freq = np.bincount(arr.pixels, minlength=3) / 100_000
    assert np.all(np.abs(freq - w) < 4 * np.sqrt(w * (1 - w) / 100_000))


@pytest.mark.parametrize("mode", ["pulsed", "cw"])
def test_deterministic_under_any_thread_count(cfg, mode):
    if mode == "pulsed":
        run = SimulationRun(cfg, LightSourceSpec(mu=2.0, pulse_shape="square", pulse_width=3.0), pulses=200_000, seed=7)
    else:
        run = SimulationRun(cfg, LightSourceSpec(mode="cw", cw_rate=2e8), duration=5e-5, seed=7)
    a = simulate(run, threads=1).stream
    b = simulate(run, threads=4).stream
    c = simulate(run).stream
    assert len(a) > 1000
    assert a == b == c
    other = simulate(SimulationRun(run.cfg, run.source, run.pulses, run.duration, seed=8)).stream
    assert other != a


def test_tags_sorted_and_metadata(cfg):
    run = SimulationRun(cfg, LightSourceSpec(mu=4.0), pulses=70_000, seed=1)
    res = simulate(run)
    assert np.all(np.diff(res.stream.timestamps) >= 0)
    meta = res.stream.metadata
    assert meta["pulse_count"] == 70_000
    assert meta["trigger_period_ps"] == 1_000_000
    assert meta["seed"] == 1
    assert res.stream.channel_count == 14
    s = res.stats
    assert len(res.stream) == s["photon_clicks"] + s["dark_clicks"] + s["crosstalk_clicks"]


def test_dead_time_gate_two_photons_half_a_nanosecond_apart():
    cfg = DetectorArrayConfig.uniform(1, 1.0, recovery=RecoveryCurve(dead_time=1.0, tau=0.0, form="step"))
    src = LightSourceSpec(rep_rate=2e9, mu=1, statistics="fock")
    stream = simulate(SimulationRun(cfg, src, pulses=2, seed=0, **quiet(cfg))).stream
    assert len(stream) == 1
    long = simulate(SimulationRun(cfg, src, pulses=10_000, seed=0, **quiet(cfg))).stream
    assert np.all(np.diff(long.timestamps) >= 1000)
    assert len(long) == 5_000


def test_no_pixel_clicks_within_dead_time(cfg):
    run = SimulationRun(cfg, LightSourceSpec(mode="cw", cw_rate=3e9), duration=2e-5, seed=3, jitter=False)
    stream = simulate(run).stream
    for ch in range(cfg.pixel_count):
        ts = stream.select(ch)
        assert ts.size > 100
        assert np.diff(ts).min() >= cfg.recovery.dead_time * 1000


def _forced_pair_config(n=2, pairs=((0, 1),), **kw):
    xt = CrosstalkModel(
        adjacency=chain_adjacency(n),
        pair_probability={p: ALMOST_ONE for p in pairs},
        **kw,
    )
    weights = (1.0,) + (0.0,) * (n - 1)
    return DetectorArrayConfig(n, (1.0,) * n, weights, crosstalk=xt)


def test_forced_crosstalk_one_tag_per_primary():
    cfg = _forced_pair_config()
    src = LightSourceSpec(mu=1, statistics="fock")
    stream = simulate(SimulationRun(cfg, src, pulses=5_000, seed=2, darks=False, jitter=False)).stream
    t0, t1 = stream.select(0), stream.select(1)
    assert t0.size == t1.size == 5_000
    lag = t1 - t0
    assert lag.min() >= 1000 and lag.max() <= 5000


def test_crosstalk_generations_toggle():
    cfg = _forced_pair_config(3, pairs=((0, 1), (1, 2)))
    src = LightSourceSpec(mu=1, statistics="fock")
    one = simulate(SimulationRun(cfg, src, pulses=1_000, seed=4, darks=False, jitter=False)).stream
    two = simulate(
        SimulationRun(cfg, src, pulses=1_000, seed=4, darks=False, jitter=False, crosstalk_generations=2)
    ).stream
    assert one.select(2).size == 0
    assert two.select(2).size == 1_000


def test_crosstalk_is_causal():
    xt = CrosstalkModel.symmetric(chain_adjacency(14), 0.05)
    cfg = DetectorArrayConfig.uniform(14, 0.9, crosstalk=xt)
    run = SimulationRun(cfg, LightSourceSpec(mu=3.0), pulses=50_000, seed=9)
    truth = simulate(run, keep_truth=True).truth
    child = (truth.kind == 2) & truth.detected
    assert child.sum() > 100
    lag = truth.times[child] - truth.times[truth.parent[child]]
    assert lag.min() >= cfg.crosstalk.delay_offset * 1000
    assert np.all(truth.detected[truth.parent[child]])


def test_jitter_fwhm():
    cfg = DetectorArrayConfig.uniform(14, 1.0, jitter_fwhm=21.0)
    src = LightSourceSpec(mu=1, statistics="fock")
    run = SimulationRun(cfg, src, pulses=10**6, seed=11, crosstalk=False, darks=False, recovery=False)
    stream = simulate(run).stream
    assert len(stream) == 10**6
    hist = time_profile_histogram(stream, src.period_ps, 1, offset=1000 - 500)
    assert abs(hist.fwhm() - 21.0) <= 0.05 * 21.0


def test_zero_efficiency_with_everything_off_is_silent():
    cfg = DetectorArrayConfig.uniform(4, 0.0)
    run = SimulationRun(cfg, LightSourceSpec(mu=5.0), pulses=1_000, seed=0, darks=False)
    assert len(simulate(run).stream) == 0


def test_darks_only():
    cfg = DetectorArrayConfig.uniform(14, 0.9, dark_rate_per_pixel=1e5)
    run = SimulationRun(cfg, LightSourceSpec(mode="cw", cw_rate=0.0), duration=1e-2, seed=5, crosstalk=False)
    res = simulate(run)
    expected = 1e5 * 14 * 1e-2
    assert abs(res.stats["darks"] - expected) < 4 * math.sqrt(expected)
    assert res.stats["photons"] == 0


@pytest.mark.parametrize("m", [2, 5, 8])
def test_matches_monte_carlo_column(m):
    cfg = DetectorArrayConfig.uniform(14, 0.895)
    n = 200_000
    run = SimulationRun(cfg, LightSourceSpec(mu=m, statistics="fock"), pulses=n, seed=m, **quiet(cfg, recovery=False))
    counts = window_clicks(simulate(run).stream, 1_000_000, 500, 1000)
    sim = np.bincount(counts, minlength=15)[:15] / n
    ref = estimate_pmatrix_mc(cfg, m, n, seed=100 + m).entries[:, m]
    sigma = np.sqrt(np.maximum(ref * (1 - ref), 1e-12) * 2 / n)
    assert np.all(np.abs(sim - ref) <= 3 * sigma + 1e-12)


def test_rejects_inconsistent_runs(cfg):
    with pytest.raises(ValueError):
        simulate(SimulationRun(cfg, LightSourceSpec(), duration=1e-3))
    with pytest.raises(ValueError):
        simulate(SimulationRun(cfg, LightSourceSpec(mode="cw", cw_rate=1e6), pulses=10))
    with pytest.raises(ValueError):
        simulate(SimulationRun(cfg, LightSourceSpec(mu=-1.0), pulses=10))
    with pytest.raises(ValueError):
        simulate(SimulationRun(cfg, LightSourceSpec(mu=1.5, statistics="fock"), pulses=10))


def test_zero_pulses_gives_empty_stream(cfg):
    res = simulate(SimulationRun(cfg, LightSourceSpec(), pulses=0))
    assert len(res.stream) == 0


def test_source_from_dict():
    src = source_from_dict({"mode": "cw", "cw_rate": 1e6})
    assert src.cw_rate == 1e6
    with pytest.raises(ValueError, match="unknown"):
        source_from_dict({"colour": "red"})
