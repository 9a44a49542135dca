"""Event-driven Monte Carlo of the detector array.

Work is split into fixed units (blocks of pulses, or fixed-length CW slabs),
each drawing from its own counter-based substream.  A unit produces
*candidate* events: photons, dark counts and crosstalk candidates spawned
from them, each with every random number it will ever need pre-drawn.  All
candidates are then merged in time order and a single sequential pass
decides which ones click, carrying each pixel's recovery state across unit
boundaries.  The outcome is therefore independent of the number of workers.

All times inside this module are integer picoseconds.  A pixel's recovery
state is driven by its tag times, so two tags from one pixel are never
closer than the dead time, and a crosstalk tag always follows its parent
tag by the sampled delay.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import numba as nb
import numpy as np

from .array_model import DetectorArrayConfig, config_to_dict, validate_config
from .rng import substream
from .tagstream import TimeTagStream

__all__ = [
    "LightSourceSpec",
    "SimulationRun",
    "SimulationResult",
    "Truth",
    "Arrivals",
    "generate_arrivals",
    "simulate",
    "validate_source",
    "source_from_dict",
]

PULSES_PER_BLOCK = 1 << 16
CW_SLAB_PS = 10_000_000  # 10 us
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

PHOTON, DARK, CROSSTALK = 0, 1, 2


@dataclass(frozen=True)
class LightSourceSpec:
    """Input light.

    Pulsed mode draws a photon number per pulse from ``statistics`` with mean
    ``mu`` (for ``"fock"``, ``mu`` is the exact photon number) and spreads
    arrivals over ``pulse_shape``.  ``pulse_width`` and ``pulse_tau`` are in
    ns.  ``pedestal_rate`` adds CW leakage (finite modulator extinction) in
    photons/s on top of the pulses.  CW mode emits Poisson photons at
    ``cw_rate`` photons/s.
    """

    mode: str = "pulsed"
    rep_rate: float = 1e6
    mu: float = 1.0
    statistics: str = "poisson"
    pulse_shape: str = "delta"
    pulse_width: float = 0.0
    pulse_tau: float = 0.0
    cw_rate: float = 0.0
    pedestal_rate: float = 0.0

    @property
    def period_ps(self) -> int:
        return int(round(1e12 / self.rep_rate))


def validate_source(src: LightSourceSpec) -> LightSourceSpec:
    problems = []
    if src.mode not in ("pulsed", "cw"):
        problems.append(f"unknown mode {src.mode!r}")
    if src.statistics not in ("poisson", "fock", "thermal"):
        problems.append(f"unknown photon statistics {src.statistics!r}")
    if src.pulse_shape not in ("delta", "square", "exponential"):
        problems.append(f"unknown pulse shape {src.pulse_shape!r}")
    for name in ("mu", "cw_rate", "pulse_width", "pulse_tau", "pedestal_rate"):
        v = getattr(src, name)
        if not (math.isfinite(v) and v >= 0):
            problems.append(f"{name} must be finite and >= 0, got {v}")
    if src.mode == "pulsed" and not (src.rep_rate > 0 and math.isfinite(src.rep_rate)):
        problems.append(f"rep_rate must be positive, got {src.rep_rate}")
    if src.statistics == "fock" and src.mu != int(src.mu):
        problems.append(f"Fock photon number must be an integer, got {src.mu}")
    if problems:
        raise ValueError("; ".join(problems))
    return src


def source_from_dict(d: dict[str, Any]) -> LightSourceSpec:
    allowed = {f for f in LightSourceSpec.__dataclass_fields__}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown light-source fields: {sorted(unknown)}")
    return LightSourceSpec(**d)


@dataclass(frozen=True)
class SimulationRun:
    """One simulation.  Give ``pulses`` for pulsed sources or ``duration``
    (seconds) for CW ones.  Trigger ``k`` fires at ``k * period + trigger_delay``."""

    cfg: DetectorArrayConfig
    source: LightSourceSpec
    pulses: int = 0
    duration: float = 0.0
    seed: int = 0
    crosstalk: bool = True
    darks: bool = True
    recovery: bool = True
    jitter: bool = True
    crosstalk_generations: int = 1
    trigger_delay_ps: int = 1000


@dataclass(frozen=True)
class Arrivals:
    times: np.ndarray  # float ps
    pixels: np.ndarray  # int
    pulses: np.ndarray  # pulse index, -1 for CW photons


@dataclass(frozen=True)
class Truth:
    """Every candidate event of a run, in processing order."""

    times: np.ndarray  # int64 ps (tag time if detected)
    pixels: np.ndarray
    kind: np.ndarray  # 0 photon, 1 dark, 2 crosstalk
    detected: np.ndarray
    since_last: np.ndarray  # ps since previous click on the same pixel; inf if none
    parent: np.ndarray  # processing index of the parent click, -1 for primaries


@dataclass
class SimulationResult:
    stream: TimeTagStream
    truth: Truth | None = None
    stats: dict[str, int] = field(default_factory=dict)


# --- arrivals -----------------------------------------------------------


def _photon_numbers(src: LightSourceSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if src.statistics == "poisson":
        return rng.poisson(src.mu, n)
    if src.statistics == "fock":
        return np.full(n, int(src.mu), dtype=np.int64)
    if src.mu == 0:
        return np.zeros(n, dtype=np.int64)
    return rng.geometric(1.0 / (1.0 + src.mu), n) - 1


def _shape_offsets(src: LightSourceSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if src.pulse_shape == "delta":
        return np.zeros(n)
    if src.pulse_shape == "square":
        return rng.uniform(0.0, src.pulse_width * 1000.0, n)
    return rng.exponential(src.pulse_tau * 1000.0, n)


def _landing_pixels(weights, n: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(np.asarray(weights, dtype=float))
    idx = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    return np.minimum(idx, cum.size - 1)


def generate_arrivals(
    source: LightSourceSpec,
    weights,
    rng: np.random.Generator,
    *,
    n_pulses: int | None = None,
    first_pulse: int = 0,
    window: tuple[int, int] | None = None,
    trigger_delay_ps: int = 0,
) -> Arrivals:
    """Photon arrivals for ``n_pulses`` pulses starting at ``first_pulse``
    (pulsed) or for the time window ``[t0, t1)`` in ps (CW).

    Arrival times are absolute picoseconds; pixels are drawn i.i.d. from the
    illumination ``weights``.
    """
    if source.mode == "pulsed":
        if n_pulses is None:
            raise ValueError("pulsed sources need n_pulses")
        period = source.period_ps
        counts = _photon_numbers(source, n_pulses, rng)
        pulse = np.repeat(np.arange(first_pulse, first_pulse + n_pulses), counts)
        t = pulse * float(period) + trigger_delay_ps + _shape_offsets(source, pulse.size, rng)
        lo, hi = first_pulse * period, (first_pulse + n_pulses) * period
        if source.pedestal_rate > 0:
            k = rng.poisson(source.pedestal_rate * (hi - lo) * 1e-12)
            t = np.concatenate([t, rng.uniform(lo, hi, k)])
            pulse = np.concatenate([pulse, np.full(k, -1)])
    else:
        if window is None:
            raise ValueError("CW sources need a time window")
        lo, hi = window
        k = rng.poisson(source.cw_rate * (hi - lo) * 1e-12)
        t = np.sort(rng.uniform(lo, hi, k))
        pulse = np.full(k, -1)
    return Arrivals(times=t, pixels=_landing_pixels(weights, t.size, rng), pulses=pulse)


# --- candidate generation -----------------------------------------------


def _crosstalk_delays(cfg: DetectorArrayConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    xt = cfg.crosstalk
    lo = xt.delay_offset * 1000.0
    hi = lo + xt.delay_window * 1000.0
    if hi == lo:
        d = np.full(n, lo)
    elif xt.delay_distribution == "triangular":
        d = rng.triangular(lo, 0.5 * (lo + hi), hi, n)
    else:
        d = rng.uniform(lo, hi, n)
    return np.ceil(d).astype(np.int64)


def _unit_candidates(run: SimulationRun, unit: int) -> dict[str, np.ndarray]:
    cfg, src = run.cfg, run.source
    rng = substream(run.seed, unit)
    N = cfg.pixel_count
    if src.mode == "pulsed":
        first = unit * PULSES_PER_BLOCK
        n = min(PULSES_PER_BLOCK, run.pulses - first)
        arr = generate_arrivals(
            src, cfg.illumination_weights, rng,
            n_pulses=n, first_pulse=first, trigger_delay_ps=run.trigger_delay_ps,
        )
        lo, hi = first * src.period_ps, (first + n) * src.period_ps
    else:
        total = int(round(run.duration * 1e12))
        lo, hi = unit * CW_SLAB_PS, min((unit + 1) * CW_SLAB_PS, total)
        arr = generate_arrivals(src, cfg.illumination_weights, rng, window=(lo, hi))

    t = arr.times
    if run.jitter and cfg.jitter_fwhm > 0:
        t = t + rng.normal(0.0, cfg.jitter_fwhm / FWHM_PER_SIGMA, t.size)
    times = [np.rint(t).astype(np.int64)]
    pixels = [arr.pixels.astype(np.int64)]
    kinds = [np.full(t.size, PHOTON, np.int8)]

    if run.darks and cfg.dark_rate_per_pixel > 0:
        k = rng.poisson(cfg.dark_rate_per_pixel * N * (hi - lo) * 1e-12)
        times.append(rng.integers(lo, hi, k, endpoint=False) if k else np.zeros(0, np.int64))
        pixels.append(rng.integers(0, N, k))
        kinds.append(np.full(k, DARK, np.int8))

    times = np.concatenate(times)
    pixels = np.concatenate(pixels)
    kinds = np.concatenate(kinds)
    parent = np.full(times.size, -1, np.int64)

    if run.crosstalk and cfg.crosstalk.pair_probability:
        pairs = [(i, j, p) for (i, j), p in sorted(cfg.crosstalk.pair_probability.items()) if p > 0]
        gen_idx = np.arange(times.size)
        for _ in range(run.crosstalk_generations):
            new_t, new_pix, new_parent = [], [], []
            gen_pix = pixels[gen_idx]
            for i, j, p in pairs:
                src_idx = gen_idx[gen_pix == i]
                hit = src_idx[rng.random(src_idx.size) < p]
                if hit.size:
                    new_t.append(times[hit] + _crosstalk_delays(cfg, hit.size, rng))
                    new_pix.append(np.full(hit.size, j, np.int64))
                    new_parent.append(hit)
            if not new_t:
                break
            start = times.size
            times = np.concatenate([times] + new_t)
            pixels = np.concatenate([pixels] + new_pix)
            parent = np.concatenate([parent] + new_parent)
            kinds = np.concatenate([kinds, np.full(times.size - start, CROSSTALK, np.int8)])
            gen_idx = np.arange(start, times.size)

    eta = np.asarray(cfg.pixel_efficiencies, dtype=float)
    eff = np.where(kinds == PHOTON, eta[pixels], 1.0)
    u = rng.random(times.size)
    return {"times": times, "pixels": pixels, "kinds": kinds, "parent": parent, "eff": eff, "u": u}


@nb.njit(cache=True)
def _gate(times, pixels, parent, eff, u, n_pixels, step, dead, tau, recovery_on):
    n = times.size
    detected = np.zeros(n, np.bool_)
    since = np.full(n, np.inf)
    last = np.zeros(n_pixels, np.int64)
    seen = np.zeros(n_pixels, np.bool_)
    for k in range(n):
        p = parent[k]
        if p >= 0 and not detected[p]:
            since[k] = np.nan
            continue
        pix = pixels[k]
        r = 1.0
        if seen[pix]:
            dt = times[k] - last[pix]
            since[k] = dt
            if not recovery_on:
                r = 1.0 if dt > 0 else 0.0
            elif dt < dead:
                r = 0.0
            elif step or tau == 0.0:
                r = 1.0
            else:
                r = -np.expm1(-(dt - dead) / tau)
        if u[k] < eff[k] * r:
            detected[k] = True
            last[pix] = times[k]
            seen[pix] = True
    return detected, since


def _run_units(run: SimulationRun, threads: int | None) -> list[dict[str, np.ndarray]]:
    if run.source.mode == "pulsed":
        units = math.ceil(run.pulses / PULSES_PER_BLOCK)
    else:
        units = math.ceil(int(round(run.duration * 1e12)) / CW_SLAB_PS)
    if threads == 1 or units <= 1:
        return [_unit_candidates(run, u) for u in range(units)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda u: _unit_candidates(run, u), range(units)))


def _metadata(run: SimulationRun) -> dict[str, Any]:
    src = run.source
    meta: dict[str, Any] = {
        "generator": "pnrarray.simulate",
        "seed": int(run.seed),
        "source": asdict(src),
        "toggles": {
            "crosstalk": run.crosstalk,
            "darks": run.darks,
            "recovery": run.recovery,
            "jitter": run.jitter,
            "crosstalk_generations": run.crosstalk_generations,
        },
        "config": config_to_dict(run.cfg),
    }
    if src.mode == "pulsed":
        meta.update(
            trigger_period_ps=src.period_ps,
            trigger_delay_ps=int(run.trigger_delay_ps),
            pulse_count=int(run.pulses),
            duration_ps=int(run.pulses) * src.period_ps,
        )
    else:
        meta["duration_ps"] = int(round(run.duration * 1e12))
    return meta


def simulate(run: SimulationRun, keep_truth: bool = False, threads: int | None = None) -> SimulationResult:
    """Simulate ``run`` and return the tag stream, sorted by time.

    A photon on pixel ``i`` clicks with probability ``eta_i * r(dt)`` where
    ``dt`` is the time since that pixel's last click.  Each click may spawn a
    crosstalk candidate on every neighbour; candidates and dark counts are
    gated by the neighbour's recovery state only.  With ``recovery=False`` a
    pixel recovers instantly but still cannot click twice at the same
    picosecond.  Overload only ever shows up as missed clicks.
    """
    cfg = validate_config(run.cfg)
    src = validate_source(run.source)
    if run.pulses < 0 or run.duration < 0:
        raise ValueError("pulse count and duration must be non-negative")
    if src.mode == "pulsed" and run.duration and not run.pulses:
        raise ValueError("pulsed sources take a pulse count, not a duration")
    if src.mode == "cw" and run.pulses:
        raise ValueError("CW sources take a duration, not a pulse count")

    units = _run_units(run, threads)
    sizes = [u["times"].size for u in units]
    offsets = np.cumsum([0] + sizes[:-1]).astype(np.int64)
    cat = lambda key: np.concatenate([u[key] for u in units]) if units else np.zeros(0)
    times = cat("times").astype(np.int64)
    pixels = cat("pixels").astype(np.int64)
    kinds = cat("kinds").astype(np.int8)
    eff = cat("eff").astype(float)
    u = cat("u").astype(float)
    parent = (
        np.concatenate([np.where(x["parent"] >= 0, x["parent"] + off, -1) for x, off in zip(units, offsets)])
        if units
        else np.zeros(0, np.int64)
    )
    np.maximum(times, 0, out=times)

    # Parents strictly precede their crosstalk children: delays are >= 0 and ties sort primaries first.
    order = np.lexsort((kinds == CROSSTALK, times))
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    times, pixels, kinds, eff, u = times[order], pixels[order], kinds[order], eff[order], u[order]
    parent = parent[order]
    parent = np.where(parent >= 0, inv[np.maximum(parent, 0)], -1)

    rc = cfg.recovery
    detected, since = _gate(
        times, pixels, parent, eff, u, cfg.pixel_count,
        rc.form == "step", rc.dead_time * 1000.0, rc.tau * 1000.0, run.recovery,
    )
    stream = TimeTagStream(
        channels=pixels[detected],
        timestamps=times[detected],
        channel_count=cfg.pixel_count,
        metadata=_metadata(run),
    )
    stats = {
        "photons": int(np.sum(kinds == PHOTON)),
        "darks": int(np.sum(kinds == DARK)),
        "crosstalk_candidates": int(np.sum(kinds == CROSSTALK)),
        "photon_clicks": int(np.sum(detected & (kinds == PHOTON))),
        "dark_clicks": int(np.sum(detected & (kinds == DARK))),
        "crosstalk_clicks": int(np.sum(detected & (kinds == CROSSTALK))),
    }
    truth = None
    if keep_truth:
        truth = Truth(times=times, pixels=pixels, kind=kinds, detected=detected, since_last=since, parent=parent)
    return SimulationResult(stream=stream, truth=truth, stats=stats)
