"""Efficiency versus detection rate under CW illumination, and the maximum
count rate (detection rate at which the SDE falls to half its maximum)."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .array_model import CrosstalkModel, DetectorArrayConfig
from .simulator import LightSourceSpec, SimulationRun, simulate

__all__ = [
    "RateCurve",
    "sde_vs_rate",
    "extract_mcr",
    "step_renewal_sde",
    "single_pixel_config",
    "point_seed",
]


@dataclass(frozen=True)
class RateCurve:
    incident_rate: np.ndarray  # photons/s
    detection_rate: np.ndarray  # clicks/s
    sde: np.ndarray
    sde_err: np.ndarray

    def to_csv(self) -> str:
        lines = ["rate,sde,sde_err,incident_rate"]
        for d, s, e, r in zip(self.detection_rate, self.sde, self.sde_err, self.incident_rate):
            lines.append(f"{d:.6e},{s:.6f},{e:.6f},{r:.6e}")
        return "\n".join(lines) + "\n"


def point_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(index),)).generate_state(1)[0])


def single_pixel_config(cfg: DetectorArrayConfig, pixel: int = 0) -> DetectorArrayConfig:
    """One pixel of ``cfg`` taking all the light, no crosstalk."""
    return DetectorArrayConfig(
        pixel_count=1,
        pixel_efficiencies=(cfg.pixel_efficiencies[pixel],),
        illumination_weights=(1.0,),
        recovery=cfg.recovery,
        jitter_fwhm=cfg.jitter_fwhm,
        dark_rate_per_pixel=cfg.dark_rate_per_pixel,
        crosstalk=CrosstalkModel(),
    )


def _point(cfg, rate, duration, seed, recovery):
    run = SimulationRun(
        cfg=cfg,
        source=LightSourceSpec(mode="cw", cw_rate=float(rate)),
        duration=duration,
        seed=seed,
        recovery=recovery,
    )
    res = simulate(run, threads=1)
    photons = max(res.stats["photons"], 1)
    clicks = len(res.stream)
    sde = clicks / photons
    return clicks / duration, sde, math.sqrt(max(sde * (1 - sde), 0.0) / photons)


def sde_vs_rate(
    cfg: DetectorArrayConfig,
    rates: Sequence[float],
    duration: float | None = None,
    seed: int = 0,
    photons_per_point: float = 2e5,
    threads: int | None = None,
    recovery: bool = True,
) -> RateCurve:
    """Average SDE per photon at each incident CW photon rate.

    SDE is total clicks over incident photons, with a binomial error bar.
    Each point simulates ``duration`` seconds, or by default enough time for
    ``photons_per_point`` incident photons.  Point ``i`` uses a seed derived
    from ``(seed, i)``.
    """
    rates = np.asarray(rates, dtype=float)
    if np.any(rates <= 0):
        raise ValueError("incident rates must be positive")
    durations = [duration if duration else photons_per_point / r for r in rates]
    args = [(cfg, r, d, point_seed(seed, i), recovery) for i, (r, d) in enumerate(zip(rates, durations))]
    if threads == 1:
        out = [_point(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda a: _point(*a), args))
    det, sde, err = (np.array(x) for x in zip(*out)) if out else (np.zeros(0),) * 3
    return RateCurve(incident_rate=rates, detection_rate=det, sde=sde, sde_err=err)


def extract_mcr(curve: RateCurve) -> float:
    """Detection rate where the SDE first drops to half its maximum,
    interpolating SDE linearly in log(detection rate)."""
    sde = np.asarray(curve.sde, dtype=float)
    rate = np.asarray(curve.detection_rate, dtype=float)
    if sde.size < 2:
        raise ValueError("need at least two points")
    i_max = int(np.argmax(sde))
    half = 0.5 * sde[i_max]
    below = np.flatnonzero(sde[i_max:] <= half)
    if below.size == 0:
        raise ValueError("curve never falls to 50% of its maximum SDE in the sampled range")
    i = i_max + int(below[0])
    if sde[i] == half:
        return float(rate[i])
    x0, x1 = math.log(rate[i - 1]), math.log(rate[i])
    y0, y1 = sde[i - 1], sde[i]
    return float(math.exp(x0 + (half - y0) * (x1 - x0) / (y1 - y0)))


def step_renewal_sde(eta: float, rate: float, dead_time_ns: float) -> float:
    """Exact SDE of one pixel with step recovery under Poisson light:
    ``eta / (1 + eta * rate * dead_time)``."""
    return eta / (1.0 + eta * rate * dead_time_ns * 1e-9)
