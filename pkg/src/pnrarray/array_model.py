"""Physical configuration of a multi-pixel detector array.

Holds the pixel efficiencies and illumination weights, the recovery curve
that gates each pixel after a click, the timing jitter, dark counts and the
thermal-crosstalk couplings between neighbouring pixels.  Everything here is
an immutable value object; :func:`validate_config` is the single place where
invariants are checked so that a caller gets every violation at once.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "RecoveryCurve",
    "CrosstalkModel",
    "DetectorArrayConfig",
    "validate_config",
    "recovery_fraction",
    "calibrate_recovery",
    "chain_adjacency",
    "paper_config",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
]

WEIGHT_TOL = 1e-12

# Defaults for the 14-pixel array.
PAPER_PIXELS = 14
PAPER_EFFICIENCY = 0.895
PAPER_RT90_NS = 6.0
PAPER_DEAD_TIME_NS = 3.0
PAPER_JITTER_FWHM_PS = 21.0
PAPER_TOTAL_DARK_CPS = 150.0
PAPER_PAIR_CROSSTALK = 1e-5


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants.

    ``problems`` lists every violation found, not just the first.
    """

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class RecoveryCurve:
    """Efficiency recovery after a click: zero during the dead time, then
    either a step back to 1 or an exponential approach with constant ``tau``."""

    dead_time: float = PAPER_DEAD_TIME_NS
    tau: float = (PAPER_RT90_NS - PAPER_DEAD_TIME_NS) / math.log(10.0)
    form: str = "exponential"

    @property
    def rt90(self) -> float:
        if self.form == "step":
            return self.dead_time
        return self.dead_time + self.tau * math.log(10.0)


def recovery_fraction(rc: RecoveryCurve, dt: float) -> float:
    """Relative efficiency ``r(dt)`` of a pixel ``dt`` ns after its last click."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    if dt < rc.dead_time:
        return 0.0
    if rc.form == "step":
        return 1.0
    if rc.tau == 0:
        return 1.0
    return -math.expm1(-(dt - rc.dead_time) / rc.tau)


def calibrate_recovery(t_dead: float, rt90: float) -> RecoveryCurve:
    """Exponential recovery curve with ``r(rt90) = 0.9`` exactly."""
    if not rt90 > t_dead:
        raise ValueError(
            f"invalid calibration: rt90 ({rt90} ns) must exceed the dead time ({t_dead} ns)"
        )
    if t_dead < 0:
        raise ValueError(f"invalid calibration: negative dead time {t_dead}")
    return RecoveryCurve(dead_time=t_dead, tau=(rt90 - t_dead) / math.log(10.0), form="exponential")


def chain_adjacency(n: int) -> tuple[tuple[int, int], ...]:
    """Nearest-neighbour pairs of ``n`` pixels numbered in spatial order."""
    return tuple((i, i + 1) for i in range(n - 1))


@dataclass(frozen=True)
class CrosstalkModel:
    """Thermal crosstalk between adjacent pixels.

    ``adjacency`` holds unordered neighbour pairs; ``pair_probability`` maps an
    ordered pair ``(i, j)`` to the probability that a click on ``i`` triggers
    a false click on ``j``.  Ordered pairs missing from the map have
    probability zero.
    """

    adjacency: tuple[tuple[int, int], ...] = ()
    pair_probability: dict[tuple[int, int], float] = field(default_factory=dict)
    delay_offset: float = 1.0
    delay_window: float = 4.0
    delay_distribution: str = "uniform"

    @classmethod
    def symmetric(
        cls, adjacency: Iterable[tuple[int, int]], p: float, **kwargs: Any
    ) -> "CrosstalkModel":
        adjacency = tuple((int(i), int(j)) for i, j in adjacency)
        probs = {}
        for i, j in adjacency:
            probs[(i, j)] = p
            probs[(j, i)] = p
        return cls(adjacency=adjacency, pair_probability=probs, **kwargs)

    def ordered_pairs(self) -> list[tuple[int, int]]:
        pairs = []
        for i, j in self.adjacency:
            pairs.extend([(i, j), (j, i)])
        return sorted(pairs)

    def probability(self, i: int, j: int) -> float:
        return float(self.pair_probability.get((i, j), 0.0))


@dataclass(frozen=True)
class DetectorArrayConfig:
    """Full model of the detector array.

    Times are in nanoseconds except ``jitter_fwhm`` (picoseconds); the dark
    rate is in counts per second per pixel.
    """

    pixel_count: int
    pixel_efficiencies: tuple[float, ...]
    illumination_weights: tuple[float, ...]
    recovery: RecoveryCurve = field(default_factory=RecoveryCurve)
    jitter_fwhm: float = PAPER_JITTER_FWHM_PS
    dark_rate_per_pixel: float = PAPER_TOTAL_DARK_CPS / PAPER_PIXELS
    crosstalk: CrosstalkModel = field(default_factory=CrosstalkModel)

    @classmethod
    def uniform(cls, n: int, eta: float, **kwargs: Any) -> "DetectorArrayConfig":
        kwargs.setdefault("dark_rate_per_pixel", PAPER_TOTAL_DARK_CPS / n)
        return cls(
            pixel_count=n,
            pixel_efficiencies=(float(eta),) * n,
            illumination_weights=(1.0 / n,) * n,
            **kwargs,
        )

    @property
    def array_efficiency(self) -> float:
        return float(np.dot(self.illumination_weights, self.pixel_efficiencies))

    def replace(self, **changes: Any) -> "DetectorArrayConfig":
        from dataclasses import replace

        return replace(self, **changes)


def paper_config() -> DetectorArrayConfig:
    """Uniform 14-pixel array at 89.5% SDE, RT90 = 6 ns, 21 ps jitter,
    150 cps total darks and 1e-5 crosstalk on each ordered neighbour pair."""
    return DetectorArrayConfig.uniform(
        PAPER_PIXELS,
        PAPER_EFFICIENCY,
        recovery=calibrate_recovery(PAPER_DEAD_TIME_NS, PAPER_RT90_NS),
        jitter_fwhm=PAPER_JITTER_FWHM_PS,
        crosstalk=CrosstalkModel.symmetric(chain_adjacency(PAPER_PIXELS), PAPER_PAIR_CROSSTALK),
    )


def _recovery_problems(rc: RecoveryCurve) -> list[str]:
    problems = []
    if rc.form not in ("step", "exponential"):
        problems.append(f"recovery form {rc.form!r} not one of step/exponential")
    if not (math.isfinite(rc.dead_time) and rc.dead_time >= 0):
        problems.append(f"recovery dead time out of range: {rc.dead_time}")
    if rc.form == "exponential" and not (math.isfinite(rc.tau) and rc.tau >= 0):
        problems.append(f"recovery tau out of range: {rc.tau}")
    return problems


def _crosstalk_problems(xt: CrosstalkModel, n: int) -> list[str]:
    problems = []
    adjacent = set()
    for pair in xt.adjacency:
        i, j = pair
        if not (0 <= i < n and 0 <= j < n) or i == j:
            problems.append(f"adjacency pair {pair} invalid for {n} pixels")
        adjacent.add((i, j))
        adjacent.add((j, i))
    for pair, p in xt.pair_probability.items():
        if pair not in adjacent and p != 0:
            problems.append(f"crosstalk probability set for non-adjacent pair {pair}")
        if not (0.0 <= p < 1.0):
            problems.append(f"crosstalk probability out of range for pair {pair}: {p}")
    if not (math.isfinite(xt.delay_offset) and xt.delay_offset >= 0):
        problems.append(f"crosstalk delay offset out of range: {xt.delay_offset}")
    if not (math.isfinite(xt.delay_window) and xt.delay_window >= 0):
        problems.append(f"crosstalk delay window out of range: {xt.delay_window}")
    if xt.delay_distribution not in ("uniform", "triangular"):
        problems.append(f"crosstalk delay distribution {xt.delay_distribution!r} unknown")
    return problems


def validate_config(cfg: DetectorArrayConfig) -> DetectorArrayConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise
    :class:`ConfigError` listing all violations."""
    problems: list[str] = []
    n = cfg.pixel_count
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigError([f"pixel count must be a positive integer, got {n!r}"])

    eta = np.asarray(cfg.pixel_efficiencies, dtype=float)
    w = np.asarray(cfg.illumination_weights, dtype=float)
    if eta.shape != (n,):
        problems.append(f"expected {n} pixel efficiencies, got {eta.size}")
    if w.shape != (n,):
        problems.append(f"expected {n} illumination weights, got {w.size}")
    for i, e in enumerate(eta):
        if not (0.0 <= e <= 1.0):
            problems.append(f"efficiency out of range for pixel {i}: {e}")
    for i, wi in enumerate(w):
        if not (0.0 <= wi <= 1.0):
            problems.append(f"illumination weight out of range for pixel {i}: {wi}")
    if w.size and abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
        problems.append(f"weights not normalized: sum = {math.fsum(w)!r}")
    if eta.shape == w.shape and float(np.dot(w, eta)) > 1.0 + WEIGHT_TOL:
        problems.append("array efficiency exceeds 1")

    problems.extend(_recovery_problems(cfg.recovery))
    if not (math.isfinite(cfg.jitter_fwhm) and cfg.jitter_fwhm >= 0):
        problems.append(f"jitter FWHM out of range: {cfg.jitter_fwhm}")
    if not (math.isfinite(cfg.dark_rate_per_pixel) and cfg.dark_rate_per_pixel >= 0):
        problems.append(f"dark rate out of range: {cfg.dark_rate_per_pixel}")
    problems.extend(_crosstalk_problems(cfg.crosstalk, n))

    if problems:
        raise ConfigError(problems)
    return cfg


# --- JSON ---------------------------------------------------------------


def config_to_dict(cfg: DetectorArrayConfig) -> dict[str, Any]:
    xt = cfg.crosstalk
    return {
        "pixel_count": cfg.pixel_count,
        "pixel_efficiencies": list(cfg.pixel_efficiencies),
        "illumination_weights": list(cfg.illumination_weights),
        "recovery": {
            "form": cfg.recovery.form,
            "dead_time_ns": cfg.recovery.dead_time,
            "tau_ns": cfg.recovery.tau,
        },
        "jitter_fwhm_ps": cfg.jitter_fwhm,
        "dark_rate_per_pixel_cps": cfg.dark_rate_per_pixel,
        "crosstalk": {
            "adjacency": [list(p) for p in xt.adjacency],
            "pair_probability": [[i, j, p] for (i, j), p in sorted(xt.pair_probability.items())],
            "delay_offset_ns": xt.delay_offset,
            "delay_window_ns": xt.delay_window,
            "delay_distribution": xt.delay_distribution,
        },
    }


def _recovery_from_dict(d: dict[str, Any]) -> RecoveryCurve:
    form = d.get("form", "exponential")
    dead = float(d.get("dead_time_ns", PAPER_DEAD_TIME_NS))
    if "rt90_ns" in d and "tau_ns" not in d and form == "exponential":
        return calibrate_recovery(dead, float(d["rt90_ns"]))
    return RecoveryCurve(dead_time=dead, tau=float(d.get("tau_ns", 0.0)), form=form)


def _crosstalk_from_dict(d: dict[str, Any], n: int) -> CrosstalkModel:
    adjacency = d.get("adjacency")
    adjacency = chain_adjacency(n) if adjacency is None else tuple(tuple(map(int, p)) for p in adjacency)
    common = dict(
        delay_offset=float(d.get("delay_offset_ns", 1.0)),
        delay_window=float(d.get("delay_window_ns", 4.0)),
        delay_distribution=d.get("delay_distribution", "uniform"),
    )
    if "symmetric_probability" in d:
        return CrosstalkModel.symmetric(adjacency, float(d["symmetric_probability"]), **common)
    probs = {(int(i), int(j)): float(p) for i, j, p in d.get("pair_probability", [])}
    return CrosstalkModel(adjacency=adjacency, pair_probability=probs, **common)


def config_from_dict(d: dict[str, Any]) -> DetectorArrayConfig:
    """Build a config from its JSON form.  Missing efficiency/weight lists
    fall back to a uniform split; the result is not validated."""
    n = int(d["pixel_count"])
    eta = d.get("pixel_efficiencies")
    if eta is None:
        eta = [float(d.get("efficiency", PAPER_EFFICIENCY))] * n
    w = d.get("illumination_weights") or [1.0 / n] * n
    return DetectorArrayConfig(
        pixel_count=n,
        pixel_efficiencies=tuple(float(x) for x in eta),
        illumination_weights=tuple(float(x) for x in w),
        recovery=_recovery_from_dict(d.get("recovery", {"rt90_ns": PAPER_RT90_NS})),
        jitter_fwhm=float(d.get("jitter_fwhm_ps", PAPER_JITTER_FWHM_PS)),
        dark_rate_per_pixel=float(d.get("dark_rate_per_pixel_cps", PAPER_TOTAL_DARK_CPS / n)),
        crosstalk=_crosstalk_from_dict(d.get("crosstalk", {}), n),
    )


def load_config(path: str | Path) -> DetectorArrayConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: DetectorArrayConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")
