"""Heralded single photons from a pair source: the signal-mode photon-number
distribution after conditioning on the herald detector, and its g2(0)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import binom

from .pmatrix import (
    PhotonNumberDistribution,
    ProbabilityMatrix,
    build_uniform_pmatrix,
    poisson_distribution,
    thermal_distribution,
)

__all__ = [
    "PairSourceSpec",
    "HeraldCondition",
    "HeraldResult",
    "heralded_number_distribution",
    "thinning_matrix",
    "g2_zero",
    "g2_reduction",
    "ReductionRow",
]

TAIL_LIMIT = 1e-10


@dataclass(frozen=True)
class PairSourceSpec:
    mean_pairs: float
    statistics: str = "thermal"
    herald_transmission: float = 0.95
    signal_transmission: float = 1.0

    def pair_distribution(self, M_max: int) -> PhotonNumberDistribution:
        if self.statistics == "thermal":
            return thermal_distribution(self.mean_pairs, M_max)
        if self.statistics == "poisson":
            return poisson_distribution(self.mean_pairs, M_max)
        raise ValueError(f"unknown pair statistics {self.statistics!r}")


@dataclass(frozen=True)
class HeraldCondition:
    """Herald on exactly ``n`` clicks, or on at least ``n`` clicks."""

    n: int = 1
    at_least: bool = False

    @classmethod
    def exactly(cls, n: int) -> "HeraldCondition":
        return cls(n, False)

    @classmethod
    def any_click(cls) -> "HeraldCondition":
        return cls(1, True)

    def mask(self, rows: int) -> np.ndarray:
        k = np.arange(rows)
        return k >= self.n if self.at_least else k == self.n


@dataclass(frozen=True)
class HeraldResult:
    signal: PhotonNumberDistribution
    pairs: np.ndarray  # heralded pair-number distribution
    herald_probability: float


def thinning_matrix(t: float, M_max: int) -> np.ndarray:
    """``B[k, m]``: probability that ``k`` of ``m`` photons survive transmission ``t``."""
    m = np.arange(M_max + 1)
    return binom.pmf(m[:, None], m[None, :], t)


def heralded_number_distribution(
    src: PairSourceSpec,
    detector: ProbabilityMatrix,
    condition: HeraldCondition,
    M_max: int = 60,
) -> HeraldResult:
    """Exact Bayes update over the pair number.

    Herald photons are first thinned by the herald transmission, then seen
    through the detector matrix; the heralded pair distribution is then
    thinned by the signal transmission.
    """
    for name in ("herald_transmission", "signal_transmission"):
        v = getattr(src, name)
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    if src.mean_pairs < 0:
        raise ValueError("mean pair number must be >= 0")
    if detector.truncation < M_max:
        raise ValueError(f"detector matrix truncated at {detector.truncation} < M_max={M_max}")
    pairs = src.pair_distribution(M_max)
    if pairs.tail_mass > TAIL_LIMIT:
        raise ValueError(f"M_max={M_max} leaves source tail mass {pairs.tail_mass:.2e} > {TAIL_LIMIT}")
    p_click = detector.entries[condition.mask(detector.pixel_count + 1), : M_max + 1].sum(axis=0)
    p_herald = thinning_matrix(src.herald_transmission, M_max).T @ p_click
    weight = pairs.probabilities * p_herald
    total = math.fsum(weight)
    if total <= 0:
        raise ValueError("herald condition has zero probability")
    heralded = weight / total
    signal = thinning_matrix(src.signal_transmission, M_max) @ heralded
    return HeraldResult(
        signal=PhotonNumberDistribution(signal / signal.sum()),
        pairs=heralded,
        herald_probability=total,
    )


def g2_zero(S: PhotonNumberDistribution | np.ndarray) -> float:
    """``sum m(m-1) S_m / (sum m S_m)^2``."""
    s = S.probabilities if isinstance(S, PhotonNumberDistribution) else np.asarray(S, dtype=float)
    m = np.arange(s.size)
    mean = float(np.dot(m, s))
    if mean <= 0:
        raise ValueError("g2(0) undefined for a distribution with zero mean")
    return float(np.dot(m * (m - 1), s)) / mean**2


@dataclass(frozen=True)
class ReductionRow:
    mean_pairs: float
    g2_bucket: float
    g2_pnr: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.g2_pnr / self.g2_bucket if self.g2_bucket > 0 else 0.0


def g2_reduction(
    mean_pairs: Sequence[float],
    pnr: ProbabilityMatrix,
    bucket_efficiency: float = 0.90,
    herald_transmission: float = 0.95,
    statistics: str = "thermal",
    pnr_condition: HeraldCondition = HeraldCondition.exactly(1),
    bucket: ProbabilityMatrix | None = None,
    M_max: int = 60,
) -> list[ReductionRow]:
    """Heralded g2(0) with the PNR detector (``pnr_condition``) versus a
    bucket detector (any click), over a grid of mean pair numbers."""
    if bucket is None:
        bucket = build_uniform_pmatrix(1, bucket_efficiency, M_max)
        bucket_condition = HeraldCondition.any_click()
    else:
        bucket_condition = pnr_condition
    rows = []
    for nbar in mean_pairs:
        src = PairSourceSpec(nbar, statistics, herald_transmission)
        g_b = g2_zero(heralded_number_distribution(src, bucket, bucket_condition, M_max).signal)
        g_p = g2_zero(heralded_number_distribution(src, pnr, pnr_condition, M_max).signal)
        rows.append(ReductionRow(float(nbar), g_b, g_p))
    return rows


def reduction_csv(rows: Sequence[ReductionRow]) -> str:
    lines = ["mean_pairs,g2_bucket,g2_pnr,reduction"]
    for r in rows:
        lines.append(f"{r.mean_pairs:.6g},{r.g2_bucket:.9g},{r.g2_pnr:.9g},{r.reduction:.9g}")
    return "\n".join(lines) + "\n"
