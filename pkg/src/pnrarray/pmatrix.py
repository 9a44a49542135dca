"""Click-probability matrix P and the forward model Q = P S.

``P[n, m]`` is the probability that ``m`` photons incident on the array give
``n`` clicks.  For a uniform array the entries follow the classic
multiplexed-detector formula, which is evaluated here in exact integer
arithmetic.  Non-uniform arrays use an exponential-generating-function
recursion with only positive terms; a direct subset inclusion-exclusion and a
Monte Carlo estimator are provided as independent checks.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .array_model import DetectorArrayConfig
from .rng import substream

__all__ = [
    "ProbabilityMatrix",
    "PhotonNumberDistribution",
    "ClickStatistics",
    "fitch_element",
    "build_uniform_pmatrix",
    "build_weighted_pmatrix",
    "estimate_pmatrix_mc",
    "ideal_pmatrix",
    "forward_click_stats",
    "poisson_distribution",
    "thermal_distribution",
    "fock_distribution",
]

MC_CHUNK = 1 << 18
SUBSET_LIMIT = 20


@dataclass(frozen=True)
class ProbabilityMatrix:
    """Rows are click numbers ``0..N``, columns photon numbers ``0..M``."""

    entries: np.ndarray
    stderr: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def pixel_count(self) -> int:
        return self.entries.shape[0] - 1

    @property
    def truncation(self) -> int:
        return self.entries.shape[1] - 1

    def __getitem__(self, idx):
        return self.entries[idx]

    def column_sums(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.entries))

    # --- serialization ---

    def to_csv(self, decimals: int = 6) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["clicks/photons"] + list(range(self.truncation + 1)))
        for n, row in enumerate(self.entries):
            writer.writerow([n] + [f"{v:.{decimals}f}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ProbabilityMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        entries = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float)
        return cls(entries=entries)

    def to_json(self) -> str:
        doc = {
            "pixel_count": self.pixel_count,
            "truncation": self.truncation,
            "model": self.meta,
            "entries": self.entries.tolist(),
        }
        if self.stderr is not None:
            doc["stderr"] = self.stderr.tolist()
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ProbabilityMatrix":
        doc = json.loads(text)
        stderr = doc.get("stderr")
        return cls(
            entries=np.array(doc["entries"], dtype=float),
            stderr=None if stderr is None else np.array(stderr, dtype=float),
            meta=doc.get("model", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ProbabilityMatrix":
        text = Path(path).read_text()
        if str(path).endswith(".json"):
            return cls.from_json(text)
        return cls.from_csv(text)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class PhotonNumberDistribution:
    """Photon-number probabilities ``S[m]`` for ``m = 0..M``.

    ``tail_mass`` is the probability that was beyond the truncation before
    renormalization.
    """

    probabilities: np.ndarray
    tail_mass: float = 0.0

    @property
    def truncation(self) -> int:
        return self.probabilities.size - 1

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(self.probabilities.size), self.probabilities))


@dataclass(frozen=True)
class ClickStatistics:
    """Click-number distribution ``Q[n]``, optionally with the raw counts."""

    probabilities: np.ndarray
    counts: np.ndarray | None = None
    trials: int | None = None
    stderr: np.ndarray | None = None
    truncation_error: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(self.probabilities.size), self.probabilities))

    def to_json(self) -> str:
        doc: dict[str, Any] = {"probabilities": self.probabilities.tolist()}
        if self.counts is not None:
            doc["counts"] = [int(c) for c in self.counts]
        if self.trials is not None:
            doc["trials"] = int(self.trials)
        if self.stderr is not None:
            doc["stderr"] = self.stderr.tolist()
        doc["truncation_error"] = self.truncation_error
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ClickStatistics":
        doc = json.loads(text)
        counts = doc.get("counts")
        stderr = doc.get("stderr")
        return cls(
            probabilities=np.array(doc["probabilities"], dtype=float),
            counts=None if counts is None else np.array(counts, dtype=np.int64),
            trials=doc.get("trials"),
            stderr=None if stderr is None else np.array(stderr, dtype=float),
            truncation_error=float(doc.get("truncation_error", 0.0)),
        )

    def to_csv(self) -> str:
        lines = ["clicks,probability,stderr,count"]
        for n, q in enumerate(self.probabilities):
            se = "" if self.stderr is None else f"{self.stderr[n]:.9g}"
            c = "" if self.counts is None else str(int(self.counts[n]))
            lines.append(f"{n},{q:.9g},{se},{c}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ClickStatistics":
        rows = [r for r in csv.reader(io.StringIO(text)) if r][1:]
        probs = np.array([float(r[1]) for r in rows])
        counts = None
        if rows and len(rows[0]) > 3 and rows[0][3] != "":
            counts = np.array([int(r[3]) for r in rows], dtype=np.int64)
        return cls(
            probabilities=probs,
            counts=counts,
            trials=None if counts is None else int(counts.sum()),
        )


# --- uniform array ------------------------------------------------------


def _check_prob(name: str, p: float) -> None:
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


def fitch_element(N: int, eta: float, n: int, m: int) -> float:
    """Probability of ``n`` clicks from ``m`` photons on a uniform ``N``-pixel array.

    Uses ``C(N,n) sum_k (-1)^k C(n,k) (1 - eta + (n-k) eta / N)^m`` with
    ``eta`` taken as the exact rational value of the float, so the alternating
    sum is cancellation-free and the result is correctly rounded.
    """
    if N < 1:
        raise ValueError(f"pixel count must be >= 1, got {N}")
    if not 0 <= n <= N:
        raise ValueError(f"click number {n} outside 0..{N}")
    if m < 0:
        raise ValueError(f"photon number must be >= 0, got {m}")
    _check_prob("eta", eta)
    if n > m:
        return 0.0
    a, b = Fraction(eta).as_integer_ratio()
    # 1 - eta + j*eta/N == (N*b - N*a + j*a) / (N*b)
    base = N * b - N * a
    total = 0
    for k in range(n + 1):
        term = math.comb(n, k) * (base + (n - k) * a) ** m
        total += -term if k % 2 else term
    return math.comb(N, n) * total / (N * b) ** m


def build_uniform_pmatrix(N: int, eta: float, M_max: int) -> ProbabilityMatrix:
    if M_max < 0:
        raise ValueError(f"truncation must be >= 0, got {M_max}")
    entries = np.zeros((N + 1, M_max + 1))
    for m in range(M_max + 1):
        for n in range(min(m, N) + 1):
            entries[n, m] = fitch_element(N, eta, n, m)
    return ProbabilityMatrix(entries, meta={"kind": "uniform", "pixel_count": N, "efficiency": eta})


def ideal_pmatrix(M_max: int, N: int | None = None) -> ProbabilityMatrix:
    """Perfect photon-number resolution up to ``N`` clicks (default ``M_max``);
    more than ``N`` photons saturate at ``N`` clicks."""
    N = M_max if N is None else N
    entries = np.zeros((N + 1, M_max + 1))
    for m in range(M_max + 1):
        entries[min(m, N), m] = 1.0
    return ProbabilityMatrix(entries, meta={"kind": "ideal", "pixel_count": N})


# --- non-uniform array --------------------------------------------------


def _click_weights(weights: Sequence[float], efficiencies: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    eta = np.asarray(efficiencies, dtype=float)
    if w.shape != eta.shape or w.ndim != 1:
        raise ValueError("weights and efficiencies must be 1-D arrays of equal length")
    if np.any(w < 0) or np.any(eta < 0) or np.any(eta > 1):
        raise ValueError("weights must be >= 0 and efficiencies in [0, 1]")
    if abs(math.fsum(w) - 1.0) > 1e-12:
        raise ValueError(f"weights not normalized: sum = {math.fsum(w)!r}")
    return w * eta


def _weighted_egf(q: np.ndarray, M_max: int) -> np.ndarray:
    # P(n|m) = m! [z^m] exp(q0 z) e_n(exp(q_i z) - 1); every coefficient is >= 0.
    N = q.size
    q0 = max(0.0, 1.0 - math.fsum(q))
    k = np.arange(M_max + 1)
    log_fact = np.array([math.lgamma(i + 1) for i in k])
    E = np.zeros((N + 1, M_max + 1))
    E[0, 0] = 1.0
    for i, qi in enumerate(q):
        f = np.zeros(M_max + 1)
        if qi > 0:
            f[1:] = np.exp(k[1:] * math.log(qi) - log_fact[1:])
        for n in range(i + 1, 0, -1):
            E[n] += np.convolve(E[n - 1], f)[: M_max + 1]
    g = np.zeros(M_max + 1)
    g[0] = 1.0
    if q0 > 0:
        g[1:] = np.exp(k[1:] * math.log(q0) - log_fact[1:])
    out = np.empty_like(E)
    for n in range(N + 1):
        out[n] = np.convolve(E[n], g)[: M_max + 1]
    return out * np.exp(log_fact)[None, :]


def _weighted_subsets(q: np.ndarray, M_max: int) -> np.ndarray:
    # P(n|m) = sum_T (-1)^(n-|T|) C(N-|T|, n-|T|) (1 - Q + q_T)^m over subsets T.
    N = q.size
    Q = math.fsum(q)
    masks = np.arange(1 << N, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(N)) & 1
    size = bits.sum(axis=1)
    base = np.clip(1.0 - Q + bits @ q, 0.0, 1.0)
    out = np.zeros((N + 1, M_max + 1))
    for m in range(M_max + 1):
        powers = base**m
        by_size = np.bincount(size, weights=powers, minlength=N + 1)
        for n in range(min(m, N) + 1):
            out[n, m] = math.fsum(
                (-1) ** (n - t) * math.comb(N - t, n - t) * by_size[t] for t in range(n + 1)
            )
    return out


def build_weighted_pmatrix(
    weights: Sequence[float],
    efficiencies: Sequence[float],
    M_max: int,
    method: str = "egf",
    subset_limit: int = SUBSET_LIMIT,
) -> ProbabilityMatrix:
    """P matrix for pixels with landing weights ``w_i`` and efficiencies ``eta_i``.

    ``method="egf"`` (default) is a positive-term recursion, O(N^2 M^2).
    ``method="subsets"`` is direct inclusion-exclusion over all 2^N pixel
    subsets and refuses ``N > subset_limit``.
    """
    q = _click_weights(weights, efficiencies)
    if M_max < 0:
        raise ValueError(f"truncation must be >= 0, got {M_max}")
    if method == "egf":
        entries = _weighted_egf(q, M_max)
    elif method == "subsets":
        if q.size > subset_limit:
            raise ValueError(
                f"{q.size} pixels exceeds the subset-enumeration limit of {subset_limit}"
            )
        entries = _weighted_subsets(q, M_max)
    else:
        raise ValueError(f"unknown method {method!r}")
    N = q.size
    for m in range(min(M_max, N - 1) + 1):
        entries[m + 1 :, m] = 0.0
    entries[0, 0] = 1.0
    return ProbabilityMatrix(
        entries,
        meta={
            "kind": "weighted",
            "pixel_count": N,
            "weights": list(map(float, weights)),
            "efficiencies": list(map(float, efficiencies)),
        },
    )


def estimate_pmatrix_mc(
    cfg: DetectorArrayConfig, M_max: int, trials: int, seed: int
) -> ProbabilityMatrix:
    """Monte Carlo estimate of P: ``trials`` pulses of exactly ``m`` photons
    for each ``m``, counting distinct clicked pixels.  No recovery, crosstalk
    or darks.  Deterministic for a given seed."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    N = cfg.pixel_count
    if N > 63:
        raise ValueError("Monte Carlo estimator supports at most 63 pixels")
    q = _click_weights(cfg.illumination_weights, cfg.pixel_efficiencies)
    cum = np.cumsum(q)
    bit = np.append(np.left_shift(np.uint64(1), np.arange(N, dtype=np.uint64)), np.uint64(0))
    hist = np.zeros((N + 1, M_max + 1), dtype=np.int64)
    hist[0, 0] = trials
    for m in range(1, M_max + 1):
        for c, start in enumerate(range(0, trials, MC_CHUNK)):
            size = min(MC_CHUNK, trials - start)
            rng = substream(seed, m, c)
            u = rng.random((size, m))
            idx = np.searchsorted(cum, u, side="right")
            masks = np.bitwise_or.reduce(bit[idx], axis=1)
            hist[:, m] += np.bincount(np.bitwise_count(masks), minlength=N + 1)
    p = hist / trials
    return ProbabilityMatrix(
        p,
        stderr=np.sqrt(p * (1 - p) / trials),
        meta={"kind": "monte-carlo", "pixel_count": N, "trials": trials, "seed": seed},
    )


# --- forward model ------------------------------------------------------


def forward_click_stats(P: ProbabilityMatrix, S: PhotonNumberDistribution) -> ClickStatistics:
    """``Q_n = sum_m P_nm S_m``; the truncation error of ``S`` is carried along."""
    s = np.asarray(S.probabilities, dtype=float)
    if s.size > P.truncation + 1:
        raise ValueError(
            f"dimension mismatch: distribution truncated at {s.size - 1} photons, "
            f"matrix only at {P.truncation}"
        )
    q = P.entries[:, : s.size] @ s
    return ClickStatistics(probabilities=q, truncation_error=float(S.tail_mass))


def _normalized(pmf: np.ndarray) -> PhotonNumberDistribution:
    total = math.fsum(pmf)
    return PhotonNumberDistribution(pmf / total, tail_mass=max(0.0, 1.0 - total))


def poisson_distribution(mu: float, M_max: int) -> PhotonNumberDistribution:
    if mu < 0:
        raise ValueError(f"mean photon number must be >= 0, got {mu}")
    m = np.arange(M_max + 1)
    if mu == 0:
        pmf = (m == 0).astype(float)
    else:
        pmf = np.exp(m * math.log(mu) - mu - np.array([math.lgamma(k + 1) for k in m]))
    return _normalized(pmf)


def thermal_distribution(nbar: float, M_max: int) -> PhotonNumberDistribution:
    """Single-mode thermal (geometric) statistics with mean ``nbar``."""
    if nbar < 0:
        raise ValueError(f"mean photon number must be >= 0, got {nbar}")
    m = np.arange(M_max + 1)
    if nbar == 0:
        pmf = (m == 0).astype(float)
    else:
        x = nbar / (1 + nbar)
        pmf = (1 - x) * x**m
    return _normalized(pmf)


def fock_distribution(n: int, M_max: int) -> PhotonNumberDistribution:
    if not 0 <= n <= M_max:
        raise ValueError(f"Fock number {n} outside 0..{M_max}")
    pmf = np.zeros(M_max + 1)
    pmf[n] = 1.0
    return PhotonNumberDistribution(pmf)
