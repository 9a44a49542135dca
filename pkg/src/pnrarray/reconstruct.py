"""Inverting click statistics into photon statistics.

Two routes: a maximum-likelihood fit of the mean photon number of Poissonian
light, and a nonparametric least-squares reconstruction of the full
photon-number distribution on the probability simplex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pmatrix import ClickStatistics, PhotonNumberDistribution, ProbabilityMatrix

__all__ = [
    "FitResult",
    "ReconstructionResult",
    "poisson_log_likelihood",
    "fit_poisson_mu",
    "reconstruct_distribution",
    "n_photon_fidelity",
]

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitResult:
    mu: float
    stderr: float
    chi2: float
    dof: int
    log_likelihood: float
    iterations: int


def _click_counts(Q: ClickStatistics, n_rows: int) -> tuple[np.ndarray, float | None]:
    if Q.counts is not None:
        c = np.asarray(Q.counts, dtype=float)
        trials = float(c.sum())
    else:
        trials = None if Q.trials is None else float(Q.trials)
        c = np.asarray(Q.probabilities, dtype=float) * (trials or 1.0)
    if c.size > n_rows:
        # More clicks than pixels only comes from repeat clicks or noise; fold into the top bin.
        c = np.concatenate([c[: n_rows - 1], [c[n_rows - 1 :].sum()]])
    elif c.size < n_rows:
        c = np.pad(c, (0, n_rows - c.size))
    return c, trials


def _poisson_terms(mu: float, M: int) -> tuple[np.ndarray, np.ndarray]:
    m = np.arange(M + 1)
    logfact = np.array([math.lgamma(k + 1) for k in m])
    pmf = np.exp(m * math.log(mu) - mu - logfact)
    return m, pmf


def _model(P: np.ndarray, mu: float, order: int = 0):
    m, pmf = _poisson_terms(mu, P.shape[1] - 1)
    q = P @ pmf
    if order == 0:
        return q
    a = m / mu - 1.0
    dq = P @ (pmf * a)
    if order == 1:
        return q, dq
    d2q = P @ (pmf * (a * a - m / mu**2))
    return q, dq, d2q


def poisson_log_likelihood(c: np.ndarray, P: ProbabilityMatrix, mu: float, order: int = 0):
    """Multinomial log-likelihood of click counts ``c`` under Poisson(mu)
    light, and optionally its first and second derivatives in ``mu``."""
    parts = _model(P.entries, mu, max(order, 1) if order else 0)
    q = parts if order == 0 else parts[0]
    mask = c > 0
    with np.errstate(divide="ignore"):
        ll = float(np.sum(c[mask] * np.log(q[mask])))
    if order == 0:
        return ll
    q, dq = parts[0], parts[1]
    d1 = float(np.sum(c[mask] * dq[mask] / q[mask]))
    if order == 1:
        return ll, d1
    _, _, d2q = _model(P.entries, mu, 2)
    r = dq[mask] / q[mask]
    d2 = float(np.sum(c[mask] * (d2q[mask] / q[mask] - r * r)))
    return ll, d1, d2


def fit_poisson_mu(
    Q: ClickStatistics,
    P: ProbabilityMatrix,
    tol: float = 1e-12,
    max_iter: int = 500,
) -> FitResult:
    """Maximum-likelihood mean photon number of Poissonian light.

    Golden-section search on the log-likelihood narrows the bracket, then
    bisection on its derivative pins the root.  The standard error comes from
    the observed Fisher information and needs raw counts (or ``trials``).
    """
    N = P.pixel_count
    c, trials = _click_counts(Q, N + 1)
    total = c.sum()
    if total <= 0:
        raise ValueError("click statistics are empty")
    if np.all(c[1:] == 0):
        return FitResult(0.0, math.nan, 0.0, N - 1, 0.0, 0)

    mean_clicks = float(np.dot(np.arange(N + 1), c) / total)
    eff = 1.0 - float(P.entries[0, 1]) if P.truncation >= 1 else 1.0
    lo, hi = 1e-6, max(4.0 * mean_clicks / max(eff, 1e-12), 1e-3)
    d_hi = poisson_log_likelihood(c, P, hi, order=1)[1]
    while d_hi > 0:
        hi *= 2.0
        if hi > P.truncation:
            raise ConvergenceError("likelihood still rising at the photon-number truncation")
        d_hi = poisson_log_likelihood(c, P, hi, order=1)[1]

    it = 0
    a, b = lo, hi
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1 = poisson_log_likelihood(c, P, x1)
    f2 = poisson_log_likelihood(c, P, x2)
    while b - a > 1e-3 * max(1.0, a) and it < max_iter:
        it += 1
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = poisson_log_likelihood(c, P, x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = poisson_log_likelihood(c, P, x1)

    deriv = lambda x: poisson_log_likelihood(c, P, x, order=1)[1]
    # Widen to a sign change of the derivative around the golden-section bracket.
    while deriv(a) < 0 and a > lo:
        a = max(lo, a - (b - a))
    while deriv(b) > 0 and b < hi:
        b = min(hi, b + (b - a))
    if deriv(a) <= 0:
        mu = a
    else:
        while b - a > tol * max(1.0, a) and it < max_iter:
            it += 1
            mid = 0.5 * (a + b)
            if deriv(mid) > 0:
                a = mid
            else:
                b = mid
        if it >= max_iter:
            raise ConvergenceError(f"no convergence after {max_iter} iterations")
        mu = 0.5 * (a + b)

    ll, _, d2 = poisson_log_likelihood(c, P, mu, order=2)
    stderr = math.sqrt(-1.0 / d2) if trials and d2 < 0 else math.nan
    q = _model(P.entries, mu)
    expected = q * total
    used = expected > 0
    chi2 = float(np.sum((c[used] - expected[used]) ** 2 / expected[used]))
    dof = int(np.count_nonzero(used)) - 2
    return FitResult(mu=mu, stderr=stderr, chi2=chi2, dof=dof, log_likelihood=ll, iterations=it)


@dataclass(frozen=True)
class ReconstructionResult:
    distribution: PhotonNumberDistribution
    residual: float
    iterations: int
    condition_number: float
    converged: bool
    history: np.ndarray | None = None
    simplex_error: float = 0.0  # worst |sum S - 1| or negativity seen over all iterations


def reconstruct_distribution(
    Q: ClickStatistics,
    P: ProbabilityMatrix,
    M_max: int | None = None,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    keep_history: bool = False,
) -> ReconstructionResult:
    """Photon-number distribution ``S`` on the simplex minimizing ``||Q - P S||^2``.

    On the simplex the objective equals ``const - S'HS`` for the symmetric
    matrix ``H = P'Q 1' + 1 Q'P - P'P + C 11'``, with ``C`` chosen so that
    ``H >= 0`` entrywise.  The multiplicative update
    ``S_m <- S_m (HS)_m / S'HS`` stays on the simplex and never decreases
    ``S'HS``, hence never increases the least-squares objective.  Starts from
    the uniform distribution and stops when one step improves the objective
    by less than ``tol``.
    """
    N = P.pixel_count
    M = 2 * N if M_max is None else M_max
    if M > P.truncation:
        raise ValueError(f"dimension mismatch: M_max={M} exceeds matrix truncation {P.truncation}")
    A = P.entries[:, : M + 1]
    q = np.asarray(Q.probabilities, dtype=float)
    if q.size > N + 1:
        q = np.concatenate([q[:N], [q[N:].sum()]])
    elif q.size < N + 1:
        q = np.pad(q, (0, N + 1 - q.size))

    PtQ = A.T @ q
    G = A.T @ A
    H = PtQ[:, None] + PtQ[None, :] - G
    C = max(0.0, -float(H.min()))
    H = H + C

    s = np.full(M + 1, 1.0 / (M + 1))
    obj = lambda s: float(np.sum((q - A @ s) ** 2))
    f = obj(s)
    history = [f] if keep_history else None
    converged = False
    worst = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        Hs = H @ s
        denom = float(s @ Hs)
        if denom <= 0:
            break
        s = s * Hs / denom
        s /= s.sum()
        worst = max(worst, abs(math.fsum(s) - 1.0), -float(s.min()))
        f_new = obj(s)
        if keep_history:
            history.append(f_new)
        done = f - f_new < tol
        f = f_new
        if done:
            converged = True
            break
    return ReconstructionResult(
        distribution=PhotonNumberDistribution(s),
        residual=math.sqrt(f),
        iterations=it,
        condition_number=float(np.linalg.cond(A)),
        converged=converged,
        history=None if history is None else np.array(history),
        simplex_error=worst,
    )


def n_photon_fidelity(P: ProbabilityMatrix, n: int) -> float:
    """Probability that an ``n``-photon input gives exactly ``n`` clicks."""
    if not 0 <= n <= min(P.pixel_count, P.truncation):
        raise ValueError(f"n={n} outside 0..{min(P.pixel_count, P.truncation)}")
    return float(P.entries[n, n])
