import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import occupancy_dp
from pnrarray.heralding import (
    HeraldCondition,
    PairSourceSpec,
    g2_reduction,
    g2_zero,
    heralded_number_distribution,
    reduction_csv,
    thinning_matrix,
)
from pnrarray.pmatrix import (
    ProbabilityMatrix,
    build_uniform_pmatrix,
    fock_distribution,
    ideal_pmatrix,
    poisson_distribution,
    thermal_distribution,
)

M = 60


@pytest.fixture(scope="module")
def pnr():
    return build_uniform_pmatrix(14, 0.895, M)


def direct_heralded_g2(nbar, P, clicks_ok, t_h):
    """Loop-level oracle: thermal pairs, binomial herald loss, detector matrix P."""
    w = []
    for m in range(M + 1):
        prior = nbar**m / (1 + nbar) ** (m + 1)
        herald = sum(
            math.comb(m, k) * t_h**k * (1 - t_h) ** (m - k) * sum(P[n][k] for n in clicks_ok)
            for k in range(m + 1)
        )
        w.append(prior * herald)
    w = np.array(w) / sum(w)
    m = np.arange(M + 1)
    return float(np.dot(m * (m - 1), w) / np.dot(m, w) ** 2)


def test_regression_point_against_loop_oracle(pnr):
    row = g2_reduction([0.2], pnr)[0]
    bucket = occupancy_dp(1, 0.9, M)
    pnr_dp = occupancy_dp(14, 0.895, M)
    assert row.g2_bucket == pytest.approx(direct_heralded_g2(0.2, bucket, [1], 0.95), rel=1e-10)
    assert row.g2_pnr == pytest.approx(direct_heralded_g2(0.2, pnr_dp, [1], 0.95), rel=1e-10)
    assert row.g2_pnr < row.g2_bucket
    assert row.g2_bucket == pytest.approx(0.3604300631304045, rel=1e-9)
    assert row.g2_pnr == pytest.approx(0.1150269655445195, rel=1e-9)


@pytest.mark.parametrize(
    "dist, expected",
    [
        (fock_distribution(1, 5), 0.0),
        (poisson_distribution(0.3, 60), 1.0),
        (poisson_distribution(3.0, 60), 1.0),
        (thermal_distribution(0.4, 200), 2.0),
    ],
)
def test_g2_reference_states(dist, expected):
    assert g2_zero(dist) == pytest.approx(expected, abs=1e-9)


def test_g2_zero_mean_rejected():
    with pytest.raises(ValueError):
        g2_zero(fock_distribution(0, 3))


def test_perfect_heralding_gives_single_photon():
    src = PairSourceSpec(1e-6, herald_transmission=1.0, signal_transmission=1.0)
    res = heralded_number_distribution(src, ideal_pmatrix(M), HeraldCondition.exactly(1), M)
    assert res.signal.probabilities[1] == pytest.approx(1.0, abs=1e-12)
    assert res.herald_probability == pytest.approx(1e-6, rel=1e-5)


def test_pnr_never_worse_than_bucket_across_grid(pnr):
    for row in g2_reduction(np.linspace(0.01, 1.0, 50), pnr):
        assert row.g2_pnr <= row.g2_bucket


@given(st.floats(0.01, 1.0), st.floats(0.05, 1.0))
@settings(max_examples=30, deadline=None)
def test_g2_invariant_under_signal_loss(nbar, t_s):
    P = build_uniform_pmatrix(14, 0.895, M)
    cond = HeraldCondition.exactly(1)
    full = heralded_number_distribution(PairSourceSpec(nbar), P, cond, M)
    lossy = heralded_number_distribution(PairSourceSpec(nbar, signal_transmission=t_s), P, cond, M)
    assert g2_zero(lossy.signal) == pytest.approx(g2_zero(full.signal), abs=1e-9)
    assert abs(lossy.signal.probabilities.sum() - 1) <= 1e-10
    assert abs(full.pairs.sum() - 1) <= 1e-10


def test_identical_detectors_give_no_reduction(pnr):
    rows = g2_reduction([0.1, 0.5], pnr, bucket=pnr)
    assert all(r.reduction == 0.0 for r in rows)


def test_ideal_limit_reduction_tends_to_one():
    rows = g2_reduction([1e-4], ideal_pmatrix(M), herald_transmission=1.0)
    assert rows[0].reduction > 0.999


def test_thinning_matrix_columns_stochastic():
    B = thinning_matrix(0.37, 30)
    assert np.allclose(B.sum(axis=0), 1.0, atol=1e-12)
    assert np.array_equal(thinning_matrix(1.0, 5), np.eye(6))


def test_error_cases(pnr):
    with pytest.raises(ValueError, match="tail mass"):
        heralded_number_distribution(PairSourceSpec(5.0), pnr, HeraldCondition.exactly(1), M)
    with pytest.raises(ValueError, match="zero probability"):
        heralded_number_distribution(
            PairSourceSpec(0.1, herald_transmission=0.0), pnr, HeraldCondition.exactly(1), M
        )
    with pytest.raises(ValueError):
        heralded_number_distribution(PairSourceSpec(0.1, herald_transmission=1.5), pnr, HeraldCondition(), M)
    short = ProbabilityMatrix(pnr.entries[:, :11])
    with pytest.raises(ValueError, match="truncated"):
        heralded_number_distribution(PairSourceSpec(0.1), short, HeraldCondition(), M)


def test_reduction_csv(pnr):
    text = reduction_csv(g2_reduction([0.1, 0.2], pnr))
    lines = text.splitlines()
    assert lines[0] == "mean_pairs,g2_bucket,g2_pnr,reduction"
    assert len(lines) == 3
