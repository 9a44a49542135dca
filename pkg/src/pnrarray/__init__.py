"""Simulation and analysis toolkit for multi-pixel photon-number-resolving
single-photon detector arrays."""

__version__ = "0.1.0"

from .array_model import (
    ConfigError,
    CrosstalkModel,
    DetectorArrayConfig,
    RecoveryCurve,
    calibrate_recovery,
    paper_config,
    recovery_fraction,
    validate_config,
)
from .pmatrix import (
    ClickStatistics,
    PhotonNumberDistribution,
    ProbabilityMatrix,
    build_uniform_pmatrix,
    build_weighted_pmatrix,
    estimate_pmatrix_mc,
    fitch_element,
    forward_click_stats,
    poisson_distribution,
)
from .simulator import LightSourceSpec, SimulationRun, simulate
from .tagstream import TimeTagStream, read_tags, write_tags
