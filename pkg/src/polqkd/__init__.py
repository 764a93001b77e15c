"""Simulation toolkit for a chip-based polarization decoder in BB84 QKD.

Modules:
    polarization: Jones-vector states, elementary operators and fiber drift.
    chip: decoder transfer matrices, port probabilities, actuators.
    link: decoy source, drifting lossy channel and detector statistics.
    feedback: QBER-driven gradient-descent polarization compensation.
    security: one-decoy finite-key bounds and secret key rate.
    scenarios: declarative experiment runners behind the command line.
"""

__version__ = "0.1.0"

from .chip import (  # noqa: E402
    IDEAL_SETTINGS,
    PhaseSettings,
    detection_probabilities,
    povm_element,
    solve_compensation,
)
from .errors import DomainError, TallyParseError  # noqa: E402
from .feedback import FeedbackConfig, LinkMeter, run_feedback  # noqa: E402
from .link import (  # noqa: E402
    ChannelConfig,
    DetectorConfig,
    SourceConfig,
    TallyBlock,
    expected_tally,
    qber,
    sample_tally,
)
from .polarization import DriftParams, PathState, drifted_bb84, make_state  # noqa: E402
from .security import SecurityParams, decoy_bounds, key_rate  # noqa: E402

__all__ = [
    "ChannelConfig",
    "DetectorConfig",
    "DomainError",
    "DriftParams",
    "FeedbackConfig",
    "IDEAL_SETTINGS",
    "LinkMeter",
    "PathState",
    "PhaseSettings",
    "SecurityParams",
    "SourceConfig",
    "TallyBlock",
    "TallyParseError",
    "decoy_bounds",
    "detection_probabilities",
    "drifted_bb84",
    "expected_tally",
    "key_rate",
    "make_state",
    "povm_element",
    "qber",
    "run_feedback",
    "sample_tally",
    "solve_compensation",
]
