"""Desk-scale lab for cross-modal weakly supervised segmentation.

Synthetic multi-view scenes, simulated 3D reconstruction with per-point
confidence, sparse annotations, dual student-teacher training with EMA,
and a bidirectional dual-confidence cross-modal consistency loss, plus
the experiment harness that verifies all of it.
"""

from cmc_forge.errors import ConfigError, ContractError, DomainError, NumericError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DomainError",
    "NumericError",
    "__version__",
]
