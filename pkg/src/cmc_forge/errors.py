"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
OSError -> 4. Domain and contract errors indicate misuse of the in-process
API and are not expected to escape a correctly configured run.
"""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent configuration."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain (e.g. depth <= 0)."""


class ContractError(ValueError):
    """Caller violated an API contract (shape mismatch, bad label id, ...)."""


class NumericError(RuntimeError):
    """Non-finite value encountered where the run cannot continue."""
