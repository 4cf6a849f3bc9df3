"""Exception types shared across the pipeline.

The CLI maps these onto its exit-code contract: usage problems exit 1,
data problems exit 2, training divergence exits 3.
"""


class DataError(Exception):
    """Unreadable, inconsistent, or missing input data."""


class ConfigError(ValueError):
    """A configuration value is invalid or incompatible with the inputs."""


class TopologyError(ValueError):
    """A requested network node does not exist in the configured topology."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss component."""
