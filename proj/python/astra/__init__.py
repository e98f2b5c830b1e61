"""Python bindings for the astra C++ library."""

import json as _json

from ._core import (
    AstraError,
    bits_per_token,
    compression_ratio,
    kmeans,
    latency,
    partition_tokens,
    quantize,
    variance_reduction,
    w2_squared_isotropic,
)
from ._core import run as _run


def run(command, config, overrides=()):
    """Run a CLI subcommand with a config dict. Returns (exit_code, stdout, stderr)."""
    return _run(command, _json.dumps(config), list(overrides))


__all__ = [
    "AstraError",
    "bits_per_token",
    "compression_ratio",
    "kmeans",
    "latency",
    "partition_tokens",
    "quantize",
    "run",
    "variance_reduction",
    "w2_squared_isotropic",
]
