"""Exact event-based gradients for recurrent networks of leaky integrate-and-fire neurons.

Submodules are imported lazily so that the command line can fix BLAS thread
counts before numpy loads.
"""
from importlib import import_module
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

_EXPORTS = {
    "ConfigError": "errors", "DatasetParseError": "errors", "SimulationError": "errors",
    "SpikeBufferOverflow": "errors", "NetworkParams": "network", "Trial": "network",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(name)
