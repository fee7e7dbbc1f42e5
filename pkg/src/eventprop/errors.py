"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Inconsistent or incomplete configuration."""


class SimulationError(RuntimeError):
    """Numerical fault during a forward or backward pass."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SpikeBufferOverflow(SimulationError):
    def __init__(self, neuron, cap, step=None):
        super().__init__(f"neuron {neuron} exceeded the spike buffer cap of {cap}", step)
        self.neuron = neuron
        self.cap = cap


class DatasetParseError(ValueError):
    def __init__(self, message, lineno):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
