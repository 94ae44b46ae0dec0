"""Simulation of memristive crossbar computing with variable-precision bit slicing."""
from .crossbar import CrossbarConfig
from .device import DeviceModel
from .dpe import EngineConfig, MatmulReport, dot, matmul, program_weights, relative_error
from .slicing import SliceScheme, parse_scheme

__version__ = "0.1.0"

__all__ = [
    "CrossbarConfig", "DeviceModel", "EngineConfig", "MatmulReport", "SliceScheme",
    "dot", "matmul", "parse_scheme", "program_weights", "relative_error", "__version__",
]
