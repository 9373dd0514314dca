"""Precision-parametric training of physics-informed networks and DeepONets.

Binary16 arithmetic is emulated in software so that pure half, mixed and
single precision training can be compared on a CPU.
"""

from .autodiff import B16, B32, B64, ByteLedger, Format, ParameterStore, Tape, Tensor
from .fp16 import HalfValue, round_to_half

__version__ = "0.1.0"

__all__ = [
    "B16",
    "B32",
    "B64",
    "ByteLedger",
    "Format",
    "HalfValue",
    "ParameterStore",
    "Tape",
    "Tensor",
    "round_to_half",
]
