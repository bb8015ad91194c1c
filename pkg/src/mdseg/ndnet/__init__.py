"""Dense-tensor primitives with reverse-mode gradients and a small 3-D U-Net."""

from . import ops
from .tape import NonFiniteError, Tape, TapeError
from .unet import (BACKBONE, HEAD, PAPER_PATCH_SHAPE, NetConfig, Network, Parameter,
                   backward, build_unet, forward, head_parameters)

__all__ = [
    "ops", "Tape", "TapeError", "NonFiniteError", "NetConfig", "Network", "Parameter",
    "BACKBONE", "HEAD", "PAPER_PATCH_SHAPE", "build_unet", "forward", "backward",
    "head_parameters",
]
