"""Identity-aware sports video captioning, desk scale.

Player identification, bidirectional video/player feature interaction,
learned visual context, multimodal prompt decoding, and the full caption
metric suite, on a self-contained float64 autodiff core.
"""

from .config import HyperConfig, RunConfig
from .errors import PlayercapError
from .tensor import Tensor, backward, no_grad

__all__ = [
    "HyperConfig",
    "PlayercapError",
    "RunConfig",
    "Tensor",
    "backward",
    "no_grad",
]

__version__ = "0.1.0"
