"""Swin-style SAR ship detector with a feature-enhanced FPN, built on a small numpy autodiff core."""
from .autodiff import ContractError, ShapeError, Tape, Tensor
from .backbone import ConfigError, SwinConfig
from .config import RunConfig
from .kernels import BACKEND
from .model import Detector
from .neck import NeckConfig
from .head import HeadConfig

__version__ = "0.1.0"
