"""Class-conditional learned augmentation on a small numpy autodiff engine."""

from .diffaug import TransformKind, TransformSpec
from .head import AugMatrix
from .network import NetworkConfig
from .trainer import TrainConfig, train

__all__ = ["AugMatrix", "NetworkConfig", "TrainConfig", "TransformKind", "TransformSpec", "train"]
__version__ = "0.1.0"
