"""Single-volume 3D super-resolution from k-space degraded inputs, in plain numpy."""

from .kspace import DegradeConfig, degrade, make_training_pair
from .net import NetworkConfig, UNet3D, init_weights, load_weights, save_weights
from .train import TrainConfig, train
from .volume import Roi3D, Volume3D, read_volume, write_volume

__all__ = [
    "DegradeConfig", "NetworkConfig", "Roi3D", "TrainConfig", "UNet3D", "Volume3D",
    "degrade", "init_weights", "load_weights", "make_training_pair", "read_volume",
    "save_weights", "train", "write_volume",
]
