"""Graph U-Net policy/value networks with A2C training, driven by the
exploration simulator's wire protocol."""

__version__ = "0.1.0"

from .a2c import A2CLearner, TrainerConfig, Transition, n_step_returns
from .graphs import RunningNorm, WireGraph, normalized_adjacency
from .gunet import GraphUNet, PolicyNet, PolicyNetConfig, ValueNet
from .train import evaluate, load_checkpoint, save_checkpoint, train
