"""Recurrent winner-take-all video autoencoder with a NumPy autodiff engine."""
from .config import RunConfig
from .data import ImageDataset, VideoDataset, load_dataset, load_idx, save_dataset
from .model import ModelConfig, TwoStreamNet, forward_loss, recurrent_encode, stateless_encode
from .train import TrainConfig, finetune_supervised, load_checkpoint, save_checkpoint, train_unsupervised

__version__ = "0.1.0"
