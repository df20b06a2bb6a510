"""Stacking ensembles of vision-language segmentation models with a UNet."""

from .adapters import ECA, BottleneckFusion, DataAdapter, eca_kernel_size
from .backbones import EncoderBundle, ToyEncoder, VlsmDecoder, load_backbone
from .data import DatasetManifest, Sample, iterate_batches, load_manifest, make_sample
from .ensemble import EnsembleConfig, EnsembleModel, build_model, load_checkpoint, save_checkpoint
from .losses import LossConfig, aggregate_prompt_averaged, combined_loss, dice_score
from .report import MetricsRecord, delta, evaluate, render_overlay, render_table
from .trainer import TrainConfig, train
from .unet import UNetD, UnetConfig

__version__ = "0.1.0"
