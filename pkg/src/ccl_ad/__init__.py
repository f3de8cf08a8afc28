"""Class-aware contrastive learning for multi-class unsupervised anomaly detection."""

from .backbone import ForwardOutput, ModelConfig, ReconstructionModel
from .data import ContrastiveBatch, DatasetIndex, ImageSample, sample_batch, scan_dataset
from .losses import FULL, LossConfig, global_cl_loss, kd_loss, local_cl_loss, total_loss
from .metrics import MetricsReport, aupro, auroc, evaluate, pixel_auroc, v_measure
from .synthetic import generate_synthetic_dataset
from .trainer import TrainConfig, load_checkpoint, train, validate

__version__ = "0.1.0"
