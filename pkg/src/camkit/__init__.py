"""Channel-adaptive embedding models for images with varying channel counts."""

from .data import MetadataRecord, MultiChannelImage, SynthSpec, load_dataset, split_integrity_check, synth_generate
from .evaluation import EmbeddingMatrix, cps, evaluate_all, knn_predict, leave_one_out_predict, macro_f1
from .frontends import ADAPTIVE, STRATEGIES, build_frontend
from .losses import LossConfig, ntxent_loss, proxynca_loss
from .model import ModelConfig, build_model
from .registry import ChannelId, ChannelRegistry, chammi_registry
from .tasks import CHAMMI_TASKS, TaskSpec
from .tensor import Tensor, backward
from .train import TrainConfig, embed_records, run_pipeline

__all__ = [
    "ADAPTIVE",
    "CHAMMI_TASKS",
    "STRATEGIES",
    "ChannelId",
    "ChannelRegistry",
    "EmbeddingMatrix",
    "LossConfig",
    "MetadataRecord",
    "ModelConfig",
    "MultiChannelImage",
    "SynthSpec",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_frontend",
    "build_model",
    "chammi_registry",
    "cps",
    "embed_records",
    "evaluate_all",
    "knn_predict",
    "leave_one_out_predict",
    "load_dataset",
    "macro_f1",
    "ntxent_loss",
    "proxynca_loss",
    "run_pipeline",
    "split_integrity_check",
    "synth_generate",
]

__version__ = "0.1.0"
