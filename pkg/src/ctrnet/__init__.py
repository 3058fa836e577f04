"""Training and evaluation engine for image-plus-sparse-feature CTR
prediction: from-scratch layer kernels, a CSR sparse first layer,
image-grouped batch sampling, SGD training, rank-based metrics and
gradient saliency maps."""

from .model import DeepCtrNet, NetConfig, PretrainNet, build_networks
from .sampling import GroupedBatch, SamplerConfig
from .sparse import SparseBatch, csr_from_rows
from .synth import SynthSpec, synth_generate
from .training import OptimConfig, TrainData, train_deepctr

__all__ = [
    "DeepCtrNet",
    "NetConfig",
    "PretrainNet",
    "build_networks",
    "GroupedBatch",
    "SamplerConfig",
    "SparseBatch",
    "csr_from_rows",
    "SynthSpec",
    "synth_generate",
    "OptimConfig",
    "TrainData",
    "train_deepctr",
]
