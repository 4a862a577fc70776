"""Three-stream atomistic encoder with self-supervised pretraining,
decomposed retrieval, and a numerical theory-verification suite."""

from .autodiff import ParameterStore, Tensor, grad, mixed_hessian, no_grad, numerical_rank
from .compstream import CompStreamConfig, comp_forward, count_weighted_attention
from .fusion import HeadConfig, StreamEmbeddings
from .interstream import InterStreamConfig, register_backbone
from .model import Batch, ModelConfig, encode, energy_and_forces, init_model_params, make_batch
from .ssl import AugmentationConfig, SSLWeights, combined_loss, sample_views
from .structdata import AtomicStructure, Composition, NeighborGraph, build_graph, compress_composition
from .structstream import StructStreamConfig

__version__ = "0.1.0"

__all__ = [
    "AtomicStructure", "AugmentationConfig", "Batch", "CompStreamConfig", "Composition",
    "HeadConfig", "InterStreamConfig", "ModelConfig", "NeighborGraph", "ParameterStore",
    "SSLWeights", "StreamEmbeddings", "StructStreamConfig", "Tensor", "build_graph",
    "combined_loss", "comp_forward", "compress_composition", "count_weighted_attention",
    "encode", "energy_and_forces", "grad", "init_model_params", "make_batch",
    "mixed_hessian", "no_grad", "numerical_rank", "register_backbone", "sample_views",
]
