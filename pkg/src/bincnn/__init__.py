"""bincnn: a 1-bit convolutional network engine.

Float-domain training with straight-through gradients, bit-packed XNOR/AND
popcount inference, group convolution, learnable two-sided slopes, and a
FLOPs/BOPs budget auditor.
"""

from .binarize import (
    BitTensor,
    bitpack,
    bitunpack,
    binarize_weights,
    init_weights_xavier,
    sign_ste_backward,
    sign_ternary,
)
from .bitkernels import AND, XNOR, BitConvPlan, conv2d_and, conv2d_xnor, discrepancy
from .budget import BudgetReport, count, params, tune_width, tuned_spec
from .data import DataBundle, Dataset, mnist_load
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    IntegrityError,
    ShapeError,
)
from .estimator import BinaryNetClassifier
from .frozen import FrozenModel, export_frozen, load_frozen
from .network import NetworkSpec, block_plan, build_network, make_spec, parse_config
from .training import (
    Adam,
    OptimConfig,
    StagePlan,
    evaluate,
    load_checkpoint,
    nonlinearity_ablation,
    restore_network,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AND",
    "Adam",
    "BinaryNetClassifier",
    "BitConvPlan",
    "BitTensor",
    "BudgetReport",
    "ConfigError",
    "DataBundle",
    "Dataset",
    "DivergenceError",
    "FormatError",
    "FrozenModel",
    "IntegrityError",
    "NetworkSpec",
    "OptimConfig",
    "ShapeError",
    "StagePlan",
    "XNOR",
    "binarize_weights",
    "bitpack",
    "bitunpack",
    "block_plan",
    "build_network",
    "conv2d_and",
    "conv2d_xnor",
    "count",
    "discrepancy",
    "evaluate",
    "export_frozen",
    "init_weights_xavier",
    "load_checkpoint",
    "load_frozen",
    "make_spec",
    "mnist_load",
    "nonlinearity_ablation",
    "params",
    "parse_config",
    "restore_network",
    "save_checkpoint",
    "sign_ste_backward",
    "sign_ternary",
    "train",
    "tune_width",
    "tuned_spec",
]
