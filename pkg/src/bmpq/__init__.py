"""Mixed-precision quantization-aware training driven by bit-level gradient sensitivity.

A small float64 autograd engine, weight/activation quantizers, a per-layer
sensitivity ledger, an exact budgeted bit-width allocator, a QAT training
loop with periodic re-assignment, dataset readers, and a bit-packed model
format.
"""

from .allocator import BitAssignment, ILPInstance, LayerGroup, solve_bruteforce, solve_exact
from .errors import (BMPQError, CodeOverflowError, ContractError, DegenerateBatchError,
                     FormatError, InfeasibleError, ShapeError, UnsupportedWidthError)
from .models import LayerSpec, ModelSpec, build_desk_cnn, build_model, build_resnet18, build_vgg16
from .storage import compression_ratios, storage_bmpq, storage_fp32
from .training import TrainConfig, Trainer, bmpq_train

__version__ = "0.1.0"
