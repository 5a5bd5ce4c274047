"""Multigrid convolutional-LSTM memory networks.

Subpackages cover the dense tensor engine with reverse-mode
differentiation (:mod:`mgmem.tensor`), pyramid layers
(:mod:`mgmem.layers`), network assemblies (:mod:`mgmem.networks`),
synthetic tasks (:mod:`mgmem.tasks`), the training harness
(:mod:`mgmem.training`), checkpoints (:mod:`mgmem.checkpoint`), the
routing-reachability analyzer (:mod:`mgmem.routing`), and desk-scale
experiment configs (:mod:`mgmem.configs`).
"""

from mgmem.tensor import Tensor, Kernel, record, backward, grad_check, zeros
from mgmem.layers import (
    LevelSpec,
    MemoryState,
    MultigridConv,
    MultigridConvLSTM,
    Pyramid,
    PyramidSpec,
    assemble_input,
    init_state,
    pyramid_spec,
)
from mgmem.networks import (
    EncoderDecoderNet,
    HeadSpec,
    LayerSpec,
    NetworkSpec,
    ReaderSpec,
    WriterReaderNet,
    build_network,
    unroll,
)

__all__ = [
    "Tensor",
    "Kernel",
    "record",
    "backward",
    "grad_check",
    "zeros",
    "LevelSpec",
    "MemoryState",
    "MultigridConv",
    "MultigridConvLSTM",
    "Pyramid",
    "PyramidSpec",
    "assemble_input",
    "init_state",
    "pyramid_spec",
    "EncoderDecoderNet",
    "HeadSpec",
    "LayerSpec",
    "NetworkSpec",
    "ReaderSpec",
    "WriterReaderNet",
    "build_network",
    "unroll",
]
