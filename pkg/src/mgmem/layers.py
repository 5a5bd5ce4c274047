"""Pyramid activations and the two multigrid layer types.

A layer's activations live on a pyramid of square-ish grids whose
spatial resolution doubles per side from one level to the next.  The
input each level consumes is the channel concatenation of its coarser
neighbor (2x nearest-neighbor upsampled), the same level, and its finer
neighbor (2x2 max-pooled), in that fixed order; absent neighbors are
dropped.  A multigrid convolution applies one 3x3 conv per level over
that assembled input; the recurrent variant runs a peephole
convolutional LSTM cell per level instead, carrying (hidden, cell)
state across time.

Peephole weights are per-channel vectors broadcast over space, and 2x2
max pooling is the only resolution-dropping component, so a layer's
parameter count depends solely on channel counts, never on grid sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mgmem.tensor import (
    Kernel,
    ShapeError,
    Tensor,
    add,
    batchnorm,
    concat_channels,
    conv2d,
    hadamard,
    maxpool2,
    relu,
    scale_channels,
    sigmoid,
    slice_channels,
    tanh,
    upsample2,
)
import mgmem.tensor as tc


@dataclass(frozen=True)
class LevelSpec:
    """One pyramid level: grid rows/cols and channel count."""

    rows: int
    cols: int
    channels: int


@dataclass(frozen=True)
class PyramidSpec:
    """Ordered coarse-to-fine levels; adjacent levels double per side."""

    levels: tuple[LevelSpec, ...]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("a pyramid needs at least one level")
        for lv in self.levels:
            if lv.rows < 1 or lv.cols < 1 or lv.channels < 1:
                raise ShapeError(f"bad level {lv}")
        for lo, hi in zip(self.levels, self.levels[1:]):
            if hi.rows != 2 * lo.rows or hi.cols != 2 * lo.cols:
                raise ShapeError(
                    f"adjacent levels must double: {lo.rows}x{lo.cols} -> {hi.rows}x{hi.cols}")

    def __len__(self) -> int:
        return len(self.levels)

    def scaled(self, factor: int) -> "PyramidSpec":
        """Same channel structure with every spatial dimension scaled."""
        return PyramidSpec(tuple(
            LevelSpec(lv.rows * factor, lv.cols * factor, lv.channels) for lv in self.levels))


def pyramid_spec(*levels: tuple[int, int, int]) -> PyramidSpec:
    """Shorthand: pyramid_spec((rows, cols, channels), ...)."""
    return PyramidSpec(tuple(LevelSpec(*lv) for lv in levels))


@dataclass
class Pyramid:
    """Per-level activation tensors sharing one batch size."""

    tensors: tuple[Tensor, ...]

    def __post_init__(self):
        if not self.tensors:
            raise ShapeError("empty pyramid")
        b = self.tensors[0].shape[0]
        for t in self.tensors:
            if t.shape[0] != b:
                raise ShapeError("pyramid levels disagree on batch size")

    @property
    def batch(self) -> int:
        return self.tensors[0].shape[0]

    def level(self, j: int) -> Tensor:
        return self.tensors[j]

    def conforms(self, spec: PyramidSpec) -> bool:
        if len(self.tensors) != len(spec.levels):
            return False
        return all(t.shape[1:] == (lv.rows, lv.cols, lv.channels)
                   for t, lv in zip(self.tensors, spec.levels))


@dataclass
class MemoryState:
    """Per-level (hidden, cell) pairs for one recurrent layer."""

    h: tuple[Tensor, ...]
    c: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.h) != len(self.c):
            raise ShapeError("state needs one cell grid per hidden grid")
        for hh, cc in zip(self.h, self.c):
            if hh.shape != cc.shape:
                raise ShapeError(f"hidden/cell shape mismatch: {hh.shape} vs {cc.shape}")

    def detach(self) -> "MemoryState":
        return MemoryState(tuple(t.detach() for t in self.h),
                           tuple(t.detach() for t in self.c))

    def value_count(self) -> int:
        return sum(t.data.size for t in self.h) + sum(t.data.size for t in self.c)


def init_state(spec: PyramidSpec, batch: int, dtype=np.float32) -> MemoryState:
    """All-zero (hidden, cell) grids for every level of the spec."""
    h = tuple(tc.zeros(batch, lv.rows, lv.cols, lv.channels, dtype) for lv in spec.levels)
    c = tuple(tc.zeros(batch, lv.rows, lv.cols, lv.channels, dtype) for lv in spec.levels)
    return MemoryState(h, c)


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------

def assemble_for(p: Pyramid, rows: int, cols: int) -> Tensor:
    """Concatenate [coarser (up), same, finer (down)] neighbors of a target grid.

    Neighbors are matched by grid size, so the source pyramid may carry a
    different level set than the consumer; at least one neighbor must be
    present.
    """
    by_size = {(t.shape[1], t.shape[2]): t for t in p.tensors}
    parts: list[Tensor] = []
    if rows % 2 == 0 and cols % 2 == 0:
        coarse = by_size.get((rows // 2, cols // 2))
        if coarse is not None:
            parts.append(upsample2(coarse))
    same = by_size.get((rows, cols))
    if same is not None:
        parts.append(same)
    finer = by_size.get((2 * rows, 2 * cols))
    if finer is not None:
        parts.append(maxpool2(finer))
    if not parts:
        raise ShapeError(f"no pyramid level neighbors a {rows}x{cols} grid")
    return concat_channels(parts)


def assemble_input(p: Pyramid, j: int) -> Tensor:
    """Assembled input for level ``j`` of pyramid ``p`` itself."""
    t = p.level(j)
    return assemble_for(p, t.shape[1], t.shape[2])


def assembled_channels(src, rows: int, cols: int) -> int:
    """Channel count assemble_for would produce for a target grid size.

    ``src`` is a PyramidSpec or any sequence of LevelSpec (merged level
    sets need not obey the doubling invariant).
    """
    levels = src.levels if isinstance(src, PyramidSpec) else tuple(src)
    total = 0
    by_size = {(lv.rows, lv.cols): lv.channels for lv in levels}
    if rows % 2 == 0 and cols % 2 == 0:
        total += by_size.get((rows // 2, cols // 2), 0)
    total += by_size.get((rows, cols), 0)
    total += by_size.get((2 * rows, 2 * cols), 0)
    if total == 0:
        raise ShapeError(f"no pyramid level neighbors a {rows}x{cols} grid")
    return total


# ---------------------------------------------------------------------------
# parameter containers and initialization
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_kernel(rng: np.random.Generator, cin: int, cout: int, dtype=np.float32,
                bias: Optional[float] = 0.0) -> Kernel:
    """3x3 kernel with fan-in-scaled uniform weights and constant bias."""
    w = Tensor(_uniform(rng, (3, 3, cin, cout), 9 * cin, dtype), trainable=True)
    b = None
    if bias is not None:
        b = Tensor(np.full((1, 1, 1, cout), bias, dtype=dtype), trainable=True)
    return Kernel(w, b)


@dataclass
class ConvLevel:
    """One level of a multigrid convolution: a single kernel, optional norm."""

    kernel: Kernel
    norm: Optional[tc.NormState] = None

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.kernel.w}
        if self.kernel.b is not None:
            out[f"{prefix}.b"] = self.kernel.b
        if self.norm is not None:
            out[f"{prefix}.gamma"] = self.norm.gamma
            out[f"{prefix}.beta"] = self.norm.beta
        return out


@dataclass
class ConvLSTMLevel:
    """One level of a multigrid conv-LSTM.

    Input kernels carry the gate biases; recurrent kernels are bias-free;
    peepholes are per-channel vectors on the cell state.
    """

    wxi: Kernel
    wxf: Kernel
    wxc: Kernel
    wxo: Kernel
    whi: Kernel
    whf: Kernel
    whc: Kernel
    who: Kernel
    peep_i: Tensor
    peep_f: Tensor
    peep_o: Tensor

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for gate, k in (("i", self.wxi), ("f", self.wxf), ("c", self.wxc), ("o", self.wxo)):
            out[f"{prefix}.wx{gate}.w"] = k.w
            out[f"{prefix}.wx{gate}.b"] = k.b
        for gate, k in (("i", self.whi), ("f", self.whf), ("c", self.whc), ("o", self.who)):
            out[f"{prefix}.wh{gate}.w"] = k.w
        out[f"{prefix}.peep_i"] = self.peep_i
        out[f"{prefix}.peep_f"] = self.peep_f
        out[f"{prefix}.peep_o"] = self.peep_o
        return out


def init_conv_lstm_level(rng: np.random.Generator, cin: int, channels: int,
                         dtype=np.float32, forget_bias: float = 1.0) -> ConvLSTMLevel:
    """Fan-in uniform kernels; forget-gate bias opens the memory early."""
    def vec(value: float = 0.0) -> Tensor:
        return Tensor(np.full((1, 1, 1, channels), value, dtype=dtype), trainable=True)

    return ConvLSTMLevel(
        wxi=init_kernel(rng, cin, channels, dtype, bias=0.0),
        wxf=init_kernel(rng, cin, channels, dtype, bias=forget_bias),
        wxc=init_kernel(rng, cin, channels, dtype, bias=0.0),
        wxo=init_kernel(rng, cin, channels, dtype, bias=0.0),
        whi=init_kernel(rng, channels, channels, dtype, bias=None),
        whf=init_kernel(rng, channels, channels, dtype, bias=None),
        whc=init_kernel(rng, channels, channels, dtype, bias=None),
        who=init_kernel(rng, channels, channels, dtype, bias=None),
        peep_i=vec(),
        peep_f=vec(),
        peep_o=vec(),
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _maybe_residual(out: Tensor, src: Pyramid, enabled: bool) -> Tensor:
    """Identity skip from the same-size input grid when channels match."""
    if not enabled:
        return out
    rows, cols, ch = out.shape[1], out.shape[2], out.shape[3]
    for t in src.tensors:
        if t.shape[1:] == (rows, cols, ch):
            return add(out, t)
    return out


class MultigridConv:
    """Stateless multigrid convolution layer: per level, one 3x3 conv over
    the assembled neighbor input, then optional batch norm, a rectifier,
    and an identity skip where sizes permit."""

    def __init__(self, out_spec: PyramidSpec, levels: Sequence[ConvLevel],
                 residual: bool = True, activation: str = "relu"):
        if len(levels) != len(out_spec.levels):
            raise ShapeError("one ConvLevel per output level required")
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.out_spec = out_spec
        self.levels = list(levels)
        self.residual = residual
        self.activation = activation

    @classmethod
    def create(cls, rng: np.random.Generator, in_spec: PyramidSpec, out_spec: PyramidSpec,
               residual: bool = True, norm: bool = False, activation: str = "relu",
               dtype=np.float32) -> "MultigridConv":
        levels = []
        for lv in out_spec.levels:
            cin = assembled_channels(in_spec, lv.rows, lv.cols)
            norm_state = tc.NormState.create(lv.channels, dtype) if norm else None
            levels.append(ConvLevel(init_kernel(rng, cin, lv.channels, dtype), norm_state))
        return cls(out_spec, levels, residual=residual, activation=activation)

    def forward(self, p: Pyramid) -> Pyramid:
        outs = []
        for lv, params in zip(self.out_spec.levels, self.levels):
            x = assemble_for(p, lv.rows, lv.cols)
            y = conv2d(x, params.kernel)
            if params.norm is not None:
                y = batchnorm(y, params.norm)
            if self.activation == "relu":
                y = relu(y)
            outs.append(_maybe_residual(y, p, self.residual))
        return Pyramid(tuple(outs))

    def set_training(self, training: bool) -> None:
        for params in self.levels:
            if params.norm is not None:
                params.norm.training = training

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for j, params in enumerate(self.levels):
            out.update(params.named_params(f"{prefix}.v{j}"))
        return out


class MultigridConvLSTM:
    """Recurrent multigrid layer: a peephole conv-LSTM cell per level.

    Per level, with assembled input a, previous hidden h and cell c:

        i = sigmoid(conv(a, wxi) + conv(h, whi) + peep_i * c)
        f = sigmoid(conv(a, wxf) + conv(h, whf) + peep_f * c)
        c' = f * c + i * tanh(conv(a, wxc) + conv(h, whc))
        o = sigmoid(conv(a, wxo) + conv(h, who) + peep_o * c')
        h' = o * tanh(c')

    Gate biases ride on the input kernels.  The emitted pyramid is h'
    plus the identity skip; the stored state is exactly (h', c').
    """

    def __init__(self, out_spec: PyramidSpec, levels: Sequence[ConvLSTMLevel],
                 residual: bool = True):
        if len(levels) != len(out_spec.levels):
            raise ShapeError("one ConvLSTMLevel per output level required")
        self.out_spec = out_spec
        self.levels = list(levels)
        self.residual = residual

    @classmethod
    def create(cls, rng: np.random.Generator, in_spec: PyramidSpec, out_spec: PyramidSpec,
               residual: bool = True, dtype=np.float32, forget_bias: float = 1.0) -> "MultigridConvLSTM":
        levels = []
        for lv in out_spec.levels:
            cin = assembled_channels(in_spec, lv.rows, lv.cols)
            levels.append(init_conv_lstm_level(rng, cin, lv.channels, dtype, forget_bias))
        return cls(out_spec, levels, residual=residual)

    def init_state(self, batch: int, dtype=np.float32) -> MemoryState:
        return init_state(self.out_spec, batch, dtype)

    def forward(self, p: Pyramid, state: MemoryState) -> tuple[Pyramid, MemoryState]:
        if len(state.h) != len(self.levels):
            raise ShapeError("state level count does not match layer")
        outs, new_h, new_c = [], [], []
        for j, (lv, params) in enumerate(zip(self.out_spec.levels, self.levels)):
            a = assemble_for(p, lv.rows, lv.cols)
            h_prev, c_prev = state.h[j], state.c[j]
            if h_prev.shape[1:] != (lv.rows, lv.cols, lv.channels):
                raise ShapeError(f"state shape {h_prev.shape} does not match level {lv}")
            ch = lv.channels

            # The four gate convs run as one conv on channel-stacked kernels.
            wx = concat_channels([params.wxi.w, params.wxf.w, params.wxc.w, params.wxo.w])
            bx = concat_channels([params.wxi.b, params.wxf.b, params.wxc.b, params.wxo.b])
            wh = concat_channels([params.whi.w, params.whf.w, params.whc.w, params.who.w])
            z = add(conv2d(a, Kernel(wx, bx)), conv2d(h_prev, Kernel(wh)))

            gate_i = sigmoid(add(slice_channels(z, 0, ch), scale_channels(c_prev, params.peep_i)))
            gate_f = sigmoid(add(slice_channels(z, ch, 2 * ch), scale_channels(c_prev, params.peep_f)))
            cand = tanh(slice_channels(z, 2 * ch, 3 * ch))
            c_new = add(hadamard(gate_f, c_prev), hadamard(gate_i, cand))
            gate_o = sigmoid(add(slice_channels(z, 3 * ch, 4 * ch), scale_channels(c_new, params.peep_o)))
            h_new = hadamard(gate_o, tanh(c_new))

            outs.append(_maybe_residual(h_new, p, self.residual))
            new_h.append(h_new)
            new_c.append(c_new)
        return Pyramid(tuple(outs)), MemoryState(tuple(new_h), tuple(new_c))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for j, params in enumerate(self.levels):
            out.update(params.named_params(f"{prefix}.v{j}"))
        return out
