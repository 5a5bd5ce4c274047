"""Network assemblies: writer with attached readers, and encoder-decoder.

A writer is a stack of recurrent multigrid layers holding all memory
state; readers are stateless multigrid conv stacks whose leading layers
concatenate the writer's per-layer hidden pyramids into their inputs.
The encoder-decoder pairs two recurrent stacks: the decoder's state is
initialized from the encoder's final state, and trailing conv layers
scale its output down to the head.

Specs are plain frozen dataclasses, JSON round-trippable, and fully
determine the parameter set given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

import mgmem.tensor as tc
from mgmem.tensor import Kernel, ShapeError, Tensor, affine, bce_logits_loss, conv2d, crop_center, record, backward
from mgmem.layers import (
    LevelSpec,
    MemoryState,
    MultigridConv,
    MultigridConvLSTM,
    Pyramid,
    PyramidSpec,
    _uniform,
)


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str                          # "lstm" | "conv"
    levels: tuple[LevelSpec, ...]
    residual: bool = True
    norm: bool = False                 # conv layers only

    def __post_init__(self):
        if self.kind not in ("lstm", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "lstm" and self.norm:
            raise ValueError("batch norm is restricted to non-recurrent layers")
        PyramidSpec(self.levels)  # validates doubling

    @property
    def pyramid(self) -> PyramidSpec:
        return PyramidSpec(self.levels)


@dataclass(frozen=True)
class HeadSpec:
    kind: str                          # "pixel" | "vector"
    out: int = 1                       # logit channels (pixel) or output dim (vector)
    level: int = -1                    # which level of the final pyramid feeds the head
    crop: Optional[tuple[int, int]] = None   # pixel head center-crop (rows, cols)

    def __post_init__(self):
        if self.kind not in ("pixel", "vector"):
            raise ValueError(f"unknown head kind {self.kind!r}")


@dataclass(frozen=True)
class ReaderSpec:
    input_levels: tuple[LevelSpec, ...]
    layers: tuple[LayerSpec, ...]
    head: HeadSpec
    memory_layers: int = -1            # -1: every layer views writer state

    def __post_init__(self):
        for layer in self.layers:
            if layer.kind != "conv":
                raise ValueError("reader stacks are conv layers only")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str                          # "writer_reader" | "encoder_decoder"
    input_levels: tuple[LevelSpec, ...]
    core: tuple[LayerSpec, ...]        # recurrent stack (writer or encoder)
    readers: tuple[ReaderSpec, ...] = ()
    decoder_tail: tuple[LayerSpec, ...] = ()
    head: Optional[HeadSpec] = None    # decoder head (encoder_decoder only)
    detach_readers: bool = False

    def __post_init__(self):
        if self.kind not in ("writer_reader", "encoder_decoder"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        for layer in self.core:
            if layer.kind != "lstm":
                raise ValueError("core stacks are recurrent layers only")
        if self.kind == "encoder_decoder" and self.head is None:
            raise ValueError("encoder_decoder specs need a head")


def _levels_to_json(levels: Sequence[LevelSpec]) -> list:
    return [[lv.rows, lv.cols, lv.channels] for lv in levels]


def _levels_from_json(data: Sequence) -> tuple[LevelSpec, ...]:
    return tuple(LevelSpec(*map(int, lv)) for lv in data)


def spec_to_dict(spec: NetworkSpec) -> dict:
    def layer(ls: LayerSpec) -> dict:
        return {"kind": ls.kind, "levels": _levels_to_json(ls.levels),
                "residual": ls.residual, "norm": ls.norm}

    def head(hs: HeadSpec) -> dict:
        return {"kind": hs.kind, "out": hs.out, "level": hs.level,
                "crop": list(hs.crop) if hs.crop else None}

    return {
        "kind": spec.kind,
        "input_levels": _levels_to_json(spec.input_levels),
        "core": [layer(ls) for ls in spec.core],
        "readers": [{
            "input_levels": _levels_to_json(r.input_levels),
            "layers": [layer(ls) for ls in r.layers],
            "head": head(r.head),
            "memory_layers": r.memory_layers,
        } for r in spec.readers],
        "decoder_tail": [layer(ls) for ls in spec.decoder_tail],
        "head": head(spec.head) if spec.head else None,
        "detach_readers": spec.detach_readers,
    }


def spec_from_dict(data: dict) -> NetworkSpec:
    def layer(d: dict) -> LayerSpec:
        return LayerSpec(d["kind"], _levels_from_json(d["levels"]),
                         residual=bool(d.get("residual", True)),
                         norm=bool(d.get("norm", False)))

    def head(d: dict) -> HeadSpec:
        crop = d.get("crop")
        return HeadSpec(d["kind"], int(d["out"]), int(d.get("level", -1)),
                        tuple(crop) if crop else None)

    return NetworkSpec(
        kind=data["kind"],
        input_levels=_levels_from_json(data["input_levels"]),
        core=tuple(layer(d) for d in data["core"]),
        readers=tuple(ReaderSpec(
            input_levels=_levels_from_json(r["input_levels"]),
            layers=tuple(layer(d) for d in r["layers"]),
            head=head(r["head"]),
            memory_layers=int(r.get("memory_layers", -1)),
        ) for r in data.get("readers", ())),
        decoder_tail=tuple(layer(d) for d in data.get("decoder_tail", ())),
        head=head(data["head"]) if data.get("head") else None,
        detach_readers=bool(data.get("detach_readers", False)),
    )


# ---------------------------------------------------------------------------
# pyramid merging (reader view of writer memory)
# ---------------------------------------------------------------------------

def merge_levels(a: Sequence[LevelSpec], b: Sequence[LevelSpec]) -> tuple[LevelSpec, ...]:
    """Level set of a merged pyramid: channel sums where sizes coincide."""
    sizes: dict[tuple[int, int], int] = {}
    for lv in list(a) + list(b):
        sizes[(lv.rows, lv.cols)] = sizes.get((lv.rows, lv.cols), 0) + lv.channels
    return tuple(LevelSpec(r, c, ch) for (r, c), ch in sorted(sizes.items()))


def merge_pyramids(a: Pyramid, b: Pyramid) -> Pyramid:
    """Concatenate same-size grids channel-wise (a's channels first)."""
    groups: dict[tuple[int, int], list[Tensor]] = {}
    for t in list(a.tensors) + list(b.tensors):
        groups.setdefault((t.shape[1], t.shape[2]), []).append(t)
    merged = [tc.concat_channels(ts) for _, ts in sorted(groups.items())]
    return Pyramid(tuple(merged))


# ---------------------------------------------------------------------------
# output heads
# ---------------------------------------------------------------------------

class Head:
    """Per-pixel conv head or flatten+affine vector head."""

    def __init__(self, spec: HeadSpec, in_level: LevelSpec, rng: np.random.Generator, dtype):
        self.spec = spec
        self.in_level = in_level
        if spec.kind == "pixel":
            w = Tensor(_uniform(rng, (3, 3, in_level.channels, spec.out),
                                9 * in_level.channels, dtype), trainable=True)
            b = Tensor(np.zeros((1, 1, 1, spec.out), dtype=dtype), trainable=True)
            self.kernel = Kernel(w, b)
        else:
            feats = in_level.rows * in_level.cols * in_level.channels
            self.w = Tensor(_uniform(rng, (1, 1, feats, spec.out), feats, dtype), trainable=True)
            self.b = Tensor(np.zeros((1, 1, 1, spec.out), dtype=dtype), trainable=True)

    def forward(self, p: Pyramid) -> Tensor:
        x = p.tensors[self.spec.level]
        if self.spec.kind == "pixel":
            out = conv2d(x, self.kernel)
            if self.spec.crop is not None:
                out = crop_center(out, *self.spec.crop)
            return out
        return affine(x, self.w, self.b)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        if self.spec.kind == "pixel":
            return {f"{prefix}.w": self.kernel.w, f"{prefix}.b": self.kernel.b}
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, spec: ReaderSpec, core: Sequence[LayerSpec],
                 rng: np.random.Generator, dtype):
        self.spec = spec
        self.memory_layers = len(spec.layers) if spec.memory_layers < 0 else spec.memory_layers
        if self.memory_layers > len(core):
            raise ShapeError("reader views more layers than the writer has")
        if self.memory_layers > len(spec.layers):
            raise ShapeError("memory_layers exceeds reader depth")
        self.layers: list[MultigridConv] = []
        prev: Sequence[LevelSpec] = spec.input_levels
        for i, ls in enumerate(spec.layers):
            if i < self.memory_layers:
                prev = merge_levels(prev, core[i].levels)
            self.layers.append(MultigridConv.create(
                rng, prev, ls.pyramid, residual=ls.residual, norm=ls.norm, dtype=dtype))
            prev = ls.levels
        self.head = Head(spec.head, spec.layers[-1].levels[spec.head.level], rng, dtype)

    def forward(self, rin: Pyramid, hidden: Sequence[Pyramid], detach: bool) -> Tensor:
        p = rin
        for i, layer in enumerate(self.layers):
            if i < self.memory_layers:
                view = hidden[i]
                if detach:
                    view = Pyramid(tuple(t.detach() for t in view.tensors))
                p = merge_pyramids(p, view)
            p = layer.forward(p)
        return self.head.forward(p)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}.L{i}"))
        out.update(self.head.named_params(f"{prefix}.head"))
        return out


def _build_lstm_stack(rng, input_levels: Sequence[LevelSpec], layers: Sequence[LayerSpec],
                      dtype) -> list[MultigridConvLSTM]:
    stack = []
    prev: Sequence[LevelSpec] = input_levels
    for ls in layers:
        stack.append(MultigridConvLSTM.create(rng, prev, ls.pyramid,
                                              residual=ls.residual, dtype=dtype))
        prev = ls.levels
    return stack


def _as_pyramid(x: Union[Tensor, Pyramid], expect: Sequence[LevelSpec], what: str) -> Pyramid:
    p = Pyramid((x,)) if isinstance(x, Tensor) else x
    if len(p.tensors) != len(expect):
        raise ShapeError(f"{what}: expected {len(expect)} level(s), got {len(p.tensors)}")
    for t, lv in zip(p.tensors, expect):
        if t.shape[1:] != (lv.rows, lv.cols, lv.channels):
            raise ShapeError(f"{what}: level shape {t.shape[1:]} does not match {lv}")
    return p


class WriterReaderNet:
    """One stateful writer stack plus zero or more stateless readers."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        if spec.kind != "writer_reader":
            raise ValueError("spec is not a writer_reader network")
        self.spec = spec
        self.dtype = dtype
        self.writer = _build_lstm_stack(rng, spec.input_levels, spec.core, dtype)
        self.readers = [_Reader(rs, spec.core, rng, dtype) for rs in spec.readers]
        self.params = self._collect_params()

    def _collect_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.writer):
            out.update(layer.named_params(f"writer.L{i}"))
        for r, reader in enumerate(self.readers):
            out.update(reader.named_params(f"reader{r}"))
        for name, t in out.items():
            t.name = name
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def init_state(self, batch: int) -> list[MemoryState]:
        return [layer.init_state(batch, self.dtype) for layer in self.writer]

    def set_training(self, training: bool) -> None:
        for reader in self.readers:
            for layer in reader.layers:
                layer.set_training(training)

    def step(self, writer_in: Union[Tensor, Pyramid], reader_ins: Sequence[Union[Tensor, Pyramid]],
             states: Sequence[MemoryState]) -> tuple[list[Tensor], list[MemoryState]]:
        """Advance the writer once, then run every reader against the new state."""
        if len(states) != len(self.writer):
            raise ShapeError("state bundle does not match writer depth")
        if len(reader_ins) != len(self.readers):
            raise ShapeError(f"expected {len(self.readers)} reader inputs")
        p = _as_pyramid(writer_in, self.spec.input_levels, "writer input")
        new_states: list[MemoryState] = []
        hidden: list[Pyramid] = []
        for layer, st in zip(self.writer, states):
            p, st2 = layer.forward(p, st)
            new_states.append(st2)
            hidden.append(Pyramid(st2.h))
        outs = []
        for reader, rin in zip(self.readers, reader_ins):
            rp = _as_pyramid(rin, reader.spec.input_levels, "reader input")
            outs.append(reader.forward(rp, hidden, self.spec.detach_readers))
        return outs, new_states


class EncoderDecoderNet:
    """Recurrent encoder and decoder with exact memory transfer between them."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        if spec.kind != "encoder_decoder":
            raise ValueError("spec is not an encoder_decoder network")
        self.spec = spec
        self.dtype = dtype
        self.encoder = _build_lstm_stack(rng, spec.input_levels, spec.core, dtype)
        # Decoder recurrent layers mirror the encoder's specs exactly so
        # state transfer is shape-identical; parameters are their own.
        self.decoder = _build_lstm_stack(rng, spec.input_levels, spec.core, dtype)
        self.tail: list[MultigridConv] = []
        prev: Sequence[LevelSpec] = spec.core[-1].levels
        for ls in spec.decoder_tail:
            self.tail.append(MultigridConv.create(rng, prev, ls.pyramid,
                                                  residual=ls.residual, norm=ls.norm, dtype=dtype))
            prev = ls.levels
        self.head = Head(spec.head, prev[spec.head.level], rng, dtype)
        self.params = self._collect_params()

    def _collect_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.encoder):
            out.update(layer.named_params(f"encoder.L{i}"))
        for i, layer in enumerate(self.decoder):
            out.update(layer.named_params(f"decoder.L{i}"))
        for i, layer in enumerate(self.tail):
            out.update(layer.named_params(f"tail.L{i}"))
        out.update(self.head.named_params("head"))
        for name, t in out.items():
            t.name = name
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_training(self, training: bool) -> None:
        for layer in self.tail:
            layer.set_training(training)

    def init_state(self, batch: int) -> list[MemoryState]:
        return [layer.init_state(batch, self.dtype) for layer in self.encoder]

    def encode(self, in_seq: Sequence[Union[Tensor, Pyramid]]) -> list[MemoryState]:
        if not in_seq:
            raise ShapeError("encoder input sequence must be non-empty")
        batch = (in_seq[0].shape[0] if isinstance(in_seq[0], Tensor)
                 else in_seq[0].batch)
        states = self.init_state(batch)
        for x in in_seq:
            p = _as_pyramid(x, self.spec.input_levels, "encoder input")
            for i, layer in enumerate(self.encoder):
                p, states[i] = layer.forward(p, states[i])
        return states

    def decode(self, states: Sequence[MemoryState], out_len: int) -> list[Tensor]:
        batch = states[0].h[0].shape[0]
        dstates = list(states)
        zero_in = Pyramid(tuple(
            tc.zeros(batch, lv.rows, lv.cols, lv.channels, self.dtype)
            for lv in self.spec.input_levels))
        outs = []
        for _ in range(out_len):
            p = zero_in
            for i, layer in enumerate(self.decoder):
                p, dstates[i] = layer.forward(p, dstates[i])
            for layer in self.tail:
                p = layer.forward(p)
            outs.append(self.head.forward(p))
        return outs

    def run(self, in_seq: Sequence[Union[Tensor, Pyramid]], out_len: int) -> list[Tensor]:
        """Encode the sequence, transfer memory, emit ``out_len`` outputs."""
        return self.decode(self.encode(in_seq), out_len)


Network = Union[WriterReaderNet, EncoderDecoderNet]


def build_network(spec: NetworkSpec, rng: Union[int, np.random.Generator],
                  dtype=np.float32) -> Network:
    """Instantiate a network with seed-deterministic initialization."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if spec.kind == "writer_reader":
        return WriterReaderNet(spec, rng, dtype)
    return EncoderDecoderNet(spec, rng, dtype)


# ---------------------------------------------------------------------------
# unrolling
# ---------------------------------------------------------------------------

LossFn = Callable[[Tensor, Tensor], Tensor]


def _zero_grads(net: Network) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t.data) for name, t in net.params.items()}


def unroll(net: Network, sequence, targets, loss_fn: LossFn = bce_logits_loss,
           truncation: int = 128):
    """Run the net over a sequence, sum supervised losses, backprop once.

    writer_reader: ``sequence`` is a list of (writer_in, reader_ins) pairs
    and ``targets[t][r]`` supervises reader r at step t (None skips).
    encoder_decoder: ``sequence`` is the encoder input list and
    ``targets`` the per-output-step target list (None skips).

    Returns (loss value, gradient map by parameter name, outputs).
    """
    n_steps = len(sequence) + (len(targets) if isinstance(net, EncoderDecoderNet) else 0)
    if n_steps > truncation:
        raise ValueError(f"unroll of {n_steps} steps exceeds truncation {truncation}")

    outputs = []
    loss: Optional[Tensor] = None
    with record() as tape:
        if isinstance(net, WriterReaderNet):
            if len(targets) != len(sequence):
                raise ShapeError("sequence and targets must align")
            batch = (sequence[0][0].shape[0] if isinstance(sequence[0][0], Tensor)
                     else sequence[0][0].batch)
            states = net.init_state(batch)
            for (w_in, r_ins), step_targets in zip(sequence, targets):
                outs, states = net.step(w_in, r_ins, states)
                outputs.append(outs)
                for out, tgt in zip(outs, step_targets):
                    if tgt is None:
                        continue
                    part = loss_fn(out, tgt)
                    loss = part if loss is None else tc.add(loss, part)
        else:
            outs = net.run(sequence, len(targets))
            outputs = outs
            for out, tgt in zip(outs, targets):
                if tgt is None:
                    continue
                part = loss_fn(out, tgt)
                loss = part if loss is None else tc.add(loss, part)

        if loss is None:
            tape.release()
            return 0.0, _zero_grads(net), outputs
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            tape.release()
            raise tc.NumericError(f"non-finite unroll loss: {loss_value}")

    by_tensor = backward(tape, loss)
    grads = {name: by_tensor.get(t, np.zeros_like(t.data))
             for name, t in net.params.items()}
    return loss_value, grads, outputs
