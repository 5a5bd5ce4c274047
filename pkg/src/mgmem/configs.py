"""Desk-scale experiment configurations.

These are deliberately small instantiations of the three benchmark
tasks, sized to train on a single CPU: pyramid levels top out at a
20x20 grid, channel budgets keep every network well under 0.1M
parameters, and episode counts stay in the tens of thousands.
"""

from __future__ import annotations

from mgmem.layers import LevelSpec
from mgmem.networks import HeadSpec, LayerSpec, NetworkSpec, ReaderSpec
from mgmem.tasks import canvas_size
from mgmem.training import TrainConfig


def _levels(*dims) -> tuple[LevelSpec, ...]:
    return tuple(LevelSpec(*d) for d in dims)


def sort_network(dim: int = 6) -> NetworkSpec:
    """Encoder-decoder for priority sort: bits+priority in, bit logits out."""
    core_levels = _levels((3, 3, 14), (6, 6, 9))
    return NetworkSpec(
        kind="encoder_decoder",
        input_levels=_levels((3, 3, 10)),
        core=(LayerSpec("lstm", core_levels), LayerSpec("lstm", core_levels)),
        decoder_tail=(LayerSpec("conv", _levels((3, 3, 10))),),
        head=HeadSpec("vector", out=dim, level=0),
    )


def sort_config(out_dir: str = "runs/sort", seed: int = 0, dim: int = 6,
                length: int = 8, total_steps: int = 12_500,
                batch_size: int = 16) -> TrainConfig:
    return TrainConfig(
        task="sort",
        net=sort_network(dim),
        task_params={"length": length, "dim": dim},
        seed=seed,
        batch_size=batch_size,
        total_steps=total_steps,
        lr=1e-2,
        eval_every=500,
        eval_episodes=500,
        out_dir=out_dir,
        early_stop_metric="bit_error",
        early_stop_target=0.015,
        lr_decay_at=[6_000, 9_000, 11_500],
    )


def recall_network(dim: int = 6) -> NetworkSpec:
    """Writer-reader for associative recall.

    The writer consumes the vector sequence and the query; its gated
    recurrence performs the content matching, so it carries the depth
    (four layers).  The reader mirrors that depth, viewing every
    writer layer's hidden pyramid, and decodes the answer.
    """
    core_levels = _levels((3, 3, 10), (6, 6, 6))
    reader_levels = _levels((3, 3, 8), (6, 6, 4))
    return NetworkSpec(
        kind="writer_reader",
        input_levels=_levels((3, 3, 1)),
        core=tuple(LayerSpec("lstm", core_levels) for _ in range(4)),
        readers=(ReaderSpec(
            input_levels=_levels((3, 3, 1)),
            layers=tuple(LayerSpec("conv", reader_levels) for _ in range(4))
            + (LayerSpec("conv", _levels((3, 3, 8))),),
            head=HeadSpec("vector", out=dim, level=0),
            memory_layers=4,
        ),),
    )


def recall_config(out_dir: str = "runs/recall", seed: int = 0, dim: int = 6,
                  length: int = 6, total_steps: int = 50_000,
                  batch_size: int = 4) -> TrainConfig:
    return TrainConfig(
        task="recall",
        net=recall_network(dim),
        task_params={"length": length, "dim": dim,
                     "hard_fraction": 0.5, "hard_hamming": 1},
        seed=seed,
        batch_size=batch_size,
        total_steps=total_steps,
        lr=1e-2,
        eval_every=500,
        eval_episodes=500,
        out_dir=out_dir,
        early_stop_metric="bit_error",
        early_stop_target=0.015,
        lr_decay_at=[20_000, 35_000, 44_000],
    )


def mapping_network(n: int = 9) -> NetworkSpec:
    """Writer-reader for mapping & localization on an n x n world.

    The observation/query patches ride the coarsest 5x5 grid; the head
    reads the finest 20x20 grid, center-cropped to the (2n-1)^2 canvas.
    """
    canvas = canvas_size(n)
    writer = (
        LayerSpec("lstm", _levels((5, 5, 10), (10, 10, 8))),
        LayerSpec("lstm", _levels((5, 5, 10), (10, 10, 8), (20, 20, 4))),
        LayerSpec("lstm", _levels((10, 10, 8), (20, 20, 4))),
        LayerSpec("lstm", _levels((10, 10, 8), (20, 20, 4))),
    )
    reader_layers = (
        LayerSpec("conv", _levels((5, 5, 8), (10, 10, 6))),
        LayerSpec("conv", _levels((5, 5, 8), (10, 10, 6), (20, 20, 4))),
        LayerSpec("conv", _levels((10, 10, 6), (20, 20, 4))),
        LayerSpec("conv", _levels((10, 10, 6), (20, 20, 4))),
    )
    return NetworkSpec(
        kind="writer_reader",
        input_levels=_levels((5, 5, 4)),
        core=writer,
        readers=(ReaderSpec(
            input_levels=_levels((5, 5, 2)),
            layers=reader_layers,
            head=HeadSpec("pixel", out=1, level=-1, crop=(canvas, canvas)),
            memory_layers=4,
        ),),
    )


def mapping_config(out_dir: str = "runs/mapping", seed: int = 0, n: int = 9,
                   total_steps: int = 40_000, batch_size: int = 4) -> TrainConfig:
    return TrainConfig(
        task="mapping",
        net=mapping_network(n),
        task_params={"n": n, "m": 3, "k": 3, "steps": (n - 2) * (n - 2),
                     "motion": "spiral", "wall_density": 0.0, "margin": 1},
        seed=seed,
        batch_size=batch_size,
        total_steps=total_steps,
        lr=1e-3,
        eval_every=500,
        eval_episodes=200,
        checkpoint_every=2000,
        out_dir=out_dir,
        early_stop_metric="f",
        early_stop_target=0.92,
    )
