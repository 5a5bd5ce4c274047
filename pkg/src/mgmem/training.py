"""Optimization and experiment orchestration.

The trainer is seed-deterministic end to end: a SeedSequence derives
separate streams for parameter init, batch generation, and the held-out
evaluation set, so identical configs reproduce identical metric values.
Training runs RMSProp over full-sequence unrolls (truncated with state
carried gradient-free across chunk boundaries when an episode exceeds
the cap), clips gradients by global norm, and appends one CSV metric
row per optimizer step.

Batch builders translate task episodes into network inputs: binary
vectors ride on a small grid (row-major cells, one channel, plus a
constant priority channel for sorting); maze observations are the
wall/free one-hot patch with two constant displacement channels.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

import mgmem.tensor as tc
from mgmem.tensor import Tensor, bce_logits_loss
from mgmem import tasks
from mgmem.checkpoint import Checkpoint, save_checkpoint
from mgmem.networks import (
    EncoderDecoderNet,
    Network,
    NetworkSpec,
    WriterReaderNet,
    build_network,
    spec_from_dict,
    spec_to_dict,
    unroll,
)

SEED_ENV_VAR = "MGMEM_SEED"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; a diagnostic checkpoint was written."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class RMSPropState:
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    v: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                 st: RMSPropState) -> None:
    """v <- rho v + (1-rho) g^2;  theta <- theta - lr g / (sqrt(v) + eps)."""
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise tc.NumericError(f"non-finite gradient for {name}")
        v = st.v.get(name)
        if v is None:
            v = np.zeros_like(t.data)
            st.v[name] = v
        v *= st.rho
        v += (1.0 - st.rho) * g * g
        t.data -= st.lr * g / (np.sqrt(v) + st.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                              for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    task: str                        # "sort" | "recall" | "mapping"
    net: NetworkSpec
    task_params: dict = field(default_factory=dict)
    seed: int = 0
    batch_size: int = 16
    total_steps: int = 1000
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    clip_norm: float = 10.0
    truncation: int = 128
    eval_every: int = 0              # 0 disables periodic evaluation
    eval_episodes: int = 200
    checkpoint_every: int = 0        # 0: only the final checkpoint
    out_dir: str = "runs/default"
    resample_query_each_step: bool = True
    t_min: int = 0                   # 0 -> query size k
    early_stop_metric: str = ""      # "bit_error" | "f"
    early_stop_target: float = 0.0
    lr_decay_at: list = field(default_factory=list)   # steps where lr drops
    lr_decay_factor: float = 0.3

    def __post_init__(self):
        if self.task not in ("sort", "recall", "mapping"):
            raise ValueError(f"unknown task {self.task!r}")


def config_to_dict(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["net"] = spec_to_dict(cfg.net)
    return out


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    data["net"] = spec_from_dict(data["net"])
    return TrainConfig(**data)


def apply_override(data: dict, dotted: str, raw_value: str) -> None:
    """Set a config field by dotted path; values parse as JSON when possible."""
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        if key not in node:
            raise KeyError(f"unknown config path {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise KeyError(f"unknown config path {dotted!r}")
    try:
        node[keys[-1]] = json.loads(raw_value)
    except json.JSONDecodeError:
        node[keys[-1]] = raw_value


# ---------------------------------------------------------------------------
# input encodings
# ---------------------------------------------------------------------------

def bits_to_grid(bits: np.ndarray, rows: int = 3, cols: int = 3,
                 dtype=np.float32) -> np.ndarray:
    """Lay a bit vector onto a (rows, cols, 1) grid as +-1 values.

    Row-major order; unused cells stay 0.  The signed encoding keeps
    zero bits visible to convolution products (a 0/1 encoding makes a
    zero bit contribute nothing, crippling content matching).
    """
    d = bits.shape[-1]
    if d > rows * cols:
        raise ValueError(f"{d} bits do not fit a {rows}x{cols} grid")
    flat = np.zeros(rows * cols, dtype=dtype)
    flat[:d] = 2.0 * bits - 1.0
    return flat.reshape(rows, cols, 1)


PRIORITY_FREQS = (1.0, 8.0, 32.0)
SORT_INPUT_CHANNELS = 2 + 2 * len(PRIORITY_FREQS) + 2


def encode_priority(p: float) -> np.ndarray:
    """Multi-scale scalar encoding: linear plus sine/cosine pairs.

    Sorting must discriminate priority gaps far below the input noise
    floor of a single tanh channel; the higher-frequency phases carry
    that precision while the linear channel keeps the global order.
    """
    out = np.empty(1 + 2 * len(PRIORITY_FREQS))
    out[0] = 2.0 * p - 1.0
    for i, freq in enumerate(PRIORITY_FREQS):
        out[1 + 2 * i] = np.sin(2.0 * np.pi * freq * p)
        out[2 + 2 * i] = np.cos(2.0 * np.pi * freq * p)
    return out


def priority_bumps(p: float, cells: int = 9) -> np.ndarray:
    """Nested spatial position code for a scalar on a flattened grid.

    The coarse plane interpolates a unit bump at position p over the
    cells; the fine plane repeats the scheme on the within-cell
    fraction.  Writes keyed on the bump location make rank order a
    spatial relation, and the nested plane separates near-ties.
    """
    def bump(x: float) -> np.ndarray:
        scaled = x * (cells - 1)
        i = int(np.floor(scaled))
        frac = scaled - i
        out = np.zeros(cells)
        out[i] = 1.0 - frac
        if i + 1 < cells:
            out[i + 1] = frac
        return out

    coarse = bump(p)
    fine = bump(p * (cells - 1) - np.floor(p * (cells - 1)))
    return np.stack([coarse, fine], axis=1)


def sort_sequences(instances: Sequence[tasks.SortInstance], dtype=np.float32):
    """Encoder inputs and per-output-step bit targets for priority sort."""
    batch = len(instances)
    length, dim = instances[0].vectors.shape
    inputs = []
    for t in range(length):
        step = np.zeros((batch, 3, 3, SORT_INPUT_CHANNELS), dtype=dtype)
        for b, inst in enumerate(instances):
            p = float(inst.priorities[t])
            step[b, :, :, :1] = bits_to_grid(inst.vectors[t], dtype=dtype)
            step[b, :, :, 1:8] = encode_priority(p)
            step[b, :, :, 8:] = priority_bumps(p).reshape(3, 3, 2)
        inputs.append(Tensor(step))
    targets = []
    for t in range(length):
        tgt = np.zeros((batch, 1, 1, dim), dtype=dtype)
        for b, inst in enumerate(instances):
            tgt[b, 0, 0, :] = inst.targets()[t]
        targets.append(Tensor(tgt))
    return inputs, targets


def recall_sequences(instances: Sequence[tasks.RecallInstance], dtype=np.float32,
                     reconstruct: bool = False):
    """Writer/reader step inputs and the final-step target for recall.

    The writer consumes the whole input sequence, query included; the
    reader sees zeros until the query step, where it receives the
    repeated vector as well and is supervised on the successor.  With
    ``reconstruct`` on (training only), the reader is additionally
    supervised to reproduce each just-written vector, which trains the
    memory decode path at every step instead of once per episode.
    """
    batch = len(instances)
    length, dim = instances[0].vectors.shape
    zero_in = Tensor(np.zeros((batch, 3, 3, 1), dtype=dtype))
    sequence = []
    targets = []
    for t in range(length):
        step = np.zeros((batch, 3, 3, 1), dtype=dtype)
        aux = np.zeros((batch, 1, 1, dim), dtype=dtype)
        for b, inst in enumerate(instances):
            step[b] = bits_to_grid(inst.vectors[t], dtype=dtype)
            aux[b, 0, 0, :] = inst.vectors[t]
        sequence.append((Tensor(step), [zero_in]))
        targets.append([Tensor(aux)] if reconstruct else [None])
    query = np.zeros((batch, 3, 3, 1), dtype=dtype)
    tgt = np.zeros((batch, 1, 1, dim), dtype=dtype)
    for b, inst in enumerate(instances):
        query[b] = bits_to_grid(inst.query(), dtype=dtype)
        tgt[b, 0, 0, :] = inst.target()
    query_t = Tensor(query)
    sequence.append((query_t, [query_t]))
    targets.append([Tensor(tgt)])
    return sequence, targets


def _center_pad(block: np.ndarray, grid: int) -> np.ndarray:
    """Place (h, w, c) content at the center of a (grid, grid, c) field."""
    h, w, _ = block.shape
    if h > grid or w > grid:
        raise ValueError(f"{h}x{w} patch does not fit a {grid}x{grid} grid")
    out = np.zeros((grid, grid, block.shape[2]), dtype=block.dtype)
    r0, c0 = (grid - h) // 2, (grid - w) // 2
    out[r0:r0 + h, c0:c0 + w, :] = block
    return out


def mapping_sequences(episodes: Sequence[tasks.MappingEpisode], m: int, k: int,
                      t_min: int = 0, resample_each_step: bool = True,
                      obs_grid: int = 0, query_grid: int = 0,
                      dtype=np.float32):
    """Observation/query streams and canvas-mask targets for mapping.

    A step is supervised once every episode in the batch has a fully
    seen query window and the step index has reached ``t_min`` (defaults
    to k).  Queries draw from each episode's dedicated query seed; with
    ``resample_each_step`` off, the first sampled patch is held and only
    its match mask is refreshed as exploration continues.  Patches are
    centered on the network's coarse input grid when it is larger than
    the patch; the displacement channels fill the whole grid.
    """
    if t_min <= 0:
        t_min = k
    obs_grid = obs_grid or m
    query_grid = query_grid or k
    batch = len(episodes)
    steps = min(len(ep.trajectory) for ep in episodes)
    n = episodes[0].world.n
    canvas = tasks.canvas_size(n)
    seen = [np.zeros((ep.world.n, ep.world.n), dtype=bool) for ep in episodes]
    qrngs = [np.random.default_rng(ep.query_seed) for ep in episodes]
    held: list[Optional[np.ndarray]] = [None] * batch

    sequence = []
    targets = []
    zero_query = Tensor(np.zeros((batch, query_grid, query_grid, 2), dtype=dtype))
    for t in range(steps):
        obs_step = np.zeros((batch, obs_grid, obs_grid, 4), dtype=dtype)
        for b, ep in enumerate(episodes):
            pos = tuple(ep.trajectory.positions[t])
            obs = tasks.observe(ep.world, pos, ep.world.start, m)
            enc = _center_pad(obs.encode(dtype), obs_grid)
            enc[:, :, 2] = obs.displacement[0]
            enc[:, :, 3] = obs.displacement[1]
            obs_step[b] = enc
            for cell in tasks.observation_footprint(ep.world, pos, m):
                seen[b][cell] = True
        supervised = (t + 1) >= t_min and all(
            tasks.eligible_centers(seen[b], k) for b in range(batch))
        if not supervised:
            sequence.append((Tensor(obs_step), [zero_query]))
            targets.append([None])
            continue
        q_step = np.zeros((batch, query_grid, query_grid, 2), dtype=dtype)
        mask_step = np.zeros((batch, canvas, canvas, 1), dtype=dtype)
        for b, ep in enumerate(episodes):
            if resample_each_step or held[b] is None:
                q = tasks.sample_query(seen[b], ep.world, k, qrngs[b])
                held[b] = q.patch_cells
                patch, mask = q.patch_cells, q.mask
            else:
                patch = held[b]
                mask = tasks.match_mask(seen[b], ep.world, patch)
            onehot = np.zeros((k, k, 2), dtype=dtype)
            onehot[:, :, 0] = patch == tasks.WALL
            onehot[:, :, 1] = patch == tasks.FREE
            q_step[b] = _center_pad(onehot, query_grid)
            mask_step[b, :, :, 0] = mask
        sequence.append((Tensor(obs_step), [Tensor(q_step)]))
        targets.append([Tensor(mask_step)])
    return sequence, targets


# ---------------------------------------------------------------------------
# episode generation
# ---------------------------------------------------------------------------

def _gen_recall_hard(length: int, dim: int, rng: np.random.Generator,
                     max_hamming: int) -> tasks.RecallInstance:
    """Rejection-sample an instance whose query has a near-collision key.

    Retrieval errors concentrate on queries with another stored vector
    within a small Hamming distance; emphasizing them during training
    sharpens the matcher without touching the evaluation distribution.
    """
    while True:
        inst = tasks.gen_recall(length, dim, rng)
        query = inst.vectors[inst.query_index]
        others = [v for i, v in enumerate(inst.vectors[:length - 1])
                  if i != inst.query_index]
        if others and min(int(np.sum(query != v)) for v in others) <= max_hamming:
            return inst


def generate_episodes(task: str, params: dict, count: int,
                      rng: np.random.Generator) -> list:
    if task == "sort":
        return [tasks.gen_sort(params["length"], params["dim"], rng) for _ in range(count)]
    if task == "recall":
        fraction = params.get("hard_fraction", 0.0)
        out = []
        for _ in range(count):
            if fraction and rng.random() < fraction:
                out.append(_gen_recall_hard(params["length"], params["dim"], rng,
                                            params.get("hard_hamming", 1)))
            else:
                out.append(tasks.gen_recall(params["length"], params["dim"], rng))
        return out
    if task == "mapping":
        out = []
        for _ in range(count):
            world = tasks.gen_maze(params["n"], params.get("wall_density", 0.0), rng)
            if params.get("motion", "spiral") == "spiral":
                traj = tasks.spiral_trajectory(world, params["steps"],
                                               params.get("margin", tasks.DEFAULT_MARGIN))
            else:
                traj = tasks.random_walk(world, params["steps"], rng)
            out.append(tasks.MappingEpisode(world, traj, int(rng.integers(2 ** 63))))
        return out
    raise ValueError(f"unknown task {task!r}")


TRAIN_ONLY_PARAMS = ("min_length", "hard_fraction", "hard_hamming", "reconstruct")


def eval_task_params(task_params: dict) -> dict:
    """Task parameters for held-out generation: the natural distribution."""
    return {k: v for k, v in task_params.items() if k not in TRAIN_ONLY_PARAMS}


def _train_batch_params(task_params: dict, rng: np.random.Generator) -> dict:
    """Per-batch task parameters; mixed-length training draws one length
    uniformly from [min_length, length] for the whole batch."""
    min_length = task_params.get("min_length")
    if not min_length:
        return task_params
    out = dict(task_params)
    out["length"] = int(rng.integers(min_length, task_params["length"] + 1))
    out.pop("min_length", None)
    return out


def build_batch(cfg: TrainConfig, episodes: Sequence):
    if cfg.task == "sort":
        return sort_sequences(episodes)
    if cfg.task == "recall":
        return recall_sequences(
            episodes, reconstruct=bool(cfg.task_params.get("reconstruct")))
    return mapping_sequences(episodes, cfg.task_params["m"], cfg.task_params["k"],
                             cfg.t_min, cfg.resample_query_each_step,
                             obs_grid=cfg.net.input_levels[0].rows,
                             query_grid=cfg.net.readers[0].input_levels[0].rows)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def run_writer_reader(net: WriterReaderNet, sequence):
    """Pure forward over a step sequence; returns per-step reader outputs."""
    batch = sequence[0][0].shape[0]
    states = net.init_state(batch)
    outputs = []
    for w_in, r_ins in sequence:
        outs, states = net.step(w_in, r_ins, states)
        outputs.append(outs)
    return outputs, states


def forward_outputs(net: Network, sequence, targets):
    if isinstance(net, EncoderDecoderNet):
        return net.run(sequence, len(targets))
    outs, _ = run_writer_reader(net, sequence)
    return outs


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def batch_metrics(task: str, outputs, targets) -> dict[str, float]:
    """Task metrics of one forward pass, from logits and aligned targets."""
    if task in ("sort", "recall"):
        errors = []
        for t, tgt in enumerate(targets):
            if task == "sort":
                out, target = outputs[t], tgt
            else:
                if tgt[0] is None:
                    continue
                out, target = outputs[t][0], tgt[0]
            probs = _sigmoid(out.data)
            for b in range(probs.shape[0]):
                errors.append(tasks.metrics_bit_error(probs[b], target.data[b]))
        return {"bit_error": float(np.mean(errors))}
    # mapping: score the final supervised step
    last = max(t for t, tgt in enumerate(targets) if tgt[0] is not None)
    probs = _sigmoid(outputs[last][0].data)
    target = targets[last][0].data
    ps, rs, fs = [], [], []
    for b in range(probs.shape[0]):
        p, r, f = tasks.metrics_prf(probs[b, :, :, 0], target[b, :, :, 0])
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return {"precision": float(np.mean(ps)), "recall": float(np.mean(rs)),
            "f": float(np.mean(fs))}


def evaluate(net: Network, task: str, task_params: dict, episodes: Sequence,
             batch_size: int = 32, t_min: int = 0,
             resample_query_each_step: bool = True) -> dict[str, float]:
    """Inference-only metrics over a test set: mean and std per instance."""
    net.set_training(False)
    per_instance: dict[str, list[float]] = {}
    try:
        for lo in range(0, len(episodes), batch_size):
            chunk = episodes[lo:lo + batch_size]
            if task == "sort":
                seq, tgts = sort_sequences(chunk)
            elif task == "recall":
                seq, tgts = recall_sequences(chunk)
            else:
                seq, tgts = mapping_sequences(
                    chunk, task_params["m"], task_params["k"],
                    t_min, resample_query_each_step,
                    obs_grid=net.spec.input_levels[0].rows,
                    query_grid=net.spec.readers[0].input_levels[0].rows)
            outputs = forward_outputs(net, seq, tgts)
            if task in ("sort", "recall"):
                for b in range(len(chunk)):
                    errs = []
                    for t, tgt in enumerate(tgts):
                        out = outputs[t] if task == "sort" else \
                            (outputs[t][0] if tgt[0] is not None else None)
                        target = tgt if task == "sort" else tgt[0]
                        if out is None:
                            continue
                        errs.append(tasks.metrics_bit_error(_sigmoid(out.data[b]),
                                                            target.data[b]))
                    per_instance.setdefault("bit_error", []).append(float(np.mean(errs)))
            else:
                last = max(t for t, tgt in enumerate(tgts) if tgt[0] is not None)
                probs = _sigmoid(outputs[last][0].data)
                target = tgts[last][0].data
                for b in range(len(chunk)):
                    p, r, f = tasks.metrics_prf(probs[b, :, :, 0], target[b, :, :, 0])
                    per_instance.setdefault("precision", []).append(p)
                    per_instance.setdefault("recall", []).append(r)
                    per_instance.setdefault("f", []).append(f)
    finally:
        net.set_training(True)
    summary: dict[str, float] = {"count": float(len(next(iter(per_instance.values()))))}
    for name, values in per_instance.items():
        summary[f"{name}_mean"] = float(np.mean(values))
        summary[f"{name}_std"] = float(np.std(values))
    return summary


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _metric_columns(task: str) -> list[str]:
    return ["bit_error"] if task in ("sort", "recall") else ["precision", "recall", "f"]


def _chunked(sequence, targets, truncation: int):
    """Split a step sequence into gradient-isolated chunks of <= truncation."""
    for lo in range(0, len(sequence), truncation):
        yield sequence[lo:lo + truncation], targets[lo:lo + truncation]


def _unroll_chunks_writer_reader(net, sequence, targets, truncation):
    """Full unroll when it fits; otherwise truncated BPTT with state carry."""
    if len(sequence) <= truncation:
        return [unroll(net, sequence, targets, truncation=truncation)]
    results = []
    batch = sequence[0][0].shape[0]
    states = net.init_state(batch)
    for chunk_seq, chunk_tgt in _chunked(sequence, targets, truncation):
        with tc.record() as tape:
            loss = None
            outputs = []
            for (w_in, r_ins), step_tgts in zip(chunk_seq, chunk_tgt):
                outs, states = net.step(w_in, r_ins, states)
                outputs.append(outs)
                for out, tgt in zip(outs, step_tgts):
                    if tgt is None:
                        continue
                    part = bce_logits_loss(out, tgt)
                    loss = part if loss is None else tc.add(loss, part)
            if loss is None:
                tape.release()
                results.append((0.0, {n: np.zeros_like(t.data)
                                      for n, t in net.params.items()}, outputs))
            else:
                value = loss.item()
                if not np.isfinite(value):
                    tape.release()
                    raise tc.NumericError(f"non-finite loss {value}")
                by_tensor = tc.backward(tape, loss)
                results.append((value, {n: by_tensor.get(t, np.zeros_like(t.data))
                                        for n, t in net.params.items()}, outputs))
        states = [st.detach() for st in states]
    return results


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    steps_run: int
    final_eval: Optional[dict] = None


def _fmt(value: float) -> str:
    return repr(float(value))


def train(cfg: TrainConfig) -> TrainResult:
    """Seed-deterministic training: batch -> unroll -> clip -> RMSProp.

    Emits ``metrics.csv`` (one row per optimizer step: step, loss, task
    metrics of the training batch, wall seconds), ``eval.csv`` at the
    configured cadence, and a final checkpoint ``ckpt.mgmc``.  A
    non-finite loss aborts with a ``ckpt.diverged.mgmc`` diagnostic.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2))

    seed = int(os.environ.get(SEED_ENV_VAR, cfg.seed))
    init_ss, data_ss, eval_ss = np.random.SeedSequence(seed).spawn(3)
    net = build_network(cfg.net, np.random.default_rng(init_ss))
    data_rng = np.random.default_rng(data_ss)
    opt = RMSPropState(lr=cfg.lr, rho=cfg.rho, eps=cfg.eps)

    eval_set = None
    if cfg.eval_every > 0 and cfg.eval_episodes > 0:
        eval_set = generate_episodes(cfg.task, eval_task_params(cfg.task_params),
                                     cfg.eval_episodes, np.random.default_rng(eval_ss))

    columns = _metric_columns(cfg.task)
    metrics_path = out_dir / "metrics.csv"
    eval_path = out_dir / "eval.csv"
    ckpt_path = out_dir / "ckpt.mgmc"

    def write_ckpt(path, step):
        save_checkpoint(path, Checkpoint(
            net=net,
            optimizer_state=opt.v,
            optimizer_meta={"lr": opt.lr, "rho": opt.rho, "eps": opt.eps},
            rng_state=data_rng.bit_generator.state,
            step=step,
        ))

    start = time.monotonic()
    steps_run = 0
    final_eval = None
    stop = False
    with open(metrics_path, "w") as mf:
        mf.write("step,loss," + ",".join(columns) + ",seconds\n")
        ef = None
        if eval_set is not None:
            ef = open(eval_path, "w")
        try:
            decay_steps = set(cfg.lr_decay_at)
            for step in range(1, cfg.total_steps + 1):
                if step in decay_steps:
                    opt.lr *= cfg.lr_decay_factor
                step_params = _train_batch_params(cfg.task_params, data_rng)
                episodes = generate_episodes(cfg.task, step_params,
                                             cfg.batch_size, data_rng)
                sequence, targets = build_batch(cfg, episodes)
                try:
                    if isinstance(net, EncoderDecoderNet):
                        results = [unroll(net, sequence, targets, truncation=cfg.truncation)]
                    else:
                        results = _unroll_chunks_writer_reader(
                            net, sequence, targets, cfg.truncation)
                except tc.NumericError as exc:
                    write_ckpt(out_dir / "ckpt.diverged.mgmc", step)
                    raise TrainingDiverged(str(exc)) from exc

                total_loss = 0.0
                outputs = [] if not isinstance(net, EncoderDecoderNet) else None
                for loss_value, grads, outs in results:
                    total_loss += loss_value
                    clip_global_norm(grads, cfg.clip_norm)
                    rmsprop_step(net.params, grads, opt)
                    if outputs is not None:
                        outputs.extend(outs)
                    else:
                        outputs = outs
                steps_run = step

                metrics = batch_metrics(cfg.task, outputs, targets)
                elapsed = time.monotonic() - start
                mf.write(f"{step},{_fmt(total_loss)},"
                         + ",".join(_fmt(metrics[c]) for c in columns)
                         + f",{elapsed:.3f}\n")
                mf.flush()

                if eval_set is not None and step % cfg.eval_every == 0:
                    summary = evaluate(net, cfg.task, eval_task_params(cfg.task_params),
                                       eval_set,
                                       batch_size=cfg.batch_size,
                                       t_min=cfg.t_min,
                                       resample_query_each_step=cfg.resample_query_each_step)
                    final_eval = summary
                    if ef.tell() == 0:
                        ef.write("step," + ",".join(sorted(summary)) + "\n")
                    ef.write(f"{step}," + ",".join(_fmt(summary[k])
                                                   for k in sorted(summary)) + "\n")
                    ef.flush()
                    if cfg.early_stop_metric:
                        value = summary[f"{cfg.early_stop_metric}_mean"]
                        reached = (value <= cfg.early_stop_target
                                   if cfg.early_stop_metric == "bit_error"
                                   else value >= cfg.early_stop_target)
                        if reached:
                            stop = True
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    write_ckpt(out_dir / f"ckpt.step{step}.mgmc", step)
                if stop:
                    break
        finally:
            if ef is not None:
                ef.close()

    write_ckpt(ckpt_path, steps_run)
    return TrainResult(ckpt_path, metrics_path, steps_run, final_eval)
