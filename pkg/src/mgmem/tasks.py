"""Synthetic task environments, episode generators, and metrics.

Mapping & localization: an agent walks an n x n occupancy world along a
spiral or a random walk, observing only the local m x m patch around
itself plus its displacement from the start cell.  Queries present a
previously seen k x k patch; the answer marks every seen location whose
neighborhood matches, drawn on a (2n-1)^2 canvas re-centered on the
start cell (the agent never knows absolute coordinates).

The algorithmic tasks generate random binary vectors: priority sort
attaches a scalar priority per vector and asks for the ascending order;
associative recall repeats one vector as a query and asks for its
successor.

All generators are pure functions of their parameters and an explicit
numpy Generator, so fixed seeds reproduce episodes byte for byte.
"""

from __future__ import annotations

import io
import struct
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

WALL = 1
FREE = 0

# Spiral coverage matches published path lengths when one border ring is
# excluded, so interior margin defaults to 1.
DEFAULT_MARGIN = 1


class QueryUnavailable(RuntimeError):
    """No fully observed k x k region exists yet."""


@dataclass
class MazeWorld:
    grid: np.ndarray          # (n, n) uint8, WALL/FREE
    start: tuple[int, int]

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    def is_free(self, r: int, c: int) -> bool:
        return 0 <= r < self.n and 0 <= c < self.n and self.grid[r, c] == FREE


@dataclass
class Trajectory:
    positions: np.ndarray     # (T, 2) int
    kind: str                 # "spiral" | "random"

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class Observation:
    patch_cells: np.ndarray   # (m, m) uint8, out-of-world cells read WALL
    displacement: tuple[float, float]

    def encode(self, dtype=np.float32) -> np.ndarray:
        """(m, m, 4) array: wall/free one-hot plus constant displacement."""
        m = self.patch_cells.shape[0]
        out = np.zeros((m, m, 4), dtype=dtype)
        out[:, :, 0] = self.patch_cells == WALL
        out[:, :, 1] = self.patch_cells == FREE
        out[:, :, 2] = self.displacement[0]
        out[:, :, 3] = self.displacement[1]
        return out


@dataclass
class LocalizationQuery:
    center: tuple[int, int]
    patch_cells: np.ndarray   # (k, k) uint8
    mask: np.ndarray          # (2n-1, 2n-1) uint8 on the re-centered canvas

    def encode_patch(self, dtype=np.float32) -> np.ndarray:
        k = self.patch_cells.shape[0]
        out = np.zeros((k, k, 2), dtype=dtype)
        out[:, :, 0] = self.patch_cells == WALL
        out[:, :, 1] = self.patch_cells == FREE
        return out


@dataclass
class SortInstance:
    vectors: np.ndarray       # (L, d) uint8
    priorities: np.ndarray    # (L,) float32, pairwise distinct

    def target_order(self) -> np.ndarray:
        return np.argsort(self.priorities)

    def targets(self) -> np.ndarray:
        return self.vectors[self.target_order()]


@dataclass
class RecallInstance:
    vectors: np.ndarray       # (L, d) uint8, pairwise distinct
    query_index: int          # in [0, L-2]

    def query(self) -> np.ndarray:
        return self.vectors[self.query_index]

    def target(self) -> np.ndarray:
        return self.vectors[self.query_index + 1]


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------

def _components(grid: np.ndarray) -> np.ndarray:
    """4-connected component labels over free cells (0 marks walls)."""
    n = grid.shape[0]
    labels = np.zeros((n, n), dtype=np.int32)
    nxt = 0
    for r in range(n):
        for c in range(n):
            if grid[r, c] == FREE and labels[r, c] == 0:
                nxt += 1
                q = deque([(r, c)])
                labels[r, c] = nxt
                while q:
                    i, j = q.popleft()
                    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        a, b = i + di, j + dj
                        if 0 <= a < n and 0 <= b < n and grid[a, b] == FREE and labels[a, b] == 0:
                            labels[a, b] = nxt
                            q.append((a, b))
    return labels


def is_connected(world: MazeWorld) -> bool:
    labels = _components(world.grid)
    return labels.max() <= 1


def gen_maze(n: int, wall_density: float, rng: np.random.Generator) -> MazeWorld:
    """Random occupancy world with a guaranteed 4-connected free region.

    Every cell except the (forced-free) center start is independently a
    wall with probability ``wall_density``; walls are then deleted in
    random order, preferring ones that bridge separated free components,
    until the free region is connected.
    """
    if n < 5 or n % 2 == 0:
        raise ValueError("world size must be odd and >= 5")
    if not (0.0 <= wall_density <= 0.35):
        raise ValueError("wall density must lie in [0, 0.35]")
    grid = (rng.random((n, n)) < wall_density).astype(np.uint8)
    start = (n // 2, n // 2)
    grid[start] = FREE

    while True:
        labels = _components(grid)
        if labels.max() <= 1:
            break
        bridges = []
        borders = []
        start_label = labels[start]
        for r in range(n):
            for c in range(n):
                if grid[r, c] != WALL:
                    continue
                seen = set()
                for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    a, b = r + di, c + dj
                    if 0 <= a < n and 0 <= b < n and labels[a, b] > 0:
                        seen.add(labels[a, b])
                if len(seen) >= 2:
                    bridges.append((r, c))
                elif start_label in seen:
                    borders.append((r, c))
        pool = bridges if bridges else borders
        r, c = pool[rng.integers(len(pool))]
        grid[r, c] = FREE
    return MazeWorld(grid, start)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def spiral_trajectory(world: MazeWorld, steps: int, margin: int = DEFAULT_MARGIN) -> Trajectory:
    """Outward square spiral from the start over the interior region.

    Defined on wall-free worlds only; covers the (n - 2*margin)^2
    interior exactly once, truncated at ``steps`` positions.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if np.any(world.grid == WALL):
        raise ValueError("spiral trajectories are defined on wall-free worlds only")
    n = world.n
    side = n - 2 * margin
    if side < 1:
        raise ValueError("margin leaves no interior")
    total = min(steps, side * side)
    r, c = world.start
    positions = [(r, c)]
    # right, down, left, up with arm lengths 1,1,2,2,3,3,...
    dirs = ((0, 1), (1, 0), (0, -1), (-1, 0))
    arm, d = 1, 0
    while len(positions) < total:
        for _ in range(2):
            dr, dc = dirs[d % 4]
            for _ in range(arm):
                if len(positions) >= total:
                    break
                r, c = r + dr, c + dc
                positions.append((r, c))
            d += 1
        arm += 1
    pos = np.array(positions, dtype=np.int64)
    lo, hi = margin, n - 1 - margin
    if pos.min() < lo or pos.max() > hi:
        raise ValueError("spiral escaped the interior; check margin")
    return Trajectory(pos, "spiral")


def random_walk(world: MazeWorld, steps: int, rng: np.random.Generator) -> Trajectory:
    """Uniform choice among legal cardinal moves; stays put when boxed in."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    r, c = world.start
    positions = [(r, c)]
    dirs = ((-1, 0), (1, 0), (0, -1), (0, 1))
    for _ in range(steps - 1):
        legal = [(r + dr, c + dc) for dr, dc in dirs if world.is_free(r + dr, c + dc)]
        if legal:
            r, c = legal[rng.integers(len(legal))]
        positions.append((r, c))
    return Trajectory(np.array(positions, dtype=np.int64), "random")


# ---------------------------------------------------------------------------
# observations and queries
# ---------------------------------------------------------------------------

def observe(world: MazeWorld, pos: tuple[int, int], start: tuple[int, int], m: int) -> Observation:
    """Egocentric m x m patch plus displacement from start, scaled to [-1, 1]."""
    if m % 2 == 0:
        raise ValueError("observation size must be odd")
    r, c = pos
    if not world.is_free(r, c):
        raise ValueError(f"agent position {pos} is not a free cell")
    n, half = world.n, m // 2
    patch = np.full((m, m), WALL, dtype=np.uint8)
    for i in range(m):
        for j in range(m):
            a, b = r - half + i, c - half + j
            if 0 <= a < n and 0 <= b < n:
                patch[i, j] = world.grid[a, b]
    disp = ((r - start[0]) / (n - 1), (c - start[1]) / (n - 1))
    return Observation(patch, disp)


def observation_footprint(world: MazeWorld, pos: tuple[int, int], m: int) -> list[tuple[int, int]]:
    """In-world cells covered by the m x m observation at ``pos``."""
    half, n = m // 2, world.n
    r, c = pos
    return [(a, b)
            for a in range(max(0, r - half), min(n, r + half + 1))
            for b in range(max(0, c - half), min(n, c + half + 1))]


def canvas_size(n: int) -> int:
    return 2 * n - 1


def canvas_index(pos: tuple[int, int], start: tuple[int, int], n: int) -> tuple[int, int]:
    """World position -> index on the canvas re-centered at the start cell."""
    return pos[0] - start[0] + (n - 1), pos[1] - start[1] + (n - 1)


def _full_window_map(seen: np.ndarray, k: int) -> np.ndarray:
    """Boolean map of centers whose in-world k x k window is fully seen."""
    half = k // 2
    win = np.lib.stride_tricks.sliding_window_view(seen, (k, k))
    full = win.all(axis=(2, 3))
    out = np.zeros_like(seen, dtype=bool)
    out[half:seen.shape[0] - half, half:seen.shape[1] - half] = full
    return out


def eligible_centers(seen: np.ndarray, k: int) -> list[tuple[int, int]]:
    return [tuple(idx) for idx in np.argwhere(_full_window_map(seen, k))]


def match_mask(seen: np.ndarray, world: MazeWorld, patch: np.ndarray) -> np.ndarray:
    """Canvas mask of every fully seen position whose window equals ``patch``."""
    k = patch.shape[0]
    half, n = k // 2, world.n
    eligible = _full_window_map(seen, k)
    windows = np.lib.stride_tricks.sliding_window_view(world.grid, (k, k))
    matches = (windows == patch).all(axis=(2, 3))
    hits = np.zeros((n, n), dtype=bool)
    hits[half:n - half, half:n - half] = matches
    hits &= eligible
    mask = np.zeros((canvas_size(n), canvas_size(n)), dtype=np.uint8)
    dr, dc = (n - 1) - world.start[0], (n - 1) - world.start[1]
    for rr, cc in np.argwhere(hits):
        mask[rr + dr, cc + dc] = 1
    return mask


def sample_query(seen: np.ndarray, world: MazeWorld, k: int,
                 rng: np.random.Generator) -> LocalizationQuery:
    """Pick a fully seen k x k patch and mark every matching seen location.

    ``seen`` is an (n, n) boolean map of observed cells.  The center is
    uniform over positions whose in-world k x k neighborhood is fully
    seen; the mask marks all such positions with identical patch content,
    placed on the (2n-1)^2 re-centered canvas.
    """
    if k % 2 == 0:
        raise ValueError("query size must be odd")
    centers = eligible_centers(seen, k)
    if not centers:
        raise QueryUnavailable(f"no fully seen {k}x{k} region yet")
    r, c = centers[rng.integers(len(centers))]
    half = k // 2
    patch = world.grid[r - half:r + half + 1, c - half:c + half + 1].copy()
    return LocalizationQuery((r, c), patch, match_mask(seen, world, patch))


# ---------------------------------------------------------------------------
# algorithmic task generators
# ---------------------------------------------------------------------------

def gen_sort(length: int, dim: int, rng: np.random.Generator) -> SortInstance:
    """Random binary vectors with pairwise distinct uniform priorities."""
    if length < 2 or dim < 1:
        raise ValueError("need length >= 2 and dim >= 1")
    vectors = rng.integers(0, 2, size=(length, dim), dtype=np.uint8)
    while True:
        priorities = rng.random(length, dtype=np.float32)
        if len(np.unique(priorities)) == length:
            break
    return SortInstance(vectors, priorities)


def gen_recall(length: int, dim: int, rng: np.random.Generator) -> RecallInstance:
    """Pairwise distinct binary vectors plus a query over the first L-1."""
    if length < 2 or dim < 1:
        raise ValueError("need length >= 2 and dim >= 1")
    if 2 ** dim <= length:
        raise ValueError("too few distinct vectors for this length")
    while True:
        vectors = rng.integers(0, 2, size=(length, dim), dtype=np.uint8)
        if len({v.tobytes() for v in vectors}) == length:
            break
    query_index = int(rng.integers(length - 1))
    return RecallInstance(vectors, query_index)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def metrics_prf(pred_probs: np.ndarray, mask: np.ndarray,
                tau: float = 0.5) -> tuple[float, float, float]:
    """Precision/recall/F of thresholded predictions against a binary mask.

    Zero denominators yield 0, except the all-empty case (no positives
    predicted, empty mask) which counts as a perfect (1, 1, 1).
    """
    if pred_probs.shape != mask.shape:
        raise ValueError(f"shape mismatch: {pred_probs.shape} vs {mask.shape}")
    if not (0.0 < tau < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    pred = pred_probs >= tau
    truth = mask.astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp == 0 and tp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


def metrics_bit_error(pred_probs: np.ndarray, target: np.ndarray) -> float:
    """Fraction of mismatched bits after thresholding predictions at 0.5."""
    if pred_probs.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred_probs.shape} vs {target.shape}")
    pred = pred_probs >= 0.5
    return float(np.mean(pred != target.astype(bool)))


# ---------------------------------------------------------------------------
# episode files
# ---------------------------------------------------------------------------

MAGIC = b"MGT1"
FORMAT_VERSION = 1
_TASK_IDS = {"sort": 1, "recall": 2, "mapping": 3}
_TASK_NAMES = {v: k for k, v in _TASK_IDS.items()}


@dataclass
class MappingEpisode:
    world: MazeWorld
    trajectory: Trajectory
    query_seed: int


class EpisodeFormatError(RuntimeError):
    """Malformed or truncated episode file."""


def _read(f, fmt: str):
    size = struct.calcsize(fmt)
    buf = f.read(size)
    if len(buf) != size:
        raise EpisodeFormatError("unexpected end of episode file")
    return struct.unpack(fmt, buf)


def save_episodes(path, task: str, params: dict, episodes: Sequence) -> None:
    """Write a binary episode file (magic MGT1, little-endian fields)."""
    if task not in _TASK_IDS:
        raise ValueError(f"unknown task {task!r}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBI", FORMAT_VERSION, _TASK_IDS[task], len(episodes)))
        if task in ("sort", "recall"):
            f.write(struct.pack("<HH", params["length"], params["dim"]))
            for ep in episodes:
                f.write(np.ascontiguousarray(ep.vectors, dtype=np.uint8).tobytes())
                if task == "sort":
                    f.write(np.ascontiguousarray(ep.priorities, dtype="<f4").tobytes())
                else:
                    f.write(struct.pack("<H", ep.query_index))
        else:
            f.write(struct.pack("<HHHHBB", params["n"], params["m"], params["k"],
                                params["steps"], 0 if params["motion"] == "spiral" else 1,
                                params.get("margin", DEFAULT_MARGIN)))
            for ep in episodes:
                f.write(np.ascontiguousarray(ep.world.grid, dtype=np.uint8).tobytes())
                f.write(struct.pack("<HH", *ep.world.start))
                f.write(struct.pack("<H", len(ep.trajectory)))
                f.write(np.ascontiguousarray(ep.trajectory.positions, dtype="<u2").tobytes())
                f.write(struct.pack("<Q", ep.query_seed))


def load_episodes(path):
    """Read an episode file; returns (task, params, episodes)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise EpisodeFormatError(f"bad magic {magic!r}")
        version, task_id, count = _read(f, "<IBI")
        if version != FORMAT_VERSION:
            raise EpisodeFormatError(f"unsupported episode format version {version}")
        task = _TASK_NAMES.get(task_id)
        if task is None:
            raise EpisodeFormatError(f"unknown task id {task_id}")
        episodes = []
        if task in ("sort", "recall"):
            length, dim = _read(f, "<HH")
            params = {"length": length, "dim": dim}
            for _ in range(count):
                raw = f.read(length * dim)
                if len(raw) != length * dim:
                    raise EpisodeFormatError("unexpected end of episode file")
                vectors = np.frombuffer(raw, dtype=np.uint8).reshape(length, dim).copy()
                if task == "sort":
                    raw = f.read(4 * length)
                    if len(raw) != 4 * length:
                        raise EpisodeFormatError("unexpected end of episode file")
                    priorities = np.frombuffer(raw, dtype="<f4").copy()
                    episodes.append(SortInstance(vectors, priorities))
                else:
                    (qi,) = _read(f, "<H")
                    episodes.append(RecallInstance(vectors, qi))
        else:
            n, m, k, steps, motion, margin = _read(f, "<HHHHBB")
            params = {"n": n, "m": m, "k": k, "steps": steps,
                      "motion": "spiral" if motion == 0 else "random", "margin": margin}
            for _ in range(count):
                raw = f.read(n * n)
                if len(raw) != n * n:
                    raise EpisodeFormatError("unexpected end of episode file")
                grid = np.frombuffer(raw, dtype=np.uint8).reshape(n, n).copy()
                sr, sc = _read(f, "<HH")
                (t_len,) = _read(f, "<H")
                raw = f.read(4 * t_len)
                if len(raw) != 4 * t_len:
                    raise EpisodeFormatError("unexpected end of episode file")
                positions = np.frombuffer(raw, dtype="<u2").reshape(t_len, 2).astype(np.int64)
                (qseed,) = _read(f, "<Q")
                episodes.append(MappingEpisode(
                    MazeWorld(grid, (sr, sc)),
                    Trajectory(positions, params["motion"]),
                    qseed))
        return task, params, episodes


def dump_text(task: str, params: dict, episodes: Sequence, file=None) -> str:
    """Human-readable dump of an episode set."""
    out = file if file is not None else io.StringIO()
    out.write(f"task={task} params={params} episodes={len(episodes)}\n")
    for i, ep in enumerate(episodes):
        out.write(f"--- episode {i} ---\n")
        if task == "sort":
            for vec, pri in zip(ep.vectors, ep.priorities):
                out.write(f"{''.join(map(str, vec))} priority={pri:.6f}\n")
        elif task == "recall":
            for j, vec in enumerate(ep.vectors):
                marker = " <- query" if j == ep.query_index else ""
                out.write(f"{''.join(map(str, vec))}{marker}\n")
        else:
            for r in range(ep.world.n):
                out.write("".join("#" if v == WALL else "." for v in ep.world.grid[r]) + "\n")
            out.write(f"start={ep.world.start} steps={len(ep.trajectory)} "
                      f"qseed={ep.query_seed}\n")
    return out.getvalue() if file is None else ""
