"""Deterministic synthetic sequence tasks.

Each sample is a pure function of ``(spec, split, index)``: its random stream
is addressed by the task seed, the split name and the index, so the train and
validation splits never share a stream and regeneration is bitwise identical.

* ``selective_copy``: noise tokens with ``num_payload`` payload tokens at random
  positions, followed by ``num_payload`` marker tokens.  The label holds the
  payload in order at the marker positions and the blank token elsewhere.
* ``adding``: two channels, values in [0, 1] and a two-hot marker.  The label
  is the sum of the two marked values.
* ``pathfinder_lite``: an ``n x n`` grid holding either one path joining two
  endpoint dots (label 1) or two separate arcs, one dot on each (label 0).
  The grid is cut into square patches, flattened row-major, so consecutive
  LIM chunks cover consecutive row bands.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .rng import stream

BLANK = 0
NOISE = 0


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["selective_copy", "adding", "pathfinder_lite"] = "selective_copy"
    seq_len: int | None = None
    vocab_size: int = Field(8, ge=1)
    num_payload: int = Field(4, ge=0)
    grid_size: int = Field(16, ge=4)
    patch: int = Field(2, ge=1)
    path_len: tuple[int, int] = (12, 28)
    variant: Literal["A", "B"] = "A"
    train_size: int | None = None
    val_size: int = Field(1000, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.seq_len is None:
            self.seq_len = {"selective_copy": 64, "adding": 128}.get(self.kind, 0)
        if self.kind == "selective_copy" and self.seq_len < 2 * self.num_payload:
            raise ValueError("selective_copy needs seq_len >= 2 * num_payload")
        if self.kind == "adding" and self.seq_len < 2:
            raise ValueError("adding needs seq_len >= 2")
        if self.kind == "pathfinder_lite":
            if self.grid_size % self.patch:
                raise ValueError("grid_size must be divisible by patch")
            self.seq_len = (self.grid_size // self.patch) ** 2
            lo, hi = self.path_len
            if not 2 <= lo <= hi:
                raise ValueError("path_len must satisfy 2 <= lo <= hi")
        return self

    # model-facing shape facts
    @property
    def input_vocab(self) -> int | None:
        return self.vocab_size + 2 if self.kind == "selective_copy" else None

    @property
    def marker_token(self) -> int:
        return self.vocab_size + 1

    @property
    def in_features(self) -> int | None:
        if self.kind == "adding":
            return 2
        if self.kind == "pathfinder_lite":
            return 2 * self.patch * self.patch
        return None

    @property
    def num_outputs(self) -> int:
        return {"selective_copy": self.vocab_size + 1, "adding": 1, "pathfinder_lite": 2}[self.kind]

    @property
    def head(self) -> str:
        return "token" if self.kind == "selective_copy" else "pool"


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray  # positions/samples that count toward loss and accuracy

    def __len__(self) -> int:
        return len(self.inputs)


# ---------------------------------------------------------------------------
# per-sample generators


def _selective_copy(spec: TaskSpec, g: np.random.Generator):
    L, k = spec.seq_len, spec.num_payload
    tokens = np.full(L, NOISE, dtype=np.int64)
    labels = np.full(L, BLANK, dtype=np.int64)
    mask = np.zeros(L, dtype=bool)
    if k:
        slots = np.sort(g.choice(L - k, size=k, replace=False))
        payload = g.integers(1, spec.vocab_size + 1, size=k)
        tokens[slots] = payload
        tokens[L - k:] = spec.marker_token
        if spec.variant == "B":
            payload = payload[::-1]
        labels[L - k:] = payload
        mask[L - k:] = True
    return tokens, labels, mask


def _adding(spec: TaskSpec, g: np.random.Generator):
    L = spec.seq_len
    x = np.zeros((L, 2))
    x[:, 0] = g.uniform(0.0, 1.0, L)
    if spec.variant == "A":
        i, j = g.choice(L, size=2, replace=False)
    else:  # both marks in the first half
        i, j = g.choice(L // 2, size=2, replace=False)
    x[[i, j], 1] = 1.0
    return x, np.asarray(x[i, 0] + x[j, 0]), np.asarray(True)


_STEPS = ((0, 1), (1, 0), (0, -1), (-1, 0))


def _walk(g, n, length, occupied, max_tries=60):
    """Self-avoiding walk whose cells touch no occupied cell and not themselves
    except through the previous step.  Returns list of cells or None."""
    for _ in range(max_tries):
        free = np.argwhere(~_dilate(occupied))
        if not len(free):
            return None
        start = tuple(free[g.integers(len(free))])
        cells = [start]
        taken = {start}
        heading = g.integers(4)
        while len(cells) < length:
            r, c = cells[-1]
            options = []
            for turn in (0, 1, 3):  # no reversing
                dr, dc = _STEPS[(heading + turn) % 4]
                nr, nc = r + dr, c + dc
                if not (0 <= nr < n and 0 <= nc < n) or (nr, nc) in taken:
                    continue
                if occupied[nr, nc] or _touches(occupied, nr, nc, n):
                    continue
                # the new cell may touch only the current head of the walk
                if any((nr + a, nc + b) in taken and (nr + a, nc + b) != (r, c) for a, b in _STEPS):
                    continue
                options.append(((heading + turn) % 4, (nr, nc)))
            if not options:
                break
            straight = [o for o in options if o[0] == heading]
            if straight and g.uniform() < 0.6:
                heading, cell = straight[0]
            else:
                heading, cell = options[g.integers(len(options))]
            cells.append(cell)
            taken.add(cell)
        if len(cells) == length:
            return cells
    return None


def _touches(occupied, r, c, n):
    for a, b in _STEPS:
        rr, cc = r + a, c + b
        if 0 <= rr < n and 0 <= cc < n and occupied[rr, cc]:
            return True
    return False


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def pathfinder_grid(spec: TaskSpec, g: np.random.Generator) -> tuple[np.ndarray, int]:
    """(grid of shape (2, n, n): path and dot channels, label)."""
    n = spec.grid_size
    lo, hi = spec.path_len
    label = int(g.integers(2))
    while True:
        occupied = np.zeros((n, n), dtype=bool)
        grid = np.zeros((2, n, n))
        if label == 1:
            cells = _walk(g, n, int(g.integers(lo, hi + 1)), occupied)
            if cells is None:
                continue
            for r, c in cells:
                grid[0, r, c] = 1.0
            for r, c in (cells[0], cells[-1]):
                grid[1, r, c] = 1.0
            return grid, label
        arcs = []
        for _ in range(2):
            cells = _walk(g, n, int(g.integers(max(2, lo // 2), max(2, hi // 2) + 1)), occupied)
            if cells is None:
                break
            arcs.append(cells)
            for r, c in cells:
                occupied[r, c] = True
        if len(arcs) < 2:
            continue
        for cells in arcs:
            for r, c in cells:
                grid[0, r, c] = 1.0
            r, c = cells[0] if g.uniform() < 0.5 else cells[-1]
            grid[1, r, c] = 1.0
        return grid, label


def grid_to_tokens(grid: np.ndarray, patch: int) -> np.ndarray:
    """(C, n, n) grid -> (num_patches, C * patch * patch) tokens, row-major over patches."""
    ch, n, _ = grid.shape
    m = n // patch
    t = grid.reshape(ch, m, patch, m, patch).transpose(1, 3, 0, 2, 4)
    return t.reshape(m * m, ch * patch * patch)


def tokens_to_grid(tokens: np.ndarray, grid_size: int, patch: int, channels: int = 2) -> np.ndarray:
    m = grid_size // patch
    t = tokens.reshape(m, m, channels, patch, patch).transpose(2, 0, 3, 1, 4)
    return t.reshape(channels, grid_size, grid_size)


def _pathfinder(spec: TaskSpec, g: np.random.Generator):
    grid, label = pathfinder_grid(spec, g)
    return grid_to_tokens(grid, spec.patch), np.asarray(label, dtype=np.int64), np.asarray(True)


_GENERATORS = {"selective_copy": _selective_copy, "adding": _adding, "pathfinder_lite": _pathfinder}


def sample(spec: TaskSpec, split: str, index: int):
    if split not in ("train", "val"):
        raise ValueError(f"unknown split {split!r}")
    g = stream(spec.seed, spec.kind, spec.variant, split, int(index))
    return _GENERATORS[spec.kind](spec, g)


def make_batch(spec: TaskSpec, split: str, indices) -> Batch:
    rows = [sample(spec, split, i) for i in indices]
    return Batch(*(np.stack(col) for col in zip(*rows)))


def generate(spec: TaskSpec, split: str, size: int | None = None) -> Batch:
    """The whole split (``val_size`` / ``train_size`` samples unless ``size`` given)."""
    if size is None:
        size = spec.val_size if split == "val" else spec.train_size
        if size is None:
            raise ValueError("train_size is unbounded; pass size explicitly")
    return make_batch(spec, split, range(size))


def train_batches(spec: TaskSpec, batch_size: int, start_step: int = 0) -> Iterator[Batch]:
    step = start_step
    while True:
        idx = np.arange(step * batch_size, (step + 1) * batch_size)
        if spec.train_size is not None:
            idx = idx % spec.train_size
        yield make_batch(spec, "train", idx)
        step += 1


# ---------------------------------------------------------------------------
# MBTK export: b"MBTK", u8 version, u8 task kind, u8 array count, then per
# array u8 dtype code, u8 ndim, ndim x u32 extents; then raw little-endian
# payloads in the same order (inputs, labels, mask).

MBTK_MAGIC = b"MBTK"
MBTK_VERSION = 1
_KINDS = ["selective_copy", "adding", "pathfinder_lite"]
_DTYPES = {0: "<f8", 1: "<i8", 2: "|u1"}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1, np.dtype("|u1"): 2}


def _canon(a: np.ndarray) -> np.ndarray:
    if a.dtype == bool:
        return a.astype("|u1")
    if np.issubdtype(a.dtype, np.integer):
        return a.astype("<i8")
    return a.astype("<f8")


def write_mbtk(path: str | Path, kind: str, batch: Batch) -> None:
    arrays = [_canon(batch.inputs), _canon(batch.labels), _canon(batch.mask)]
    head = bytearray(MBTK_MAGIC)
    head += struct.pack("<BBB", MBTK_VERSION, _KINDS.index(kind), len(arrays))
    for a in arrays:
        head += struct.pack("<BB", _CODES[a.dtype], a.ndim)
        head += struct.pack(f"<{a.ndim}I", *a.shape)
    with open(path, "wb") as fh:
        fh.write(bytes(head))
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def read_mbtk(path: str | Path) -> tuple[str, Batch]:
    raw = Path(path).read_bytes()
    if raw[:4] != MBTK_MAGIC:
        raise ValueError(f"{path}: not an MBTK file")
    version, kind, count = struct.unpack_from("<BBB", raw, 4)
    if version != MBTK_VERSION:
        raise ValueError(f"{path}: unsupported MBTK version {version}")
    off = 7
    metas = []
    for _ in range(count):
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        metas.append((np.dtype(_DTYPES[code]), shape))
    arrays = []
    for dt, shape in metas:
        nbytes = int(np.prod(shape)) * dt.itemsize
        arrays.append(np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy())
        off += nbytes
    if off != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    inputs, labels, mask = arrays
    return _KINDS[kind], Batch(inputs, labels, mask.astype(bool))
