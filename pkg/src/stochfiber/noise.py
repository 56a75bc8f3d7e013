"""Reproducible Brownian increments for the per-cell Wiener processes.

Tables hold increments of the standard ``dN``-dimensional Wiener process.
The 1/sqrt(ds) white-noise scaling belongs to the diffusion coefficient,
not to the increments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "WienerIncrements",
    "trajectory_seed",
    "sample",
    "sample_batch",
    "coarsen",
    "aggregate_cells",
    "dump",
    "load",
]

MAGIC = b"FSDEW1"
_HEADER = struct.Struct("<6sqqqdQ")


@dataclass(frozen=True)
class WienerIncrements:
    """Increment table of shape ``(..., M, N, dim)``; a leading axis stacks samples."""

    data: np.ndarray
    dt: float
    seed: int = 0

    def __post_init__(self):
        if self.data.ndim < 3:
            raise ValueError(f"increment table needs shape (..., M, N, dim), got {self.data.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def steps(self) -> int:
        return self.data.shape[-3]

    @property
    def N(self) -> int:
        return self.data.shape[-2]

    @property
    def dim(self) -> int:
        return self.data.shape[-1]

    def terminal(self) -> np.ndarray:
        """w(T) - w(0), the sum over all steps."""
        return self.data.sum(axis=-3)


def trajectory_seed(base_seed: int, j: int) -> int:
    return (int(base_seed) ^ int(j)) & 0xFFFFFFFFFFFFFFFF


def _generator(seed: int) -> np.random.Generator:
    # Philox is counter based: a block of draws depends only on (key, counter).
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def sample(seed: int, M: int, N: int, dim: int, dt: float) -> WienerIncrements:
    if min(M, N, dim) < 1:
        raise ValueError("M, N and dim must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    data = _generator(seed).standard_normal((M, N, dim)) * np.sqrt(dt)
    return WienerIncrements(data, float(dt), int(seed))


def sample_batch(base_seed: int, samples, M: int, N: int, dim: int, dt: float) -> WienerIncrements:
    """Stack the tables of trajectories ``samples`` (indices) on seeds base ^ j."""
    tables = [sample(trajectory_seed(base_seed, j), M, N, dim, dt).data for j in samples]
    return WienerIncrements(np.stack(tables), float(dt), int(base_seed))


def coarsen(w: WienerIncrements, k: int) -> WienerIncrements:
    """Sum blocks of ``k`` consecutive increments; couples coarse and fine paths."""
    k = int(k)
    if k < 1 or w.steps % k:
        raise ValueError(f"k={k} must be a positive divisor of the step count {w.steps}")
    if k == 1:
        return w
    shape = w.data.shape
    data = w.data.reshape(shape[:-3] + (shape[-3] // k, k) + shape[-2:]).sum(axis=-3)
    return WienerIncrements(data, w.dt * k, w.seed)


def aggregate_cells(w: WienerIncrements, factor: int) -> WienerIncrements:
    """Noise of a grid whose cells are ``factor`` times wider.

    Fine cell j covers [j ds, (j+1) ds]; coarse cell i collects fine cells
    factor*i .. factor*i + factor - 1. The sum is rescaled by 1/sqrt(factor)
    so the coarse processes are again standard Wiener processes. Fine cells
    inside the coarse clamp cell are discarded.
    """
    factor = int(factor)
    Nf = w.N
    if factor < 1 or (Nf + 1) % factor:
        raise ValueError(f"N+1={Nf + 1} is not divisible by {factor}")
    if factor == 1:
        return w
    Nc = (Nf + 1) // factor - 1
    padded = np.concatenate([np.zeros(w.data.shape[:-2] + (1, w.dim)), w.data], axis=-2)
    cells = padded.reshape(w.data.shape[:-2] + (Nc + 1, factor, w.dim)).sum(axis=-2)
    return WienerIncrements(cells[..., 1:, :] / np.sqrt(factor), w.dt, w.seed)


def dump(w: WienerIncrements, path) -> None:
    """Write a single table as little-endian float64 after a fixed header."""
    if w.data.ndim != 3:
        raise ValueError("only single-trajectory tables can be dumped")
    M, N, dim = w.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, M, N, dim, w.dt, w.seed & 0xFFFFFFFFFFFFFFFF))
        fh.write(np.ascontiguousarray(w.data, dtype="<f8").tobytes())


def load(path) -> WienerIncrements:
    raw = Path(path).read_bytes()
    magic, M, N, dim, dt, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size, count=M * N * dim)
    return WienerIncrements(data.reshape(M, N, dim).astype(float), dt, seed)
