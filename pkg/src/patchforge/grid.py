"""Truncated signed distance volumes: storage, patch chunking, sign partitions and file I/O.

Layout: ``values[x, y, z]`` in C order, so z is the fastest-varying axis on disk.
Negative values are inside/occupied, positive (and exactly zero) are outside/empty.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PCTS"
VERSION = 1
_HEADER = struct.Struct("<4sIIff")

CLAMP = "clamp"
ERROR = "error"


class GridFormatError(ValueError):
    """Base class for grid file parse failures."""


class BadMagicError(GridFormatError):
    pass


class VersionMismatchError(GridFormatError):
    pass


class TruncatedFileError(GridFormatError):
    pass


class NonFinitePayloadError(GridFormatError):
    pass


@dataclass(frozen=True, eq=False)
class TsdfGrid:
    values: np.ndarray
    truncation: float = 2.5
    voxel_size: float = 1.0 / 32
    policy: str = CLAMP
    n_clamped: int = field(default=0, init=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float32, copy=True)
        if vals.ndim != 3 or len(set(vals.shape)) != 1:
            raise ValueError(f"grid must be a cube, got shape {vals.shape}")
        if vals.shape[0] < 4:
            raise ValueError(f"resolution must be >= 4, got {vals.shape[0]}")
        if not (self.truncation > 0 and self.voxel_size > 0):
            raise ValueError("truncation and voxel_size must be positive")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        t = np.float32(self.truncation)
        over = np.abs(vals) > t
        n_over = int(over.sum())
        if n_over:
            if self.policy == ERROR:
                raise ValueError(f"{n_over} values exceed truncation {self.truncation}")
            if self.policy != CLAMP:
                raise ValueError(f"unknown out-of-range policy {self.policy!r}")
            np.clip(vals, -t, t, out=vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        # header stores f32, so keep the metadata f32-representable for exact roundtrips
        object.__setattr__(self, "truncation", float(np.float32(self.truncation)))
        object.__setattr__(self, "voxel_size", float(np.float32(self.voxel_size)))
        object.__setattr__(self, "n_clamped", n_over)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TsdfGrid):
            return NotImplemented
        return (
            self.truncation == other.truncation
            and self.voxel_size == other.voxel_size
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def with_values(self, values) -> "TsdfGrid":
        return TsdfGrid(values, self.truncation, self.voxel_size, self.policy)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (D, D, D, 3), grid centered on the origin."""
        D = self.resolution
        return voxel_centers(D, self.voxel_size)

    def occupancy(self) -> np.ndarray:
        return self.values < 0


def voxel_centers(D: int, voxel_size: float) -> np.ndarray:
    ax = (np.arange(D, dtype=np.float64) + 0.5) * voxel_size - 0.5 * D * voxel_size
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class PatchChunk:
    origin: tuple
    side: int
    values: np.ndarray

    def __post_init__(self):
        if any(o % self.side for o in self.origin):
            raise ValueError(f"origin {self.origin} is not a multiple of {self.side}")
        if self.values.shape != (self.side,) * 3:
            raise ValueError(f"chunk values must be {self.side}^3, got {self.values.shape}")


@dataclass(frozen=True)
class SignPartition:
    occ_wrong: np.ndarray
    empty_wrong: np.ndarray
    correct: np.ndarray


def _check_divisible(D: int, R: int):
    if R <= 0 or D % R:
        raise ValueError(f"patch side {R} does not divide resolution {D}")


def chunk_array(values: np.ndarray, R: int) -> np.ndarray:
    """(..., D, D, D) -> (..., N^3, R, R, R) in canonical patch order (C order over patch index)."""
    D = values.shape[-1]
    _check_divisible(D, R)
    N = D // R
    lead = values.shape[:-3]
    v = values.reshape(*lead, N, R, N, R, N, R)
    k = len(lead)
    v = v.transpose(*range(k), k, k + 2, k + 4, k + 1, k + 3, k + 5)
    return v.reshape(*lead, N**3, R, R, R)


def recompose_array(patches: np.ndarray, D: int) -> np.ndarray:
    """Inverse of :func:`chunk_array`."""
    R = patches.shape[-1]
    _check_divisible(D, R)
    N = D // R
    lead = patches.shape[:-4]
    if patches.shape[-4] != N**3:
        raise ValueError(f"expected {N**3} patches, got {patches.shape[-4]}")
    k = len(lead)
    v = patches.reshape(*lead, N, N, N, R, R, R)
    v = v.transpose(*range(k), k, k + 3, k + 1, k + 4, k + 2, k + 5)
    return v.reshape(*lead, D, D, D)


def chunk(grid: TsdfGrid, R: int) -> list[PatchChunk]:
    D = grid.resolution
    _check_divisible(D, R)
    N = D // R
    patches = chunk_array(grid.values, R)
    out = []
    for n, p in enumerate(patches):
        ix, iy, iz = np.unravel_index(n, (N, N, N))
        out.append(PatchChunk((int(ix) * R, int(iy) * R, int(iz) * R), R, p.copy()))
    return out


def recompose(chunks: list[PatchChunk], D: int, truncation: float = 2.5, voxel_size: float | None = None) -> TsdfGrid:
    if not chunks:
        raise ValueError("no chunks to recompose")
    R = chunks[0].side
    _check_divisible(D, R)
    out = np.empty((D, D, D), dtype=np.float32)
    seen = np.zeros((D // R,) * 3, dtype=bool)
    for c in chunks:
        if c.side != R:
            raise ValueError("chunks have mixed sides")
        if any(o + R > D for o in c.origin):
            raise ValueError(f"chunk at {c.origin} falls outside the grid")
        idx = tuple(o // R for o in c.origin)
        if seen[idx]:
            raise ValueError(f"overlapping chunk at {c.origin}")
        seen[idx] = True
        x, y, z = c.origin
        out[x:x + R, y:y + R, z:z + R] = c.values
    if not seen.all():
        raise ValueError(f"{int((~seen).sum())} chunks missing")
    return TsdfGrid(out, truncation, voxel_size if voxel_size is not None else 1.0 / D)


def sign_partition(pred, gt) -> SignPartition:
    """Split voxels by sign agreement. Accepts grids or raw arrays of equal shape; zero counts as positive."""
    p = pred.values if isinstance(pred, TsdfGrid) else np.asarray(pred)
    g = gt.values if isinstance(gt, TsdfGrid) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    p_neg = p < 0
    g_neg = g < 0
    return SignPartition(
        occ_wrong=~g_neg & p_neg,
        empty_wrong=g_neg & ~p_neg,
        correct=g_neg == p_neg,
    )


def to_bytes(grid: TsdfGrid) -> bytes:
    D = grid.resolution
    head = _HEADER.pack(MAGIC, VERSION, D, grid.truncation, grid.voxel_size)
    return head + grid.values.astype("<f4").tobytes(order="C")


def from_bytes(buf: bytes, policy: str = CLAMP) -> TsdfGrid:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("file shorter than header")
    _, version, D, trunc, vsize = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    need = D**3 * 4
    payload = buf[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedFileError(f"payload has {len(payload) // 4} floats, header declares {D}^3")
    if len(payload) > need:
        raise GridFormatError(f"{len(payload) - need} trailing bytes after payload")
    vals = np.frombuffer(payload, dtype="<f4").reshape(D, D, D)
    if not np.all(np.isfinite(vals)):
        raise NonFinitePayloadError("payload contains NaN or Inf")
    return TsdfGrid(vals.astype(np.float32), trunc, vsize, policy)


def write_grid(path, grid: TsdfGrid) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(grid))
    tmp.replace(path)


def read_grid(path, policy: str = CLAMP) -> TsdfGrid:
    return from_bytes(Path(path).read_bytes(), policy)
