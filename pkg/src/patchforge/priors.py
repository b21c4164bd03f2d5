"""Learnable complete-shape priors, seeded per category by mean-shift clustering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff
from .diff import Tensor
from .grid import TsdfGrid


def mean_shift(points, bandwidth: float, max_iter: int = 300, tol: float = 1e-7):
    """Flat-kernel mean shift.

    Every point climbs to the mean of the original points within ``bandwidth`` until its
    shift drops below ``tol``. Converged positions closer than ``bandwidth / 2`` are merged
    greedily in input order. Returns ``(modes, labels, counts)`` with modes ordered by
    descending population (ties keep first-seen order).
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("mean_shift needs a non-empty (n, m) array")
    if not np.all(np.isfinite(X)):
        raise ValueError("mean_shift points must be finite")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    sq_norms = (X * X).sum(axis=1)
    Y = X.copy()
    active = np.ones(len(X), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d2 = (Y[idx] * Y[idx]).sum(axis=1)[:, None] + sq_norms[None, :] - 2.0 * Y[idx] @ X.T
        within = d2 <= bandwidth * bandwidth * (1 + 1e-12)
        for row, i in enumerate(idx):
            nb = within[row]
            if not nb.any():
                # nearest point keeps an isolated seed anchored
                nb = np.zeros(len(X), dtype=bool)
                nb[np.argmin(d2[row])] = True
            new = X[nb].mean(axis=0)
            if np.linalg.norm(new - Y[i]) < tol:
                active[i] = False
            Y[i] = new
    modes, members = [], []
    labels = np.empty(len(X), dtype=np.int64)
    for i, y in enumerate(Y):
        for k, m in enumerate(modes):
            if np.linalg.norm(y - m) < bandwidth / 2:
                labels[i] = k
                members[k].append(i)
                break
        else:
            labels[i] = len(modes)
            modes.append(y)
            members.append([i])
    counts = np.array([len(m) for m in members])
    order = sorted(range(len(modes)), key=lambda k: (-counts[k], k))
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return np.stack([modes[k] for k in order]), remap[labels], counts[order]


def median_bandwidth(points, scale: float = 0.5) -> float:
    X = np.asarray(points, dtype=np.float64)
    if len(X) < 2:
        return 1.0
    d = np.sqrt(np.maximum((X * X).sum(1)[:, None] + (X * X).sum(1)[None, :] - 2 * X @ X.T, 0))
    med = float(np.median(d[np.triu_indices(len(X), 1)]))
    return scale * med if med > 0 else 1.0


@dataclass(frozen=True)
class CategoryRegistry:
    names: tuple

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("category names must be unique")

    def index(self, name: str) -> int:
        return self.names.index(name) + 1

    def __len__(self):
        return len(self.names)


class PriorPool:
    """Per-category lists of learnable D^3 prior volumes, flattened in category-major order."""

    def __init__(self, priors: dict, truncation: float = 2.5):
        if not priors:
            raise ValueError("prior pool needs at least one category")
        self.registry = CategoryRegistry(tuple(priors))
        self.truncation = float(truncation)
        self.priors = {}
        D = None
        for cat, vols in priors.items():
            if not len(vols):
                raise ValueError(f"category {cat!r} has no priors")
            tensors = []
            for v in vols:
                arr = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float32)
                D = D or arr.shape[0]
                if arr.shape != (D, D, D):
                    raise ValueError(f"prior for {cat!r} has shape {arr.shape}, expected {(D,) * 3}")
                tensors.append(Tensor(arr.copy(), requires_grad=True))
            self.priors[cat] = tensors
        self.resolution = D

    def entries(self):
        return [(cat, k) for cat in self.registry.names for k in range(len(self.priors[cat]))]

    def tensors(self, categories=None) -> list[Tensor]:
        return [t for cat in (categories or self.registry.names) for t in self.priors[cat]]

    def canonical_order(self) -> tuple:
        """Sorted category names; evaluating in this order makes results independent of insertion order."""
        return tuple(sorted(self.registry.names))

    def __len__(self):
        return sum(len(v) for v in self.priors.values())

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors())

    def stacked(self, categories=None) -> Tensor:
        """All priors as one (P, 1, D, D, D) tensor; differentiable w.r.t. each prior."""
        D = self.resolution
        return diff.concat([diff.reshape(t, (1, 1, D, D, D)) for t in self.tensors(categories)], axis=0)

    def clamp_(self):
        t = np.float32(self.truncation)
        for p in self.tensors():
            np.clip(p.data, -t, t, out=p.data)

    def reordered(self, categories) -> "PriorPool":
        return PriorPool({c: [t.data for t in self.priors[c]] for c in categories}, self.truncation)

    def state_dict(self) -> dict:
        return {f"prior/{cat}/{k}": self.priors[cat][k].data for cat, k in self.entries()}

    @classmethod
    def from_state_dict(cls, state: dict, truncation: float = 2.5, categories=None) -> "PriorPool":
        grouped = {}
        for name, arr in state.items():
            if not name.startswith("prior/"):
                continue
            cat, k = name[len("prior/"):].rsplit("/", 1)
            grouped.setdefault(cat, {})[int(k)] = arr
        if not grouped:
            raise ValueError("state holds no priors")
        order = list(categories) if categories is not None else sorted(grouped)
        return cls({c: [grouped[c][k] for k in sorted(grouped[c])] for c in order}, truncation)


def init_priors(shapes_by_category: dict, k_max: int = 3, bandwidth=None, bandwidth_scale: float = 0.5,
                truncation: float = 2.5, max_iter: int = 300) -> PriorPool:
    """Cluster each category's training shapes; the ``k_max`` most populated modes become its priors."""
    priors = {}
    for cat, shapes in shapes_by_category.items():
        if not len(shapes):
            raise ValueError(f"category {cat!r} has no training shapes")
        vols = [np.asarray(s.values if isinstance(s, TsdfGrid) else s, dtype=np.float32) for s in shapes]
        flat = np.stack([v.reshape(-1) for v in vols]).astype(np.float64)
        bw = bandwidth if bandwidth is not None else median_bandwidth(flat, bandwidth_scale)
        modes, _, _ = mean_shift(flat, bw, max_iter=max_iter)
        D = vols[0].shape[0]
        priors[cat] = [m.astype(np.float32).reshape(D, D, D) for m in modes[:k_max]]
    return PriorPool(priors, truncation)


def chunk_values(pool: PriorPool, R: int, categories=None) -> Tensor:
    """Prior patches as a (P * N^3, R^3) tensor: prior-major (categories in ``categories`` or
    registry order), then patch index in canonical order."""
    D = pool.resolution
    if D % R:
        raise ValueError(f"patch side {R} does not divide prior resolution {D}")
    N = D // R
    P = len(pool)
    x = diff.reshape(pool.stacked(categories), (P, N, R, N, R, N, R))
    x = diff.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return diff.reshape(x, (P * N**3, R**3))


def freeze(pool: PriorPool) -> None:
    for t in pool.tensors():
        t.requires_grad = False
        t.grad = None


def unfreeze(pool: PriorPool) -> None:
    for t in pool.tensors():
        t.requires_grad = True
