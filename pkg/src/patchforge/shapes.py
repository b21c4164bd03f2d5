"""Parametric furniture-like meshes assembled from boxes, cylinders and spheres.

These stand in for CAD collections at desk scale: categories share parts (legs, slabs,
rods), which is exactly the structure patch priors are meant to transfer.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .datagen import TriangleMesh, box_mesh, cylinder_mesh, icosphere, merge_meshes, write_obj


def _legs(rng, half_x, half_y, z_top, thickness, round_legs):
    parts = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx, cy = sx * (half_x - thickness), sy * (half_y - thickness)
            if round_legs:
                parts.append(cylinder_mesh(thickness * 0.7, 0.0, z_top, (cx, cy), segments=12))
            else:
                parts.append(box_mesh((cx - thickness / 2, cy - thickness / 2, 0.0),
                                      (cx + thickness / 2, cy + thickness / 2, z_top)))
    return parts


def table(rng) -> TriangleMesh:
    hx, hy = rng.uniform(0.35, 0.5), rng.uniform(0.25, 0.45)
    h = rng.uniform(0.45, 0.7)
    top = rng.uniform(0.04, 0.08)
    leg = rng.uniform(0.04, 0.07)
    parts = [box_mesh((-hx, -hy, h - top), (hx, hy, h))]
    parts += _legs(rng, hx, hy, h - top, leg, rng.random() < 0.5)
    return merge_meshes(parts)


def chair(rng) -> TriangleMesh:
    hx, hy = rng.uniform(0.2, 0.3), rng.uniform(0.2, 0.3)
    seat_h = rng.uniform(0.35, 0.5)
    seat_t = rng.uniform(0.04, 0.07)
    back_h = rng.uniform(0.3, 0.5)
    leg = rng.uniform(0.035, 0.06)
    parts = [box_mesh((-hx, -hy, seat_h - seat_t), (hx, hy, seat_h)),
             box_mesh((-hx, hy - seat_t, seat_h), (hx, hy, seat_h + back_h))]
    parts += _legs(rng, hx, hy, seat_h - seat_t, leg, rng.random() < 0.3)
    return merge_meshes(parts)


def stool(rng) -> TriangleMesh:
    r = rng.uniform(0.15, 0.25)
    h = rng.uniform(0.4, 0.6)
    parts = [cylinder_mesh(r, h - 0.05, h, segments=20)]
    for k in range(3):
        a = 2 * np.pi * k / 3
        parts.append(cylinder_mesh(0.025, 0.0, h - 0.05, (0.7 * r * np.cos(a), 0.7 * r * np.sin(a)), segments=10))
    return merge_meshes(parts)


def lamp(rng) -> TriangleMesh:
    h = rng.uniform(0.5, 0.8)
    base = rng.uniform(0.1, 0.18)
    shade = rng.uniform(0.1, 0.18)
    return merge_meshes([
        cylinder_mesh(base, 0.0, 0.04, segments=20),
        cylinder_mesh(0.02, 0.04, h, segments=10),
        icosphere(2, shade, (0.0, 0.0, h)),
    ])


def shelf(rng) -> TriangleMesh:
    hx, hy = rng.uniform(0.3, 0.45), rng.uniform(0.12, 0.2)
    h = rng.uniform(0.6, 0.9)
    t = 0.035
    parts = [box_mesh((-hx, -hy, 0), (-hx + t, hy, h)), box_mesh((hx - t, -hy, 0), (hx, hy, h)),
             box_mesh((-hx, hy - t, 0), (hx, hy, h))]
    for z in np.linspace(0, h - t, int(rng.integers(3, 5))):
        parts.append(box_mesh((-hx, -hy, z), (hx, hy, z + t)))
    return merge_meshes(parts)


def bench(rng) -> TriangleMesh:
    hx, hy = rng.uniform(0.45, 0.5), rng.uniform(0.12, 0.2)
    h = rng.uniform(0.3, 0.45)
    t = rng.uniform(0.04, 0.07)
    return merge_meshes([
        box_mesh((-hx, -hy, h - t), (hx, hy, h)),
        box_mesh((-hx + 0.05, -hy, 0), (-hx + 0.05 + t, hy, h - t)),
        box_mesh((hx - 0.05 - t, -hy, 0), (hx - 0.05, hy, h - t)),
    ])


CATEGORIES = {"table": table, "chair": chair, "stool": stool, "lamp": lamp, "shelf": shelf, "bench": bench}


def make_shape(category: str, rng) -> TriangleMesh:
    try:
        return CATEGORIES[category](rng)
    except KeyError:
        raise ValueError(f"unknown synthetic category {category!r}; known: {sorted(CATEGORIES)}") from None


def write_synthetic_meshes(root, per_category: dict, seed: int = 0) -> list[Path]:
    """Write ``<root>/<category>/<category>_<k>.obj`` for each requested count."""
    root = Path(root)
    paths = []
    for cat in sorted(per_category):
        rng = np.random.default_rng([seed, sorted(CATEGORIES).index(cat)])
        (root / cat).mkdir(parents=True, exist_ok=True)
        for k in range(per_category[cat]):
            p = root / cat / f"{cat}_{k:03d}.obj"
            write_obj(p, make_shape(cat, rng))
            paths.append(p)
    return paths
