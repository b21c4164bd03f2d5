"""Virtual scanning: normalize meshes, render depth from a ring of cameras, fuse into TSDFs."""
from __future__ import annotations

import json
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .grid import TsdfGrid, voxel_centers, write_grid

log = logging.getLogger(__name__)

GRID_EXT = ".pcts"


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self, tol: float = 1e-12) -> "TriangleMesh":
        if self.is_empty:
            return self
        return TriangleMesh(self.vertices, self.triangles[self.areas() > tol])

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# primitive shapes used for synthetic datasets and tests -----------------------------

def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces))


def box_mesh(lo, hi) -> TriangleMesh:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    # outward-facing quads over the corner index bits (x<<2 | y<<1 | z)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.array(tris))


def cylinder_mesh(radius: float, z0: float, z1: float, center_xy=(0.0, 0.0), segments: int = 24) -> TriangleMesh:
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    cx, cy = center_xy
    ring = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    verts = np.concatenate([
        np.column_stack([ring, np.full(segments, z0)]),
        np.column_stack([ring, np.full(segments, z1)]),
        [[cx, cy, z0], [cx, cy, z1]],
    ])
    b0, b1 = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i), (b0, j, i), (b1, segments + i, segments + j)]
    return TriangleMesh(verts, np.array(tris))


def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box on the origin and scale its longest side to 1."""
    mesh = mesh.cleaned()
    if mesh.is_empty:
        raise ValueError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("mesh has zero extent")
    return TriangleMesh((mesh.vertices - 0.5 * (lo + hi)) / extent, mesh.triangles)


# cameras ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    width: int = 240
    height: int = 240
    fov_deg: float = 50.0

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2)

    @property
    def principal(self):
        return 0.5 * self.width, 0.5 * self.height


@dataclass(frozen=True)
class CameraPose:
    position: tuple
    target: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 0.0, 1.0)

    def frame(self):
        """(center, forward, right, up) unit vectors of the look-at frame."""
        c = np.asarray(self.position, dtype=np.float64)
        f = np.asarray(self.target, dtype=np.float64) - c
        f /= np.linalg.norm(f)
        up = np.asarray(self.up, dtype=np.float64)
        if abs(np.dot(f, up / np.linalg.norm(up))) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        r = np.cross(f, up)
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return c, f, r, u


def fibonacci_viewpoints(n: int, radius: float = 2.0) -> list[CameraPose]:
    poses = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5) / n
        rho = math.sqrt(max(0.0, 1.0 - z * z))
        th = golden * i
        poses.append(CameraPose((radius * rho * math.cos(th), radius * rho * math.sin(th), radius * z)))
    return poses


@dataclass
class DepthView:
    pose: CameraPose
    intrinsics: Intrinsics
    depth: np.ndarray


@numba.njit(cache=True, nogil=True)
def _rasterize(verts, tris, c, f, r, u, focal, cx, cy, width, height):
    depth = np.zeros((height, width))
    eps = 1e-12
    for t in range(tris.shape[0]):
        a = verts[tris[t, 0]]
        b = verts[tris[t, 1]]
        d = verts[tris[t, 2]]
        umin, umax, vmin, vmax = 1e30, -1e30, 1e30, -1e30
        behind = False
        for p in (a, b, d):
            rel = p - c
            zc = rel[0] * f[0] + rel[1] * f[1] + rel[2] * f[2]
            if zc <= eps:
                behind = True
                break
            pu = cx + focal * (rel[0] * r[0] + rel[1] * r[1] + rel[2] * r[2]) / zc
            pv = cy - focal * (rel[0] * u[0] + rel[1] * u[1] + rel[2] * u[2]) / zc
            umin = min(umin, pu)
            umax = max(umax, pu)
            vmin = min(vmin, pv)
            vmax = max(vmax, pv)
        if behind:
            continue
        x0 = max(0, int(math.floor(umin - 0.5)))
        x1 = min(width - 1, int(math.ceil(umax - 0.5)))
        y0 = max(0, int(math.floor(vmin - 0.5)))
        y1 = min(height - 1, int(math.ceil(vmax - 0.5)))
        e1 = b - a
        e2 = d - a
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                du = (px + 0.5 - cx) / focal
                dv = -(py + 0.5 - cy) / focal
                ray = f + du * r + dv * u
                ray = ray / math.sqrt(ray[0] ** 2 + ray[1] ** 2 + ray[2] ** 2)
                # Moller-Trumbore
                pvec = np.cross(ray, e2)
                det = e1[0] * pvec[0] + e1[1] * pvec[1] + e1[2] * pvec[2]
                if abs(det) < eps:
                    continue
                inv = 1.0 / det
                tvec = c - a
                bu = (tvec[0] * pvec[0] + tvec[1] * pvec[1] + tvec[2] * pvec[2]) * inv
                if bu < 0.0 or bu > 1.0:
                    continue
                qvec = np.cross(tvec, e1)
                bv = (ray[0] * qvec[0] + ray[1] * qvec[1] + ray[2] * qvec[2]) * inv
                if bv < 0.0 or bu + bv > 1.0:
                    continue
                dist = (e2[0] * qvec[0] + e2[1] * qvec[1] + e2[2] * qvec[2]) * inv
                if dist > eps and (depth[py, px] == 0.0 or dist < depth[py, px]):
                    depth[py, px] = dist
    return depth


def render_depth(mesh: TriangleMesh, pose: CameraPose, intrinsics: Intrinsics = Intrinsics()) -> DepthView:
    """Per-pixel distance along the pixel-center ray to the nearest triangle; 0 where the ray misses."""
    c, f, r, u = pose.frame()
    if not mesh.is_empty:
        lo, hi = mesh.bounds()
        if np.all(c >= lo) and np.all(c <= hi):
            raise ValueError("camera lies inside the mesh bounding box")
    cx, cy = intrinsics.principal
    depth = _rasterize(mesh.vertices, mesh.triangles, c, f, r, u,
                       intrinsics.focal, cx, cy, intrinsics.width, intrinsics.height)
    return DepthView(pose, intrinsics, depth)


# fusion -----------------------------------------------------------------------------

def _project(points, view: DepthView):
    """Pixel lookup of world points: returns (in_image, depth_at_pixel, distance_to_camera)."""
    c, f, r, u = view.pose.frame()
    intr = view.intrinsics
    cx, cy = intr.principal
    rel = points - c
    zc = rel @ f
    with np.errstate(divide="ignore", invalid="ignore"):
        pu = cx + intr.focal * (rel @ r) / zc
        pv = cy - intr.focal * (rel @ u) / zc
    ok = (zc > 1e-9) & (pu >= 0) & (pu < intr.width) & (pv >= 0) & (pv < intr.height)
    px = np.where(ok, pu, 0).astype(np.int64)
    py = np.where(ok, pv, 0).astype(np.int64)
    depth = np.where(ok, view.depth[py, px], 0.0)
    return ok, depth, np.linalg.norm(rel, axis=1)


def fuse_views(views, D: int = 32, truncation: float = 2.5, voxel_size: float | None = None,
               carve_interior: bool = True, return_weights: bool = False):
    """Curless-Levoy fusion of projective signed distances into a D^3 TSDF (values in voxel units).

    Each view contributes ``min(sdf, t)`` with unit weight wherever ``sdf >= -t``, and ``+t``
    where its pixel saw no surface. Voxels nobody observed stay at ``+t``, except that with
    ``carve_interior`` a voxel occluded (``sdf < -t``) in every view that sees it becomes ``-t``.
    """
    if not views:
        raise ValueError("fuse_views needs at least one view")
    voxel_size = 1.0 / D if voxel_size is None else voxel_size
    t = float(truncation)
    pts = voxel_centers(D, voxel_size).reshape(-1, 3)
    wsum = np.zeros(len(pts))
    vsum = np.zeros(len(pts))
    occluded = np.zeros(len(pts), dtype=bool)
    for view in views:
        ok, depth, dist = _project(pts, view)
        hit = ok & (depth > 0)
        free = ok & (depth == 0)
        sdf = np.where(hit, (depth - dist) / voxel_size, 0.0)
        near = hit & (sdf >= -t)
        vsum += np.where(near, np.minimum(sdf, t), 0.0) + np.where(free, t, 0.0)
        wsum += near | free
        occluded |= hit & (sdf < -t)
    vals = np.full(len(pts), t)
    seen = wsum > 0
    vals[seen] = vsum[seen] / wsum[seen]
    if carve_interior:
        vals[~seen & occluded] = -t
    grid = TsdfGrid(np.clip(vals, -t, t).reshape(D, D, D), t, voxel_size)
    if return_weights:
        return grid, wsum.reshape(D, D, D)
    return grid


# samples ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ScanConfig:
    n_complete_views: int = 20
    n_partial_views: int = 4
    resolution: int = 32
    truncation: float = 2.5
    padding: float = 0.05
    camera_radius: float = 2.0
    intrinsics: Intrinsics = field(default_factory=Intrinsics)

    @property
    def voxel_size(self) -> float:
        return (1.0 + 2 * self.padding) / self.resolution


def sample_seed(seed: int, sample_id: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(sample_id.encode("utf-8"))) % (2**32)


def partial_view_indices(n_views: int, n_partial: int, seed: int) -> list[int]:
    if n_partial > n_views:
        raise ValueError(f"cannot draw {n_partial} partial views from {n_views}")
    return [int(i) for i in np.random.default_rng(seed).permutation(n_views)[:n_partial]]


def make_sample(mesh: TriangleMesh, cfg: ScanConfig = ScanConfig(), seed: int = 0, views=None):
    """Complete TSDF fused from every viewpoint, plus one single-view partial TSDF per chosen view."""
    poses = fibonacci_viewpoints(cfg.n_complete_views, cfg.camera_radius)
    if views is None:
        views = [render_depth(mesh, p, cfg.intrinsics) for p in poses]
    gt = fuse_views(views, cfg.resolution, cfg.truncation, cfg.voxel_size)
    picks = partial_view_indices(len(views), cfg.n_partial_views, seed)
    partials = [fuse_views([views[k]], cfg.resolution, cfg.truncation, cfg.voxel_size, carve_interior=False)
                for k in picks]
    return gt, partials


def make_noisy_partial(mesh: TriangleMesh, cfg: ScanConfig = ScanConfig(), seed: int = 0,
                       dropout: float = 0.3, n_clutter: int = 2, depth_noise: float = 0.004) -> TsdfGrid:
    """Single-view partial with clutter blobs, pixel dropout and depth jitter (stand-in for real scans)."""
    rng = np.random.default_rng(seed)
    pose = fibonacci_viewpoints(cfg.n_complete_views, cfg.camera_radius)[int(rng.integers(cfg.n_complete_views))]
    half = 0.5 + cfg.padding
    blobs = []
    for _ in range(n_clutter):
        center = rng.uniform(-half * 0.9, half * 0.9, size=3)
        blobs.append(icosphere(2, float(rng.uniform(0.04, 0.09)), center))
    scene = merge_meshes([mesh] + blobs) if blobs else mesh
    view = render_depth(scene, pose, cfg.intrinsics)
    depth = view.depth.copy()
    hit = depth > 0
    depth[hit] += rng.normal(0.0, depth_noise, size=int(hit.sum()))
    depth[hit & (rng.random(depth.shape) < dropout)] = 0.0
    depth = np.maximum(depth, 0.0)
    return fuse_views([DepthView(pose, cfg.intrinsics, depth)], cfg.resolution, cfg.truncation,
                      cfg.voxel_size, carve_interior=False)


# manifests --------------------------------------------------------------------------

@dataclass
class SampleManifest:
    sample_id: str
    category: str
    split: str
    gt_path: str
    partial_paths: list
    voxel_size: float

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if len(self.partial_paths) < 1:
            raise ValueError("a sample needs at least one partial scan")


def split_map(categories, test_categories) -> dict:
    test = set(test_categories)
    return {c: ("test" if c in test else "train") for c in categories}


def build_manifest(mesh_root, category_map: dict | None = None, n_partial_views: int = 4,
                   voxel_size: float = 1.1 / 32) -> list[SampleManifest]:
    """One record per ``<mesh_root>/<category>/<id>.obj``, sorted by id; grid paths are relative."""
    root = Path(mesh_root)
    files = sorted(root.glob("*/*.obj")) if root.is_dir() else []
    if not files:
        log.warning("no meshes found under %s; manifest is empty", root)
        return []
    category_map = category_map or {}
    records, seen = [], {}
    for f in files:
        cat, sid = f.parent.name, f.stem
        if sid in seen:
            raise ValueError(f"duplicate sample id {sid!r} in {seen[sid]} and {cat}")
        seen[sid] = cat
        split = category_map.get(cat, "train")
        records.append(SampleManifest(
            sample_id=sid, category=cat, split=split,
            gt_path=f"{cat}/{sid}/gt{GRID_EXT}",
            partial_paths=[f"{cat}/{sid}/partial_{k}{GRID_EXT}" for k in range(n_partial_views)],
            voxel_size=voxel_size,
        ))
    records.sort(key=lambda r: r.sample_id)
    return records


def write_manifest(path, records) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in records], indent=2, sort_keys=True) + "\n")


def load_manifest(path, check_files: bool = True) -> list[SampleManifest]:
    path = Path(path)
    records = [SampleManifest(**r) for r in json.loads(path.read_text())]
    for r in records:
        if len(r.partial_paths) != 4:
            log.debug("sample %s has %d partial scans", r.sample_id, len(r.partial_paths))
        r.gt_path = str(path.parent / r.gt_path)
        r.partial_paths = [str(path.parent / p) for p in r.partial_paths]
        if check_files:
            for p in [r.gt_path, *r.partial_paths]:
                if not Path(p).exists():
                    raise FileNotFoundError(f"manifest {path} references missing file {p}")
    return records


def generate_dataset(mesh_root, out_dir, cfg: ScanConfig = ScanConfig(), seed: int = 0,
                     test_categories=(), workers: int | None = None) -> list[SampleManifest]:
    """Scan every mesh under ``mesh_root`` and write grids plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(mesh_root)
    cats = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    records = build_manifest(root, split_map(cats, test_categories), cfg.n_partial_views, cfg.voxel_size)

    def job(rec):
        mesh = normalize_mesh(read_obj(root / rec.category / f"{rec.sample_id}.obj"))
        gt, partials = make_sample(mesh, cfg, sample_seed(seed, rec.sample_id))
        d = out / rec.category / rec.sample_id
        d.mkdir(parents=True, exist_ok=True)
        write_grid(out / rec.gt_path, gt)
        for p, g in zip(rec.partial_paths, partials):
            write_grid(out / p, g)
        return rec.sample_id

    workers = workers or int(os.environ.get("PATCHFORGE_THREADS", "1"))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for sid in pool.map(job, records):
            log.info("scanned %s", sid)
    write_manifest(out / "manifest.json", records)
    return records
