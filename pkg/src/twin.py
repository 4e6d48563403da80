"""Digital-twin mesh: ingestion, spatial index, cropping, sampling, ray casting."""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from src.errors import EmptyCropError, EmptyMeshError, MeshParseError
from src.seeding import as_generator

logger = logging.getLogger(__name__)

DEFAULT_HALF_EXTENT_XY = 75.0
DEFAULT_LEAF_SIZE = 8
RAY_T_MIN = 1e-6
_DEGENERATE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class TwinMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    face_normals: np.ndarray
    degenerate_count: int = 0

    @classmethod
    def from_arrays(cls, vertices, triangles) -> "TwinMesh":
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshParseError("triangle index out of range")

        corners = vertices[triangles]
        cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        norms = np.linalg.norm(cross, axis=1)
        valid = 0.5 * norms > _DEGENERATE_AREA
        degenerate = int((~valid).sum())
        if degenerate:
            logger.info("dropped %d degenerate triangles", degenerate)
        triangles = triangles[valid]
        if len(triangles) == 0:
            raise EmptyMeshError("mesh has no non-degenerate triangles")
        normals = cross[valid] / norms[valid, None]
        return cls(vertices, triangles, normals, degenerate)

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @property
    def triangle_areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def total_area(self) -> float:
        return float(self.triangle_areas.sum())

    def __len__(self) -> int:
        return len(self.triangles)

    def subset(self, keep: np.ndarray) -> "TwinMesh":
        triangles = self.triangles[keep]
        used, inverse = np.unique(triangles, return_inverse=True)
        return TwinMesh(
            self.vertices[used],
            inverse.reshape(-1, 3),
            self.face_normals[keep],
            0,
        )

    @cached_property
    def index(self) -> "SpatialIndex":
        return SpatialIndex(self)


def merge_meshes(parts: list[tuple[np.ndarray, np.ndarray]]) -> TwinMesh:
    vertices, triangles, offset = [], [], 0
    for v, t in parts:
        vertices.append(np.asarray(v, dtype=float))
        triangles.append(np.asarray(t, dtype=np.int64) + offset)
        offset += len(v)
    return TwinMesh.from_arrays(np.vstack(vertices), np.vstack(triangles))


# --- ingestion -------------------------------------------------------------


def _parse_obj(lines: list[str]) -> tuple[list, list]:
    vertices, faces = [], []
    for number, raw in enumerate(lines, start=1):
        parts = raw.split()
        if not parts or parts[0] not in ("v", "f"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
                if len(vertices[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            else:
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                # многоугольник режем веером
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshParseError(f"line {number}: {exc}", line=number) from exc
    return vertices, faces


def _parse_ply(lines: list[str]) -> tuple[list, list]:
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("line 1: missing 'ply' magic", line=1)
    n_vertices = n_faces = None
    properties: list[str] = []
    current = None
    body_start = None
    for number, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshParseError(f"line {number}: only ascii PLY is supported", line=number)
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vertices = int(parts[2])
            elif current == "face":
                n_faces = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            properties.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = number
            break
    if body_start is None or n_vertices is None:
        raise MeshParseError("header without vertex element or end_header")
    try:
        ix, iy, iz = (properties.index(a) for a in ("x", "y", "z"))
    except ValueError as exc:
        raise MeshParseError("vertex element lacks x, y, z") from exc

    vertices, faces = [], []
    face_records = 0
    body = lines[body_start:]
    for k, raw in enumerate(body):
        number = body_start + k + 1
        parts = raw.split()
        if not parts:
            continue
        try:
            if len(vertices) < n_vertices:
                values = [float(x) for x in parts]
                vertices.append([values[ix], values[iy], values[iz]])
            elif n_faces is None or face_records < n_faces:
                face_records += 1
                count = int(parts[0])
                idx = [int(x) for x in parts[1 : 1 + count]]
                if len(idx) != count or count < 3:
                    raise ValueError("malformed face record")
                for j in range(1, count - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
        except (ValueError, IndexError) as exc:
            raise MeshParseError(f"line {number}: {exc}", line=number) from exc
    if len(vertices) != n_vertices:
        raise MeshParseError(f"expected {n_vertices} vertices, got {len(vertices)}")
    return vertices, faces


def load_mesh(path: str | Path, fmt: str | None = None) -> TwinMesh:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    lines = path.read_text().splitlines()
    if fmt == "obj":
        vertices, faces = _parse_obj(lines)
    elif fmt == "ply":
        vertices, faces = _parse_ply(lines)
    else:
        raise MeshParseError(f"unsupported mesh format '{fmt}'")
    if not faces:
        raise EmptyMeshError(f"{path} contains no faces")
    if np.max(faces) >= len(vertices) or np.min(faces) < 0:
        raise MeshParseError("face references a missing vertex")
    mesh = TwinMesh.from_arrays(vertices, faces)
    logger.info(
        "loaded %s: %d triangles (%d degenerate dropped)",
        path.name,
        len(mesh),
        mesh.degenerate_count,
    )
    return mesh


def save_mesh(mesh: TwinMesh, path: str | Path) -> None:
    rows = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    rows += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(rows) + "\n")


# --- point / ray primitives --------------------------------------------------


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, element-wise over broadcast arrays."""
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    v_in = vb * denom
    w_in = vc * denom

    region_a = (d1 <= 0) & (d2 <= 0)
    region_b = (d3 >= 0) & (d4 <= d3)
    edge_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    region_c = (d6 >= 0) & (d5 <= d6)
    edge_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    edge_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    interior = a + ab * v_in[..., None] + ac * w_in[..., None]
    choices = [
        a,
        b,
        a + ab * t_ab[..., None],
        c,
        a + ac * t_ac[..., None],
        b + (c - b) * t_bc[..., None],
    ]
    out = interior
    # приоритет регионов как в алгоритме Эриксона: последний np.where важнее
    for cond, value in reversed(list(zip(
        [region_a, region_b, edge_ab, region_c, edge_ac, edge_bc], choices
    ))):
        out = np.where(cond[..., None], value, out)
    return out


def ray_triangle_t(origins, directions, a, b, c) -> np.ndarray:
    """Möller-Trumbore, element-wise; np.inf where there is no hit with t >= RAY_T_MIN."""
    e1 = b - a
    e2 = c - a
    pvec = np.cross(directions, e2)
    det = np.einsum("...i,...i", e1, pvec)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins - a
    u = np.einsum("...i,...i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("...i,...i", directions, qvec) * inv
    t = np.einsum("...i,...i", e2, qvec) * inv
    hit = ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t >= RAY_T_MIN)
    return np.where(hit, t, np.inf)


def closest_point_brute(mesh: TwinMesh, queries: np.ndarray):
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    c = mesh.corners
    pts = closest_points_on_triangles(
        queries[:, None, :], c[None, :, 0], c[None, :, 1], c[None, :, 2]
    )
    d2 = np.sum((pts - queries[:, None, :]) ** 2, axis=2)
    tri = np.argmin(d2, axis=1)
    rows = np.arange(len(queries))
    return pts[rows, tri], tri, np.sqrt(d2[rows, tri])


def ray_cast_brute(mesh: TwinMesh, origins: np.ndarray, directions: np.ndarray):
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    c = mesh.corners
    t = ray_triangle_t(
        origins[:, None, :], directions[:, None, :], c[None, :, 0], c[None, :, 1], c[None, :, 2]
    )
    tri = np.argmin(t, axis=1)
    best = t[np.arange(len(origins)), tri]
    return best, np.where(np.isfinite(best), tri, -1)


# --- bounding volume hierarchy ----------------------------------------------


@dataclass
class _Nodes:
    lo: list = field(default_factory=list)
    hi: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    start: list = field(default_factory=list)
    count: list = field(default_factory=list)


class SpatialIndex:
    """Median-split AABB tree over the mesh triangles.

    Queries are batched: a node is visited once per batch with the subset of
    queries that can still improve on it.
    """

    def __init__(self, mesh: TwinMesh, leaf_size: int = DEFAULT_LEAF_SIZE):
        if len(mesh) == 0:
            raise EmptyMeshError("cannot index an empty mesh")
        self.mesh = mesh
        self.leaf_size = max(1, int(leaf_size))
        corners = mesh.corners
        self._a, self._b, self._c = corners[:, 0], corners[:, 1], corners[:, 2]
        tri_lo = corners.min(axis=1)
        tri_hi = corners.max(axis=1)
        centroids = corners.mean(axis=1)

        nodes = _Nodes()
        order = np.arange(len(mesh))
        self._order = order
        self._build(nodes, order, 0, len(mesh), tri_lo, tri_hi, centroids)
        pad = 1e-9
        self._lo = np.array(nodes.lo) - pad
        self._hi = np.array(nodes.hi) + pad
        self._left = np.array(nodes.left)
        self._right = np.array(nodes.right)
        self._start = np.array(nodes.start)
        self._count = np.array(nodes.count)

    def _build(self, nodes, order, start, stop, tri_lo, tri_hi, centroids) -> int:
        idx = order[start:stop]
        node = len(nodes.lo)
        nodes.lo.append(tri_lo[idx].min(axis=0))
        nodes.hi.append(tri_hi[idx].max(axis=0))
        nodes.left.append(-1)
        nodes.right.append(-1)
        nodes.start.append(start)
        nodes.count.append(stop - start)
        if stop - start <= self.leaf_size:
            return node
        cent = centroids[idx]
        axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
        sorted_idx = idx[np.argsort(cent[:, axis], kind="stable")]
        order[start:stop] = sorted_idx
        mid = (start + stop) // 2
        nodes.left[node] = self._build(nodes, order, start, mid, tri_lo, tri_hi, centroids)
        nodes.right[node] = self._build(nodes, order, mid, stop, tri_lo, tri_hi, centroids)
        return node

    @property
    def node_count(self) -> int:
        return len(self._lo)

    def closest(self, queries: np.ndarray):
        """Return (points, triangle ids, distances) for a batch of queries."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        n = len(queries)
        best_d2 = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.int64)
        best_pt = np.zeros((n, 3))
        stack = [(0, np.arange(n))]
        while stack:
            node, qidx = stack.pop()
            q = queries[qidx]
            gap = np.maximum(self._lo[node] - q, 0.0) + np.maximum(q - self._hi[node], 0.0)
            keep = np.einsum("ij,ij->i", gap, gap) <= best_d2[qidx]
            qidx, q = qidx[keep], q[keep]
            if len(qidx) == 0:
                continue
            if self._left[node] < 0:
                tris = self._order[self._start[node] : self._start[node] + self._count[node]]
                pts = closest_points_on_triangles(
                    q[:, None, :], self._a[tris][None], self._b[tris][None], self._c[tris][None]
                )
                d2 = np.sum((pts - q[:, None, :]) ** 2, axis=2)
                k = np.argmin(d2, axis=1)
                rows = np.arange(len(qidx))
                cand = d2[rows, k]
                better = cand < best_d2[qidx]
                upd = qidx[better]
                best_d2[upd] = cand[better]
                best_tri[upd] = tris[k[better]]
                best_pt[upd] = pts[rows[better], k[better]]
            else:
                stack.append((self._right[node], qidx))
                stack.append((self._left[node], qidx))
        return best_pt, best_tri, np.sqrt(best_d2)

    def ray_cast(self, origins: np.ndarray, directions: np.ndarray):
        """Return (t, triangle ids); t = inf and id = -1 where nothing is hit."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.int64)
        safe = np.where(np.abs(directions) < 1e-15, np.copysign(1e-15, directions), directions)
        inv = 1.0 / safe
        stack = [(0, np.arange(n))]
        while stack:
            node, qidx = stack.pop()
            o, inv_d = origins[qidx], inv[qidx]
            t1 = (self._lo[node] - o) * inv_d
            t2 = (self._hi[node] - o) * inv_d
            t_near = np.minimum(t1, t2).max(axis=1)
            t_far = np.maximum(t1, t2).min(axis=1)
            keep = (t_near <= t_far) & (t_far >= RAY_T_MIN) & (t_near <= best_t[qidx])
            qidx = qidx[keep]
            if len(qidx) == 0:
                continue
            if self._left[node] < 0:
                tris = self._order[self._start[node] : self._start[node] + self._count[node]]
                t = ray_triangle_t(
                    origins[qidx][:, None, :],
                    directions[qidx][:, None, :],
                    self._a[tris][None],
                    self._b[tris][None],
                    self._c[tris][None],
                )
                k = np.argmin(t, axis=1)
                cand = t[np.arange(len(qidx)), k]
                better = cand < best_t[qidx]
                upd = qidx[better]
                best_t[upd] = cand[better]
                best_tri[upd] = tris[k[better]]
            else:
                stack.append((self._right[node], qidx))
                stack.append((self._left[node], qidx))
        return best_t, best_tri


def closest_point_with_normal(index: SpatialIndex, q: np.ndarray):
    """Single-query form: (point, unit normal, distance)."""
    pts, tri, dist = index.closest(np.asarray(q, dtype=float)[None])
    return pts[0], index.mesh.face_normals[tri[0]], float(dist[0])


def ray_cast(index: SpatialIndex, origin: np.ndarray, direction: np.ndarray) -> float | None:
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("ray direction must be unit length")
    t, _ = index.ray_cast(np.asarray(origin, dtype=float)[None], direction[None])
    return float(t[0]) if np.isfinite(t[0]) else None


def segment_blocked(index: SpatialIndex, starts: np.ndarray, ends: np.ndarray, margin: float = 1e-3):
    """True where the open segment start→end crosses the mesh."""
    vec = ends - starts
    length = np.linalg.norm(vec, axis=1)
    directions = vec / np.maximum(length, 1e-12)[:, None]
    t, _ = index.ray_cast(starts, directions)
    return t < length - margin


# --- cropping and sampling ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class LocalCrop:
    mesh: TwinMesh
    center: np.ndarray
    half_extent_xy: float

    @property
    def index(self) -> SpatialIndex:
        return self.mesh.index


def crop_local(
    mesh: TwinMesh, center: np.ndarray, half_extent_xy: float = DEFAULT_HALF_EXTENT_XY
) -> LocalCrop:
    center = np.asarray(center, dtype=float)
    inside = np.all(np.abs(mesh.vertices[:, :2] - center[:2]) <= half_extent_xy, axis=1)
    keep = inside[mesh.triangles].any(axis=1)
    if not keep.any():
        raise EmptyCropError(
            f"no twin geometry within {half_extent_xy} m of ({center[0]:.1f}, {center[1]:.1f})"
        )
    return LocalCrop(mesh.subset(keep), center, float(half_extent_xy))


@dataclass(frozen=True, eq=False)
class SurfaceSample:
    points: np.ndarray
    normals: np.ndarray
    triangle_ids: np.ndarray
    barycentric: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def sample_surface(mesh: TwinMesh, density: float, seed) -> SurfaceSample:
    if density <= 0:
        raise ValueError("sampling density must be positive")
    rng = as_generator(seed)
    areas = mesh.triangle_areas
    count = int(rng.poisson(density * areas.sum()))
    tri = rng.choice(len(mesh), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    corners = mesh.corners[tri]
    points = np.einsum("nk,nki->ni", bary, corners)
    return SurfaceSample(points, mesh.face_normals[tri], tri, bary)
