"""Geodesic (icosahedral) triangulations of spheres and surface quadrature.

Quadrature uses the three projected edge midpoints of every spherical
triangle, each weighted by a third of the exact spherical area. Neighbouring
triangles share midpoint nodes, and per-triangle contributions are reduced
with ``math.fsum`` so sums over a mask and its complement add up exactly to
the sum over the whole mesh.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import LevelTooLarge
from .field import Field, norm2

MAX_LEVEL = 9


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v / np.sqrt(norm2(v))[:, None], f


def unit(x):
    return x / np.sqrt(norm2(x))[:, None]


def subdivide(verts, faces):
    """One level of 1-to-4 midpoint subdivision with shared edge vertices."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.reshape(3, -1)
    mids = unit(verts[uniq[:, 0]] + verts[uniq[:, 1]])
    base = len(verts)
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = inv[0] + base, inv[1] + base, inv[2] + base
    new = np.stack([
        np.stack([a, ab, ca], 1),
        np.stack([ab, b, bc], 1),
        np.stack([ca, bc, c], 1),
        np.stack([ab, bc, ca], 1),
    ], axis=1).reshape(-1, 3)
    return np.concatenate([verts, mids]), new


def spherical_areas(a, b, c):
    """Unit-sphere areas of triangles with unit-vector corners (L'Huilier)."""
    def arc(p, q):
        return 2.0 * np.arcsin(np.minimum(1.0, 0.5 * np.sqrt(norm2(p - q))))

    la, lb, lc = arc(b, c), arc(c, a), arc(a, b)
    s = 0.5 * (la + lb + lc)
    prod = (np.tan(0.5 * s) * np.tan(0.5 * (s - la)) * np.tan(0.5 * (s - lb))
            * np.tan(0.5 * (s - lc)))
    return 4.0 * np.arctan(np.sqrt(np.maximum(prod, 0.0)))


def midpoint_nodes(unit_verts, tris):
    """Projected edge midpoints, shape ``(3, ntri, 3)`` (unit vectors)."""
    a, b, c = (unit_verts[tris[:, k]] for k in range(3))
    return np.stack([unit(a + b), unit(b + c), unit(c + a)])


@dataclass(eq=False)
class GeoMesh:
    """Triangulation of the sphere of given radius (or of a patch of it).

    ``level`` is the icosahedral subdivision depth, or ``None`` for meshes
    that are locally refined or not built from the icosahedron.
    """

    radius: float
    level: int | None
    vertices: np.ndarray
    triangles: np.ndarray
    areas: np.ndarray = dc_field(init=False, repr=False)
    centroids: np.ndarray = dc_field(init=False, repr=False)
    normals: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        uv = unit(self.vertices)
        a, b, c = (uv[self.triangles[:, k]] for k in range(3))
        self.areas = spherical_areas(a, b, c) * self.radius ** 2
        self.normals = unit(a + b + c)
        self.centroids = self.normals * self.radius
        self._nodes = None

    def __len__(self):
        return len(self.triangles)

    @property
    def unit_vertices(self):
        return unit(self.vertices)

    def quadrature_nodes(self):
        """Unit normals at the three quadrature nodes of each triangle, (3, n, 3)."""
        if self._nodes is None:
            self._nodes = midpoint_nodes(self.unit_vertices, self.triangles)
        return self._nodes

    def total_area(self) -> float:
        return math.fsum(self.areas)

    def sizes(self):
        """Circumscribing distance from each centroid to its farthest corner."""
        v = self.vertices
        return np.sqrt(np.max([norm2(v[self.triangles[:, k]] - self.centroids)
                               for k in range(3)], axis=0))

    def subset(self, mask) -> "GeoMesh":
        mask = np.asarray(mask, dtype=bool)
        return GeoMesh(self.radius, self.level, self.vertices, self.triangles[mask])

    def to_off(self) -> str:
        lines = ["OFF", f"{len(self.vertices)} {len(self.triangles)} 0"]
        lines += [" ".join(repr(float(c)) for c in v) for v in self.vertices]
        lines += ["3 " + " ".join(str(int(i)) for i in t) for t in self.triangles]
        return "\n".join(lines) + "\n"


def build_mesh(radius: float, level: int) -> GeoMesh:
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if level < 0:
        raise ValueError("level must be >= 0")
    if level > MAX_LEVEL:
        raise LevelTooLarge(f"level {level} exceeds the memory guard ({MAX_LEVEL})")
    v, f = _icosahedron()
    for _ in range(level):
        v, f = subdivide(v, f)
    return GeoMesh(float(radius), int(level), v * radius, f)


def _resolve_mask(mesh, mask):
    if mask is None or (isinstance(mask, str) and mask.upper() == "ALL"):
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(mesh),):
        raise ValueError(f"mask has shape {mask.shape}, expected ({len(mesh)},)")
    return mask


def _node_values(mesh: GeoMesh, field: Field, mask):
    nodes = mesh.quadrature_nodes()
    if mask is not None:
        nodes = nodes[:, mask]
    n = nodes.shape[1]
    u = field.evaluate((nodes * mesh.radius).reshape(-1, 3)).reshape(3, n, 3)
    return nodes, u


def flux_contributions(mesh: GeoMesh, field: Field, mask=None) -> np.ndarray:
    """Per-triangle ``area/3 * sum(u . n)`` over the three nodes."""
    mask = _resolve_mask(mesh, mask)
    nodes, u = _node_values(mesh, field, mask)
    un = u[..., 0] * nodes[..., 0] + u[..., 1] * nodes[..., 1] + u[..., 2] * nodes[..., 2]
    areas = mesh.areas if mask is None else mesh.areas[mask]
    return (areas / 3.0) * (un[0] + un[1] + un[2])


def integrate_flux(mesh: GeoMesh, field: Field, mask=None) -> float:
    """Outward flux of ``field`` through the marked triangles (all if ``mask`` is None)."""
    return math.fsum(flux_contributions(mesh, field, mask))


def node_weights_and_speeds(mesh: GeoMesh, field: Field, mask=None):
    """Flat quadrature weights and ``|u|`` at the nodes of the marked triangles."""
    mask = _resolve_mask(mesh, mask)
    _, u = _node_values(mesh, field, mask)
    areas = mesh.areas if mask is None else mesh.areas[mask]
    w = np.broadcast_to(areas / 3.0, (3, len(areas)))
    speed = np.sqrt(u[..., 0] ** 2 + u[..., 1] ** 2 + u[..., 2] ** 2)
    return w.T.ravel(), speed.T.ravel()


def integrate_scalar(mesh: GeoMesh, field: Field, p: float, mask=None) -> float:
    """Quadrature of ``|u|^p`` over the marked triangles."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    w, speed = node_weights_and_speeds(mesh, field, mask)
    if w.size == 0:
        return 0.0
    return math.fsum(w * speed ** p)
