"""Classification of the outer sphere into the entry set of the inner ball.

A point ``eta`` on ``dB_alpha`` belongs to the entry set when its streamline
reaches ``B_r`` without first leaving ``B_alpha``. Each mesh triangle is
decided by its centroid; the resulting measure and flux come with two kinds
of interval:

* ``measure_lo/measure_hi`` (and the flux analogues) bracket the effect of
  seeds whose trace could not be decided (budget exhausted, stagnation,
  unevaluable field);
* ``bracket_lo/bracket_hi`` additionally widen by the boundary band, the
  triangles whose neighbours disagree on membership. This is the
  discretisation uncertainty that :func:`refine` shrinks.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadRadii
from .field import Field, norm2
from .spheremesh import GeoMesh, build_mesh, flux_contributions, unit
from .tracer import Fate, TraceConfig, trace_many

log = logging.getLogger(__name__)

TANGENCY_RTOL = 1e-10


class Status(enum.IntEnum):
    MEMBER = 0
    NON_MEMBER = 1
    UNDETERMINED = 2
    TANGENTIAL = 3


@dataclass(eq=False)
class EntrySetMap:
    alpha: float
    r: float
    level: int
    mesh: GeoMesh
    status: np.ndarray
    normal_flow: np.ndarray          # u . n at each centroid
    field: Field = dc_field(repr=False)
    cfg: TraceConfig = dc_field(repr=False)
    workers: int = 1
    refined_levels: int = 0
    notes: list = dc_field(default_factory=list)

    measure_lo: float = dc_field(init=False)
    measure_hi: float = dc_field(init=False)
    signed_flux_member: float = dc_field(init=False)
    flux_lo_mag: float = dc_field(init=False)
    flux_hi_mag: float = dc_field(init=False)
    band: np.ndarray = dc_field(init=False, repr=False)
    bracket_lo: float = dc_field(init=False)
    bracket_hi: float = dc_field(init=False)
    flux_bracket_lo: float = dc_field(init=False)
    flux_bracket_hi: float = dc_field(init=False)

    def __post_init__(self):
        self._summarize()

    def _summarize(self):
        mesh, st = self.mesh, self.status
        areas = mesh.areas
        member = st == Status.MEMBER
        undet = st == Status.UNDETERMINED
        self.measure_lo = math.fsum(areas[member])
        self.measure_hi = self.measure_lo + math.fsum(areas[undet])

        contrib = flux_contributions(mesh, self.field)
        self.signed_flux_member = math.fsum(contrib[member])
        self.flux_lo_mag = abs(self.signed_flux_member)
        undet_in = undet & (self.normal_flow < 0)
        extra = contrib[undet_in]
        if not np.all(np.isfinite(extra)):
            self.flux_hi_mag = math.inf
        else:
            self.flux_hi_mag = self.flux_lo_mag + abs(math.fsum(extra))

        self.band = boundary_band(mesh, st)
        open_side = self.band & (st == Status.NON_MEMBER) & (self.normal_flow < 0)
        self.bracket_lo = math.fsum(areas[member & ~self.band])
        self.bracket_hi = self.measure_hi + math.fsum(areas[open_side])
        self.flux_bracket_lo = abs(math.fsum(contrib[member & ~self.band]))
        self.flux_bracket_hi = self.flux_hi_mag + abs(math.fsum(contrib[open_side]))

    # -- convenience ------------------------------------------------------
    def counts(self) -> dict[str, int]:
        return {s.name.lower(): int(np.count_nonzero(self.status == s)) for s in Status}

    @property
    def member_mask(self):
        return self.status == Status.MEMBER

    @property
    def is_empty(self) -> bool:
        return not self.member_mask.any()

    @property
    def undetermined_fraction(self) -> float:
        """Undetermined area as a fraction of the whole sphere."""
        return (self.measure_hi - self.measure_lo) / (4.0 * math.pi * self.alpha ** 2)

    def summary(self) -> dict:
        return {
            "alpha": self.alpha,
            "r": self.r,
            "level": self.level,
            "refined_levels": self.refined_levels,
            "triangles": len(self.mesh),
            "counts": self.counts(),
            "measure_lo": self.measure_lo,
            "measure_hi": self.measure_hi,
            "flux_lo": self.flux_lo_mag,
            "flux_hi": self.flux_hi_mag,
            "signed_flux_member": self.signed_flux_member,
            "bracket_measure": [self.bracket_lo, self.bracket_hi],
            "bracket_flux": [self.flux_bracket_lo, self.flux_bracket_hi],
            "undetermined_fraction": self.undetermined_fraction,
        }

    def to_json(self) -> dict:
        out = self.summary()
        out["field"] = self.field.describe()
        out["trace_config"] = self.cfg.to_dict()
        out["notes"] = list(self.notes)
        return out

    def status_csv(self) -> str:
        names = [s.name.lower() for s in Status]
        rows = ["tri_index,status"] + [f"{i},{names[s]}" for i, s in enumerate(self.status)]
        return "\n".join(rows) + "\n"


def _membership_class(status):
    # Tangential and non-member triangles are on the same side of the
    # membership boundary; undetermined ones form their own class.
    cls = np.ones(len(status), dtype=np.int8)
    cls[status == Status.MEMBER] = 0
    cls[status == Status.UNDETERMINED] = 2
    return cls


def boundary_band(mesh: GeoMesh, status, k: int = 12) -> np.ndarray:
    """Triangles touching a triangle of a different membership class.

    Works on locally refined (non-conforming) meshes: two triangles count as
    neighbours when their circumscribing balls around the centroids overlap.
    """
    cls = _membership_class(np.asarray(status))
    band = np.zeros(len(cls), dtype=bool)
    present = np.unique(cls)
    if present.size < 2:
        return band
    cent = mesh.centroids
    size = mesh.sizes()
    for v in present:
        inv = np.flatnonzero(cls == v)
        other = np.flatnonzero(cls != v)
        kk = min(k, inv.size)
        bound = 1.05 * (size[other].max() + size[inv].max())
        dist, j = cKDTree(cent[inv]).query(cent[other], k=kk, distance_upper_bound=bound)
        if kk == 1:
            dist, j = dist[:, None], j[:, None]
        found = np.isfinite(dist)
        j = np.where(found, j, 0)
        touch = found & (dist <= 1.05 * (size[other][:, None] + size[inv][j]))
        hit = touch.any(axis=1)
        band[other[hit]] = True
        band[inv[np.unique(j[touch])]] = True
    return band


def _classify_points(field, centroids, normals, r, alpha, cfg, workers, notes):
    u = field.evaluate(centroids)
    un = u[:, 0] * normals[:, 0] + u[:, 1] * normals[:, 1] + u[:, 2] * normals[:, 2]
    speed = np.sqrt(norm2(u))
    status = np.full(len(centroids), Status.NON_MEMBER, dtype=np.int8)
    bad = ~np.isfinite(un)
    status[bad] = Status.UNDETERMINED
    if bad.any():
        notes.append(f"{int(bad.sum())} centroids not evaluable; marked undetermined")
    tangential = ~bad & (np.abs(un) <= TANGENCY_RTOL * speed)
    status[tangential] = Status.TANGENTIAL
    inflow = np.flatnonzero(~bad & ~tangential & (un < 0))
    if inflow.size:
        res = trace_many(field, centroids[inflow], r, alpha, cfg, workers=workers)
        fate = res.fate
        status[inflow[fate == Fate.ENTERED_INNER]] = Status.MEMBER
        status[inflow[fate == Fate.EXITED_OUTER]] = Status.NON_MEMBER
        undecided = (fate == Fate.BUDGET_EXHAUSTED) | (fate == Fate.STAGNATED) | (fate == Fate.ABORTED)
        status[inflow[undecided]] = Status.UNDETERMINED
        for f in (Fate.BUDGET_EXHAUSTED, Fate.STAGNATED, Fate.ABORTED):
            n = int(np.count_nonzero(fate == f))
            if n:
                msg = f"{n} seeds {f.name.lower()}; marked undetermined"
                notes.append(msg)
                log.info(msg)
    return status, un


def _check_radii(alpha, r):
    if not (0 < r < alpha):
        raise BadRadii(f"need 0 < r < alpha, got r={r}, alpha={alpha}")


def classify(field: Field, alpha: float, r: float, level: int,
             cfg: TraceConfig | None = None, workers: int = 1) -> EntrySetMap:
    """Decide entry-set membership for every triangle of the level-``level`` mesh."""
    _check_radii(alpha, r)
    cfg = cfg or TraceConfig.for_alpha(alpha)
    mesh = build_mesh(alpha, level)
    notes: list[str] = []
    status, un = _classify_points(field, mesh.centroids, mesh.normals, r, alpha, cfg, workers, notes)
    return EntrySetMap(alpha=alpha, r=r, level=level, mesh=mesh, status=status, normal_flow=un,
                       field=field, cfg=cfg, workers=workers, notes=notes)


def _split_band(mesh: GeoMesh, band):
    """Replace band triangles by their four midpoint children, in place order."""
    uv = mesh.unit_vertices
    tris = mesh.triangles
    parents = np.flatnonzero(band)
    a, b, c = tris[parents, 0], tris[parents, 1], tris[parents, 2]
    nb = parents.size
    base = len(uv)
    mids = np.concatenate([unit(uv[a] + uv[b]), unit(uv[b] + uv[c]), unit(uv[c] + uv[a])])
    ab = base + np.arange(nb)
    bc = base + nb + np.arange(nb)
    ca = base + 2 * nb + np.arange(nb)
    kids = np.stack([
        np.stack([a, ab, ca], 1), np.stack([ab, b, bc], 1),
        np.stack([ca, bc, c], 1), np.stack([ab, bc, ca], 1),
    ], axis=1)                                  # (nb, 4, 3)
    counts = np.where(band, 4, 1)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    new_tris = np.empty((counts.sum(), 3), dtype=np.int64)
    keep = ~band
    new_tris[start[keep]] = tris[keep]
    slots = start[parents][:, None] + np.arange(4)
    new_tris[slots.ravel()] = kids.reshape(-1, 3)
    is_child = np.zeros(len(new_tris), dtype=bool)
    is_child[slots.ravel()] = True
    origin = np.repeat(np.arange(len(tris)), counts)
    verts = np.concatenate([uv, mids]) * mesh.radius
    return GeoMesh(mesh.radius, None, verts, new_tris), is_child, origin


def refine(emap: EntrySetMap, extra_levels: int = 1) -> EntrySetMap:
    """Re-classify the boundary band at ``extra_levels`` finer subdivisions.

    Each pass splits the current band into children and classifies only the
    children; triangles away from the membership boundary keep their status.
    """
    if extra_levels < 1:
        raise ValueError("extra_levels must be >= 1")
    cur = emap
    for _ in range(extra_levels):
        if not cur.band.any():
            break
        mesh, is_child, origin = _split_band(cur.mesh, cur.band)
        status = cur.status[origin].copy()
        un = cur.normal_flow[origin].copy()
        notes = list(cur.notes)
        kid = np.flatnonzero(is_child)
        st_k, un_k = _classify_points(cur.field, mesh.centroids[kid], mesh.normals[kid],
                                      cur.r, cur.alpha, cur.cfg, cur.workers, notes)
        status[kid] = st_k
        un[kid] = un_k
        cur = EntrySetMap(alpha=cur.alpha, r=cur.r, level=cur.level, mesh=mesh, status=status,
                          normal_flow=un, field=cur.field, cfg=cur.cfg, workers=cur.workers,
                          refined_levels=cur.refined_levels + 1, notes=notes)
    if cur is emap:
        cur = replace(emap, notes=list(emap.notes))
    return cur


def refine_until(emap: EntrySetMap, rtol: float, max_extra: int) -> EntrySetMap:
    """Refine one level at a time until the measure bracket is within ``rtol``."""
    cur = emap
    for _ in range(max_extra):
        width = cur.bracket_hi - cur.bracket_lo
        if width <= rtol * max(cur.measure_lo, 0.0) or not cur.band.any():
            break
        cur = refine(cur, 1)
    return cur


def stability_probe(field: Field, emap: EntrySetMap, n_probes: int, radius: float,
                    candidates=None, seed: int = 0) -> float:
    """Fraction of perturbed member seeds that remain members.

    ``n_probes`` member centroids (optionally restricted to ``candidates``)
    are moved a geodesic distance ``radius`` in a random tangent direction and
    traced again.
    """
    pool = emap.member_mask if candidates is None else emap.member_mask & np.asarray(candidates, bool)
    idx = np.flatnonzero(pool)
    if idx.size == 0:
        raise ValueError("stability_probe needs at least one member triangle")
    rng = np.random.default_rng(seed)
    pick = rng.choice(idx, size=n_probes, replace=idx.size < n_probes)
    n = emap.mesh.normals[pick]
    g = rng.normal(size=(n_probes, 3))
    t = unit(g - (g * n).sum(axis=1, keepdims=True) * n)
    ang = radius / emap.alpha
    seeds = emap.alpha * unit(math.cos(ang) * n + math.sin(ang) * t)
    u = field.evaluate(seeds)
    nn = unit(seeds)
    inflow = (u * nn).sum(axis=1) < 0
    members = np.zeros(n_probes, dtype=bool)
    if inflow.any():
        res = trace_many(field, seeds[inflow], emap.r, emap.alpha, emap.cfg, workers=emap.workers)
        members[np.flatnonzero(inflow)] = res.fate == Fate.ENTERED_INNER
    return float(members.mean())
