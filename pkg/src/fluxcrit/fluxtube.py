"""Discrete flux tubes: push a patch of the outer sphere onto the inner one.

A patch ``D`` on ``dB_alpha`` is triangulated, every vertex is carried along
its streamline to the first hit with ``dB_r``, and the same connectivity on
the hit points gives the image patch ``D*``. For a divergence-free field the
flux through ``D`` and ``D*`` agree, and disjoint patches have disjoint
images. The lateral surface (mantle) is sampled from the boundary
streamlines so the tangency of ``u`` to it can be measured.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadRadii, DegenerateMantle, PatchNotEntirelyCaptured, PatchesOverlap
from .field import Field, norm2
from .spheremesh import GeoMesh, subdivide, integrate_flux, unit
from .tracer import Fate, TraceConfig, sample_paths, trace_many

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 64
BASE_TOLERANCE = 1e-3
PHI_PER_THETA = 6          # azimuthal nodes per polar row, per full turn
MAX_TURN = 0.05            # target turning angle between mantle samples (rad)
MAX_MANTLE_SAMPLES = 4096


# -- patch shapes -------------------------------------------------------------

@dataclass(frozen=True)
class Cap:
    axis: tuple
    half_angle: float

    def __post_init__(self):
        if not 0 < self.half_angle < math.pi:
            raise ValueError(f"half_angle must be in (0, pi), got {self.half_angle}")


@dataclass(frozen=True)
class Annulus:
    """Polar-angle band ``inner < theta < outer`` around ``axis``, optionally
    restricted to the azimuth range ``[phi0, phi1]``. ``inner=0`` gives a
    cap sector."""
    axis: tuple
    inner: float
    outer: float
    phi0: float = 0.0
    phi1: float = 2.0 * math.pi

    def __post_init__(self):
        if not 0 <= self.inner < self.outer < math.pi:
            raise ValueError(f"need 0 <= inner < outer < pi, got {self.inner}, {self.outer}")
        if not 0 < self.phi1 - self.phi0 <= 2.0 * math.pi + 1e-12:
            raise ValueError("need 0 < phi1 - phi0 <= 2 pi")


@dataclass(frozen=True, eq=False)
class TriangleSet:
    """Explicit triangles on the sphere, split 1-to-4 ``levels`` times
    before use; resolution is ignored."""
    vertices: np.ndarray
    triangles: np.ndarray
    levels: int = 0


@dataclass(frozen=True, eq=False)
class PatchSpec:
    shape: Cap | Annulus | TriangleSet
    alpha: float = 1.0

    @classmethod
    def cap(cls, axis, half_angle, alpha=1.0):
        return cls(Cap(tuple(map(float, axis)), float(half_angle)), float(alpha))

    @classmethod
    def annulus(cls, axis, inner, outer, phi0=0.0, phi1=2.0 * math.pi, alpha=1.0):
        return cls(Annulus(tuple(map(float, axis)), float(inner), float(outer),
                           float(phi0), float(phi1)), float(alpha))

    @classmethod
    def from_mask(cls, mesh: GeoMesh, mask, levels: int = 0):
        mask = np.asarray(mask, dtype=bool)
        return cls(TriangleSet(mesh.vertices, mesh.triangles[mask], int(levels)), mesh.radius)

    def describe(self) -> str:
        s = self.shape
        if isinstance(s, Cap):
            return f"cap:axis={_vec(s.axis)},half_angle={s.half_angle!r},alpha={self.alpha!r}"
        if isinstance(s, Annulus):
            return (f"annulus:axis={_vec(s.axis)},inner={s.inner!r},outer={s.outer!r},"
                    f"phi={s.phi0!r},{s.phi1!r},alpha={self.alpha!r}")
        return f"triangles:n={len(s.triangles)},levels={s.levels},alpha={self.alpha!r}"


def _vec(v):
    return ",".join(repr(float(c)) for c in v)


def _frame(axis):
    e3 = np.asarray(axis, dtype=np.float64)
    n = math.sqrt(float(e3 @ e3))
    if not n > 0:
        raise ValueError("patch axis must be non-zero")
    e3 = e3 / n
    ref = np.array([1.0, 0.0, 0.0]) if abs(e3[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(e3, ref)
    e1 /= math.sqrt(float(e1 @ e1))
    return e1, np.cross(e3, e1), e3


def _polar_patch(axis, inner, outer, phi0, phi1, alpha, resolution):
    """Structured (theta, phi) triangulation plus its boundary loops."""
    e1, e2, e3 = _frame(axis)
    full = phi1 - phi0 >= 2.0 * math.pi - 1e-12
    span = 2.0 * math.pi if full else phi1 - phi0
    n_t = int(resolution)
    n_p = max(1, int(round(PHI_PER_THETA * resolution * span / (2.0 * math.pi))))
    if full:
        n_p = max(n_p, 3)
    cols = n_p if full else n_p + 1
    pole = inner == 0.0

    theta = inner + (outer - inner) * np.arange(n_t + 1) / n_t
    phi = phi0 + span * np.arange(cols) / n_p
    first = 1 if pole else 0
    th, ph = np.meshgrid(theta[first:], phi, indexing="ij")
    st = np.sin(th)
    pts = (st * np.cos(ph))[..., None] * e1 + (st * np.sin(ph))[..., None] * e2 \
        + np.cos(th)[..., None] * e3
    verts = pts.reshape(-1, 3)
    off = 0
    if pole:
        verts = np.concatenate([e3[None, :], verts])
        off = 1

    def vid(i, j):
        # i counts rows of ``theta``; j is taken modulo the ring for full turns
        return off + (i - first) * cols + (j % cols if full else j)

    tris = []
    jj = np.arange(n_p)
    for i in range(n_t):
        if pole and i == 0:
            tris.append(np.stack([np.zeros(n_p, np.int64), vid(1, jj), vid(1, jj + 1)], 1))
            continue
        a, b = vid(i, jj), vid(i + 1, jj)
        c, d = vid(i + 1, jj + 1), vid(i, jj + 1)
        tris.append(np.stack([a, b, c], 1))
        tris.append(np.stack([a, c, d], 1))
    tris = np.concatenate(tris).astype(np.int64)

    rows = np.arange(first, n_t + 1)
    if full:
        loops = [vid(n_t, np.arange(n_p))]
        if not pole:
            loops.append(vid(0, np.arange(n_p))[::-1])
    else:
        start = [0] if pole else []
        loop = np.concatenate([
            np.asarray(start, dtype=np.int64),
            vid(rows, 0),
            vid(n_t, np.arange(1, n_p + 1)),
            vid(rows[::-1][1:], n_p),
        ])
        if not pole:
            loop = np.concatenate([loop, vid(0, np.arange(n_p - 1, 0, -1))])
        loops = [loop]
    return verts * alpha, tris, [np.asarray(l, dtype=np.int64) for l in loops]


def _boundary_loops(tris):
    """Closed loops of edges used by exactly one triangle, in traversal order."""
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bnd = e[cnt[inv.ravel()] == 1]
    nxt = {}
    for a, b in bnd:
        nxt.setdefault(int(a), []).append(int(b))
    loops, seen = [], set()
    for a0, _ in bnd:
        a0 = int(a0)
        if a0 in seen:
            continue
        loop, a = [], a0
        while a not in seen:
            seen.add(a)
            loop.append(a)
            cands = [b for b in nxt.get(a, []) if b not in seen]
            if not cands:
                break
            a = cands[0]
        loops.append(np.asarray(loop, dtype=np.int64))
    return loops


def patch_mesh(patch: PatchSpec, resolution: int = DEFAULT_RESOLUTION):
    """Triangulate a patch; returns ``(GeoMesh, boundary_loops)``."""
    s = patch.shape
    if isinstance(s, Cap):
        v, t, loops = _polar_patch(s.axis, 0.0, s.half_angle, 0.0, 2.0 * math.pi,
                                   patch.alpha, resolution)
    elif isinstance(s, Annulus):
        v, t, loops = _polar_patch(s.axis, s.inner, s.outer, s.phi0, s.phi1,
                                   patch.alpha, resolution)
    else:
        t = np.asarray(s.triangles, dtype=np.int64)
        used, t = np.unique(t, return_inverse=True)
        t = t.reshape(-1, 3)
        v = np.asarray(s.vertices, dtype=np.float64)[used]
        v = unit(v)
        for _ in range(s.levels):
            v, t = subdivide(v, t)
        v = v * patch.alpha
        loops = _boundary_loops(t)
    return GeoMesh(patch.alpha, None, v, t), loops


# -- tubes --------------------------------------------------------------------

@dataclass(eq=False)
class TubeResult:
    patch: PatchSpec
    r: float
    resolution: int
    source_mesh: GeoMesh
    image_mesh: GeoMesh
    loops: list
    flux_D: float
    flux_Dstar: float
    rel_err: float
    hit_parameter: np.ndarray
    injective: bool
    image_inflow: bool
    cfg: TraceConfig = dc_field(repr=False)
    tolerance: float = BASE_TOLERANCE
    passed: bool | None = None
    s_samples: np.ndarray | None = dc_field(default=None, repr=False)
    boundary_paths: list = dc_field(default_factory=list, repr=False)
    mantle_points: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 3)), repr=False)
    mantle_u: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 3)), repr=False)
    mantle_normals: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 3)), repr=False)
    max_mantle_normal: float | None = None
    notes: list = dc_field(default_factory=list)

    @property
    def alpha(self):
        return self.patch.alpha

    @property
    def boundary_polyline_in(self):
        return [self.source_mesh.vertices[l] for l in self.loops]

    @property
    def boundary_polyline_out(self):
        return [self.image_mesh.vertices[l] for l in self.loops]

    @property
    def mantle_samples(self):
        return list(zip(self.mantle_points, self.mantle_u, self.mantle_normals))

    def to_json(self) -> dict:
        return {
            "patch": self.patch.describe(),
            "alpha": self.alpha,
            "r": self.r,
            "resolution": self.resolution,
            "vertices": len(self.source_mesh.vertices),
            "triangles": len(self.source_mesh),
            "flux_D": self.flux_D,
            "flux_Dstar": self.flux_Dstar,
            "rel_err": self.rel_err,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_mantle_normal": self.max_mantle_normal,
            "injective": self.injective,
            "image_inflow": self.image_inflow,
            "trace_config": self.cfg.to_dict(),
            "notes": list(self.notes),
        }

    def to_off(self) -> str:
        """OFF mesh of D, the mantle and D*, faces coloured by group."""
        groups = [
            ("D", self.source_mesh.vertices, self.source_mesh.triangles, (1.0, 0.0, 0.0)),
            ("mantle", *_mantle_surface(self.boundary_paths), (0.0, 0.8, 0.0)),
            ("Dstar", self.image_mesh.vertices, self.image_mesh.triangles, (0.0, 0.0, 1.0)),
        ]
        verts, faces, head = [], [], []
        base = nf = 0
        for name, v, t, rgb in groups:
            head.append(f"# group {name}: faces {nf}..{nf + len(t) - 1}")
            verts.append(v)
            faces += [(tri + base, rgb) for tri in t]
            base += len(v)
            nf += len(t)
        verts = np.concatenate(verts) if verts else np.zeros((0, 3))
        lines = ["OFF", *head, f"{len(verts)} {len(faces)} 0"]
        lines += [" ".join(repr(float(c)) for c in p) for p in verts]
        lines += ["3 {} {} {} {} {} {}".format(*map(int, t), *rgb) for t, rgb in faces]
        return "\n".join(lines) + "\n"


def _mantle_surface(paths):
    verts, tris, base = [], [], 0
    for P in paths:
        nb, m = P.shape[:2]
        if nb < 2 or m < 2:
            continue
        j = np.arange(nb)[:, None]
        k = np.arange(m - 1)[None, :]
        a = base + j * m + k
        b = base + ((j + 1) % nb) * m + k
        quad = np.stack([a, b, b + 1, a + 1], -1).reshape(-1, 4)
        tris.append(quad[:, [0, 1, 2]])
        tris.append(quad[:, [0, 2, 3]])
        verts.append(P.reshape(-1, 3))
        base += nb * m
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), np.int64)
    return np.concatenate(verts), np.concatenate(tris)


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), 1e-300)


def _check_radii(alpha, r):
    if not (0 < r < alpha):
        raise BadRadii(f"need 0 < r < alpha, got r={r}, alpha={alpha}")


def advect_patch(field: Field, patch: PatchSpec, r: float, resolution: int = DEFAULT_RESOLUTION,
                 cfg: TraceConfig | None = None, workers: int = 1) -> TubeResult:
    """Map the triangulated patch onto ``dB_r`` by the first-hit map."""
    alpha = patch.alpha
    _check_radii(alpha, r)
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    cfg = cfg or TraceConfig.for_alpha(alpha)
    src, loops = patch_mesh(patch, resolution)
    v = src.vertices
    uv = src.unit_vertices
    u = field.evaluate(v)
    un = u[:, 0] * uv[:, 0] + u[:, 1] * uv[:, 1] + u[:, 2] * uv[:, 2]
    outflow = ~(un < 0)
    if outflow.any():
        # the hypothesis already fails; tracing (possibly closed orbits) would only cost time
        raise PatchNotEntirelyCaptured(
            f"{int(outflow.sum())} of {len(v)} patch vertices are not inflow", seeds=v[outflow])
    res = trace_many(field, v, r, alpha, cfg, workers=workers)
    bad = np.flatnonzero(res.fate != Fate.ENTERED_INNER)
    if bad.size:
        fates = {Fate(int(f)).name for f in res.fate[bad]}
        raise PatchNotEntirelyCaptured(
            f"{bad.size} of {len(v)} patch vertices do not reach r={r} inside alpha={alpha} "
            f"(fates: {', '.join(sorted(fates))})",
            seeds=v[bad])
    hits = res.hit_point
    notes = []
    radial = float(np.max(np.abs(np.sqrt(norm2(hits)) - r)))
    if radial > cfg.crossing_tol:
        notes.append(f"image vertices off the inner sphere by up to {radial:.3g}")
    image = GeoMesh(r, None, hits, src.triangles)

    # discrete injectivity: image vertices closer than crossing_tol must come
    # from (near) duplicate sources
    pairs = cKDTree(hits).query_pairs(cfg.crossing_tol, output_type="ndarray")
    injective = True
    if len(pairs):
        d_src = np.sqrt(norm2(v[pairs[:, 0]] - v[pairs[:, 1]]))
        injective = bool(np.all(d_src <= cfg.crossing_tol))
        if not injective:
            notes.append("first-hit map not injective on the vertex set")

    ui = field.evaluate(image.centroids)
    uni = np.sum(ui * image.normals, axis=1)
    image_inflow = bool(np.all(uni < 0))
    if not image_inflow:
        notes.append(f"{int(np.count_nonzero(~(uni < 0)))} image triangles without inflow")

    flux_D = integrate_flux(src, field)
    flux_Dstar = integrate_flux(image, field)
    return TubeResult(patch=patch, r=r, resolution=resolution, source_mesh=src, image_mesh=image,
                      loops=loops, flux_D=flux_D, flux_Dstar=flux_Dstar,
                      rel_err=_rel_err(flux_D, flux_Dstar), hit_parameter=res.hit_parameter,
                      injective=injective, image_inflow=image_inflow, cfg=cfg, notes=notes)


def _turning(P):
    """Largest angle between consecutive segments along axis 1 of (n, m, 3)."""
    d = np.diff(P, axis=1)
    a, b = d[:, :-1], d[:, 1:]
    num = np.sum(a * b, axis=-1)
    den = np.sqrt(np.sum(a * a, axis=-1) * np.sum(b * b, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.clip(num / den, -1.0, 1.0)
    ang = np.arccos(c)
    return float(np.nanmax(ang)) if ang.size else 0.0


def build_mantle(field: Field, tube: TubeResult, workers: int = 1) -> TubeResult:
    """Sample the boundary streamlines at common ``s`` up to the first hit.

    The number of samples doubles until consecutive segments turn by at most
    ``MAX_TURN``; the paths are stored on the tube.
    """
    idx = np.concatenate(tube.loops) if tube.loops else np.zeros(0, np.int64)
    if idx.size == 0:
        return tube
    s_end = float(np.min(tube.hit_parameter[idx]))
    seeds = tube.source_mesh.vertices[idx]
    m = 64
    while True:
        s = s_end * np.arange(m) / (m - 1)
        P = sample_paths(field, seeds, s, tube.cfg)
        if m >= MAX_MANTLE_SAMPLES or _turning(P) <= MAX_TURN:
            break
        m *= 2
    if not np.all(np.isfinite(P)):
        tube.notes.append("some boundary streamlines could not be sampled")
    out, at = [], 0
    for l in tube.loops:
        out.append(P[at:at + len(l)])
        at += len(l)
    tube.s_samples = s
    tube.boundary_paths = out
    return tube


def _d4(P, axis, idx, closed):
    """Fourth-order central difference along ``axis`` at indices ``idx``."""
    n = P.shape[axis]

    def take(o):
        i = idx + o
        if closed:
            i = i % n
        return np.take(P, i, axis=axis)

    return (take(-2) - 8.0 * take(-1) + 8.0 * take(1) - take(2)) / 12.0


def _corners(loop_pts, closed=True):
    """Loop indices where the source boundary has a kink."""
    n = len(loop_pts)
    if n < 3:
        return np.arange(n)
    a = loop_pts - np.roll(loop_pts, 1, axis=0)
    b = np.roll(loop_pts, -1, axis=0) - loop_pts
    num = np.sum(a * b, axis=1)
    den = np.sqrt(norm2(a) * norm2(b))
    with np.errstate(invalid="ignore", divide="ignore"):
        ang = np.arccos(np.clip(num / den, -1.0, 1.0))
    ang = np.where(np.isfinite(ang), ang, 0.0)
    return np.flatnonzero(ang > max(0.3, 10.0 * float(np.median(ang))))


def mantle_geometry(paths):
    """Points and unit normals of the mantle from sampled boundary paths.

    Normals are the cross product of fourth-order differences along the
    streamlines and across neighbouring streamlines. Samples within two
    steps of a boundary corner or of the path ends are skipped.
    """
    pts, nrm = [], []
    for P in paths:
        nb, m = P.shape[:2]
        scale = float(np.nanmax(np.abs(P))) if P.size else 1.0
        tiny = 1e-13 * max(scale, 1e-300)
        if nb >= 2:
            gap = np.sqrt(np.sum((np.roll(P, -1, axis=0) - P) ** 2, axis=-1))
            if np.any(gap <= tiny):
                j = int(np.argwhere(gap <= tiny)[0][0])
                raise DegenerateMantle(f"adjacent boundary streamlines {j} and {(j + 1) % nb} coincide")
        if nb < 5 or m < 5:
            continue
        skip = np.zeros(nb, dtype=bool)
        for c in _corners(P[:, 0]):
            skip[(c + np.arange(-2, 3)) % nb] = True
        js = np.flatnonzero(~skip)
        if js.size == 0:
            continue
        ks = np.arange(2, m - 2)
        Q = P[js][:, ks]
        along = _d4(P[js], 1, ks, closed=False)
        across = _d4(P[:, ks], 0, js, closed=True)
        n = np.cross(along, across)
        nn = np.sqrt(np.sum(n * n, axis=-1))
        ok = np.isfinite(nn)
        if np.any(ok & (nn <= tiny * tiny)):
            raise DegenerateMantle("mantle normal undefined: boundary samples coincide")
        pts.append(Q[ok])
        nrm.append(n[ok] / nn[ok][:, None])
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(pts), np.concatenate(nrm)


def mantle_tangency(field: Field, tube: TubeResult) -> float:
    """Largest ``|u . n| / |u|`` over the mantle samples."""
    if not tube.boundary_paths:
        raise ValueError("tube has no mantle samples; run build_mantle first")
    pts, nrm = mantle_geometry(tube.boundary_paths)
    if len(pts) == 0:
        raise ValueError("mantle has no interior samples")
    u = field.evaluate(pts)
    speed = np.sqrt(norm2(u))
    return float(np.max(np.abs(np.sum(u * nrm, axis=1)) / speed))


def lemma_tolerance(resolution: int, base: float = BASE_TOLERANCE) -> float:
    """PASS threshold: ``base`` at the default resolution, shrinking with the
    square of the mesh spacing, never above ``base``."""
    return base * min(1.0, (DEFAULT_RESOLUTION / resolution) ** 2)


def verify_lemma(field: Field, patch: PatchSpec, r: float, resolution: int = DEFAULT_RESOLUTION,
                 cfg: TraceConfig | None = None, workers: int = 1,
                 tolerance: float | None = None, mantle: bool = True) -> TubeResult:
    """Flux through the patch against flux through its image, plus mantle checks."""
    tube = advect_patch(field, patch, r, resolution, cfg, workers)
    tube.tolerance = lemma_tolerance(resolution) if tolerance is None else tolerance
    tube.passed = bool(tube.rel_err < tube.tolerance)
    tube.notes.append(f"PASS threshold rel_err < {tube.tolerance:.3g} "
                      f"({BASE_TOLERANCE:g} at resolution {DEFAULT_RESOLUTION}, "
                      f"scaled by (resolution/{DEFAULT_RESOLUTION})^-2)")
    if mantle:
        build_mantle(field, tube, workers)
        try:
            pts, nrm = mantle_geometry(tube.boundary_paths)
        except DegenerateMantle as exc:
            tube.notes.append(f"mantle degenerate: {exc}")
            pts, nrm = np.zeros((0, 3)), np.zeros((0, 3))
        if len(pts):
            u = field.evaluate(pts)
            tube.mantle_points, tube.mantle_u, tube.mantle_normals = pts, u, nrm
            tube.max_mantle_normal = float(np.max(np.abs(np.sum(u * nrm, axis=1))
                                                  / np.sqrt(norm2(u))))
    return tube


def refinement_study(field: Field, patch: PatchSpec, r: float, resolution: int = DEFAULT_RESOLUTION,
                     cfg: TraceConfig | None = None, steps: int = 2, workers: int = 1):
    """``rel_err`` under simultaneous mesh doubling and tolerance tightening.

    Each step doubles ``resolution`` and tightens the trace tolerances by
    ``2**5``, matching the order of the integrator.
    """
    cfg = cfg or TraceConfig.for_alpha(patch.alpha)
    out = []
    for _ in range(steps):
        t = advect_patch(field, patch, r, resolution, cfg, workers)
        out.append((resolution, t.rel_err))
        resolution *= 2
        cfg = cfg.tightened(32.0)
    return out


# -- disjointness -------------------------------------------------------------

def _gnomonic(pts, d, e1, e2):
    """Central projection onto the plane tangent at ``d``; rows are per pair."""
    dot = np.sum(pts * d[:, None, :], axis=-1)
    q = pts / dot[..., None]
    return np.stack([np.sum(q * e1[:, None, :], axis=-1),
                     np.sum(q * e2[:, None, :], axis=-1)], -1), dot


def _pair_overlap(A, B, slack):
    """Overlap test for spherical triangle pairs A[i], B[i] (unit corners).

    Great circles project to lines under the central projection, so the
    separating-axis test on the projected planar triangles is exact up to
    ``slack`` (in tangent-plane units).
    """
    d = unit(A.sum(axis=1) + B.sum(axis=1))
    ref = np.where(np.abs(d[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = unit(np.cross(d, ref))
    e2 = np.cross(d, e1)
    pa, da = _gnomonic(A, d, e1, e2)
    pb, db = _gnomonic(B, d, e1, e2)
    front = np.all(da > 0, axis=1) & np.all(db > 0, axis=1)
    separated = np.zeros(len(A), dtype=bool)
    for P in (pa, pb):
        for k in range(3):
            edge = P[:, (k + 1) % 3] - P[:, k]
            ln = np.sqrt(edge[:, 0] ** 2 + edge[:, 1] ** 2)
            valid = ln > 0
            ax = np.stack([-edge[:, 1], edge[:, 0]], -1) / np.where(valid, ln, 1.0)[:, None]
            sa = np.sum(pa * ax[:, None, :], axis=-1)
            sb = np.sum(pb * ax[:, None, :], axis=-1)
            gap = np.maximum(sb.min(1) - sa.max(1), sa.min(1) - sb.max(1))
            separated |= valid & (gap >= -slack)
    return front & ~separated


def meshes_overlap(m1: GeoMesh, m2: GeoMesh, slack: float) -> bool:
    """True if some triangle of ``m1`` overlaps some triangle of ``m2``."""
    if len(m1) == 0 or len(m2) == 0:
        return False
    c1, c2 = m1.normals, m2.normals
    s1 = m1.sizes() / m1.radius
    s2 = m2.sizes() / m2.radius
    reach = float(s1.max() + s2.max()) * 1.01 + slack
    cand = cKDTree(c1).query_ball_tree(cKDTree(c2), reach)
    ia = np.repeat(np.arange(len(cand)), [len(c) for c in cand])
    if ia.size == 0:
        return False
    ib = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand if c])
    u1, u2 = m1.unit_vertices, m2.unit_vertices
    A = u1[m1.triangles[ia]]
    B = u2[m2.triangles[ib]]
    return bool(np.any(_pair_overlap(A, B, slack)))


def disjoint_images(field: Field, patch1: PatchSpec, patch2: PatchSpec, r: float,
                    resolution: int = DEFAULT_RESOLUTION, cfg: TraceConfig | None = None,
                    workers: int = 1) -> bool:
    """Whether the images on ``dB_r`` of two disjoint patches are disjoint."""
    if patch1.alpha != patch2.alpha:
        raise ValueError("patches must lie on the same sphere")
    cfg = cfg or TraceConfig.for_alpha(patch1.alpha)
    m1, _ = patch_mesh(patch1, resolution)
    m2, _ = patch_mesh(patch2, resolution)
    if meshes_overlap(m1, m2, 10.0 * cfg.crossing_tol / patch1.alpha):
        raise PatchesOverlap("source patches overlap on the outer sphere")
    t1 = advect_patch(field, patch1, r, resolution, cfg, workers)
    t2 = advect_patch(field, patch2, r, resolution, cfg, workers)
    return not meshes_overlap(t1.image_mesh, t2.image_mesh, 10.0 * cfg.crossing_tol / r)


def parse_patch(text: str, alpha: float = 1.0) -> PatchSpec:
    """``cap:axis=0,0,1,half_angle=0.52`` or
    ``annulus:axis=0,0,1,inner=0.04,outer=0.05,phi=0,1.57``.

    Angles are polar angles in radians; ``rho_*`` variants give the
    distance from the axis instead (``theta = asin(rho/alpha)``).
    """
    from .errors import ConfigError
    from .field import parse_params

    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    try:
        p = parse_params(rest) if rest else {}
        axis = tuple(float(c) for c in p.pop("axis", "0,0,1").split(","))
        if len(axis) != 3:
            raise ValueError("axis needs 3 components")

        def angle(name):
            if name in p:
                return float(p.pop(name))
            if "rho_" + name in p:
                return math.asin(float(p.pop("rho_" + name)) / alpha)
            return None

        if kind == "cap":
            ha = angle("half_angle")
            if ha is None:
                raise ValueError("cap needs half_angle or rho_half_angle")
            spec = PatchSpec.cap(axis, ha, alpha)
        elif kind in ("annulus", "sector"):
            inner, outer = angle("inner") or 0.0, angle("outer")
            if outer is None:
                raise ValueError("annulus needs outer")
            phi = [float(c) for c in p.pop("phi", f"0,{2 * math.pi!r}").split(",")]
            spec = PatchSpec.annulus(axis, inner, outer, phi[0], phi[1], alpha)
        else:
            raise ValueError(f"unknown patch kind {kind!r}")
        if p:
            raise ValueError(f"unknown patch parameters: {', '.join(sorted(p))}")
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad patch {text!r}: {exc}") from None
    return spec
