"""Streamline integration with sphere-crossing events.

Streamlines solve ``dx/ds = u(x)`` forward in ``s``. Seeds are integrated in
batches: every seed carries its own step size and state, and each loop
iteration advances all live seeds by one Dormand-Prince 5(4) attempt. A
crossing of ``|x| = r_inner`` or ``|x| = r_outer`` inside an accepted step is
located by bisection on the quartic dense output.

Per-seed arithmetic does not depend on which other seeds share the batch, so
results are reproducible regardless of chunking or worker count.
"""
from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import SeedOutOfRange, TraceAborted
from .field import Field, as_points, norm2

log = logging.getLogger(__name__)

# Dormand-Prince 5(4), coefficients as in Dormand & Prince (1980) with the
# Shampine (1986) dense output.
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_E = (-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40)
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_PROBE_THETAS = (0.25, 0.5, 0.75, 1.0)
_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_BISECT_MAX_ITER = 200
DEFAULT_CHUNK = 16384


class Fate(enum.IntEnum):
    ENTERED_INNER = 0
    EXITED_OUTER = 1
    BUDGET_EXHAUSTED = 2
    STAGNATED = 3
    # field became unevaluable along the path; surfaced as TraceAborted by
    # the single-seed API and as Undetermined by classification
    ABORTED = 4


@dataclass(frozen=True)
class TraceConfig:
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12
    max_arc_length: float = 1e3
    max_steps: int = 1_000_000
    stagnation_speed: float = 1e-12
    crossing_tol: float = 1e-10
    # cap on the chord of one step relative to |x|; keeps steps short near the
    # origin and makes a step unable to jump across a sphere unseen
    max_step_fraction: float = 0.25
    # when set, disables error control (used for convergence-order studies)
    fixed_step: float | None = None

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "max_arc_length", "stagnation_speed",
                     "crossing_tol", "max_step_fraction"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"TraceConfig.{name} must be positive, got {v!r}")
        if self.max_steps < 1:
            raise ValueError("TraceConfig.max_steps must be >= 1")
        if self.fixed_step is not None and not self.fixed_step > 0:
            raise ValueError("TraceConfig.fixed_step must be positive")

    @classmethod
    def for_alpha(cls, alpha: float, **overrides) -> "TraceConfig":
        """Defaults scaled to an outer radius ``alpha``."""
        base = dict(crossing_tol=1e-10 * alpha, max_arc_length=1e3 * alpha)
        base.update(overrides)
        return cls(**base)

    def tightened(self, factor: float = 2.0) -> "TraceConfig":
        return replace(self, rel_tol=self.rel_tol / factor, abs_tol=self.abs_tol / factor,
                       crossing_tol=self.crossing_tol / factor)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class TraceResult:
    fate: Fate
    hit_point: np.ndarray | None
    hit_parameter: float
    steps_taken: int
    arc_length: float


@dataclass
class BatchTrace:
    """Per-seed outcome arrays of :func:`trace_many`."""

    fate: np.ndarray        # int8, Fate values
    hit_point: np.ndarray   # (n, 3), NaN unless a crossing fate
    hit_parameter: np.ndarray
    steps_taken: np.ndarray
    arc_length: np.ndarray

    def __len__(self):
        return len(self.fate)

    def result(self, i: int) -> TraceResult:
        fate = Fate(int(self.fate[i]))
        hit = self.hit_point[i].copy() if fate in (Fate.ENTERED_INNER, Fate.EXITED_OUTER) else None
        return TraceResult(fate, hit, float(self.hit_parameter[i]),
                           int(self.steps_taken[i]), float(self.arc_length[i]))

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("fate", "hit_point", "hit_parameter", "steps_taken", "arc_length")))


def _dense(x0, h, K, theta):
    """Dense-output positions for per-seed ``theta`` (shape (m,)).

    Written as explicit elementwise sums (no BLAS) so each seed's result is
    independent of the batch it is computed in.
    """
    t2 = theta * theta
    powers = (theta, t2, t2 * theta, t2 * t2)
    inc = np.zeros_like(x0)
    for j in range(7):
        if j == 1:
            continue
        c = _P[j, 0] * powers[0] + _P[j, 1] * powers[1] + _P[j, 2] * powers[2] + _P[j, 3] * powers[3]
        inc += c[:, None] * K[j]
    return x0 + h[:, None] * inc


class _Integrator:
    """Batched Dormand-Prince integration of a fixed set of seeds."""

    def __init__(self, field: Field, seeds, r_inner, r_outer, cfg: TraceConfig, s_max=None,
                 on_accept=None):
        self.field = field
        self.cfg = cfg
        self.r_inner = r_inner
        self.r_outer = r_outer
        self.s_max = s_max
        self.on_accept = on_accept

        x = as_points(seeds).copy()
        n = len(x)
        self.x = x
        self.s = np.zeros(n)
        self.steps = np.zeros(n, dtype=np.int64)
        self.arc = np.zeros(n)
        self.fate = np.full(n, -1, dtype=np.int8)
        self.hit = np.full((n, 3), np.nan)
        self.hit_s = np.full(n, np.nan)
        rad = np.sqrt(norm2(x))
        if r_outer is not None:
            self.armed = rad <= r_outer - cfg.crossing_tol
        else:
            self.armed = np.ones(n, dtype=bool)
        self.k1 = field.evaluate(x)
        speed = np.sqrt(norm2(self.k1))
        with np.errstate(divide="ignore", invalid="ignore"):
            h0 = 0.05 * rad / speed
        h0[~np.isfinite(h0)] = 1.0
        self.h = np.full(n, cfg.fixed_step) if cfg.fixed_step is not None else h0
        self.nan_streak = np.zeros(n, dtype=np.int64)

    def _finish(self, idx, fate):
        self.fate[idx] = fate

    def run(self) -> BatchTrace:
        while True:
            idx = np.flatnonzero(self.fate < 0)
            if idx.size == 0:
                break
            self._attempt(idx)
        return BatchTrace(self.fate, self.hit, self.hit_s, self.steps, self.arc)

    def _attempt(self, idx):
        cfg = self.cfg
        field = self.field
        xa = self.x[idx]
        k1 = self.k1[idx]

        bad_eval = ~np.all(np.isfinite(k1), axis=1)
        if bad_eval.any():
            self._finish(idx[bad_eval], Fate.ABORTED)
        speed = np.sqrt(norm2(k1))
        stag = ~bad_eval & (speed < cfg.stagnation_speed)
        if stag.any():
            self._finish(idx[stag], Fate.STAGNATED)
        over = (self.steps[idx] >= cfg.max_steps) | (self.arc[idx] >= cfg.max_arc_length)
        if self.s_max is not None:
            over |= self.s[idx] >= self.s_max
        over &= ~(bad_eval | stag)
        if over.any():
            self._finish(idx[over], Fate.BUDGET_EXHAUSTED)
        keep = ~(bad_eval | stag | over)
        if not keep.all():
            idx, xa, k1, speed = idx[keep], xa[keep], k1[keep], speed[keep]
            if idx.size == 0:
                return

        rad = np.sqrt(norm2(xa))
        h = self.h[idx]
        if cfg.fixed_step is None:
            h = np.minimum(h, cfg.max_step_fraction * rad / speed)
        if self.s_max is not None:
            h = np.minimum(h, self.s_max - self.s[idx])

        m = idx.size
        K = np.empty((7, m, 3))
        K[0] = k1
        hc = h[:, None]
        for i in range(1, 6):
            acc = np.zeros((m, 3))
            for j, a in enumerate(_A[i]):
                if a != 0.0:
                    acc += a * K[j]
            K[i] = field.evaluate(xa + hc * acc)
        acc = np.zeros((m, 3))
        for j, b in enumerate(_B):
            if b != 0.0:
                acc += b * K[j]
        y5 = xa + hc * acc
        K[6] = field.evaluate(y5)

        finite = np.all(np.isfinite(K), axis=(0, 2)) & np.all(np.isfinite(y5), axis=1)
        err_vec = np.zeros((m, 3))
        for j, e in enumerate(_E):
            if e != 0.0:
                err_vec += e * K[j]
        err_vec *= hc
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(xa), np.abs(y5))
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            err = np.sqrt(norm2(err_vec / scale) / 3.0)
            if cfg.fixed_step is None:
                accept = finite & (err <= 1.0)
            else:
                accept = finite
            factor = np.where(err > 0, _SAFETY * err ** -0.2, _MAX_FACTOR)

        # unevaluable stage: shrink hard, abort once the step is negligible
        nf = ~finite
        if nf.any():
            j = idx[nf]
            self.nan_streak[j] += 1
            self.h[j] = h[nf] * 0.25
            dead = (self.nan_streak[j] > 60) | (self.h[j] * speed[nf] < 1e-15 * rad[nf])
            if dead.any():
                self._finish(j[dead], Fate.ABORTED)
        rej = finite & ~accept
        if rej.any():
            self.h[idx[rej]] = h[rej] * np.clip(factor[rej], _MIN_FACTOR, 1.0)

        if not accept.any():
            return
        sel = np.flatnonzero(accept)
        ia = idx[sel]
        self.nan_streak[ia] = 0
        x0, ha, Ka, y1 = xa[sel], h[sel], K[:, sel], y5[sel]
        theta_end = self._events(ia, x0, ha, Ka)
        if self.on_accept is not None:
            self.on_accept(ia, self.s[ia].copy(), ha, x0, Ka, theta_end)

        ended = self.fate[ia] >= 0
        cont = ~ended
        ic = ia[cont]
        self.x[ic] = y1[cont]
        self.k1[ic] = Ka[6, cont]
        self.s[ic] += ha[cont]
        self.steps[ia] += 1
        chord = np.sqrt(norm2(y1 - x0))
        self.arc[ic] += chord[cont]
        ie = ia[ended]
        self.arc[ie] += np.sqrt(norm2(self.hit[ie] - x0[ended]))
        if cfg.fixed_step is None:
            self.h[ic] = ha[cont] * np.clip(factor[sel][cont], _MIN_FACTOR, _MAX_FACTOR)
        if self.r_outer is not None:
            newly = np.sqrt(norm2(y1[cont])) <= self.r_outer - cfg.crossing_tol
            self.armed[ic] |= newly

    def _events(self, ia, x0, h, K):
        """Detect and localise crossings in accepted steps; returns theta_end."""
        cfg = self.cfg
        m = ia.size
        theta_end = np.ones(m)
        if self.r_inner is None and self.r_outer is None:
            return theta_end
        armed = self.armed[ia]
        tol = cfg.crossing_tol
        out_level = np.where(armed, self.r_outer, self.r_outer + 0.5 * tol) \
            if self.r_outer is not None else None

        # A point at arc length a along the step is within min(a, L - a) of an
        # endpoint, so the radius never leaves [min end - L/2, max end + L/2].
        # Only steps whose band reaches a sphere need interior probes.
        y1 = _dense(x0, h, K, np.ones(m))
        r0, r1 = np.sqrt(norm2(x0)), np.sqrt(norm2(y1))
        vmax = np.sqrt(np.max([norm2(K[j]) for j in range(7)], axis=0))
        half = 0.55 * h * vmax
        near = np.zeros(m, dtype=bool)
        if self.r_inner is not None:
            near |= np.minimum(r0, r1) - half <= self.r_inner
        if out_level is not None:
            near |= np.maximum(r0, r1) + half > out_level
        first = np.full(m, -1)
        kind = np.zeros(m, dtype=np.int8)      # 1 inner, 2 outer, 3 both
        ns = np.flatnonzero(near)
        if ns.size == 0:
            return theta_end
        for k, th in enumerate(_PROBE_THETAS):
            p = y1[ns] if th == 1.0 else _dense(x0[ns], h[ns], K[:, ns], np.full(ns.size, th))
            rad = np.sqrt(norm2(p))
            fin = np.zeros(ns.size, dtype=bool) if self.r_inner is None else rad <= self.r_inner
            fout = np.zeros(ns.size, dtype=bool) if out_level is None else rad > out_level[ns]
            new = (first[ns] < 0) & (fin | fout)
            first[ns[new]] = k
            kind[ns[new]] = fin[new].astype(np.int8) + 2 * fout[new].astype(np.int8)
        hitmask = first >= 0
        if not hitmask.any():
            return theta_end
        sel = np.flatnonzero(hitmask)
        lo = np.array([0.0] + list(_PROBE_THETAS))[first[sel]]
        hi = np.array(_PROBE_THETAS)[first[sel]]

        best_theta = np.full(sel.size, np.inf)
        best_fate = np.full(sel.size, -1, dtype=np.int8)
        best_pt = np.full((sel.size, 3), np.nan)
        if self.r_inner is not None:
            want = (kind[sel] & 1) > 0
            if want.any():
                th, pt = self._bisect(x0[sel][want], h[sel][want], K[:, sel][:, want],
                                      lo[want], hi[want], np.full(want.sum(), self.r_inner), inner=True)
                w = np.flatnonzero(want)
                better = th < best_theta[w]
                best_theta[w[better]] = th[better]
                best_fate[w[better]] = Fate.ENTERED_INNER
                best_pt[w[better]] = pt[better]
        if out_level is not None:
            want = (kind[sel] & 2) > 0
            if want.any():
                th, pt = self._bisect(x0[sel][want], h[sel][want], K[:, sel][:, want],
                                      lo[want], hi[want], out_level[sel][want], inner=False)
                w = np.flatnonzero(want)
                better = th < best_theta[w]
                best_theta[w[better]] = th[better]
                best_fate[w[better]] = Fate.EXITED_OUTER
                best_pt[w[better]] = pt[better]

        seeds = ia[sel]
        self.fate[seeds] = best_fate
        self.hit[seeds] = best_pt
        self.hit_s[seeds] = self.s[seeds] + best_theta * h[sel]
        theta_end[sel] = best_theta
        return theta_end

    def _bisect(self, x0, h, K, lo, hi, level, inner):
        """Smallest theta in (lo, hi] where the crossing condition holds.

        Invariant: condition false at ``lo``, true at ``hi``. Stops once the
        radius at ``hi`` is within half the crossing tolerance of ``level``.
        """
        tol = 0.5 * self.cfg.crossing_tol
        lo, hi = lo.copy(), hi.copy()
        pt = _dense(x0, h, K, hi)
        for _ in range(_BISECT_MAX_ITER):
            rad = np.sqrt(norm2(pt))
            open_ = np.abs(rad - level) > tol
            if not open_.any():
                break
            o = np.flatnonzero(open_)
            mid = 0.5 * (lo[o] + hi[o])
            pm = _dense(x0[o], h[o], K[:, o], mid)
            rm = np.sqrt(norm2(pm))
            cond = rm <= level[o] if inner else rm > level[o]
            hi[o[cond]] = mid[cond]
            pt[o[cond]] = pm[cond]
            lo[o[~cond]] = mid[~cond]
            if np.all(hi[o] - lo[o] <= 4 * np.finfo(float).eps):
                break
        return hi, pt


def _check_seeds(seeds, r_inner, r_outer, cfg):
    rad = np.sqrt(norm2(seeds))
    lo_ok = rad > r_inner if r_inner is not None else np.ones(len(rad), dtype=bool)
    hi_ok = rad <= r_outer + cfg.crossing_tol if r_outer is not None else np.ones(len(rad), dtype=bool)
    bad = ~(lo_ok & hi_ok & np.all(np.isfinite(seeds), axis=1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise SeedOutOfRange(
            f"seed {tuple(map(float, seeds[i]))} with |seed|={float(rad[i])!r} "
            f"outside ({r_inner}, {r_outer}]")
    if r_inner is not None and r_outer is not None and not r_inner < r_outer:
        raise SeedOutOfRange(f"r_inner={r_inner} must be < r_outer={r_outer}")


def trace_many(field: Field, seeds, r_inner: float, r_outer: float, cfg: TraceConfig,
               workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> BatchTrace:
    """First-hit trace of many seeds.

    Seeds are split into fixed-size chunks independent of ``workers``, so the
    per-seed results do not depend on the degree of parallelism.
    """
    seeds = as_points(seeds)
    _check_seeds(seeds, r_inner, r_outer, cfg)
    if len(seeds) == 0:
        return BatchTrace(np.zeros(0, np.int8), np.zeros((0, 3)), np.zeros(0),
                          np.zeros(0, np.int64), np.zeros(0))
    chunks = [seeds[i:i + chunk_size] for i in range(0, len(seeds), chunk_size)]

    def run(chunk):
        return _Integrator(field, chunk, r_inner, r_outer, cfg).run()

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return BatchTrace.concat(parts)


def trace_first_hit(field: Field, seed, r_inner: float, r_outer: float,
                    cfg: TraceConfig | None = None) -> TraceResult:
    """Follow one streamline until it enters ``B_r_inner`` or leaves ``B_r_outer``."""
    cfg = cfg or TraceConfig.for_alpha(r_outer)
    res = trace_many(field, np.asarray(seed, dtype=float).reshape(1, 3), r_inner, r_outer, cfg).result(0)
    if res.fate == Fate.ABORTED:
        raise TraceAborted(f"field not evaluable along the streamline from {tuple(seed)}")
    return res


def trace_path(field: Field, seed, cfg: TraceConfig, record_every: float,
               r_inner: float | None = None, r_outer: float | None = None,
               s_max: float | None = None) -> np.ndarray:
    """Sample one streamline at parameter spacing ``record_every``.

    Returns an ``(m, 4)`` array of rows ``(s, x, y, z)`` that includes both
    endpoints. The trace stops at the first sphere crossing (when radii are
    given), at ``s_max``, or when the budget runs out.
    """
    if not record_every > 0:
        raise ValueError("record_every must be positive")
    seed = np.asarray(seed, dtype=float).reshape(1, 3)
    _check_seeds(seed, r_inner, r_outer, cfg)
    rows = [(0.0, *seed[0])]
    last = [rows[0]]

    def record(ia, s0, h, x0, K, theta_end):
        start, span = s0[0], h[0] * theta_end[0]
        k = math.floor(start / record_every) + 1
        ss = []
        while k * record_every < start + span:
            ss.append(k * record_every)
            k += 1
        if ss:
            n = len(ss)
            th = (np.array(ss) - start) / h[0]
            pts = _dense(np.repeat(x0, n, 0), np.repeat(h, n), np.repeat(K, n, axis=1), th)
            rows.extend((s, *p) for s, p in zip(ss, pts))
        last[0] = (start + span, *_dense(x0, h, K, theta_end)[0])

    integ = _Integrator(field, seed, r_inner, r_outer, cfg, s_max=s_max, on_accept=record)
    out = integ.run()
    if out.fate[0] == Fate.ABORTED:
        raise TraceAborted(f"field not evaluable along the streamline from {tuple(seed[0])}")
    if last[0][0] > rows[-1][0]:
        # an endpoint a hair past the last sample replaces it
        if len(rows) > 1 and last[0][0] - rows[-1][0] <= 1e-6 * record_every:
            rows[-1] = last[0]
        else:
            rows.append(last[0])
    return np.array(rows)


def sample_paths(field: Field, seeds, s_values, cfg: TraceConfig) -> np.ndarray:
    """Positions of many streamlines at a shared, increasing list of ``s``.

    Returns shape ``(n, len(s_values), 3)``. No sphere events are armed; each
    trace runs to ``s_values[-1]`` unless the budget or field runs out, in
    which case the remaining samples are NaN.
    """
    seeds = as_points(seeds)
    s_values = np.asarray(s_values, dtype=np.float64)
    if s_values.ndim != 1 or s_values.size == 0 or s_values[0] < 0 or np.any(np.diff(s_values) <= 0):
        raise ValueError("s_values must be a non-empty increasing sequence of s >= 0")
    n, m = len(seeds), len(s_values)
    out = np.full((n, m, 3), np.nan)
    if s_values[0] == 0.0:
        out[:, 0] = seeds

    def record(ia, s0, h, x0, K, theta_end):
        s1 = s0 + h * theta_end
        lo = np.searchsorted(s_values, s0, side="right")
        hi = np.searchsorted(s_values, s1, side="right")
        count = hi - lo
        for j in range(int(count.max(initial=0))):
            sel = np.flatnonzero(count > j)
            k = lo[sel] + j
            th = (s_values[k] - s0[sel]) / h[sel]
            out[ia[sel], k] = _dense(x0[sel], h[sel], K[:, sel], th)

    integ = _Integrator(field, seeds, None, None, cfg, s_max=float(s_values[-1]), on_accept=record)
    integ.run()
    # the last step lands on s_max up to rounding
    done = np.abs(integ.s - s_values[-1]) <= 1e-12 * max(1.0, s_values[-1])
    fill = done & np.isnan(out[:, -1, 0])
    out[fill, -1] = integ.x[fill]
    return out


def path_to_csv(path: np.ndarray) -> str:
    lines = ["s,x,y,z"]
    lines += [",".join(repr(float(v)) for v in row) for row in path]
    return "\n".join(lines) + "\n"
