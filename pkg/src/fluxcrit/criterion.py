"""Entry-flux concentration criterion and the shell-integral cross-checks.

If the flux entering ``B_r`` through the entry set stays above
``C r^(2-3/p)`` as ``r -> 0``, the field cannot be in ``L^p`` on any ball
around the origin. :func:`flux_scan` measures that flux on a radius grid,
fits a power law and applies the threshold; :func:`shell_scan` measures
``F_p(r) = int_{dB_r} |u|^p`` directly, whose radial integral decides local
``L^p`` membership.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .entryset import EntrySetMap, classify, refine_until
from .errors import ConfigError, MeshMismatch
from .field import Field, Rotating
from .report import csv_text
from .spheremesh import build_mesh, integrate_scalar, node_weights_and_speeds
from .tracer import TraceConfig

log = logging.getLogger(__name__)

FIT_SLACK = 0.05
UNDETERMINED_CAP = 0.05
INCONCLUSIVE_SHARE = 0.2
SHELL_SLACK = 0.05
TAIL_POINTS = 3
JENSEN_RTOL = 1e-12

EVIDENCE_NOTE = ("evidence, not proof: a finite radius grid cannot certify an inequality "
                 "that is only required as r -> 0; a satisfied criterion means the data are "
                 "consistent with u not being in L^p on any ball around 0")
SLACK_NOTE = ("'as r -> 0' is operationalised as fitted beta <= threshold + fit_slack and "
              "flux >= C_fit r^threshold (1 - fit_slack) at every fitted radius")


class Verdict(str, enum.Enum):
    SATISFIED = "CriterionSatisfied"
    FAILED = "CriterionFailed"
    INCONCLUSIVE = "Inconclusive"


def threshold_exponent(p: float) -> float:
    """Flux exponent below which local ``L^p`` membership is excluded.

    Hoelder on ``dB_r`` gives ``F_p(r) >= |flux|^p / (4 pi r^2)^(p-1)``; the
    radial integral of the right side diverges once ``|flux| >= C r^e`` with
    ``e = 2 - 3/p`` (1/2 for p = 2).
    """
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    return 2.0 - 3.0 / p


def default_r_grid(alpha: float, crossing_tol: float | None = None) -> np.ndarray:
    """Halving radii from ``alpha/2`` down to ``alpha/256`` (or the smallest
    radius the crossing tolerance resolves, if larger)."""
    tol = crossing_tol if crossing_tol is not None else 1e-10 * alpha
    r_min = max(alpha / 256.0, 1e4 * tol)
    out = []
    r = alpha / 2.0
    while r >= r_min * (1 - 1e-12):
        out.append(r)
        r /= 2.0
    return np.array(out)


def geometric_grid(r_max: float, r_min: float, ratio: float = 0.5) -> np.ndarray:
    if not (0 < r_min <= r_max) or not 0 < ratio < 1:
        raise ConfigError("need 0 < rmin <= rmax and 0 < ratio < 1")
    n = int(math.floor(math.log(r_min / r_max) / math.log(ratio) + 1e-9)) + 1
    return r_max * ratio ** np.arange(n)


def _check_grid(r_grid, alpha=None):
    r = np.asarray(r_grid, dtype=np.float64).ravel()
    if r.size == 0:
        raise ConfigError("empty radius grid")
    if not np.all(np.diff(r) < 0):
        raise ConfigError("radius grid must be strictly decreasing")
    if not np.all(r > 0) or (alpha is not None and not np.all(r < alpha)):
        raise ConfigError(f"radii must lie in (0, alpha={alpha})")
    return r


def fit_power_law(r, y):
    """Least squares ``log y = log C + beta log r``; returns (C, beta, rms residual)."""
    x = np.log(np.asarray(r, dtype=np.float64))
    z = np.log(np.asarray(y, dtype=np.float64))
    n = len(x)
    if n < 2:
        raise ValueError("need at least two points to fit")
    xm = math.fsum(x) / n
    zm = math.fsum(z) / n
    sxx = math.fsum((x - xm) ** 2)
    sxz = math.fsum((x - xm) * (z - zm))
    beta = sxz / sxx
    logc = zm - beta * xm
    res = z - (logc + beta * x)
    return math.exp(logc), beta, math.sqrt(math.fsum(res * res) / n)


# -- Jensen chain -------------------------------------------------------------

def _exact_ints(a):
    """Common binary exponent ``e`` and integers ``k`` with ``a = k * 2**e``."""
    mant, ex = np.frexp(np.asarray(a, dtype=np.float64))
    e = int(ex.min()) - 53 if len(ex) else 0
    ints = [int(m * (1 << 53)) << int(x - 53 - e) for m, x in zip(mant.tolist(), ex.tolist())]
    return ints, e


def cauchy_schwarz_exact(w, s) -> bool:
    """``(sum w s)^2 <= (sum w)(sum w s^2)`` evaluated in exact integer arithmetic."""
    W, _ = _exact_ints(w)
    S, _ = _exact_ints(s)
    sws = sum(a * b for a, b in zip(W, S))
    sw = sum(W)
    swss = sum(a * b * b for a, b in zip(W, S))
    return sws * sws <= sw * swss


@dataclass
class JensenChain:
    r: float
    F2: float
    mean_term: float      # (int |u|)^2 / |dB_r|
    flux_term: float      # |entry flux|^2 / (4 pi r^2)
    sphere_area: float
    abs_integral: float
    entry_flux: float
    link1_holds: bool
    link2_holds: bool
    C: float | None = None

    @property
    def holds(self):
        return self.link1_holds and self.link2_holds

    def to_json(self):
        out = {
            "r": self.r, "F2": self.F2, "mean_term": self.mean_term,
            "flux_term": self.flux_term, "sphere_area": self.sphere_area,
            "abs_integral": self.abs_integral, "entry_flux": self.entry_flux,
            "link1_holds": self.link1_holds, "link2_holds": self.link2_holds,
            "holds": self.holds,
            # |flux|^2/(4 pi r^2) written as C_eff/(4 pi r)
            "C_eff": self.flux_term * 4.0 * math.pi * self.r,
        }
        if self.C is not None:
            out["C"] = self.C
            out["shell_bound"] = self.C / (4.0 * math.pi * self.r)
            out["shell_bound_holds"] = self.F2 >= out["shell_bound"]
        return out


def jensen_check(field: Field, emap: EntrySetMap, level: int | None = None,
                 C: float | None = None) -> JensenChain:
    """Evaluate ``F_2(r) >= (int|u|)^2/|dB_r| >= |flux|^2/(4 pi r^2)`` by quadrature.

    The first link is Cauchy-Schwarz on the quadrature weights and is
    checked exactly. The second compares the shell integral of ``|u|`` with
    the entry flux measured on the outer sphere; it holds up to rounding
    (relative ``JENSEN_RTOL``) and is an equality for a constant-speed
    radial flow. The flux used is the lower end of the discretisation
    bracket (members off the boundary band): centroid membership can
    overshoot the true flux where the chain is nearly tight.
    """
    lvl = emap.level if level is None else level
    shell = build_mesh(emap.r, lvl)
    w, speed = node_weights_and_speeds(shell, field)
    area = shell.total_area()
    F2 = math.fsum(w * speed * speed)
    absint = math.fsum(w * speed)
    mean_term = absint * absint / area
    flux = emap.flux_bracket_lo
    flux_term = flux * flux / (4.0 * math.pi * emap.r ** 2)
    link1 = bool(np.all(np.isfinite(speed))) and cauchy_schwarz_exact(w, speed)
    link2 = mean_term >= flux_term * (1.0 - JENSEN_RTOL)
    return JensenChain(emap.r, F2, mean_term, flux_term, area, absint, flux, link1, link2, C)


# -- flux scan ----------------------------------------------------------------

@dataclass
class FluxScan:
    p: float
    alpha: float
    r_values: np.ndarray
    records: list
    threshold: float
    fit: dict | None
    verdict: Verdict
    fit_slack: float = FIT_SLACK
    undetermined_cap: float = UNDETERMINED_CAP
    notes: list = dc_field(default_factory=list)
    config: dict = dc_field(default_factory=dict)
    maps: list = dc_field(default_factory=list, repr=False)

    @property
    def beta_fit(self):
        return None if self.fit is None else self.fit["beta_fit"]

    @property
    def C_fit(self):
        return None if self.fit is None else self.fit["C_fit"]

    def verdict_line(self) -> str:
        word = {Verdict.SATISFIED: "SATISFIED", Verdict.FAILED: "FAILED",
                Verdict.INCONCLUSIVE: "INCONCLUSIVE"}[self.verdict]
        beta = "nan" if self.beta_fit is None else f"{round(self.beta_fit, 2) + 0.0:.2f}"
        return f"CRITERION {word}: beta={beta} threshold={self.threshold:.2f}"

    def to_json(self) -> dict:
        return {
            "p": self.p, "alpha": self.alpha, "grid": list(self.r_values),
            "threshold": self.threshold, "fit_slack": self.fit_slack,
            "undetermined_cap": self.undetermined_cap, "records": self.records,
            "fit": self.fit, "verdict": self.verdict.value, "notes": list(self.notes),
            "config": self.config,
        }

    def to_csv(self) -> str:
        rows = [(r["r"], r["flux_lo"], r["flux_hi"], r["measure_lo"], r["measure_hi"],
                 r["undetermined_fraction"]) for r in self.records]
        return csv_text(["r", "flux_lo", "flux_hi", "measure_lo", "measure_hi",
                         "undetermined_fraction"], rows)


def _decide(r, flux, usable, empty, p, fit_slack, notes):
    thr = threshold_exponent(p)
    fit_idx = np.flatnonzero(usable & ~empty & (flux > 0))
    if empty.all():
        notes.append("entry set empty at every radius")
        return None, Verdict.FAILED
    if empty.any():
        notes.append(f"entry set empty at r = {', '.join(f'{x:g}' for x in r[empty])} "
                     "(flux 0, excluded from the fit)")
    if fit_idx.size < 2:
        notes.append("fewer than two radii usable for the fit")
        return None, Verdict.INCONCLUSIVE
    C, beta, res = fit_power_law(r[fit_idx], flux[fit_idx])
    fit = {"C_fit": C, "beta_fit": beta, "residual": res, "n_points": int(fit_idx.size),
           "r_range": [float(r[fit_idx].min()), float(r[fit_idx].max())]}
    # pointwise lower bound over every usable radius; empty ones carry flux 0
    check = np.flatnonzero(usable)
    bound = C * r[check] ** thr * (1.0 - fit_slack)
    pointwise = bool(np.all(flux[check] >= bound))
    fit["pointwise_ok"] = pointwise
    ok = beta <= thr + fit_slack and pointwise
    return fit, Verdict.SATISFIED if ok else Verdict.FAILED


def flux_scan(field: Field, alpha: float, p: float = 2.0, r_grid=None, level: int = 5,
              cfg: TraceConfig | None = None, workers: int = 1, refine_rtol: float | None = 0.02,
              max_refine: int = 8, fit_slack: float = FIT_SLACK,
              undetermined_cap: float = UNDETERMINED_CAP, jensen: bool = True) -> FluxScan:
    """Entry flux on a decreasing radius grid, power-law fit and verdict.

    With ``refine_rtol`` set, each map's boundary band is refined until the
    measure bracket is within that relative width (at most ``max_refine``
    extra levels); this is what makes small entry sets measurable.
    """
    if not p >= 1:
        raise ConfigError(f"p must be >= 1, got {p}")
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    cfg = cfg or TraceConfig.for_alpha(alpha)
    r = _check_grid(default_r_grid(alpha, cfg.crossing_tol) if r_grid is None else r_grid, alpha)
    notes: list[str] = []
    records, maps = [], []
    for ri in r:
        emap = classify(field, alpha, float(ri), level, cfg, workers)
        if refine_rtol is not None and not emap.is_empty and emap.band.any():
            emap = refine_until(emap, refine_rtol, max_refine)
        rec = emap.summary()
        rec["empty"] = emap.is_empty
        rec["notes"] = list(emap.notes)
        if jensen:
            rec["jensen"] = jensen_check(field, emap, level=level).to_json()
        records.append(rec)
        maps.append(emap)
        log.info("r=%g flux=%.6g undetermined=%.3g", ri, emap.flux_lo_mag, emap.undetermined_fraction)
    flux = np.array([m.flux_lo_mag for m in maps])
    und = np.array([m.undetermined_fraction for m in maps])
    empty = np.array([m.is_empty and m.undetermined_fraction == 0 for m in maps])
    usable = und < undetermined_cap
    for rec, u, e, f in zip(records, usable, empty, flux):
        rec["used_in_fit"] = bool(u and not e and f > 0)
    fit, verdict = _decide(r, flux, usable, empty, p, fit_slack, notes)
    if np.count_nonzero(~usable) > INCONCLUSIVE_SHARE * len(r):
        notes.append(f"{int(np.count_nonzero(~usable))} of {len(r)} radii have undetermined "
                     f"fraction >= {undetermined_cap:g}")
        verdict = Verdict.INCONCLUSIVE
    notes += [EVIDENCE_NOTE, SLACK_NOTE]
    config = {"field": field.describe(), "alpha": alpha, "p": p, "level": level,
              "refine_rtol": refine_rtol, "max_refine": max_refine, "trace_config": cfg.to_dict()}
    return FluxScan(p=p, alpha=alpha, r_values=r, records=records, threshold=threshold_exponent(p),
                    fit=fit, verdict=verdict, fit_slack=fit_slack, undetermined_cap=undetermined_cap,
                    notes=notes, config=config, maps=maps)


# -- shell scan ---------------------------------------------------------------

@dataclass
class ShellScan:
    p: float
    r_values: np.ndarray
    F: np.ndarray
    level: int
    q_fit: float | None
    c_fit: float | None
    residual: float | None
    divergent: bool
    q_tail: float | None = None
    slack: float = SHELL_SLACK
    notes: list = dc_field(default_factory=list)
    config: dict = dc_field(default_factory=dict)

    def verdict_line(self) -> str:
        word = "divergent" if self.divergent else "convergent"
        q = "nan" if self.q_fit is None else f"{round(self.q_fit, 1) + 0.0:.1f}"
        return f"{word} near 0 (q={q})"

    def to_json(self) -> dict:
        return {
            "p": self.p, "grid": list(self.r_values), "F_p": list(self.F), "level": self.level,
            "q_fit": self.q_fit, "q_tail": self.q_tail, "c_fit": self.c_fit,
            "residual": self.residual,
            "divergent": self.divergent, "slack": self.slack, "verdict": self.verdict_line(),
            "notes": list(self.notes), "config": self.config,
        }

    def to_csv(self) -> str:
        return csv_text(["r", "F_p"], zip(map(float, self.r_values), map(float, self.F)))


def shell_scan(field: Field, p: float = 2.0, r_grid=None, level: int = 5,
               slack: float = SHELL_SLACK) -> ShellScan:
    """``F_p(r)`` on each sphere and the fitted exponent ``q`` in ``F_p ~ c r^-q``.

    ``int_0^eps F_p(r) dr`` diverges iff ``q >= 1``; the verdict uses
    ``q >= 1 - slack`` for the fit over the whole grid or over the
    ``TAIL_POINTS`` smallest radii, since a subdominant term can hold the
    whole-grid slope down while the small-r behaviour already diverges.
    """
    if not p >= 1:
        raise ConfigError(f"p must be >= 1, got {p}")
    r = _check_grid(default_r_grid(1.0) if r_grid is None else r_grid)
    F = np.array([integrate_scalar(build_mesh(float(ri), level), field, p) for ri in r])
    notes = []
    pos = np.isfinite(F) & (F > 0)
    if np.count_nonzero(pos) >= 2:
        c, beta, res = fit_power_law(r[pos], F[pos])
        q = -beta
        tail = np.flatnonzero(pos)[-TAIL_POINTS:]
        q_tail = -fit_power_law(r[tail], F[tail])[1] if tail.size >= 2 else q
        divergent = max(q, q_tail) >= 1.0 - slack
    else:
        c = q = q_tail = res = None
        divergent = False
        notes.append("F_p vanishes or is not finite on too many shells to fit")
    config = {"field": field.describe(), "p": p, "level": level}
    return ShellScan(p, r, F, level, q, c, res, divergent, q_tail, slack, notes, config)


def rotating_threshold_study(gammas=(2.0, 2.5, 3.0), p: float = 2.0, r_grid=None,
                             level: int = 4) -> dict:
    """Shell exponents of the rotating field for several ``gamma``.

    For ``u = (x2, -x1, 0)/|x|^gamma``, ``F_p(r) ~ r^(2 - (gamma-1) p)``, so
    the radial integral diverges iff ``gamma >= 1 + 3/p`` (2.5 for p = 2).
    The threshold is estimated from the fitted exponents, not assumed.
    """
    r = geometric_grid(0.4, 0.025) if r_grid is None else r_grid
    rows = []
    for g in gammas:
        sc = shell_scan(Rotating(gamma=float(g)), p, r, level)
        rows.append({"gamma": float(g), "q_fit": sc.q_fit, "q_expected": (g - 1.0) * p - 2.0,
                     "divergent": sc.divergent})
    gam = np.array([row["gamma"] for row in rows])
    q = np.array([row["q_fit"] for row in rows])
    if len(gam) >= 2:
        # q is affine in gamma; solve q(gamma) = 1
        slope, icpt = np.polyfit(gam, q, 1)
        g_star = float((1.0 - icpt) / slope)
    else:
        g_star = None
    return {
        "p": p,
        "rows": rows,
        "threshold_gamma": g_star,
        "threshold_gamma_expected": 1.0 + 3.0 / p,
        "notes": [
            "local L^p membership flips where the shell exponent q crosses 1",
            "gamma = 4 is not the local L^2 threshold of this field: F_2(r) = (8 pi/3) r^(4 - 2 gamma) "
            "gives a divergent radial integral already for gamma >= 5/2",
        ],
    }


# -- nested sets --------------------------------------------------------------

@dataclass
class NestingReport:
    nested: bool
    hypothesis_met: bool
    measures_monotone: bool
    common_flux: list
    common_measure: list
    violations: list
    notes: list = dc_field(default_factory=list)

    def __bool__(self):
        return self.nested

    def to_json(self):
        return {"nested": self.nested, "hypothesis_met": self.hypothesis_met,
                "measures_monotone": self.measures_monotone, "common_flux": self.common_flux,
                "common_measure": self.common_measure, "violations": self.violations,
                "notes": list(self.notes)}


def nested_sets_check(maps, stability: float = 0.05) -> NestingReport:
    """Triangle-wise nesting of member sets over decreasing ``r``.

    The shrinking-set hypothesis (a fixed set ``A`` inside every entry set
    with non-zero flux) is reported as met when the running intersection is
    non-empty and its flux changes by at most ``stability`` between the last
    two radii. Bool-valued as ``nested``.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("no maps given")
    m0 = maps[0]
    for m in maps[1:]:
        if m.alpha != m0.alpha:
            raise MeshMismatch("maps have different alpha")
        if len(m.mesh) != len(m0.mesh) or not np.array_equal(m.mesh.triangles, m0.mesh.triangles) \
                or not np.array_equal(m.mesh.vertices, m0.mesh.vertices):
            raise MeshMismatch("maps are not on the same mesh")
    rs = [m.r for m in maps]
    if any(b >= a for a, b in zip(rs, rs[1:])):
        raise ValueError("maps must be ordered by strictly decreasing r")
    from .spheremesh import flux_contributions

    contrib = flux_contributions(m0.mesh, m0.field)
    areas = m0.mesh.areas
    nested, violations = True, []
    common = maps[0].member_mask.copy()
    cflux = [abs(math.fsum(contrib[common]))]
    cmeas = [math.fsum(areas[common])]
    for a, b in zip(maps, maps[1:]):
        extra = b.member_mask & ~a.member_mask
        if extra.any():
            nested = False
            violations.append({"r_outer": a.r, "r_inner": b.r, "triangles": int(extra.sum())})
        common &= b.member_mask
        cflux.append(abs(math.fsum(contrib[common])))
        cmeas.append(math.fsum(areas[common]))
    lo = [m.measure_lo for m in maps]
    hi = [m.measure_hi for m in maps]
    monotone = all(y <= x for x, y in zip(lo, lo[1:])) and all(y <= x for x, y in zip(hi, hi[1:]))
    notes = []
    if len(maps) < 2:
        met = False
        notes.append("need two radii to judge a fixed common set")
    else:
        last, prev = cflux[-1], cflux[-2]
        met = last > 0 and abs(last - prev) <= stability * prev
        if not met:
            notes.append("no fixed set with non-zero flux lies in every entry set on this grid")
    return NestingReport(nested, bool(met), monotone, cflux, cmeas, violations, notes)
