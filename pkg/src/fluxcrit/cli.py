"""Command-line front end.

Exit codes: 0 success, 2 invalid configuration, 3 computation error.
Only verdict lines and written paths go to stdout; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import criterion, entryset, fluxtube, report, spheremesh, tracer
from .errors import ConfigError, FluxCritError
from .field import parse_field

log = logging.getLogger("fluxcrit")

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p, field=True, alpha=True):
    if field:
        p.add_argument("--field", help="field spec, e.g. sink:strength=1+rotating:gamma=2")
    if alpha:
        p.add_argument("--alpha", type=float, help="outer radius (default 1)")
    g = p.add_argument_group("tracing")
    g.add_argument("--rel-tol", type=float)
    g.add_argument("--abs-tol", type=float)
    g.add_argument("--crossing-tol", type=float)
    g.add_argument("--max-arc", type=float, help="arc-length budget per streamline")
    g.add_argument("--max-steps", type=int)
    p.add_argument("--threads", type=int, help="worker threads (overrides FLUXCRIT_THREADS)")
    p.add_argument("--config", help="JSON file with defaults for any of these flags")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fluxcrit", description="Entry-flux diagnostics for divergence-free fields.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("classify", help="entry-set map on the outer sphere")
    _common(p)
    p.add_argument("--r", type=float, help="inner radius")
    p.add_argument("--level", type=int, help="icosahedral level (default 5)")
    p.add_argument("--refine-rtol", type=float, help="refine the boundary band to this width")
    p.add_argument("--max-refine", type=int)
    p.add_argument("--csv", help="per-triangle status CSV")

    p = sub.add_parser("flux-scan", help="entry flux over a radius grid and verdict")
    _common(p)
    p.add_argument("--p", type=float, help="Lebesgue exponent (default 2)")
    p.add_argument("--rmin", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--ratio", type=float, help="grid ratio (default 0.5)")
    p.add_argument("--r-grid", help="explicit comma-separated radii")
    p.add_argument("--level", type=int)
    p.add_argument("--refine-rtol", type=float)
    p.add_argument("--max-refine", type=int)
    p.add_argument("--csv")

    p = sub.add_parser("shell-scan", help="shell integrals of |u|^p")
    _common(p, alpha=False)
    p.add_argument("--p", type=float)
    p.add_argument("--rmin", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--ratio", type=float)
    p.add_argument("--r-grid")
    p.add_argument("--level", type=int)
    p.add_argument("--csv")

    p = sub.add_parser("tube-verify", help="flux conservation through a flux tube")
    _common(p)
    p.add_argument("--patch", help="cap:axis=0,0,1,half_angle=0.5 or annulus:...")
    p.add_argument("--r", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--off", help="OFF mesh of the tube")

    p = sub.add_parser("report", help="merge earlier JSON reports")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("mesh-export", help="write a sphere mesh as OFF")
    p.add_argument("--radius", type=float)
    p.add_argument("--level", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("trace", help="sample one streamline to CSV")
    _common(p)
    p.add_argument("--seed", help="x,y,z")
    p.add_argument("--r", type=float, help="stop on entering B_r")
    p.add_argument("--record-every", type=float)
    p.add_argument("--s-max", type=float)
    return ap


DEFAULTS = {
    "alpha": 1.0, "level": 5, "p": 2.0, "ratio": 0.5, "resolution": fluxtube.DEFAULT_RESOLUTION,
    "refine_rtol": None, "max_refine": 8, "record_every": 0.01, "radius": 1.0,
}
# flux scans refine the membership boundary unless told otherwise
SCAN_REFINE_RTOL = 0.02


def _load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _merge(args):
    """Flags override the config file, which overrides built-in defaults."""
    opts = dict(DEFAULTS)
    if args.command == "flux-scan":
        opts["refine_rtol"] = SCAN_REFINE_RTOL
    known = set(vars(args))
    if getattr(args, "config", None):
        cfg = _load_config(args.config)
        unknown = sorted(set(cfg) - known - {"command"})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        opts.update(cfg)
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _threads(opts):
    n = opts.get("threads")
    if n is None:
        env = os.environ.get("FLUXCRIT_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"FLUXCRIT_THREADS={env!r} is not an integer") from None
    if n is None:
        n = os.cpu_count() or 1
    if int(n) < 1:
        raise ConfigError("thread count must be >= 1")
    return int(n)


def _trace_cfg(opts):
    alpha = float(opts.get("alpha", 1.0))
    over = {}
    for flag, name in (("rel_tol", "rel_tol"), ("abs_tol", "abs_tol"),
                       ("crossing_tol", "crossing_tol"), ("max_arc", "max_arc_length"),
                       ("max_steps", "max_steps")):
        if opts.get(flag) is not None:
            over[name] = opts[flag]
    try:
        return tracer.TraceConfig.for_alpha(alpha, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _need(opts, *names):
    for n in names:
        if opts.get(n) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def _field(opts):
    _need(opts, "field")
    return parse_field(str(opts["field"]))


def _radii(opts):
    _need(opts, "r")
    alpha = float(opts["alpha"])
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    r = float(opts["r"])
    if not r > 0:
        raise ConfigError("r must be positive")
    if not r < alpha:
        raise ConfigError("r must be < alpha")
    return alpha, r


def _level(opts, key="level"):
    lvl = int(opts[key])
    if not 0 <= lvl <= spheremesh.MAX_LEVEL:
        raise ConfigError(f"level must be in [0, {spheremesh.MAX_LEVEL}]")
    return lvl


def _grid(opts, alpha=None, cfg=None):
    if opts.get("r_grid"):
        try:
            vals = [float(v) for v in str(opts["r_grid"]).split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad --r-grid {opts['r_grid']!r}") from None
        return np.array(sorted(vals, reverse=True))
    if opts.get("rmin") is None and opts.get("rmax") is None:
        return criterion.default_r_grid(1.0 if alpha is None else alpha,
                                        None if cfg is None else cfg.crossing_tol)
    top = opts.get("rmax") or (alpha or 1.0) / 2.0
    bottom = opts.get("rmin") or (alpha or 1.0) / 256.0
    return criterion.geometric_grid(float(top), float(bottom), float(opts["ratio"]))


def _p(opts):
    p = float(opts["p"])
    if not p >= 1:
        raise ConfigError(f"p must be >= 1, got {p}")
    return p


def _resolved(opts, **extra):
    """Config echoed into reports; the thread count is left out on purpose
    so reports do not depend on it."""
    keep = {k: v for k, v in opts.items()
            if k not in ("threads", "verbose", "config", "out", "csv", "off", "command")
            and v is not None}
    keep.update(extra)
    return keep


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(path)


# -- commands -----------------------------------------------------------------

def cmd_classify(opts):
    field = _field(opts)
    alpha, r = _radii(opts)
    level = _level(opts)
    cfg = _trace_cfg(opts)
    workers = _threads(opts)

    def run():
        emap = entryset.classify(field, alpha, r, level, cfg, workers)
        if opts.get("refine_rtol") is not None:
            emap = entryset.refine_until(emap, float(opts["refine_rtol"]), int(opts["max_refine"]))
        doc = emap.to_json()
        doc["config"] = _resolved(opts, trace_config=cfg.to_dict())
        if opts.get("out"):
            _write(opts["out"], report.dumps(doc))
        else:
            sys.stdout.write(report.dumps(doc))
        if opts.get("csv"):
            _write(opts["csv"], emap.status_csv())
        c = emap.counts()
        log.info("members=%d non_members=%d undetermined=%d tangential=%d",
                 c["member"], c["non_member"], c["undetermined"], c["tangential"])
    return run


def cmd_flux_scan(opts):
    field = _field(opts)
    alpha = float(opts["alpha"])
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    cfg = _trace_cfg(opts)
    grid = _grid(opts, alpha, cfg)
    criterion._check_grid(grid, alpha)
    p = _p(opts)
    level = _level(opts)
    workers = _threads(opts)

    def run():
        rt = opts.get("refine_rtol")
        scan = criterion.flux_scan(field, alpha, p, grid, level, cfg, workers,
                                   refine_rtol=None if rt is None else float(rt),
                                   max_refine=int(opts["max_refine"]))
        doc = scan.to_json()
        doc["config"] = _resolved(opts, **scan.config)
        if opts.get("out"):
            _write(opts["out"], report.dumps(doc))
        if opts.get("csv"):
            _write(opts["csv"], scan.to_csv())
        print(scan.verdict_line())
    return run


def cmd_shell_scan(opts):
    field = _field(opts)
    grid = _grid(opts)
    criterion._check_grid(grid)
    p = _p(opts)
    level = _level(opts)

    def run():
        sc = criterion.shell_scan(field, p, grid, level)
        doc = sc.to_json()
        doc["config"] = _resolved(opts, **sc.config)
        if opts.get("out"):
            _write(opts["out"], report.dumps(doc))
        if opts.get("csv"):
            _write(opts["csv"], sc.to_csv())
        print(sc.verdict_line())
    return run


def cmd_tube_verify(opts):
    field = _field(opts)
    alpha, r = _radii(opts)
    _need(opts, "patch")
    patch = fluxtube.parse_patch(str(opts["patch"]), alpha)
    res = int(opts["resolution"])
    if res < 1:
        raise ConfigError("resolution must be >= 1")
    cfg = _trace_cfg(opts)
    workers = _threads(opts)
    tol = opts.get("tolerance")

    def run():
        tube = fluxtube.verify_lemma(field, patch, r, res, cfg, workers,
                                     tolerance=None if tol is None else float(tol))
        doc = tube.to_json()
        doc["field"] = field.describe()
        doc["config"] = _resolved(opts)
        if opts.get("out"):
            _write(opts["out"], report.dumps(doc))
        if opts.get("off"):
            _write(opts["off"], tube.to_off())
        word = "PASS" if tube.passed else "FAIL"
        print(f"FLUX TUBE {word}: rel_err={tube.rel_err:.3e} tolerance={tube.tolerance:.1e}")
    return run


def _kind(doc):
    if "records" in doc and "fit" in doc:
        return "flux_scan"
    if "F_p" in doc:
        return "shell_scan"
    if "flux_Dstar" in doc:
        return "tube"
    if "counts" in doc:
        return "classify"
    return "unknown"


def cmd_report(opts):
    inputs = list(opts.get("inputs") or [])
    if not inputs:
        raise ConfigError("report needs at least one input JSON")
    docs = {}
    for path in inputs:
        try:
            with open(path, encoding="utf-8") as fh:
                docs[path] = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None

    def run():
        summary = {"flux_scans": [], "shell_scans": [], "tubes": [], "maps": []}
        for path, doc in sorted(docs.items()):
            k = _kind(doc)
            if k == "flux_scan":
                summary["flux_scans"].append({"path": path, "verdict": doc.get("verdict"),
                                              "p": doc.get("p"), "fit": doc.get("fit")})
            elif k == "shell_scan":
                summary["shell_scans"].append({"path": path, "p": doc.get("p"),
                                               "q_fit": doc.get("q_fit"),
                                               "divergent": doc.get("divergent")})
            elif k == "tube":
                summary["tubes"].append({"path": path, "rel_err": doc.get("rel_err"),
                                         "passed": doc.get("passed")})
            elif k == "classify":
                summary["maps"].append({"path": path, "r": doc.get("r"),
                                        "signed_flux_member": doc.get("signed_flux_member")})
        notes = []
        sat = [s for s in summary["flux_scans"] if s["verdict"] == criterion.Verdict.SATISFIED.value]
        for s in sat:
            same_p = [x for x in summary["shell_scans"] if x["p"] == s["p"]]
            if same_p and not all(x["divergent"] for x in same_p):
                notes.append(f"inconsistent: {s['path']} satisfies the criterion but a shell "
                             f"scan at p={s['p']} is convergent")
        if sat:
            overall = "not L^p near 0 (criterion satisfied)"
        elif any(x["divergent"] for x in summary["shell_scans"]):
            overall = "not L^p near 0 (shell integral diverges)"
        elif summary["shell_scans"]:
            overall = "no evidence against local L^p"
        else:
            overall = "undecided"
        doc = {"inputs": docs, "summary": summary, "overall": overall,
               "notes": notes + [criterion.EVIDENCE_NOTE]}
        if opts.get("out"):
            _write(opts["out"], report.dumps(doc))
        else:
            sys.stdout.write(report.dumps(doc))
        print(f"REPORT: {overall}")
    return run


def cmd_mesh_export(opts):
    radius = float(opts["radius"])
    if not radius > 0:
        raise ConfigError("radius must be positive")
    level = _level(opts)
    _need(opts, "out")

    def run():
        _write(opts["out"], spheremesh.build_mesh(radius, level).to_off())
    return run


def cmd_trace(opts):
    field = _field(opts)
    _need(opts, "seed")
    try:
        seed = np.array([float(v) for v in str(opts["seed"]).split(",")])
    except ValueError:
        raise ConfigError(f"bad --seed {opts['seed']!r}") from None
    if seed.shape != (3,):
        raise ConfigError("--seed needs three components")
    alpha = float(opts["alpha"])
    r = opts.get("r")
    if r is not None:
        alpha, r = _radii(opts)
    cfg = _trace_cfg(opts)
    every = float(opts["record_every"])
    if not every > 0:
        raise ConfigError("--record-every must be positive")
    s_max = opts.get("s_max")
    # with --r the path stops at the first crossing of either sphere
    outer = alpha if r is not None else None
    try:
        tracer._check_seeds(seed.reshape(1, 3), r, outer, cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    def run():
        path = tracer.trace_path(field, seed, cfg, every, r_inner=r, r_outer=outer,
                                 s_max=None if s_max is None else float(s_max))
        text = tracer.path_to_csv(path)
        if opts.get("out"):
            _write(opts["out"], text)
        else:
            sys.stdout.write(text)
    return run


COMMANDS = {
    "classify": cmd_classify, "flux-scan": cmd_flux_scan, "shell-scan": cmd_shell_scan,
    "tube-verify": cmd_tube_verify, "report": cmd_report, "mesh-export": cmd_mesh_export,
    "trace": cmd_trace,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    # validation: nothing is computed until every option checks out
    try:
        opts = _merge(args)
        run = COMMANDS[args.command](opts)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"fluxcrit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run()
    except (FluxCritError, ValueError, ArithmeticError, OSError) as exc:
        print(f"fluxcrit: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
