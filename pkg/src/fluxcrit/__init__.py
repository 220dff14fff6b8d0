"""Streamline entry-flux diagnostics for divergence-free 3D vector fields."""
from .criterion import (FluxScan, ShellScan, Verdict, flux_scan, jensen_check, nested_sets_check,
                        rotating_threshold_study, shell_scan, threshold_exponent)
from .entryset import EntrySetMap, Status, classify, refine, refine_until, stability_probe
from .errors import FluxCritError
from .field import (Field, GridField, RadialPower, Rotating, Sink, Superposition, Uniform,
                    load_grid, parse_field, sample_to_grid, superpose)
from .fluxtube import (PatchSpec, TubeResult, advect_patch, disjoint_images, mantle_tangency,
                       verify_lemma)
from .spheremesh import GeoMesh, build_mesh, integrate_flux, integrate_scalar
from .tracer import Fate, TraceConfig, trace_first_hit, trace_many, trace_path

__version__ = "0.1.0"
