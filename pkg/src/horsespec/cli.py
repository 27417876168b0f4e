"""Command-line entry point: ``horsespec <command> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 verification failure.  Output files are deterministic; the run report
(command, config hash, wall time, checks, manifest) goes to stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import construction, geometry, horseshoe, spectrum, symbolic, thermo
from . import io as hio
from .construction import ConstructionParams
from .errors import (
    ConfigurationError,
    DomainError,
    Infeasible,
    InvalidArgument,
    NumericalFailure,
    ResourceLimit,
    VerificationFailure,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3
COMMANDS = ("construct", "rotation-set", "pressure", "spectrum", "probe", "horseshoe", "selftest")
FORMATS = ("csv", "json", "svg")
MAX_GRID = 512

log = logging.getLogger("horsespec")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    construction: ConstructionParams
    N: int = 8
    K: int = 2
    L: int = 3
    n_max: int = 8
    grid: tuple = (16, 16)
    tilt: tuple = (0.0, 0.0)
    points: tuple = ()
    dual_radius: float = 200.0

    def to_dict(self) -> dict:
        return {
            "construction": self.construction.to_dict(),
            "N": self.N,
            "K": self.K,
            "L": self.L,
            "n_max": self.n_max,
            "grid": list(self.grid),
            "tilt": list(self.tilt),
            "points": [list(p) for p in self.points],
            "dual_radius": self.dual_radius,
        }


_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def _int(d, key, lo, hi):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int) or not lo <= v <= hi:
        raise ConfigurationError(f"{key} must be an integer in [{lo}, {hi}]")
    return v


def _pair(v, key):
    if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
        raise ConfigurationError(f"{key} must be a pair of numbers")
    if not all(math.isfinite(c) for c in v):
        raise ConfigurationError(f"{key} must be finite")
    return (float(v[0]), float(v[1]))


def parse_grid(text: str) -> tuple:
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except ValueError as exc:
        raise ConfigurationError(f"grid must look like WxH, got {text!r}") from exc


def make_config(raw: dict, args=None) -> RunConfig:
    """Validate a raw JSON config, apply command-line overrides."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(raw) - _RUN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    d = {**{"N": 8, "K": 2, "L": 3, "n_max": 8, "grid": [16, 16], "tilt": [0, 0], "points": [], "dual_radius": 200.0}, **raw}
    if args is not None:
        if args.depth is not None:
            d["N"] = args.depth
        if args.stage is not None:
            d["K"] = args.stage
        if args.grid is not None:
            d["grid"] = list(parse_grid(args.grid))
    cons = d.get("construction") or {}
    if not isinstance(cons, dict):
        raise ConfigurationError("construction must be a JSON object")
    params = ConstructionParams.from_dict(cons)
    N = _int(d, "N", 1, symbolic.N_MAX_DEFAULT)
    K = _int(d, "K", 0, horseshoe.MAX_STAGE)
    L = _int(d, "L", 1, 64)
    n_max = _int(d, "n_max", 1, 14)
    grid = d["grid"]
    if not (isinstance(grid, (list, tuple)) and len(grid) == 2 and all(isinstance(g, int) and not isinstance(g, bool) and 1 <= g <= MAX_GRID for g in grid)):
        raise ConfigurationError(f"grid must be two integers in [1, {MAX_GRID}]")
    tilt = _pair(d["tilt"], "tilt")
    if not isinstance(d["points"], (list, tuple)):
        raise ConfigurationError("points must be a list of pairs")
    points = tuple(_pair(p, "points entry") for p in d["points"])
    r = d["dual_radius"]
    if isinstance(r, bool) or not isinstance(r, (int, float)) or not (math.isfinite(r) and r > 0):
        raise ConfigurationError("dual_radius must be a positive number")
    return RunConfig(params, N, K, L, n_max, tuple(grid), tilt, points, float(r))


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed JSON config: {exc}") from exc


# -- commands ---------------------------------------------------------------------


class Run:
    def __init__(self, command, cfg: RunConfig, out: Path, fmt, workers=1):
        self.command, self.cfg, self.out, self.fmt = command, cfg, out, fmt
        self.workers = workers
        self.checks: dict = {}
        self.files: list = []

    def wants(self, kind):
        return self.fmt is None or self.fmt == kind

    def emit_json(self, name, obj):
        if self.wants("json"):
            self.files.append(str(hio.write_json(self.out / name, obj)))

    def emit_text(self, kind, name, text):
        if self.wants(kind):
            self.files.append(str(hio.write_text(self.out / name, text)))

    def check(self, name, ok):
        self.checks[name] = bool(ok)
        return ok


def _labels(fam):
    lab = {"w0": tuple(fam.w0), "w_inf": tuple(fam.w_inf)}
    for i, w in enumerate(fam.w, start=1):
        lab[f"w{i}"] = tuple(w)
    return lab


def cmd_construct(run: Run) -> int:
    p, L = run.cfg.construction, max(run.cfg.L, 1)
    fam = construction.make_vertices(p, L)
    pts = np.vstack([fam.w0, fam.w, fam.w_inf])
    hull = geometry.convex_hull(pts, tol=1e-14)
    run.check("hull_vertex_count", len(hull) == L + 2)
    run.emit_json(
        "vertices.json",
        {"params": p.to_dict(), "a": p.a, "b": p.b, "C": p.C, "vertices": fam.to_dict(), "hull": hull.tolist(), "hull_vertex_count": len(hull)},
    )
    run.emit_text("svg", "vertices.svg", hio.polygon_svg(hull, _labels(fam)))
    return EXIT_OK


def cmd_rotation_set(run: Run) -> int:
    p, n = run.cfg.construction, run.cfg.n_max
    poly = spectrum.rotation_set_hull(n, p)
    L = max(n - p.alpha - 1, 1)
    fam = construction.make_vertices(p, L)
    run.check("w0_vertex", poly.has_vertex(fam.w0))
    run.check("w_inf_vertex", poly.has_vertex(fam.w_inf))
    run.emit_json("rotation_set.json", {**poly.to_dict(), "orbits": int(len(poly.points))})
    run.emit_text("svg", "rotation_set.svg", hio.polygon_svg(poly.vertices, _labels(fam)))
    return EXIT_OK


def cmd_pressure(run: Run) -> int:
    p, N = run.cfg.construction, run.cfg.N
    tp, tq = run.cfg.tilt
    method = "debruijn" if N <= 8 else "lumped"
    eq = thermo.equilibrium(tp, tq, p, N, method=method)
    gibbs = eq.entropy + tp * eq.rv[0] + tq * eq.rv[1] - eq.log_rho
    run.check("gibbs_identity", abs(gibbs) < 1e-10)
    run.emit_json("pressure.json", {"N": N, "method": method, **eq.summary(), "gibbs_residual": gibbs})
    return EXIT_OK


def _probe(run: Run) -> dict:
    c = run.cfg
    rep = spectrum.discontinuity_probe(c.L, c.N, c.construction, dual_radius=c.dual_radius)
    run.check("probe_gap_positive", rep["gap"] > 0)
    return rep


def cmd_spectrum(run: Run) -> int:
    c = run.cfg
    rows = spectrum.spectrum_grid(c.construction, c.N, c.grid, c.points, dual_radius=c.dual_radius, workers=run.workers)
    failed = sum(r["status"] == "numerical-failure" for r in rows)
    run.check("grid_converged", failed == 0)
    run.emit_text("csv", "spectrum.csv", hio.spectrum_csv(rows))
    if c.L + c.construction.alpha + 1 <= c.N:
        run.emit_json("probe.json", _probe(run))
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_probe(run: Run) -> int:
    run.emit_json("probe.json", _probe(run))
    return EXIT_OK


def cmd_horseshoe(run: Run) -> int:
    c = run.cfg
    K = max(c.K, 1)
    stage = horseshoe.build_stage(c.construction, K)
    for r in stage.retries:
        log.warning("shrink-rates retry: x_scale %.6g -> %.6g", r["x_scale"], r["new_x_scale"])
    n_max = K + c.construction.alpha + 2
    report = horseshoe.verify_phi_L(stage, n_max)
    budgets_ok = all(v["C0"] < v["budget"] and v["C1"] < v["budget"] and v["C2"] < v["budget"] for v in stage.norms.values())
    run.check("budgets", budgets_ok)
    run.check("phi_L_agreement", report["passed"])
    run.emit_json(
        "horseshoe.json",
        {"stage": stage.summary(), "verification": report, "surgeries": [s.to_dict() for s in stage.surgeries]},
    )
    rects = {}
    for s in stage.surgeries:
        rects.setdefault(s.level, []).append((s.outer, s.inner))
    strips = [(0.0, 1.0, lo, hi) for lo, hi in stage.layout.I] + [(lo, hi, 0.0, 1.0) for lo, hi in stage.layout.J]
    run.emit_text("svg", "boxes.svg", hio.boxes_svg(rects, strips))
    return EXIT_OK if report["passed"] and budgets_ok else EXIT_VERIFY


def cmd_selftest(run: Run) -> int:
    p = run.cfg.construction
    results = {}
    results["pressure_log3"] = abs(thermo.pressure(0.0, 0.0, p, 4) - math.log(3)) < 1e-12
    fam = construction.make_vertices(p, 4)
    results["vertex_realization"] = all(
        np.allclose(construction.phi_periodic_rv("1" * (l + p.alpha) + "2", p), fam.w[l - 1], rtol=0, atol=1e-14) for l in range(1, 5)
    )
    prim = spectrum.entropy_spectrum_primal(spectrum.SpectrumQuery(tuple(fam.w_inf), 4, params=p))
    results["entropy_w_inf"] = abs(prim.value - math.log(2)) < 1e-6
    eq = thermo.equilibrium(1.0, 1.0, p, 4)
    dual = spectrum.entropy_spectrum_dual(spectrum.SpectrumQuery(tuple(eq.rv), 4, params=p))
    results["dual_at_gradient"] = abs(dual.value - eq.entropy) < 1e-6 and dual.status == spectrum.INTERIOR
    stage = horseshoe.build_stage(p, 1)
    results["horseshoe_stage1"] = horseshoe.verify_phi_L(stage, 4)["passed"]
    for k, v in results.items():
        run.check(k, v)
    run.emit_json("selftest.json", results)
    return EXIT_OK if all(results.values()) else EXIT_VERIFY


HANDLERS = {
    "construct": cmd_construct,
    "rotation-set": cmd_rotation_set,
    "pressure": cmd_pressure,
    "spectrum": cmd_spectrum,
    "probe": cmd_probe,
    "horseshoe": cmd_horseshoe,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="horsespec", description="Entropy spectrum and horseshoe construction toolkit.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--out", default=".", help="output directory (created if missing)")
    ap.add_argument("--depth", type=int, help="truncation depth N")
    ap.add_argument("--stage", type=int, help="horseshoe stage K")
    ap.add_argument("--grid", help="spectrum grid resolution WxH")
    ap.add_argument("--format", choices=FORMATS, help="emit only files of this format")
    ap.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1), help="grid-sweep threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        cfg = make_config(load_config(args.config), args)
    except (ConfigurationError, InvalidArgument, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(args.command, cfg, out, args.format, workers=max(1, args.workers))
    try:
        code = HANDLERS[args.command](run)
    except (ConfigurationError, InvalidArgument, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (NumericalFailure, ResourceLimit, Infeasible) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    except VerificationFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        code = EXIT_VERIFY
    report = {
        "command": args.command,
        "config_hash": hio.config_hash(cfg.to_dict()),
        "wall_time": time.perf_counter() - t0,
        "checks": run.checks,
        "outputs": run.files,
        "exit_code": code,
    }
    print(hio.canonical_json(report))
    return code


if __name__ == "__main__":
    sys.exit(main())
