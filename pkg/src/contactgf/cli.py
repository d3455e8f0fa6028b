"""Command-line front end.

    contactgf flow|front|genfun-check|validate --config run.json [--out DIR] [--seed N] [--jobs K]

Exit codes: 0 pass, 1 check failure, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path as FsPath
from typing import Optional

import numpy as np

from . import action, genfun, legendrian
from .contact import ContactPoint, TangentVector
from .flow import FlowError, FlowSpec, conformal_identity_check, integrate
from .hamlang import DomainError, ExpressionError, compactify, parse
from .rng import keyed_generator

log = logging.getLogger("contactgf")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class Tolerances:
    generation_gap: float = 1e-6
    gradient_rel: float = 1e-3
    qi_ratio: float = 2.0
    jacobian_cond: float = 1e12
    conformal: float = 1e-6
    gauge: float = 1e-4
    carnot: float = 1e-5
    first_variation: float = 1e-4
    action_vanishing: float = 1e-6
    spectrum: float = 1e-10
    front_success: float = 0.99


@dataclass
class Probes:
    gradient_points: int = 5
    qi_rays: int = 32
    qi_radii: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    paths: int = 10
    trajectories: int = 5
    path_samples: int = 200
    conformal_samples: int = 20
    path_amplitude: float = 0.3


@dataclass
class Initial:
    q: list = field(default_factory=list)
    p: list = field(default_factory=list)
    z: float = 0.0
    t0: float = 0.0
    t1: float = 1.0


@dataclass
class RunConfig:
    dim: int
    hamiltonian: str
    compact_support: Optional[dict] = None
    partition: int = 16
    cutoff: dict = field(default_factory=lambda: {"delta": 0.2, "eps0": 0.5})
    steps_per_unit_time: int = 200
    grid: dict = field(default_factory=lambda: {"min": [-3.0], "max": [3.0], "count": [101]})
    tolerances: Tolerances = field(default_factory=Tolerances)
    probes: Probes = field(default_factory=Probes)
    initial: Initial = field(default_factory=Initial)

    def to_dict(self) -> dict:
        return asdict(self)

    # resolved objects

    def hamiltonian_expr(self):
        H = parse(self.hamiltonian, self.dim)
        if self.compact_support is not None:
            H = compactify(H, self.compact_support["R0"], self.compact_support["w"])
        return H

    def flow_spec(self) -> FlowSpec:
        return FlowSpec(self.steps_per_unit_time)

    def part(self) -> genfun.Partition:
        return genfun.Partition(self.partition)

    def cutoff_params(self) -> genfun.CutoffParams:
        return genfun.CutoffParams(self.cutoff["delta"], self.cutoff["eps0"])

    def grid_obj(self) -> legendrian.Grid:
        return legendrian.Grid(self.grid["min"], self.grid["max"], self.grid["count"])


def _sub(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**data)


def load_config(data: dict) -> RunConfig:
    """Build and validate a ``RunConfig`` from parsed JSON."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    for key in ("dim", "hamiltonian"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    raw = dict(data)
    try:
        raw["tolerances"] = _sub(Tolerances, data.get("tolerances"), "tolerances")
        raw["probes"] = _sub(Probes, data.get("probes"), "probes")
        raw["initial"] = _sub(Initial, data.get("initial"), "initial")
        cfg = RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if not isinstance(cfg.dim, int) or isinstance(cfg.dim, bool) or cfg.dim < 1:
        raise ConfigError("dim must be a positive integer")
    if not isinstance(cfg.hamiltonian, str):
        raise ConfigError("hamiltonian must be a string")
    if cfg.compact_support is not None:
        cs = cfg.compact_support
        if not isinstance(cs, dict) or set(cs) != {"R0", "w"}:
            raise ConfigError("compact_support must be {\"R0\": ..., \"w\": ...}")
        if not (cs["R0"] > 0 and cs["w"] > 0):
            raise ConfigError("compact_support needs R0 > 0 and w > 0")
    if not isinstance(cfg.cutoff, dict) or set(cfg.cutoff) != {"delta", "eps0"}:
        raise ConfigError("cutoff must be {\"delta\": ..., \"eps0\": ...}")
    if not isinstance(cfg.grid, dict) or set(cfg.grid) != {"min", "max", "count"}:
        raise ConfigError("grid must be {\"min\": [...], \"max\": [...], \"count\": [...]}")
    for key in ("min", "max", "count"):
        if len(np.atleast_1d(cfg.grid[key])) != cfg.dim:
            raise ConfigError(f"grid.{key} must have {cfg.dim} entries")
    init = cfg.initial
    for key in ("q", "p"):
        v = getattr(init, key)
        if v and len(v) != cfg.dim:
            raise ConfigError(f"initial.{key} must have {cfg.dim} entries")
    for f in fields(Tolerances):
        v = getattr(cfg.tolerances, f.name)
        if not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"tolerance {f.name} must be a positive number")
    pr = cfg.probes
    if pr.path_samples < 8:
        raise ConfigError("probes.path_samples must be at least 8")
    try:
        cfg.hamiltonian_expr()
        cfg.flow_spec()
        cfg.part()
        cfg.cutoff_params()
        cfg.grid_obj()
    except ExpressionError as exc:
        raise ConfigError(f"hamiltonian: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Output


def write_json(path: FsPath, payload: dict):
    text = json.dumps(payload, sort_keys=True, indent=2, allow_nan=True)
    path.write_text(text + "\n", encoding="utf-8")


def write_csv(path: FsPath, header: list, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _state_header(n: int, prefix: str = "") -> list:
    return ([f"{prefix}q{i + 1}" for i in range(n)] + [f"{prefix}p{i + 1}" for i in range(n)]
            + [f"{prefix}z"])


def _check(value: float, tol: float, name: str, extra: Optional[dict] = None) -> dict:
    ok = bool(np.isfinite(value) and value <= tol)
    out = {"name": name, "value": float(value), "tolerance": float(tol), "pass": ok}
    if extra:
        out.update(extra)
    return out


def _report(cfg: RunConfig, seed: int, command: str, body: dict) -> dict:
    return {"command": command, "config": cfg.to_dict(), "seed": seed, **body}


# ---------------------------------------------------------------------------
# Commands


def cmd_flow(cfg: RunConfig, out: FsPath, seed: int, jobs: int) -> int:
    H = cfg.hamiltonian_expr()
    n = cfg.dim
    init = cfg.initial
    y0 = ContactPoint(init.q or [0.0] * n, init.p or [0.0] * n, init.z)
    if init.t0 == init.t1:
        raise ConfigError("initial.t0 and initial.t1 must differ")
    traj = integrate(H, y0, init.t0, init.t1, cfg.flow_spec())
    rows = np.column_stack([traj.t, traj.y, traj.g])
    write_csv(out / "flow.csv", ["t"] + _state_header(n) + ["g"], rows)
    write_json(out / "flow.json", _report(cfg, seed, "flow", {
        "samples": int(rows.shape[0]), "end": traj.y[-1].tolist(), "g_end": float(traj.g[-1])}))
    return EXIT_OK


def cmd_front(cfg: RunConfig, out: FsPath, seed: int, jobs: int) -> int:
    H = cfg.hamiltonian_expr()
    n = cfg.dim
    grid = cfg.grid_obj()
    spec = cfg.flow_spec()
    sample = legendrian.sample_legendrian(H, grid, spec, jobs)
    for i, msg in sorted(sample.errors.items()):
        log.warning("grid point %s failed: %s", sample.q0[i].tolist(), msg)
    ok = sample.ok
    rows = np.concatenate([sample.q0[ok], sample.points[ok]], axis=1)
    write_csv(out / "front.csv", [f"q0_{i + 1}" for i in range(n)] + _state_header(n), rows)
    report = legendrian.spectrum(H, grid, spec, cfg.tolerances.spectrum, sample=sample)
    frac = sample.success_fraction()
    body = {"spectrum": report.to_dict(), "success_fraction": frac,
            "failed_points": [sample.q0[i].tolist() for i in sorted(sample.errors)]}
    if n == 1:
        body["fold_count"] = legendrian.fold_count(sample)
    write_json(out / "spectrum.json", _report(cfg, seed, "front", body))
    return EXIT_OK if frac >= cfg.tolerances.front_success else EXIT_NUMERIC


def _random_fiber(cfg, H, seed, index, scale=0.3) -> genfun.FiberPoint:
    rng = keyed_generator(seed, "genfun_check.fiber", index)
    g = cfg.grid_obj()
    q0 = rng.uniform(g.lo, g.hi)
    N = cfg.partition
    return genfun.FiberPoint(q0, rng.uniform(-scale, scale, (N - 1, H.dim)),
                             rng.uniform(-scale, scale, (N - 1, H.dim)))


def cmd_genfun_check(cfg: RunConfig, out: FsPath, seed: int, jobs: int) -> int:
    H = cfg.hamiltonian_expr()
    tol = cfg.tolerances
    part, c, spec = cfg.part(), cfg.cutoff_params(), cfg.flow_spec()
    grid = cfg.grid_obj()
    checks = []

    gen = genfun.generation_check(H, grid.points(), part, c, spec, jobs=jobs)
    checks.append(_check(gen.max_gap if gen.failures == 0 else math.inf, tol.generation_gap,
                         "generation_gap", {"failures": gen.failures}))

    worst = 0.0
    for i in range(cfg.probes.gradient_points):
        e = _random_fiber(cfg, H, seed, i)
        fd = genfun.gradient_fd(H, e, part, c, spec)
        chain = genfun.chain_rule_gradient(H, e, part, c, spec)
        worst = max(worst, float(np.max(np.abs(fd - chain)) / max(np.max(np.abs(fd)), 1e-12)))
    checks.append(_check(worst, tol.gradient_rel, "gradient_consistency"))

    centre = (np.array(grid.lo) + np.array(grid.hi)) / 2
    qi = genfun.almost_qi_probe(H, centre, part, c, spec, cfg.probes.qi_rays, cfg.probes.qi_radii, seed)
    med = qi.sup_A[len(qi.radii) // 2]
    checks.append(_check(qi.sup_A[-1] / max(med, 1e-8), tol.qi_ratio, "almost_qi",
                         {"radii": qi.radii, "sup_A": qi.sup_A, "sup_Q": qi.sup_Q,
                          "control_ratio": qi.control_ratio}))

    cj = genfun.coordinate_jacobian(H, _random_fiber(cfg, H, seed, 10 ** 6), part, c, spec)
    checks.append(_check(cj.cond, tol.jacobian_cond, "coordinate_jacobian",
                         {"det": cj.det, "structure_violation": cj.structure_violation}))

    passed = all(ch["pass"] for ch in checks)
    write_json(out / "genfun_check.json", _report(cfg, seed, "genfun-check",
                                                  {"checks": checks, "pass": passed}))
    for ch in checks:
        if not ch["pass"]:
            log.error("check %s failed: %.3e > %.3e", ch["name"], ch["value"], ch["tolerance"])
    return EXIT_OK if passed else EXIT_CHECK


def cmd_validate(cfg: RunConfig, out: FsPath, seed: int, jobs: int) -> int:
    H = cfg.hamiltonian_expr()
    n = cfg.dim
    tol = cfg.tolerances
    pr = cfg.probes
    spec = cfg.flow_spec()
    m = pr.path_samples
    checks = []

    worst = 0.0
    for i in range(pr.conformal_samples):
        rng = keyed_generator(seed, "validate.conformal", i)
        y = ContactPoint.from_array(rng.uniform(-1, 1, 2 * n + 1))
        v = TangentVector.from_array(rng.uniform(-1, 1, 2 * n + 1))
        worst = max(worst, conformal_identity_check(H, float(rng.uniform(0, 1)), y, v, spec))
    checks.append(_check(worst, tol.conformal, "conformal_identity"))

    gauge = 0.0
    fvar = 0.0
    for i in range(pr.paths):
        path = action.random_smooth_path(keyed_generator(seed, "validate.path", i), n, m, pr.path_amplitude)
        a0 = action.action_A0(action.gauge_transform(H, path, spec))
        gauge = max(gauge, abs(action.action_AH(H, path, spec) - a0) / (1.0 + abs(a0)))
        eta = action.random_smooth_path(keyed_generator(seed, "validate.eta", i), n, m, pr.path_amplitude).y
        fd, formula = action.first_variation_check(H, path, eta, spec)
        fvar = max(fvar, abs(fd - formula) / (1.0 + abs(fd)))
    checks.append(_check(gauge, tol.gauge, "gauge_identity"))
    checks.append(_check(fvar, tol.first_variation, "first_variation"))

    carnot = 0.0
    vanish = 0.0
    for i in range(pr.trajectories):
        y0 = keyed_generator(seed, "validate.trajectory", i).uniform(-1, 1, 2 * n + 1)
        traj = action.trajectory_path(H, y0, m, spec)
        carnot = max(carnot, action.carnot_residual(H, traj))
        vanish = max(vanish, abs(action.action_AH(H, traj, spec)))
    checks.append(_check(carnot, tol.carnot, "carnot_residual"))
    checks.append(_check(vanish, tol.action_vanishing, "action_vanishing"))

    passed = all(ch["pass"] for ch in checks)
    write_json(out / "validate.json", _report(cfg, seed, "validate", {"checks": checks, "pass": passed}))
    for ch in checks:
        if not ch["pass"]:
            log.error("check %s failed: %.3e > %.3e", ch["name"], ch["value"], ch["tolerance"])
    return EXIT_OK if passed else EXIT_CHECK


COMMANDS = {
    "flow": cmd_flow,
    "front": cmd_front,
    "genfun-check": cmd_genfun_check,
    "validate": cmd_validate,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="contactgf", description="Generating functions for contact isotopies of the zero section.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=_u64, default=0)
        p.add_argument("--jobs", type=_positive, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
        cfg = load_config(data)
        out = FsPath(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, out, args.seed, args.jobs)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowError, DomainError, genfun.CriticalSolveError, genfun.TelescopingError,
            genfun.PreconditionError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
