"""Batch front end: JSON run configs in, summary.json and CSV files out.

Exit codes: 0 success, 1 configuration or validation error, 2 infeasible
problem, 3 nonconvergence (outputs are still written and flagged).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .analysis import equivalence_check, kkt_verify, potential_scale
from .captools import (
    PointMeasure,
    capacity,
    predict_solvability,
    sweep,
    truncation_study,
    wiener_terms,
)
from .errors import (
    CondenserError,
    ConfigError,
    InfeasibleError,
    InvalidArgumentError,
    KernelError,
    NonPsdError,
)
from .geometry import (
    Condenser,
    Plate,
    RotationProfile,
    build_rotation_body,
    build_rotation_segment,
    build_sphere_plate,
    validate_condenser,
)
from .kernels import Kernel, check_psd
from .measures import (
    ExternalField,
    VectorMeasure,
    r_equivalent_twin,
    read_measure_csv,
    semimetric_distance,
    weighted_energy,
    write_measure_csv,
)
from .solver import Problem, SolveOptions, solve

logger = logging.getLogger("condensers")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONCONVERGENCE = 0, 1, 2, 3
SUBCOMMANDS = ("solve", "capacity", "thinness", "sweep", "verify")
_MISSING = object()


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _get(d: dict, key: str, path: str, default: Any = _MISSING):
    if not isinstance(d, dict):
        raise ConfigError("expected an object", field=path)
    if key not in d:
        if default is _MISSING:
            raise ConfigError("missing required field", field=f"{path}.{key}" if path else key)
        return default
    return d[key]


def _number(value, path: str, allow_inf: bool = False) -> float:
    if isinstance(value, str) and allow_inf and value.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", field=path)
    v = float(value)
    if math.isnan(v) or (math.isinf(v) and not allow_inf):
        raise ConfigError("expected a finite number", field=path)
    return v


def _vector(value, n: int, path: str, allow_inf: bool = False) -> np.ndarray:
    if isinstance(value, list):
        if len(value) != n:
            raise ConfigError(f"expected {n} entries, got {len(value)}", field=path)
        return np.array([_number(v, f"{path}[{i}]", allow_inf) for i, v in enumerate(value)])
    return np.full(n, _number(value, path, allow_inf))


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", field=path)
    return value


def _points(value, path: str) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise ConfigError("expected a nonempty list of points", field=path)
    rows = []
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) not in (2, 3):
            raise ConfigError("each point needs 2 or 3 coordinates", field=f"{path}[{i}]")
        rows.append([_number(v, f"{path}[{i}][{j}]") for j, v in enumerate(row)])
    if len({len(r) for r in rows}) != 1:
        raise ConfigError("points have mixed dimensions", field=path)
    return np.array(rows)


def parse_kernel(d: dict) -> Kernel:
    kd = _get(d, "kernel", "")
    family = _get(kd, "family", "kernel", "riesz")
    try:
        if family == "riesz":
            alpha = _number(_get(kd, "alpha", "kernel"), "kernel.alpha")
            dim = _int(_get(kd, "dimension", "kernel", 3), "kernel.dimension")
            return Kernel.riesz(alpha, dim)
        if family == "log":
            return Kernel.logarithmic()
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field="kernel") from exc
    raise ConfigError(f"unknown kernel family {family!r}", field="kernel.family")


def parse_profile(d: dict, path: str) -> RotationProfile:
    try:
        return RotationProfile(_get(d, "family", path), _number(_get(d, "s", path), f"{path}.s"))
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field=path) from exc


def _build_shape(sd: dict, path: str, sign: int, a: float, name: str) -> Plate:
    kind = _get(sd, "type", path)
    if kind in ("sphere", "ball_shell"):
        # a closed ball enters through its boundary sphere, which carries all its
        # capacitary mass for the Newtonian kernel
        center = _get(sd, "center", path)
        if not isinstance(center, list):
            raise ConfigError("expected a coordinate list", field=f"{path}.center")
        return build_sphere_plate(
            [_number(v, f"{path}.center") for v in center],
            _number(_get(sd, "radius", path), f"{path}.radius"),
            _int(_get(sd, "n_nodes", path), f"{path}.n_nodes"), sign=sign, a=a, name=name)
    if kind == "points":
        nodes = _points(_get(sd, "nodes", path), f"{path}.nodes")
        w = _vector(_get(sd, "cell_weights", path, 1.0), len(nodes), f"{path}.cell_weights")
        return Plate(nodes, w, sign=sign, a=a, name=name)
    if kind == "rotation_body":
        prof = parse_profile(_get(sd, "profile", path), f"{path}.profile")
        return build_rotation_body(
            prof, _number(_get(sd, "x_max", path), f"{path}.x_max"),
            _int(_get(sd, "n_axial", path), f"{path}.n_axial"),
            _int(_get(sd, "n_angular", path), f"{path}.n_angular"),
            grid=_get(sd, "grid", path, "auto"), sign=sign, a=a, name=name)
    if kind == "rotation_segment":
        prof = parse_profile(_get(sd, "profile", path), f"{path}.profile")
        return build_rotation_segment(
            prof, _number(_get(sd, "x_lo", path, 0.0), f"{path}.x_lo"),
            _number(_get(sd, "x_hi", path), f"{path}.x_hi"),
            _number(_get(sd, "spacing", path), f"{path}.spacing"),
            max_angular=_int(_get(sd, "max_angular", path, 256), f"{path}.max_angular"),
            sign=sign, a=a, name=name)
    raise ConfigError(f"unknown shape type {kind!r}", field=f"{path}.type")


def parse_plates(d: dict, kernel: Kernel) -> Condenser:
    items = _get(d, "plates", "")
    if not isinstance(items, list) or not items:
        raise ConfigError("expected a nonempty list", field="plates")
    plates = []
    for i, pd in enumerate(items):
        path = f"plates[{i}]"
        sign = _int(_get(pd, "sign", path, 1), f"{path}.sign")
        a = _number(_get(pd, "a", path, 1.0), f"{path}.a")
        name = str(_get(pd, "name", path, f"A{i + 1}"))
        try:
            plate = _build_shape(_get(pd, "shape", path), f"{path}.shape", sign, a, name)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), field=f"{path}.shape") from exc
        n = plate.n_nodes
        g = _vector(_get(pd, "g", path, 1.0), n, f"{path}.g")
        f = _vector(_get(pd, "f", path, 0.0), n, f"{path}.f", allow_inf=True)
        cap = _get(pd, "cap", path, None)
        if isinstance(cap, dict):
            mult = _number(_get(cap, "capacitary_multiple", f"{path}.cap"),
                           f"{path}.cap.capacitary_multiple")
            lam0 = capacity(plate.replace(g=np.ones(n), cap=None), kernel).minimizer
            cap = mult * plate.a * lam0
        elif cap is not None:
            cap = _vector(cap, n, f"{path}.cap")
        plates.append(plate.replace(g=g, f=f, cap=cap))
    c = Condenser(plates)
    report = validate_condenser(c)
    if not report.valid:
        raise ConfigError("; ".join(report.errors), field="plates")
    if c.dim != kernel.dim:
        raise ConfigError(f"plates live in R^{c.dim} but the kernel in R^{kernel.dim}",
                          field="kernel.dimension")
    return c


def parse_field(d: dict, c: Condenser) -> ExternalField:
    fd = d.get("field")
    if fd is None:
        return ExternalField.from_plates(c)
    mode = _get(fd, "mode", "field")
    if mode == "case_i":
        return ExternalField.from_plates(c)
    if mode == "case_ii":
        zeta = _vector(_get(fd, "zeta", "field"), c.points.shape[0], "field.zeta")
        return ExternalField.case_ii(zeta)
    raise ConfigError(f"unknown field mode {mode!r}", field="field.mode")


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    kernel: Optional[Kernel] = None
    solver: SolveOptions = field(default_factory=SolveOptions)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    raw = copy.deepcopy(raw)
    sd = raw.setdefault("solver", {})
    if not isinstance(sd, dict):
        raise ConfigError("expected an object", field="solver")
    for key, value in (overrides or {}).items():
        if value is not None:
            sd[key] = value
    opts = SolveOptions(
        tol=_number(sd.get("tol", 1e-8), "solver.tol"),
        max_iters=_int(sd.get("max_iters", 50000), "solver.max_iters"),
        seed=None if sd.get("seed") is None else _int(sd["seed"], "solver.seed"),
        accelerate=bool(sd.get("accelerate", True)),
    )
    if not opts.tol > 0:
        raise ConfigError("must be positive", field="solver.tol")
    if opts.max_iters < 1:
        raise ConfigError("must be at least 1", field="solver.max_iters")
    cfg = RunConfig(raw, path.resolve().parent, solver=opts)
    if "kernel" in raw:
        cfg.kernel = parse_kernel(raw)
    return cfg


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return x


def write_summary(out: Path, cfg: RunConfig, command: str, body: dict, status: str) -> Path:
    doc = {
        "command": command,
        "config_sha256": cfg.digest,
        "version": __version__,
        "status": status,
        "solver_options": {"tol": cfg.solver.tol, "max_iters": cfg.solver.max_iters,
                           "seed": cfg.solver.seed, "accelerate": cfg.solver.accelerate},
        **body,
    }
    path = out / "summary.json"
    path.write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _require_kernel(cfg: RunConfig) -> Kernel:
    if cfg.kernel is None:
        raise ConfigError("missing required field", field="kernel")
    return cfg.kernel


def _build_problem(cfg: RunConfig) -> tuple[Problem, dict]:
    k = _require_kernel(cfg)
    c = parse_plates(cfg.raw, k)
    F = parse_field(cfg.raw, c)
    try:
        p = Problem.build(c, k, F, check=False)
    except KernelError as exc:
        raise ConfigError(str(exc), field="kernel") from exc
    psd = check_psd(p.K)
    if not psd.psd:
        raise NonPsdError(f"kernel matrix fails the PSD check (smallest eigenvalue "
                          f"{psd.min_eigenvalue:.3e})")
    info = {
        "validation": validate_condenser(c).to_dict(),
        "psd_check": {"min_eigenvalue": psd.min_eigenvalue, "psd": psd.psd,
                      "threshold": psd.threshold, "method": psd.method},
        "kernel": k.describe(),
        "plates": [{"name": pl.name, "sign": pl.sign, "n_nodes": pl.n_nodes, "a": pl.a,
                    "constrained": pl.constrained} for pl in c.plates],
    }
    return p, info


def _kkt_tol(cfg: RunConfig, p: Problem, lam: VectorMeasure) -> tuple[float, float]:
    rel = _number(cfg.raw.get("kkt", {}).get("tol_relative", 1e-5), "kkt.tol_relative")
    scale = potential_scale(p, lam)
    return rel * scale, scale


def run_solve(cfg: RunConfig, out: Path) -> tuple[dict, int]:
    p, info = _build_problem(cfg)
    rep = solve(p, cfg.solver)
    lam = rep.minimizer
    tol, scale = _kkt_tol(cfg, p, lam)
    kkt = kkt_verify(lam, p, tol)
    write_measure_csv(lam, out / "minimizer.csv")
    rep.write_trace_csv(out / "trace.csv")
    kkt.write_residual_csv(out / "kkt_residuals.csv")
    body = {**info, "solve": rep.summary(), "kkt": {**kkt.to_dict(), "potential_scale": scale}}
    twin = cfg.raw.get("twin")
    if twin is not None:
        pair = _get(twin, "plates", "twin")
        if not (isinstance(pair, list) and len(pair) == 2):
            raise ConfigError("expected two plate indices", field="twin.plates")
        i, j = (_int(v, "twin.plates") for v in pair)
        lam_hat = r_equivalent_twin(lam, p.condenser, i, j)
        write_measure_csv(lam_hat, out / "minimizer_twin.csv")
        eq = equivalence_check(lam, lam_hat, p.K, p.condenser)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(lam.masses, lam_hat.masses))
        body["r_equivalent_minimizers"] = {
            "plates": [i, j],
            "distance": semimetric_distance(lam, lam_hat, p.K, p.condenser),
            "equivalent": eq.equivalent,
            "G": weighted_energy(lam, p.field, p.K, p.condenser),
            "G_twin": weighted_energy(lam_hat, p.field, p.K, p.condenser),
            "twin_feasible": lam_hat.is_admissible(p.condenser),
            "twin_kkt_passed": kkt_verify(lam_hat, p, tol).passed,
            "max_componentwise_difference": diff,
        }
    return body, EXIT_OK if rep.converged else EXIT_NONCONVERGENCE


def run_verify(cfg: RunConfig, out: Path) -> tuple[dict, int]:
    p, info = _build_problem(cfg)
    vd = _get(cfg.raw, "verify", "")
    mpath = Path(_get(vd, "measure", "verify"))
    if not mpath.is_absolute():
        mpath = cfg.base_dir / mpath
    try:
        lam = read_measure_csv(mpath, p.condenser)
    except OSError as exc:
        raise ConfigError(f"cannot read measure: {exc}", field="verify.measure") from exc
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field="verify.measure") from exc
    if not lam.is_admissible(p.condenser, rtol=1e-8):
        raise InfeasibleError("the provided measure is not admissible for this problem")
    tol, scale = _kkt_tol(cfg, p, lam)
    kkt = kkt_verify(lam, p, tol)
    kkt.write_residual_csv(out / "kkt_residuals.csv")
    body = {**info, "kkt": {**kkt.to_dict(), "potential_scale": scale},
            "G": weighted_energy(lam, p.field, p.K, p.condenser)}
    return body, EXIT_OK


def run_capacity(cfg: RunConfig, out: Path) -> tuple[dict, int]:
    k = _require_kernel(cfg)
    c = parse_plates(cfg.raw, k)
    idx = _int(_get(cfg.raw.get("capacity", {}), "plate", "capacity", 0), "capacity.plate")
    if not 0 <= idx < len(c):
        raise ConfigError("plate index out of range", field="capacity.plate")
    res = capacity(c.plates[idx], k, SolveOptions(**{**cfg.solver.__dict__, "tol": min(cfg.solver.tol, 1e-10)}))
    with open(out / "equilibrium.csv", "w") as fh:
        fh.write("node_index,minimizer,gamma,potential\n")
        for j in range(res.gamma.size):
            fh.write(f"{j},{res.minimizer[j]!r},{res.gamma[j]!r},{res.potential[j]!r}\n")
    body = {"kernel": k.describe(), "plate": idx, "capacity": res.summary()}
    return body, EXIT_OK if res.converged else EXIT_NONCONVERGENCE


def run_thinness(cfg: RunConfig, out: Path) -> tuple[dict, int]:
    k = cfg.kernel or Kernel.newtonian()
    td = _get(cfg.raw, "thinness", "")
    prof = parse_profile(_get(td, "profile", "thinness"), "thinness.profile")
    q = _number(_get(td, "q", "thinness", 2.0), "thinness.q")
    k_max = _int(_get(td, "k_max", "thinness", 8), "thinness.k_max")
    nps = _int(_get(td, "nodes_per_shell", "thinness", 1200), "thinness.nodes_per_shell")
    try:
        diag = wiener_terms(prof, q, k_max, k, nodes_per_shell=nps)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field="thinness") from exc
    diag.write_csv(out / "thinness.csv")
    body = {"kernel": k.describe(), "diagnosis": diag.to_dict(),
            "verdict": diag.verdict, "solvability": predict_solvability(None, diag)}
    tr = td.get("truncation")
    if tr is not None:
        xs = _get(tr, "x_max", "thinness.truncation", [10, 20, 40])
        if not isinstance(xs, list) or not xs:
            raise ConfigError("expected a nonempty list", field="thinness.truncation.x_max")
        study = truncation_study(
            prof, [_number(x, "thinness.truncation.x_max") for x in xs],
            spacing=_number(_get(tr, "spacing", "thinness.truncation", 0.5),
                            "thinness.truncation.spacing"), k=k)
        study.write_csv(out / "truncation.csv")
        body["truncation"] = study.to_dict()
    return body, EXIT_OK


def run_sweep(cfg: RunConfig, out: Path) -> tuple[dict, int]:
    k = _require_kernel(cfg)
    c = parse_plates(cfg.raw, k)
    sd = _get(cfg.raw, "sweep", "")
    idx = _int(_get(sd, "target_plate", "sweep", 0), "sweep.target_plate")
    if not 0 <= idx < len(c):
        raise ConfigError("plate index out of range", field="sweep.target_plate")
    src = _get(sd, "source", "sweep")
    pts = _points(_get(src, "points", "sweep.source"), "sweep.source.points")
    w = _vector(_get(src, "weights", "sweep.source"), len(pts), "sweep.source.weights")
    try:
        nu = PointMeasure(pts, w)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field="sweep.source") from exc
    target = c.plates[idx]
    res = sweep(nu, target, k, tol=cfg.solver.tol, max_iters=cfg.solver.max_iters)
    res.write_csv(out / "swept.csv", target)
    body = {"kernel": k.describe(), "target_plate": idx, "sweep": res.summary(),
            "mass_deficit": {"swept_mass": res.swept_mass, "original_mass": res.original_mass}}
    return body, EXIT_OK if res.converged else EXIT_NONCONVERGENCE


PIPELINES = {
    "solve": run_solve,
    "capacity": run_capacity,
    "thinness": run_thinness,
    "sweep": run_sweep,
    "verify": run_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="condensers", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to a JSON run config")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="seed for a random feasible start")
        sp.add_argument("--tol", type=float, default=None, help="solver tolerance")
        sp.add_argument("--max-iters", type=int, default=None, help="solver iteration cap")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command: str, config_path, out_dir, seed=None, tol=None, max_iters=None) -> int:
    out = Path(out_dir)
    try:
        cfg = load_config(config_path, {"seed": seed, "tol": tol, "max_iters": max_iters})
        out.mkdir(parents=True, exist_ok=True)
        body, code = PIPELINES[command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NonPsdError, KernelError, InvalidArgumentError) as exc:
        print(f"invalid problem: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CondenserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status = "ok" if code == EXIT_OK else "nonconvergence"
    path = write_summary(out, cfg, command, body, status)
    logger.info("wrote %s", path)
    if code == EXIT_NONCONVERGENCE:
        print("warning: iteration cap reached before the tolerance; outputs are flagged",
              file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.seed, args.tol, args.max_iters)


if __name__ == "__main__":
    sys.exit(main())
