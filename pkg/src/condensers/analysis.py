"""Weighted potentials and the threshold characterization of minimizers."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateMeasureError, InvalidArgumentError
from .geometry import Condenser
from .kernels import KernelMatrix
from .measures import (
    EQUIVALENCE_TOL,
    ExternalField,
    VectorMeasure,
    r_map,
    semimetric_distance,
)
from .solver import Problem

MASS_FLOOR = 1e-12  # relative to a_i


def weighted_potentials(lam: VectorMeasure, F: ExternalField, K: KernelMatrix,
                        c: Condenser) -> list:
    """Per plate i, the node values s_i * (K R lam) + f_i."""
    pot = K.entries @ r_map(lam, c)
    fields = F.node_values(K, c)
    return [p.sign * pot[idx] + f for p, idx, f in zip(c.plates, c.plate_index, fields)]


def potential_scale(p: Problem, lam: VectorMeasure) -> float:
    """Largest finite |W/g| over all nodes; the unit of KKT tolerances."""
    W = weighted_potentials(lam, p.field, p.K, p.condenser)
    vals = [np.abs(w / pl.g) for w, pl in zip(W, p.condenser.plates)]
    v = np.concatenate(vals)
    v = v[np.isfinite(v)]
    s = float(np.max(v, initial=0.0))
    return s if s > 0 else 1.0


def energy_scale(p: Problem, lam: VectorMeasure) -> float:
    """2 * sum(a) * potential_scale: the energy gap bound of a KKT residual is 2 tol * this."""
    return 2.0 * sum(pl.a for pl in p.condenser.plates) * potential_scale(p, lam)


@dataclass
class PlateKkt:
    plate: int
    constrained: bool
    multiplier: float
    residuals: dict
    violators: dict
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "plate": self.plate,
            "constrained": self.constrained,
            "multiplier": self.multiplier,
            "residuals": dict(sorted(self.residuals.items())),
            "violating_nodes": {k: list(map(int, v)) for k, v in sorted(self.violators.items())},
            "degenerate": self.degenerate,
        }


@dataclass
class KktReport:
    plates: list
    tol: float
    passed: bool
    node_table: list = field(default_factory=list)

    @property
    def multipliers(self) -> np.ndarray:
        return np.array([pk.multiplier for pk in self.plates])

    @property
    def max_residual(self) -> float:
        return max((r for pk in self.plates for r in pk.residuals.values()), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "max_residual": self.max_residual,
            "plates": [pk.to_dict() for pk in self.plates],
        }

    def write_residual_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["plate_index", "node_index", "mass", "W", "W_over_g", "multiplier",
                        "lower_residual", "upper_residual"])
            for row in self.node_table:
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


def kkt_verify(lam: VectorMeasure, p: Problem, tol: float) -> KktReport:
    """Check the threshold conditions characterizing minimizers at absolute tolerance ``tol``.

    With W~ = W/g per node: an unconstrained plate needs W~ >= w on every node
    and W~ = w on its support, where w = <W, lam>/a.  A constrained plate needs
    W~ >= w wherever lam is below the cap and W~ <= w wherever lam carries
    mass, where w is the median of W~ over the free nodes.  "Carries mass"
    means mass > 1e-12 a_i; "below the cap" means cap - mass > 1e-12 a_i.
    """
    c = p.condenser
    W = weighted_potentials(lam, p.field, p.K, c)
    plates, table = [], []
    passed = True
    for i, (pl, m, Wi) in enumerate(zip(c.plates, lam.masses, W)):
        floor = MASS_FLOOR * pl.a
        wt = Wi / pl.g
        support = m > floor
        if not np.any(support):
            raise DegenerateMeasureError(f"plate {i} carries no mass")
        degenerate = False
        lower = np.zeros(pl.n_nodes)  # amount by which W~ falls below w
        upper = np.zeros(pl.n_nodes)  # amount by which W~ exceeds w
        if not pl.constrained:
            w = float(Wi[support] @ m[support]) / pl.a
            with np.errstate(invalid="ignore"):
                lower = np.maximum(w - wt, 0.0)
            upper[support] = np.maximum(wt[support] - w, 0.0)
            res_lo = float(np.max(lower))
            res_eq = float(np.max(np.abs(wt[support] - w)))
            residuals = {"b3": res_lo, "b4": res_eq}
            viol = {"b3": np.flatnonzero(lower > tol),
                    "b4": np.flatnonzero(support & (np.abs(wt - w) > tol))}
        else:
            below_cap = (pl.cap - m) > floor
            free = support & below_cap
            if np.any(free):
                w = float(np.median(wt[free]))
            elif np.any(below_cap):
                # no free node: the threshold is the infimum of W~ over non-full nodes
                w = float(np.min(wt[below_cap]))
                degenerate = True
            else:
                w = float(np.max(wt[support]))
                degenerate = True
            with np.errstate(invalid="ignore"):
                lower[below_cap] = np.maximum(w - wt[below_cap], 0.0)
            upper[support] = np.maximum(wt[support] - w, 0.0)
            residuals = {"b1": float(np.max(lower)), "b2": float(np.max(upper))}
            viol = {"b1": np.flatnonzero(lower > tol), "b2": np.flatnonzero(upper > tol)}
        ok = all(r <= tol for r in residuals.values())
        passed = passed and ok
        plates.append(PlateKkt(i, pl.constrained, w, residuals, viol, degenerate))
        for j in range(pl.n_nodes):
            table.append((i, j, m[j], Wi[j], wt[j], w, lower[j], upper[j]))
    return KktReport(plates, tol, passed, table)


def variational_inequality_check(lam: VectorMeasure, nu: VectorMeasure, p: Problem) -> float:
    """sum_i <W^{lam,i}, nu^i - lam^i>; nonnegative for every feasible nu iff lam is optimal."""
    W = weighted_potentials(lam, p.field, p.K, p.condenser)
    total = 0.0
    for Wi, a, b in zip(W, lam.masses, nu.masses):
        d = b - a
        live = d != 0
        total += float(Wi[live] @ d[live])
    return total


@dataclass
class EquivalenceResult:
    equivalent: bool
    distance: float
    scale: float

    def __bool__(self) -> bool:
        return self.equivalent

    def to_dict(self) -> dict:
        return {"equivalent": self.equivalent, "distance": self.distance, "scale": self.scale}


def equivalence_check(lam1: VectorMeasure, lam2: VectorMeasure, K: KernelMatrix, c: Condenser,
                      tol: float = EQUIVALENCE_TOL,
                      scale: Optional[float] = None) -> EquivalenceResult:
    """lam1 ~ lam2 iff ||R lam1 - R lam2|| <= tol * scale (default scale: the larger norm)."""
    d = semimetric_distance(lam1, lam2, K, c)
    if scale is None:
        r1, r2 = r_map(lam1, c), r_map(lam2, c)
        scale = float(np.sqrt(max(K.quadratic(r1), K.quadratic(r2), 0.0)))
        if scale == 0:
            scale = 1.0
    return EquivalenceResult(bool(d <= tol * scale), d, scale)


def rescale_constraint(p: Problem, factor: float) -> Problem:
    """Replace every g_i, a_i by factor * g_i, factor * a_i (caps unchanged)."""
    if not factor > 0:
        raise InvalidArgumentError("rescaling factor must be positive")
    plates = [pl.replace(g=factor * pl.g, a=factor * pl.a) for pl in p.condenser.plates]
    return p.with_condenser(Condenser(plates))
