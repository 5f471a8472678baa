"""Vector measures on a condenser, their R-images, energies and distances.

All sums are finite, so every identity between the vector form and the
R-image form holds exactly up to floating-point rounding.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InfeasibleError, InvalidArgumentError, NonPsdError
from .geometry import Condenser
from .kernels import KernelMatrix

CASE_I = "case_i"
CASE_II = "case_ii"

# equivalence decisions use distance <= EQUIVALENCE_TOL * scale
EQUIVALENCE_TOL = 1e-7


@dataclass
class VectorMeasure:
    """Per-plate nonnegative node masses."""

    masses: list

    def __post_init__(self):
        self.masses = [np.asarray(m, dtype=float).copy() for m in self.masses]

    @classmethod
    def zeros(cls, c: Condenser) -> "VectorMeasure":
        return cls([np.zeros(n) for n in c.sizes])

    @classmethod
    def from_stacked(cls, c: Condenser, x) -> "VectorMeasure":
        x = np.asarray(x, dtype=float)
        return cls(np.split(x, np.cumsum(c.sizes)[:-1]))

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.masses) if self.masses else np.zeros(0)

    def __getitem__(self, i) -> np.ndarray:
        return self.masses[i]

    def __len__(self) -> int:
        return len(self.masses)

    def __add__(self, other: "VectorMeasure") -> "VectorMeasure":
        return VectorMeasure([a + b for a, b in zip(self.masses, other.masses)])

    def __sub__(self, other: "VectorMeasure") -> "VectorMeasure":
        return VectorMeasure([a - b for a, b in zip(self.masses, other.masses)])

    def scale(self, t: float) -> "VectorMeasure":
        return VectorMeasure([t * m for m in self.masses])

    def conforms(self, c: Condenser) -> bool:
        return len(self.masses) == len(c) and all(
            m.shape == (n,) for m, n in zip(self.masses, c.sizes))

    def normalization_error(self, c: Condenser) -> np.ndarray:
        """Relative error of <g_i, mu^i> = a_i per plate."""
        return np.array([abs(float(p.g @ m) - p.a) / p.a
                         for p, m in zip(c.plates, self.masses)])

    def is_normalized(self, c: Condenser, rtol: float = 1e-10) -> bool:
        return bool(np.all(self.normalization_error(c) <= rtol))

    def is_admissible(self, c: Condenser, rtol: float = 1e-10) -> bool:
        """Nonnegative, below caps, and normalized."""
        for p, m in zip(c.plates, self.masses):
            scale = max(float(np.max(m, initial=0.0)), 1e-300)
            if np.any(m < -rtol * scale):
                return False
            if p.cap is not None and np.any(m > p.cap + rtol * np.maximum(p.cap, scale)):
                return False
        return self.is_normalized(c, rtol)


def _check_conforms(mu: VectorMeasure, c: Condenser):
    if not mu.conforms(c):
        raise InvalidArgumentError("vector measure does not conform to the condenser")


def r_map(mu: VectorMeasure, c: Condenser) -> np.ndarray:
    """Signed node weights on the support points: sum_i s_i mu^i.

    Nodes shared by equally signed plates accumulate additively.
    """
    _check_conforms(mu, c)
    out = np.zeros(c.points.shape[0])
    for plate, idx, m in zip(c.plates, c.plate_index, mu.masses):
        np.add.at(out, idx, plate.sign * m)
    return out


def energy(mu: VectorMeasure, K: KernelMatrix, c: Condenser) -> float:
    """(R mu)^T K (R mu)."""
    r = r_map(mu, c)
    return K.quadratic(r)


def mutual_energy(mu: VectorMeasure, nu: VectorMeasure, K: KernelMatrix, c: Condenser) -> float:
    return float(r_map(mu, c) @ (K.entries @ r_map(nu, c)))


def energy_double_sum(mu: VectorMeasure, K: KernelMatrix, c: Condenser) -> float:
    """sum_{i,j} s_i s_j k(mu^i, mu^j), summed plate pair by plate pair."""
    _check_conforms(mu, c)
    total = 0.0
    for i, (pi, ii) in enumerate(zip(c.plates, c.plate_index)):
        for j, (pj, jj) in enumerate(zip(c.plates, c.plate_index)):
            block = K.entries[np.ix_(ii, jj)]
            total += pi.sign * pj.sign * float(mu.masses[i] @ block @ mu.masses[j])
    return total


@dataclass
class ExternalField:
    """Case I: per-plate samples f_i (may be +inf).  Case II: f_i = s_i k(., zeta)."""

    mode: str
    samples: Optional[list] = None
    zeta: Optional[np.ndarray] = None

    @classmethod
    def zero(cls, c: Condenser) -> "ExternalField":
        return cls(CASE_I, samples=[np.zeros(n) for n in c.sizes])

    @classmethod
    def from_plates(cls, c: Condenser) -> "ExternalField":
        return cls(CASE_I, samples=[p.f.copy() for p in c.plates])

    @classmethod
    def case_i(cls, samples: Sequence) -> "ExternalField":
        return cls(CASE_I, samples=[np.asarray(s, dtype=float) for s in samples])

    @classmethod
    def case_ii(cls, zeta) -> "ExternalField":
        return cls(CASE_II, zeta=np.asarray(zeta, dtype=float))

    def node_values(self, K: KernelMatrix, c: Condenser) -> list:
        """Samples of f_i at the nodes of each plate."""
        if self.mode == CASE_I:
            if len(self.samples) != len(c):
                raise InvalidArgumentError("field samples do not match plate count")
            out = []
            for p, s in zip(c.plates, self.samples):
                s = np.asarray(s, dtype=float)
                if s.shape != (p.n_nodes,):
                    raise InvalidArgumentError("field samples do not match plate size")
                if np.any(np.isnan(s)) or np.any(s == -np.inf):
                    raise InvalidArgumentError("Case I samples must lie in (-inf, +inf]")
                out.append(s)
            return out
        if self.mode == CASE_II:
            if self.zeta is None or self.zeta.shape != (K.size,):
                raise InvalidArgumentError("zeta must be a signed weight per support point")
            pot = K.entries @ self.zeta
            return [p.sign * pot[idx] for p, idx in zip(c.plates, c.plate_index)]
        raise InvalidArgumentError(f"unknown field mode {self.mode!r}")

    def zeta_energy(self, K: KernelMatrix) -> float:
        return K.quadratic(self.zeta) if self.mode == CASE_II else 0.0


def field_pairing(mu: VectorMeasure, f_values: list) -> float:
    """sum_i <f_i, mu^i>; a +inf sample carrying mass is infeasible."""
    total = 0.0
    for i, (m, f) in enumerate(zip(mu.masses, f_values)):
        inf = ~np.isfinite(f)
        if np.any(m[inf] > 0):
            raise InfeasibleError(f"plate {i}: mass on a node where f = +inf")
        total += float(m[~inf] @ f[~inf])
    return total


def weighted_energy(mu: VectorMeasure, F: ExternalField, K: KernelMatrix, c: Condenser) -> float:
    """G(mu) = energy(mu) + 2 <f, mu>."""
    return energy(mu, K, c) + 2.0 * field_pairing(mu, F.node_values(K, c))


def semimetric_distance(mu1: VectorMeasure, mu2: VectorMeasure, K: KernelMatrix,
                        c: Condenser, tol: float = 1e-10) -> float:
    """||R mu1 - R mu2||_K, clamped at zero against rounding."""
    d = r_map(mu1, c) - r_map(mu2, c)
    q = K.quadratic(d)
    scale = float(np.abs(d) @ (np.abs(K.entries) @ np.abs(d)))
    if q < -tol * max(scale, 1e-300):
        raise NonPsdError(f"negative quadratic form {q:.3e} (scale {scale:.3e})")
    return float(np.sqrt(max(q, 0.0)))


def semimetric_distance_double_sum(mu1: VectorMeasure, mu2: VectorMeasure,
                                   K: KernelMatrix, c: Condenser) -> float:
    """The same distance, summed as sum_{i,j} s_i s_j k(mu1^i - mu2^i, mu1^j - mu2^j)."""
    q = energy_double_sum(mu1 - mu2, K, c)
    return float(np.sqrt(max(q, 0.0)))


def r_equivalent_twin(mu: VectorMeasure, c: Condenser, i: int, j: int,
                      split_axis: Optional[int] = None) -> VectorMeasure:
    """An R-equivalent partner of ``mu`` obtained by trading mass between plates i and j.

    On the nodes the two equally signed plates share, split the shared set in
    two halves K1, K2 along a coordinate axis and move nu = theta (mu^i|K1 - t
    mu^i|K2) from plate i to plate j.  t balances the g-mass so both
    normalizations survive, and theta <= 1 is the largest step keeping
    nonnegativity and caps.  R mu is unchanged.
    """
    pi, pj = c.plates[i], c.plates[j]
    if i == j or pi.sign != pj.sign:
        raise InvalidArgumentError("twin construction needs two distinct equally signed plates")
    idx_i, idx_j = c.plate_index[i], c.plate_index[j]
    common, ni, nj = np.intersect1d(idx_i, idx_j, assume_unique=False, return_indices=True)
    if common.size < 2:
        raise InvalidArgumentError(f"plates {i} and {j} share fewer than two nodes")
    pts = c.points[common]
    axis = int(np.argmax(np.ptp(pts, axis=0))) if split_axis is None else split_axis
    med = float(np.median(pts[:, axis]))
    k1 = pts[:, axis] > med
    k2 = pts[:, axis] < med
    gi, gj = pi.g[ni], pj.g[nj]
    if not np.allclose(gi, gj):
        raise InvalidArgumentError("twin construction needs g_i = g_j on the shared nodes")
    mi = mu.masses[i][ni]
    m1, m2 = float(gi[k1] @ mi[k1]), float(gi[k2] @ mi[k2])
    if m1 > m2:
        k1, k2, m1, m2 = k2, k1, m2, m1
    if m1 <= 0 or m2 <= 0:
        raise InvalidArgumentError("plate i carries no mass on one half of the shared set")
    t = m1 / m2
    nu = np.zeros(common.size)
    nu[k1] = mi[k1]
    nu[k2] = -t * mi[k2]

    # largest theta in (0, 1] with mu^i - theta nu and mu^j + theta nu admissible
    theta = 1.0
    mj = mu.masses[j][nj]
    cap_i = pi.cap[ni] if pi.cap is not None else np.full(common.size, np.inf)
    cap_j = pj.cap[nj] if pj.cap is not None else np.full(common.size, np.inf)
    neg = nu < 0
    pos = nu > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        if np.any(neg):
            theta = min(theta, float(np.min((cap_i[neg] - mi[neg]) / -nu[neg])))
            theta = min(theta, float(np.min(mj[neg] / -nu[neg])))
        if np.any(pos):
            theta = min(theta, float(np.min((cap_j[pos] - mj[pos]) / nu[pos])))
    if not theta > 0:
        raise InvalidArgumentError("no admissible mass transfer between the plates")
    out = VectorMeasure(mu.masses)
    out.masses[i][ni] = mi - theta * nu
    out.masses[j][nj] = mj + theta * nu
    return out


def write_measure_csv(mu: VectorMeasure, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["plate_index", "node_index", "mass"])
        for i, m in enumerate(mu.masses):
            for j, v in enumerate(m):
                w.writerow([i, j, repr(float(v))])


def read_measure_csv(path, c: Condenser) -> VectorMeasure:
    mu = VectorMeasure.zeros(c)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"plate_index", "node_index", "mass"} - set(reader.fieldnames or [])
        if missing:
            raise InvalidArgumentError(f"measure CSV lacks columns {sorted(missing)}")
        for row in reader:
            i, j = int(row["plate_index"]), int(row["node_index"])
            if not (0 <= i < len(c) and 0 <= j < c.sizes[i]):
                raise InvalidArgumentError(f"measure CSV row out of range: plate {i}, node {j}")
            mu.masses[i][j] = float(row["mass"])
    return mu
