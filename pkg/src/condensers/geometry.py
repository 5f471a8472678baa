"""Discretized condenser plates and their validation.

A plate is a finite node cloud with quadrature (cell) weights; a measure on a
plate is a nonnegative mass per node.  Only closed plates are representable.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError

POWER_LAW = "power"
STRETCHED_EXP = "stretched_exp"

# ratio of the effective self-interaction radius to the radius of the
# equal-area disc (surface cells) or to the half-length (curve cells)
SELF_RADIUS_FACTOR = 0.5

_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class RotationProfile:
    """Radius profile of a rotation body about the x1 axis.

    ``power``: rho(x) = x**-s, s >= 0.  ``stretched_exp``: rho(x) = exp(-x**s), s > 0.
    """

    family: str
    s: float

    def __post_init__(self):
        if self.family not in (POWER_LAW, STRETCHED_EXP):
            raise InvalidArgumentError(f"unknown profile family {self.family!r}")
        if not math.isfinite(self.s) or self.s < 0:
            raise InvalidArgumentError("profile exponent s must be finite and >= 0")
        if self.family == STRETCHED_EXP and self.s == 0:
            raise InvalidArgumentError("stretched_exp profile requires s > 0")

    def log_rho(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family == POWER_LAW:
            if self.s == 0:
                return np.zeros_like(x)
            with np.errstate(divide="ignore"):
                return -self.s * np.log(x)
        return -np.power(x, self.s)

    def rho(self, x) -> np.ndarray:
        return np.exp(self.log_rho(x))

    @property
    def label(self) -> str:
        return f"{self.family}(s={self.s:g})"


@dataclass
class Plate:
    """One signed plate of a condenser.

    ``cap`` holds node-wise constraint masses and is present iff the plate is
    constrained.  ``self_radius`` optionally overrides the default effective
    radius used for the regularized self-interaction of each node.
    """

    nodes: np.ndarray
    cell_weights: np.ndarray
    sign: int = 1
    g: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None
    a: float = 1.0
    cap: Optional[np.ndarray] = None
    self_radius: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        n = self.nodes.shape[0]
        self.cell_weights = np.broadcast_to(
            np.asarray(self.cell_weights, dtype=float), (n,)
        ).copy()
        self.g = np.ones(n) if self.g is None else np.broadcast_to(
            np.asarray(self.g, dtype=float), (n,)).copy()
        self.f = np.zeros(n) if self.f is None else np.broadcast_to(
            np.asarray(self.f, dtype=float), (n,)).copy()
        if self.cap is not None:
            self.cap = np.broadcast_to(np.asarray(self.cap, dtype=float), (n,)).copy()
        if self.self_radius is not None:
            self.self_radius = np.broadcast_to(
                np.asarray(self.self_radius, dtype=float), (n,)).copy()
        self.sign = int(self.sign)
        self.a = float(self.a)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def constrained(self) -> bool:
        return self.cap is not None

    def replace(self, **changes) -> "Plate":
        return dataclasses.replace(self, **changes)

    def check(self) -> list[str]:
        """Return human-readable invariant violations (empty when valid)."""
        issues = []
        if self.n_nodes == 0:
            return ["plate has no nodes"]
        if self.sign not in (1, -1):
            issues.append(f"sign must be +1 or -1, got {self.sign}")
        if self.dim not in (2, 3):
            issues.append(f"nodes must live in R^2 or R^3, got dimension {self.dim}")
        if not np.all(np.isfinite(self.nodes)):
            issues.append("non-finite node coordinates")
        if not np.all(self.cell_weights > 0):
            issues.append("cell weights must be positive")
        if not np.all((self.g > 0) & np.isfinite(self.g)):
            issues.append("g must be positive and finite")
        if np.any(np.isnan(self.f)) or np.any(self.f == -np.inf):
            issues.append("f must take values in (-inf, +inf]")
        if not np.any(np.isfinite(self.f)):
            issues.append("f is +inf at every node; no node can carry mass")
        if not (self.a > 0 and math.isfinite(self.a)):
            issues.append("mass target a must be positive")
        if self.cap is not None:
            if np.any(self.cap < 0) or np.any(np.isnan(self.cap)):
                issues.append("cap must be nonnegative")
            elif not float(self.g @ self.cap) > self.a:
                issues.append("constraint not admissible: <g, cap> must exceed a")
        if self.self_radius is not None and not np.all(self.self_radius > 0):
            issues.append("self_radius overrides must be positive")
        return issues


def default_self_radius(cell_weights, dim: int) -> np.ndarray:
    """Effective radius of the regularized self-interaction of a cell.

    Surface cells in R^3 use c0*sqrt(w/pi); curve cells in R^2 use c0*w/2.
    """
    w = np.asarray(cell_weights, dtype=float)
    if dim == 3:
        return SELF_RADIUS_FACTOR * np.sqrt(w / np.pi)
    return SELF_RADIUS_FACTOR * 0.5 * w


def panel_self_radius(half_width, half_length, log_half_width=None) -> np.ndarray:
    """Effective radius 1/V of a uniformly charged 2p x 2q rectangle.

    V is the Newtonian potential at the centre of the unit-charge panel,
    V = (p asinh(q/p) + q asinh(p/q)) / (p q).  For a square panel this agrees
    with the equal-area disc rule to within 0.6%.  When p underflows the
    slender-panel limit q / (log(2q/p) + 1) is evaluated from ``log_half_width``.
    """
    p = np.asarray(half_width, dtype=float)
    q = np.asarray(half_length, dtype=float)
    p, q = np.broadcast_arrays(p, q)
    if log_half_width is None:
        with np.errstate(divide="ignore"):
            log_p = np.log(p)
    else:
        log_p = np.broadcast_to(np.asarray(log_half_width, dtype=float), p.shape)
    out = np.empty(p.shape)
    lo, hi = np.minimum(p, q), np.maximum(p, q)
    slender = (lo <= 1e-8 * hi)
    reg = ~slender
    pr, qr = p[reg], q[reg]
    out[reg] = pr * qr / (pr * np.arcsinh(qr / pr) + qr * np.arcsinh(pr / qr))
    if np.any(slender):
        ps, qs, lps = p[slender], q[slender], log_p[slender]
        long_axis = np.where(qs >= ps, qs, ps)
        log_short = np.where(qs >= ps, lps, np.log(qs))
        out[slender] = long_axis / (np.log(2 * long_axis) - log_short + 1.0)
    return out


@dataclass
class Condenser:
    """Ordered finite family of plates in R^2 or R^3."""

    plates: list

    def __post_init__(self):
        self.plates = list(self.plates)

    def __len__(self) -> int:
        return len(self.plates)

    @property
    def dim(self) -> int:
        return self.plates[0].dim

    @property
    def signs(self) -> np.ndarray:
        return np.array([p.sign for p in self.plates], dtype=int)

    @property
    def constrained_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.plates) if p.constrained]

    @property
    def sizes(self) -> list[int]:
        return [p.n_nodes for p in self.plates]

    @cached_property
    def node_map(self):
        """Distinct support points and, per plate, the index of each node among them.

        Coincident nodes of different plates share one support point, so that
        the R-image of a vector measure lives on the union of the plates.
        """
        stacked = np.vstack([p.nodes for p in self.plates])
        _, first, inverse = np.unique(
            stacked, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        points = stacked[first[order]]
        idx = rank[inverse]
        splits = np.cumsum(self.sizes)[:-1]
        return points, np.split(idx, splits)

    @property
    def points(self) -> np.ndarray:
        return self.node_map[0]

    @property
    def plate_index(self) -> list[np.ndarray]:
        return self.node_map[1]

    def owners(self) -> list[list[tuple[int, int]]]:
        """For every support point, the (plate, node) pairs located there."""
        out = [[] for _ in range(self.points.shape[0])]
        for i, idx in enumerate(self.plate_index):
            for j, u in enumerate(idx):
                out[u].append((i, j))
        return out

    def support_self_radius(self) -> np.ndarray:
        """Effective self-interaction radius per support point (first owner wins)."""
        radii = np.full(self.points.shape[0], np.nan)
        for plate, idx in zip(self.plates, self.plate_index):
            r = plate.self_radius
            if r is None:
                r = default_self_radius(plate.cell_weights, plate.dim)
            unset = np.isnan(radii[idx])
            radii[idx[unset]] = r[unset]
        return radii


@dataclass
class ValidationReport:
    valid: bool
    pair_distances: list = field(default_factory=list)  # (i, j, min distance) for s_i s_j = -1
    plate_issues: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "opposite_pairs": [
                {"plates": [i, j], "min_distance": d} for i, j, d in self.pair_distances
            ],
            "plate_issues": {str(k): v for k, v in self.plate_issues.items()},
            "errors": list(self.errors),
        }


def min_distance(x: np.ndarray, y: np.ndarray) -> float:
    d, _ = cKDTree(y).query(x, k=1)
    return float(np.min(d))


def validate_condenser(c: Condenser) -> ValidationReport:
    """Check plate invariants and strict separation of oppositely signed plates.

    Equally signed plates may intersect or even coincide.
    """
    errors = []
    issues = {}
    if len(c) == 0:
        return ValidationReport(False, errors=["condenser has no plates"])
    for i, p in enumerate(c.plates):
        found = p.check()
        if found:
            issues[i] = found
            errors.extend(f"plate {i}: {msg}" for msg in found)
    dims = {p.dim for p in c.plates}
    if len(dims) != 1:
        errors.append(f"plates live in different dimensions {sorted(dims)}")
    pairs = []
    if not errors:
        for i in range(len(c)):
            for j in range(i + 1, len(c)):
                if c.plates[i].sign * c.plates[j].sign == -1:
                    d = min_distance(c.plates[i].nodes, c.plates[j].nodes)
                    pairs.append((i, j, d))
                    if not d > 0:
                        errors.append(
                            f"plates {i} and {j} are oppositely signed but not disjoint")
    return ValidationReport(not errors, pairs, issues, errors)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _plate_data(n, g, f, a):
    return dict(
        g=np.ones(n) if g is None else g,
        f=np.zeros(n) if f is None else f,
        a=a,
    )


def fibonacci_sphere(n_nodes: int) -> np.ndarray:
    i = np.arange(n_nodes) + 0.5
    z = 1.0 - 2.0 * i / n_nodes
    phi = np.pi * (1.0 + math.sqrt(5.0)) * i
    r = np.sqrt(1.0 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def build_sphere_plate(center, radius: float, n_nodes: int, *, sign: int = 1,
                       g=None, f=None, a: float = 1.0, cap=None,
                       name: str = "") -> Plate:
    """Quasi-uniform nodes on a sphere (Fibonacci lattice in R^3, equiangular in R^2).

    Cell weights are equal and sum to the surface measure of the sphere.
    """
    center = np.asarray(center, dtype=float).reshape(-1)
    if not radius > 0:
        raise InvalidArgumentError("radius must be positive")
    if n_nodes < 4:
        raise InvalidArgumentError("a sphere plate needs at least 4 nodes")
    if center.size == 3:
        unit = fibonacci_sphere(n_nodes)
        total = 4.0 * np.pi * radius ** 2
    elif center.size == 2:
        t = 2.0 * np.pi * np.arange(n_nodes) / n_nodes
        unit = np.column_stack([np.cos(t), np.sin(t)])
        total = 2.0 * np.pi * radius
    else:
        raise InvalidArgumentError("sphere centre must be a point of R^2 or R^3")
    nodes = center + radius * unit
    w = np.full(n_nodes, total / n_nodes)
    return Plate(nodes, w, sign=sign, cap=cap, name=name, **_plate_data(n_nodes, g, f, a))


def _axial_cells(x: np.ndarray, lo: float, hi: float):
    """Voronoi cell bounds of sorted axial nodes x inside [lo, hi]."""
    mids = 0.5 * (x[1:] + x[:-1])
    left = np.concatenate([[lo], mids])
    right = np.concatenate([mids, [hi]])
    return left, right


def _ring_nodes(x, radius, n_angular, offset):
    t = offset + 2.0 * np.pi * np.arange(n_angular) / n_angular
    return np.column_stack([np.full(n_angular, x), radius * np.cos(t), radius * np.sin(t)])


def build_rotation_body(profile: RotationProfile, x_max: float, n_axial: int,
                        n_angular: int, *, grid: str = "auto", sign: int = 1,
                        g=None, f=None, a: float = 1.0, cap=None,
                        name: str = "") -> Plate:
    """Lateral surface {x2^2 + x3^2 = rho(x1)^2, 0 <= x1 <= x_max} as rings of nodes.

    The axial grid is geometric from x_max/1e4 for power profiles and uniform
    from 0 for stretched exponentials (``grid`` may force either).  End caps
    are omitted.  Cell weights are ring-patch areas; each node also carries a
    panel self-interaction radius.
    """
    if not x_max > 0:
        raise InvalidArgumentError("x_max must be positive")
    if n_axial < 1 or n_angular < 1:
        raise InvalidArgumentError("n_axial and n_angular must be at least 1")
    if grid == "auto":
        grid = "geometric" if profile.family == POWER_LAW else "uniform"
    if grid == "geometric":
        lo = x_max * 1e-4
        x = np.geomspace(lo, x_max, n_axial) if n_axial > 1 else np.array([lo])
    elif grid == "uniform":
        lo = 0.0
        if profile.family == POWER_LAW and profile.s > 0:
            lo = x_max * 1e-4
        x = np.linspace(lo, x_max, n_axial) if n_axial > 1 else np.array([lo])
    else:
        raise InvalidArgumentError(f"unknown axial grid {grid!r}")

    left, right = _axial_cells(x, lo, x_max)
    rho = profile.rho(x)
    ds = np.hypot(right - left, profile.rho(right) - profile.rho(left))
    dtheta = 2.0 * np.pi / n_angular
    nodes, w, r_self = [], [], []
    for m in range(n_axial):
        nodes.append(_ring_nodes(x[m], rho[m], n_angular, 0.5 * dtheta * (m % 2)))
        area = max(rho[m] * dtheta * ds[m], _TINY)
        w.append(np.full(n_angular, area))
        r = panel_self_radius(0.5 * rho[m] * dtheta, 0.5 * ds[m])
        r_self.append(np.full(n_angular, float(r)))
    n = n_axial * n_angular
    return Plate(np.vstack(nodes), np.concatenate(w), sign=sign, cap=cap,
                 self_radius=np.concatenate(r_self), name=name,
                 **_plate_data(n, g, f, a))


def build_rotation_segment(profile: RotationProfile, x_lo: float, x_hi: float,
                           spacing: float, *, max_angular: int = 256,
                           radial_window: Optional[tuple] = None, sign: int = 1,
                           a: float = 1.0, name: str = "") -> Plate:
    """Rotation-body surface over [x_lo, x_hi] with aspect-adapted rings.

    Rings sit at the midpoints of equal axial cells of length ~``spacing``;
    each ring gets round(2 pi rho / spacing) nodes (at least one, at most
    ``max_angular``), so cells stay roughly square and exponentially thin
    parts of the body collapse to one node per ring.  Radii that underflow are
    handled in log space.  ``radial_window=(r_lo, r_hi)`` keeps only rings with
    r_lo <= |x| < r_hi.
    """
    if not x_hi > x_lo or not spacing > 0:
        raise InvalidArgumentError("need x_hi > x_lo and positive spacing")
    n_ax = max(1, int(math.ceil((x_hi - x_lo) / spacing - 1e-9)))
    edges = np.linspace(x_lo, x_hi, n_ax + 1)
    x = 0.5 * (edges[1:] + edges[:-1])
    log_rho = profile.log_rho(x)
    rho = np.exp(log_rho)
    dx = edges[1:] - edges[:-1]
    ds = np.hypot(dx, profile.rho(edges[1:]) - profile.rho(edges[:-1]))
    keep = np.ones(n_ax, dtype=bool)
    if radial_window is not None:
        r_lo, r_hi = radial_window
        r = np.hypot(x, rho)
        keep = (r >= r_lo) & (r < r_hi)
    nodes, w, r_self = [], [], []
    for m in np.flatnonzero(keep):
        k = int(np.clip(round(2.0 * np.pi * rho[m] / spacing), 1, max_angular))
        dtheta = 2.0 * np.pi / k
        nodes.append(_ring_nodes(x[m], rho[m], k, 0.5 * dtheta * (m % 2)))
        w.append(np.full(k, max(rho[m] * dtheta * ds[m], _TINY)))
        log_half_width = log_rho[m] + math.log(0.5 * dtheta)
        r = panel_self_radius(0.5 * rho[m] * dtheta, 0.5 * ds[m],
                              log_half_width=log_half_width)
        r_self.append(np.full(k, float(r)))
    if not nodes:
        return Plate(np.zeros((0, 3)), np.zeros(0), sign=sign, a=a, name=name)
    n = sum(len(v) for v in w)
    return Plate(np.vstack(nodes), np.concatenate(w), sign=sign,
                 self_radius=np.concatenate(r_self), name=name,
                 **_plate_data(n, None, None, a))


def point_cloud_plate(nodes: Sequence, cell_weights, **kwargs) -> Plate:
    return Plate(np.asarray(nodes, dtype=float), cell_weights, **kwargs)
