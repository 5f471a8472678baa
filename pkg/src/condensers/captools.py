"""Capacities, equilibrium and swept measures, and thinness at infinity of rotation bodies."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial import cKDTree

from .analysis import energy_scale, variational_inequality_check
from .errors import InvalidArgumentError, KernelError, NonConvergenceError
from .geometry import (
    Condenser,
    Plate,
    RotationProfile,
    build_rotation_segment,
    build_sphere_plate,
    default_self_radius,
    min_distance,
)
from .kernels import Kernel, assemble_kernel_matrix, largest_eigenvalue, potential
from .measures import ExternalField, VectorMeasure, energy, r_equivalent_twin
from .solver import Problem, SolveOptions, solve

logger = logging.getLogger(__name__)

NOT_THIN = "not-thin"
THIN_INFINITE = "thin-infinite-capacity"
FINITE_CAPACITY = "finite-capacity"
INCONCLUSIVE = "inconclusive"

SOLVABLE = "solvable"
UNSOLVABLE = "unsolvable"

SUMMABLE = "summable"
DIVERGENT = "divergent"

# classification thresholds of the finite-horizon series test
RATIO_THRESHOLD = 0.9
POWER_THRESHOLD = 1.5


def _linear_solve(K: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(K), b)
    except (LinAlgError, ValueError):
        return np.linalg.lstsq(K, b, rcond=None)[0]


# ---------------------------------------------------------------------------
# capacity
# ---------------------------------------------------------------------------


@dataclass
class CapacityResult:
    capacity: float
    minimizer: np.ndarray  # unit-mass minimizer lambda
    gamma: np.ndarray  # equilibrium measure c * lambda
    potential: np.ndarray  # K gamma at the plate nodes
    energy: float
    iterations: int
    converged: bool

    @property
    def gamma_energy(self) -> float:
        return float(self.gamma @ self.potential)

    @property
    def min_potential(self) -> float:
        return float(np.min(self.potential))

    def summary(self) -> dict:
        return {
            "capacity": self.capacity,
            "min_energy": self.energy,
            "gamma_energy": self.gamma_energy,
            "min_gamma_potential": self.min_potential,
            "n_nodes": int(self.gamma.size),
            "iterations": self.iterations,
            "converged": self.converged,
        }


def capacity(plate: Plate, k: Kernel, opts: Optional[SolveOptions] = None,
             strict: bool = False) -> CapacityResult:
    """Capacity 1/min{nu^T K nu : nu >= 0, sum(nu) = 1} of a plate.

    The solve is warm-started from the clipped solution of K x = 1.  With
    ``strict`` a nonconvergent run raises NonConvergenceError carrying the
    best result; otherwise the flag is reported.
    """
    if not np.allclose(plate.g, 1.0):
        raise InvalidArgumentError("capacity needs g = 1")
    unit = plate.replace(g=np.ones(plate.n_nodes), f=np.zeros(plate.n_nodes), a=1.0,
                         cap=None, sign=1)
    c = Condenser([unit])
    K = assemble_kernel_matrix(k, c)
    p = Problem(c, K, ExternalField.zero(c))
    opts = opts or SolveOptions(tol=1e-10)
    x0 = np.clip(_linear_solve(K.entries, np.ones(K.size)), 0.0, None)
    if x0.sum() > 0:
        x0 = x0 / x0.sum()
        # map support points back to plate nodes (duplicates inside a plate share mass)
        init = VectorMeasure([x0[c.plate_index[0]] / np.bincount(c.plate_index[0])[c.plate_index[0]]])
        opts = SolveOptions(**{**opts.__dict__, "init": init})
    rep = solve(p, opts)
    lam = rep.minimizer[0]
    e = energy(rep.minimizer, K, c)
    if not e > 0:
        raise KernelError(f"nonpositive minimal energy {e!r}; capacity undefined for this kernel")
    cap = 1.0 / e
    gamma = cap * lam
    pot = (K.entries @ np.bincount(c.plate_index[0], weights=gamma, minlength=K.size))[c.plate_index[0]]
    res = CapacityResult(cap, lam, gamma, pot, e, rep.iterations, rep.converged)
    if not rep.converged:
        if strict:
            raise NonConvergenceError("capacity solve did not converge", best=res)
        logger.warning("capacity solve did not converge after %d iterations", rep.iterations)
    return res


# ---------------------------------------------------------------------------
# balayage
# ---------------------------------------------------------------------------


@dataclass
class PointMeasure:
    """Nonnegative atoms at arbitrary points (the measure to be swept)."""

    points: np.ndarray
    weights: np.ndarray
    self_radius: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.shape[0] != self.points.shape[0]:
            raise InvalidArgumentError("one weight per point is required")
        if np.any(self.weights < 0):
            raise InvalidArgumentError("the swept measure must be nonnegative")

    @property
    def mass(self) -> float:
        return float(self.weights.sum())


@dataclass
class SweepResult:
    theta: np.ndarray
    swept_mass: float
    original_mass: float
    target_potential: np.ndarray  # potential of nu at target nodes
    swept_potential: np.ndarray  # potential of theta at target nodes
    norm_nu: float
    norm_theta: float
    iterations: int
    converged: bool

    def summary(self) -> dict:
        return {
            "swept_mass": self.swept_mass,
            "original_mass": self.original_mass,
            "mass_ratio": self.swept_mass / self.original_mass if self.original_mass else None,
            "norm_nu": self.norm_nu,
            "norm_swept": self.norm_theta,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def write_csv(self, path, target: Plate) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_index", "x", "y", "z", "mass", "potential_nu", "potential_swept"])
            for j in range(self.theta.size):
                xyz = list(target.nodes[j]) + [0.0] * (3 - target.dim)
                w.writerow([j] + [repr(float(v)) for v in xyz]
                           + [repr(float(self.theta[j])), repr(float(self.target_potential[j])),
                              repr(float(self.swept_potential[j]))])


def _nonneg_quadratic(Q: np.ndarray, b: np.ndarray, x0: np.ndarray, tol: float,
                      max_iters: int):
    """Minimize x^T Q x - 2 b^T x over x >= 0 by monotone accelerated projected gradient.

    Stops when the energy-norm movement of an iterate is <= tol.
    """
    lip = 2.0 * largest_eigenvalue(lambda v: Q @ v, Q.shape[0])
    step = 1.0 / (1.02 * lip) if lip > 0 else 1.0

    def value(x):
        qx = Q @ x
        return float(x @ qx) - 2.0 * float(b @ x), qx

    x = np.clip(x0, 0.0, None)
    fx, qx = value(x)
    x_prev = x
    tk = 1.0
    for it in range(1, max_iters + 1):
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        y = x + ((tk - 1.0) / t_next) * (x - x_prev)
        z = np.clip(y - 2.0 * step * (Q @ y - b), 0.0, None)
        fz, qz = value(z)
        if fz > fx + 1e-15 * (1.0 + abs(fx)):
            tk, t_next = 1.0, 1.0
            for _ in range(60):
                z = np.clip(x - 2.0 * step * (qx - b), 0.0, None)
                fz, qz = value(z)
                if fz <= fx + 1e-15 * (1.0 + abs(fx)):
                    break
                step *= 0.5
            else:
                return x, it, True
        d = z - x
        move = math.sqrt(max(float(d @ (Q @ d)), 0.0))
        x_prev, x, fx, qx, tk = x, z, fz, qz, t_next
        if move <= tol:
            return x, it, True
    return x, max_iters, False


def _source_self_radius(nu: PointMeasure, target: Plate) -> np.ndarray:
    """Self radius for source atoms; atoms sitting on target nodes inherit the node's radius."""
    t_rad = target.self_radius if target.self_radius is not None else \
        default_self_radius(target.cell_weights, target.dim)
    out = nu.self_radius.copy() if nu.self_radius is not None else np.full(nu.weights.size, np.nan)
    d, j = cKDTree(target.nodes).query(nu.points, k=1)
    hit = d == 0
    out[hit] = t_rad[j[hit]]
    return out


def sweep(nu: PointMeasure, target: Plate, k: Kernel, tol: float = 1e-10,
          max_iters: int = 50000, strict: bool = False) -> SweepResult:
    """Energy-norm projection of nu onto the nonnegative measures on the target nodes.

    Minimizes ||nu - theta||_K^2 over theta >= 0 supported by the target, i.e.
    theta^T K theta - 2 theta^T U where U is the potential of nu at the target
    nodes, warm-started from the clipped solution of K theta = U.
    """
    c = Condenser([target.replace(sign=1, cap=None)])
    K = assemble_kernel_matrix(k, c).entries
    if c.points.shape[0] != target.n_nodes:
        raise InvalidArgumentError("target plate has repeated nodes")
    rad = _source_self_radius(nu, target)
    U = potential(k, nu.points, nu.weights, target.nodes, self_radius=rad)
    nn = float(nu.weights @ potential(k, nu.points, nu.weights, nu.points, self_radius=rad)) \
        if nu.weights.size else 0.0
    if nu.mass == 0:
        theta = np.zeros(target.n_nodes)
        it, ok = 0, True
    else:
        x0 = np.clip(_linear_solve(K, U), 0.0, None)
        scale = math.sqrt(max(nn, 0.0)) or 1.0
        theta, it, ok = _nonneg_quadratic(K, U, x0, tol * scale, max_iters)
    pot_theta = K @ theta
    res = SweepResult(theta, float(theta.sum()), nu.mass, U, pot_theta,
                      math.sqrt(max(nn, 0.0)), math.sqrt(max(float(theta @ pot_theta), 0.0)),
                      it, ok)
    if not ok:
        if strict:
            raise NonConvergenceError("sweep did not converge", best=res)
        logger.warning("sweep did not converge after %d iterations", it)
    return res


def mass_deficit(nu: PointMeasure, target: Plate, k: Kernel, **kwargs) -> tuple[float, float]:
    """(swept mass, original mass)."""
    r = sweep(nu, target, k, **kwargs)
    return r.swept_mass, r.original_mass


@dataclass
class TruncationStudy:
    profile: RotationProfile
    x_max: list
    swept_mass: list
    n_nodes: list
    source_mass: float

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.label,
            "rows": [{"x_max": x, "swept_mass": m, "n_nodes": n}
                     for x, m, n in zip(self.x_max, self.swept_mass, self.n_nodes)],
            "source_mass": self.source_mass,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_max", "swept_mass", "n_nodes"])
            for x, m, n in zip(self.x_max, self.swept_mass, self.n_nodes):
                w.writerow([repr(float(x)), repr(float(m)), n])


def truncation_study(profile: RotationProfile, x_max_values: Sequence[float] = (10, 20, 40),
                     spacing: float = 0.5, k: Optional[Kernel] = None,
                     source_center=(-3.0, 0.0, 0.0), source_radius: float = 1.0,
                     source_nodes: int = 400, max_angular: int = 256) -> TruncationStudy:
    """Sweep the unit-mass capacitary measure of a sphere onto truncations of a rotation body.

    The body is discretized with a fixed node spacing so that the node density
    per unit area is the same for every truncation length.
    """
    k = k or Kernel.newtonian()
    src = build_sphere_plate(source_center, source_radius, source_nodes)
    cap = capacity(src, k)
    nu = PointMeasure(src.nodes, cap.minimizer,
                      self_radius=default_self_radius(src.cell_weights, 3))
    masses, sizes = [], []
    for x_max in x_max_values:
        body = build_rotation_segment(profile, 0.0, float(x_max), spacing, max_angular=max_angular)
        if min_distance(src.nodes, body.nodes) <= 0:
            raise InvalidArgumentError("source sphere meets the rotation body")
        r = sweep(nu, body, k)
        masses.append(r.swept_mass)
        sizes.append(body.n_nodes)
    return TruncationStudy(profile, [float(x) for x in x_max_values], masses, sizes, nu.mass)


# ---------------------------------------------------------------------------
# thinness at infinity
# ---------------------------------------------------------------------------


@dataclass
class SeriesFit:
    """Finite-horizon summability test of a positive series from its tail terms.

    Successive ratios r_k = t_k / t_{k-1} on the window are fitted as
    r_k = ratio_limit - slope / k; a power law t_k ~ k^(-power_exponent) is
    fitted too.  ratio_limit < 0.9 reads as summable; ratio_limit >= 0.9 with
    power_exponent <= 1.5 reads as divergent; anything else is inconclusive.
    """

    ratio_limit: float
    slope: float
    power_exponent: float
    geometric_ratio: float
    window: tuple
    classification: str

    def to_dict(self) -> dict:
        return {
            "ratio_limit": self.ratio_limit,
            "ratio_slope": self.slope,
            "power_exponent": self.power_exponent,
            "geometric_ratio": self.geometric_ratio,
            "window": list(self.window),
            "classification": self.classification,
        }


def fit_series(terms: Sequence[float], k_lo: int, k_hi: int) -> SeriesFit:
    t = np.asarray(terms, dtype=float)
    ks = np.arange(k_lo, k_hi + 1)
    tail = t[ks]
    nan = float("nan")
    if np.all(tail == 0):
        return SeriesFit(0.0, 0.0, math.inf, 0.0, (k_lo, k_hi), SUMMABLE)
    if k_lo < 1:
        raise InvalidArgumentError("the fit window must start at k >= 1")
    valid = (t[ks] > 0) & (t[ks - 1] > 0)
    kr = ks[valid]
    if kr.size < 2:
        return SeriesFit(nan, nan, nan, nan, (k_lo, k_hi), INCONCLUSIVE)
    ratios = t[kr] / t[kr - 1]
    A = np.column_stack([np.ones(kr.size), -1.0 / kr])
    (limit, slope), *_ = np.linalg.lstsq(A, ratios, rcond=None)
    pos = tail > 0
    kp = ks[pos]
    beta = float(-np.polyfit(np.log(kp), np.log(tail[pos]), 1)[0]) if kp.size >= 2 else nan
    geo = float(np.exp(np.polyfit(kp, np.log(tail[pos]), 1)[0])) if kp.size >= 2 else nan
    if limit < RATIO_THRESHOLD:
        verdict = SUMMABLE
    elif beta <= POWER_THRESHOLD:
        verdict = DIVERGENT
    else:
        verdict = INCONCLUSIVE
    return SeriesFit(float(limit), float(slope), beta, geo, (k_lo, k_hi), verdict)


@dataclass
class ThinnessDiagnosis:
    profile: str
    q: float
    alpha: float
    dim: int
    shells: list
    capacities: list
    wiener: list
    n_nodes: list
    wiener_fit: SeriesFit
    capacity_fit: SeriesFit
    verdict: str
    thresholds: dict = field(default_factory=lambda: {
        "ratio": RATIO_THRESHOLD, "power_exponent": POWER_THRESHOLD})
    equilibrium: list = field(default_factory=list)  # per-shell capacity summaries

    @property
    def wiener_partial_sums(self) -> np.ndarray:
        return np.cumsum(self.wiener)

    @property
    def capacity_partial_sums(self) -> np.ndarray:
        return np.cumsum(self.capacities)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "q": self.q,
            "alpha": self.alpha,
            "dimension": self.dim,
            "verdict": self.verdict,
            "wiener_fit": self.wiener_fit.to_dict(),
            "capacity_fit": self.capacity_fit.to_dict(),
            "thresholds": dict(self.thresholds),
            "equilibrium": list(self.equilibrium),
            "shells": [
                {"k": k, "capacity": c, "wiener_term": w, "n_nodes": n}
                for k, c, w, n in zip(self.shells, self.capacities, self.wiener, self.n_nodes)
            ],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "capacity", "wiener_term", "wiener_partial_sum",
                        "capacity_partial_sum", "n_nodes"])
            for k, c, t, ws, cs, n in zip(self.shells, self.capacities, self.wiener,
                                          self.wiener_partial_sums, self.capacity_partial_sums,
                                          self.n_nodes):
                w.writerow([k, repr(float(c)), repr(float(t)), repr(float(ws)),
                            repr(float(cs)), n])


def _shell_axial_range(profile: RotationProfile, r_lo: float, r_hi: float):
    """Axial interval (within x >= 0) of body points with r_lo <= |x| < r_hi, and its area."""
    x = np.linspace(0.0, r_hi, 20001)
    log_rho = profile.log_rho(x)
    r = np.hypot(x, np.exp(log_rho))
    inside = (r >= r_lo) & (r < r_hi)
    if not np.any(inside):
        return None
    xs = x[inside]
    area = trapezoid(2.0 * np.pi * np.exp(log_rho[inside]), xs) if xs.size > 1 else 0.0
    return float(xs[0]), float(xs[-1]), float(area)


def build_shell(profile: RotationProfile, k: int, q: float = 2.0,
                nodes_per_shell: int = 1200, max_angular: int = 256) -> Optional[Plate]:
    """The piece of the rotation body in the shell q^k <= |x| < q^(k+1), or None if empty."""
    r_lo, r_hi = q ** k, q ** (k + 1)
    rng = _shell_axial_range(profile, r_lo, r_hi)
    if rng is None:
        return None
    x_lo, x_hi, area = rng
    length = max(x_hi - x_lo, 1e-12)
    dx = max(math.sqrt(area / nodes_per_shell), length / nodes_per_shell)
    # pad the axial range by one cell and keep only rings inside the shell
    plate = build_rotation_segment(profile, max(0.0, x_lo - dx), x_hi + dx, dx,
                                   max_angular=max_angular, radial_window=(r_lo, r_hi))
    return plate if plate.n_nodes else None


def wiener_terms(profile: RotationProfile, q: float = 2.0, k_max: int = 8,
                 k: Optional[Kernel] = None, nodes_per_shell: int = 1200,
                 max_angular: int = 256) -> ThinnessDiagnosis:
    """Shell capacities c(F_k) and Wiener terms c(F_k) / q^(k (n - alpha)), k = 0..k_max.

    Shells are centred at the origin.  The verdict combines the finite-horizon
    tests of both series over k in [k_max/2, k_max]: a divergent Wiener series
    means not thin; a summable one means thin, with finite or infinite
    capacity according to the series of shell capacities.
    """
    if not q > 1:
        raise InvalidArgumentError("q must exceed 1")
    if k_max < 2:
        raise InvalidArgumentError("k_max must be at least 2")
    k = k or Kernel.newtonian()
    if k.family != "riesz" or k.dim != 3:
        raise InvalidArgumentError("thinness diagnostics need a Riesz kernel in R^3")
    caps, terms, sizes, eq = [], [], [], []
    for j in range(k_max + 1):
        shell = build_shell(profile, j, q, nodes_per_shell, max_angular)
        if shell is None:
            logger.warning("shell %d of %s has no nodes; its term is 0", j, profile.label)
            caps.append(0.0)
            terms.append(0.0)
            sizes.append(0)
            continue
        res = capacity(shell, k)
        c = res.capacity
        eq.append({"k": j, **res.summary()})
        caps.append(c)
        terms.append(c / q ** (j * (k.dim - k.alpha)))
        sizes.append(shell.n_nodes)
    k_lo = max(1, k_max // 2)
    wfit = fit_series(terms, k_lo, k_max)
    cfit = fit_series(caps, k_lo, k_max)
    if wfit.classification == DIVERGENT:
        verdict = NOT_THIN
    elif wfit.classification == SUMMABLE and cfit.classification == DIVERGENT:
        verdict = THIN_INFINITE
    elif wfit.classification == SUMMABLE and cfit.classification == SUMMABLE:
        verdict = FINITE_CAPACITY
    else:
        verdict = INCONCLUSIVE
    return ThinnessDiagnosis(profile.label, q, k.alpha, k.dim, list(range(k_max + 1)),
                             caps, terms, sizes, wfit, cfit, verdict, equilibrium=eq)


def predict_solvability(plate1: Optional[dict], diag2: ThinnessDiagnosis) -> str:
    """Solvability of the two-plate Riesz problem from the diagnosis of the second plate.

    ``plate1`` may carry a ``separation`` entry (distance between the plates),
    which must be positive.
    """
    if plate1 and "separation" in plate1 and not plate1["separation"] > 0:
        raise InvalidArgumentError("the plates must be at positive distance")
    if diag2.verdict in (FINITE_CAPACITY, NOT_THIN):
        return SOLVABLE
    if diag2.verdict == THIN_INFINITE:
        return UNSOLVABLE
    return INCONCLUSIVE


# ---------------------------------------------------------------------------
# coincident-plate non-uniqueness
# ---------------------------------------------------------------------------


@dataclass
class TwinExample:
    problem: Problem
    lam: VectorMeasure
    lam_hat: VectorMeasure
    mass_scale: float

    def report(self, n_random: int = 20, seed: int = 0) -> dict:
        from .analysis import equivalence_check
        from .measures import semimetric_distance, weighted_energy
        from .solver import random_feasible

        p = self.problem
        c, K, F = p.condenser, p.K, p.field
        scale = energy_scale(p, self.lam)
        rng = np.random.default_rng(seed)
        vi = {"lambda": [], "lambda_hat": []}
        for _ in range(n_random):
            nu = random_feasible(p, rng)
            vi["lambda"].append(variational_inequality_check(self.lam, nu, p))
            vi["lambda_hat"].append(variational_inequality_check(self.lam_hat, nu, p))
        G1, G2 = weighted_energy(self.lam, F, K, c), weighted_energy(self.lam_hat, F, K, c)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(self.lam.masses, self.lam_hat.masses))
        return {
            "distance": semimetric_distance(self.lam, self.lam_hat, K, c),
            "equivalent": equivalence_check(self.lam, self.lam_hat, K, c).equivalent,
            "G_lambda": G1,
            "G_lambda_hat": G2,
            "G_relative_gap": abs(G1 - G2) / max(abs(G1), 1e-300),
            "feasible": [self.lam.is_admissible(c), self.lam_hat.is_admissible(c)],
            "min_variational_inequality": {key: min(v) for key, v in vi.items()},
            "energy_scale": scale,
            "max_componentwise_difference": diff,
            "mass_scale": self.mass_scale,
        }


def sphere_twin_example(n_nodes: int = 500, cap_factor: float = 3.0,
                        k: Optional[Kernel] = None) -> TwinExample:
    """Two coincident positive plates on the unit sphere with distinct R-equivalent minimizers.

    Both plates carry unit mass; plate 0 is capped at cap_factor times the
    discrete capacitary measure lam0.  lam = (lam0, lam0) is optimal and a
    mass trade between the plates yields lam_hat != lam with the same R-image.
    """
    k = k or Kernel.newtonian()
    base = build_sphere_plate((0.0, 0.0, 0.0), 1.0, n_nodes)
    lam0 = capacity(base, k).minimizer
    p1 = base.replace(cap=cap_factor * lam0, name="capped")
    p2 = base.replace(name="free")
    c = Condenser([p1, p2])
    K = assemble_kernel_matrix(k, c)
    prob = Problem(c, K, ExternalField.zero(c))
    lam = VectorMeasure([lam0, lam0])
    lam_hat = r_equivalent_twin(lam, c, 0, 1)
    return TwinExample(prob, lam, lam_hat, float(np.max(lam0)))
