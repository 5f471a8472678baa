"""Minimization of the weighted energy over products of capped, g-weighted simplices."""
from __future__ import annotations

import csv
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InfeasibleError, InvalidArgumentError, NonPsdError
from .geometry import Condenser, validate_condenser
from .kernels import Kernel, KernelMatrix, assemble_kernel_matrix, check_psd, largest_eigenvalue
from .measures import ExternalField, VectorMeasure

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_NODES = 12


@dataclass
class Problem:
    """Constrained Gauss variational problem on a discretized condenser."""

    condenser: Condenser
    K: KernelMatrix
    field: ExternalField

    @classmethod
    def build(cls, condenser: Condenser, kernel: Kernel,
              field: Optional[ExternalField] = None, check: bool = True) -> "Problem":
        if check:
            report = validate_condenser(condenser)
            if not report.valid:
                raise InvalidArgumentError("; ".join(report.errors))
        K = assemble_kernel_matrix(kernel, condenser)
        if field is None:
            field = ExternalField.from_plates(condenser)
        return cls(condenser, K, field)

    @property
    def constrained(self) -> list[bool]:
        return [p.constrained for p in self.condenser.plates]

    def with_condenser(self, condenser: Condenser) -> "Problem":
        """Same kernel matrix and field on a condenser with identical nodes."""
        return Problem(condenser, self.K, self.field)


class _Form:
    """Stacked-coordinate view of a problem: G(x) = x^T Q x + 2 f^T x, Q = A^T K A."""

    def __init__(self, p: Problem):
        c = p.condenser
        self.c = c
        self.K = p.K.entries
        self.idx = np.concatenate(c.plate_index)
        self.sgn = np.concatenate([np.full(pl.n_nodes, pl.sign, dtype=float) for pl in c.plates])
        f = np.concatenate(p.field.node_values(p.K, c))
        self.f_inf = ~np.isfinite(f)
        self.f = np.where(self.f_inf, 0.0, f)
        self.g = np.concatenate([pl.g for pl in c.plates])
        upper = np.concatenate([
            pl.cap if pl.cap is not None else np.full(pl.n_nodes, np.inf) for pl in c.plates])
        self.upper = np.where(self.f_inf, 0.0, upper)
        bounds = np.cumsum([0] + c.sizes)
        self.slices = [slice(bounds[i], bounds[i + 1]) for i in range(len(c))]
        self.a = np.array([pl.a for pl in c.plates])
        self.n_support = self.K.shape[0]
        self.blocks = []
        for ix in c.plate_index:
            if ix.size == self.n_support and np.array_equal(ix, np.arange(ix.size)):
                self.blocks.append(self.K)
            else:
                self.blocks.append(self.K[np.ix_(ix, ix)])
        for i, s in enumerate(self.slices):
            avail = float(self.g[s] @ np.where(np.isfinite(self.upper[s]), self.upper[s], 0.0))
            unbounded = bool(np.any(np.isinf(self.upper[s])))
            if not unbounded and avail < self.a[i] * (1 - 1e-12):
                raise InfeasibleError(
                    f"plate {i}: mass target {self.a[i]} unattainable under caps and f=+inf nodes")

    @property
    def size(self) -> int:
        return self.idx.size

    def image(self, x) -> np.ndarray:
        return np.bincount(self.idx, weights=self.sgn * x, minlength=self.n_support)

    def evaluate(self, x):
        """Return G(x) and the unweighted-by-2 gradient W(x) = Qx + f."""
        r = self.image(x)
        kr = self.K @ r
        G = float(r @ kr) + 2.0 * float(self.f @ x)
        W = self.sgn * kr[self.idx] + self.f
        return G, W

    def q_matvec(self, x) -> np.ndarray:
        return self.sgn * (self.K @ self.image(x))[self.idx]

    def movement(self, dx) -> float:
        """Largest plate-wise energy seminorm of a step."""
        out = 0.0
        for s, blk in zip(self.slices, self.blocks):
            d = dx[s]
            out = max(out, float(d @ (blk @ d)))
        return float(np.sqrt(max(out, 0.0)))

    def distance(self, x, y) -> float:
        d = self.image(x - y)
        return float(np.sqrt(max(float(d @ (self.K @ d)), 0.0)))

    def project(self, v) -> np.ndarray:
        out = np.empty_like(v)
        for i, s in enumerate(self.slices):
            out[s] = project_capped_simplex(v[s], self.upper[s], self.g[s], self.a[i])
        return out

    def default_start(self) -> np.ndarray:
        w = np.concatenate([pl.cell_weights for pl in self.c.plates])
        return self._normalized_start(w / self.g)

    def random_start(self, rng: np.random.Generator) -> np.ndarray:
        return self._normalized_start(rng.exponential(size=self.size))

    def _normalized_start(self, v) -> np.ndarray:
        v = np.where(self.upper > 0, v, 0.0)
        for i, s in enumerate(self.slices):
            tot = float(self.g[s] @ v[s])
            if tot > 0:
                v[s] *= self.a[i] / tot
        return self.project(v)


def project_capped_simplex(v, cap, g, a: float, rtol: float = 1e-12,
                           max_iter: int = 400) -> np.ndarray:
    """Euclidean projection of v onto {0 <= w <= cap, <g, w> = a}.

    The solution is w(t) = clip(v - t g, 0, cap) for the shift t solving
    <g, w(t)> = a, found by monotone bisection and then refined exactly on the
    linear piece containing it.  ``cap=None`` means no upper bound.
    """
    v = np.asarray(v, dtype=float)
    g = np.asarray(g, dtype=float)
    cap = np.full(v.shape, np.inf) if cap is None else np.asarray(cap, dtype=float)
    if np.any(g <= 0):
        raise InvalidArgumentError("g must be positive")
    if not a > 0:
        raise InvalidArgumentError("a must be positive")
    finite = np.isfinite(cap)
    if np.all(finite) and float(g @ cap) < a * (1 - 1e-12):
        raise InfeasibleError(f"<g, cap> = {float(g @ cap)!r} is below the mass target {a!r}")
    if not np.any(cap > 0):
        raise InfeasibleError("every node is capped at zero")

    def mass(t):
        return float(g @ np.clip(v - t * g, 0.0, cap))

    t_hi = float(np.max(v / g))  # mass(t_hi) == 0
    width = max(1.0, abs(t_hi))
    t_lo = t_hi - width
    for _ in range(2100):
        if mass(t_lo) >= a:
            break
        width *= 2.0
        t_lo = t_hi - width
    else:  # pragma: no cover - guarded by the feasibility test above
        raise InfeasibleError("could not bracket the projection multiplier")

    for _ in range(max_iter):
        mid = 0.5 * (t_lo + t_hi)
        if mid == t_lo or mid == t_hi:
            break
        if mass(mid) >= a:
            t_lo = mid
        else:
            t_hi = mid
        if t_hi - t_lo <= rtol * max(1.0, abs(mid)) * 1e-3:
            break

    t = 0.5 * (t_lo + t_hi)
    u = v - t * g
    free = (u > 0) & (u < cap)
    if np.any(free):
        at_cap = u >= cap
        gf = g[free]
        t_exact = (float(gf @ v[free]) + float(g[at_cap] @ cap[at_cap]) - a) / float(gf @ gf)
        w = np.clip(v - t_exact * g, 0.0, cap)
        if abs(float(g @ w) - a) <= abs(mass(t) - a) or abs(float(g @ w) - a) <= rtol * a:
            return w
    return np.clip(u, 0.0, cap)


@dataclass
class SolveOptions:
    tol: float = 1e-8
    max_iters: int = 50000
    seed: Optional[int] = None
    accelerate: bool = True
    init: Optional[VectorMeasure] = None
    trailing: int = 5
    record_iterates: bool = False


@dataclass
class TraceRow:
    iteration: int
    G: float
    step: float
    movement: float


@dataclass
class SolveReport:
    minimizer: VectorMeasure
    G: float
    iterations: int
    converged: bool
    trace: list
    trailing_distances: list
    lipschitz: float
    iterates: list = field(default_factory=list)

    @property
    def energies(self) -> np.ndarray:
        return np.array([row.G for row in self.trace])

    def summary(self) -> dict:
        return {
            "G": self.G,
            "iterations": self.iterations,
            "converged": self.converged,
            "lipschitz_estimate": self.lipschitz,
            "final_movement": self.trace[-1].movement if self.trace else None,
            "trailing_distances_max": max(self.trailing_distances, default=0.0),
        }

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "G", "step", "movement"])
            for row in self.trace:
                w.writerow([row.iteration, repr(row.G), repr(row.step), repr(row.movement)])


def solve(p: Problem, opts: Optional[SolveOptions] = None) -> SolveReport:
    """Projected-gradient descent for G over the admissible class.

    Steps are 1/L with L from power iteration on the quadratic form, with a
    monotone Nesterov extrapolation (restarted whenever it fails to decrease G)
    and Armijo backtracking as a fallback.  Stops when the largest plate-wise
    energy-norm movement is <= tol.  Deterministic for fixed inputs and seed.
    """
    opts = opts or SolveOptions()
    form = _Form(p)
    n = form.size
    if opts.init is not None:
        x = form.project(np.asarray(opts.init.stacked(), dtype=float))
    elif opts.seed is not None:
        x = form.random_start(np.random.default_rng(opts.seed))
    else:
        x = form.default_start()

    lip = 2.0 * largest_eigenvalue(form.q_matvec, n)
    if not lip > 0:
        lip = 1.0
    step = 1.0 / (1.02 * lip)

    Gx, Wx = form.evaluate(x)
    if not np.isfinite(Gx):
        raise InfeasibleError("weighted energy is infinite at the feasible start")
    jitter = 1e-15
    trace = [TraceRow(0, Gx, step, float("nan"))]
    trailing = deque([x.copy()], maxlen=max(opts.trailing, 1))
    iterates = [x.copy()] if opts.record_iterates else []
    x_prev = x.copy()
    tk = 1.0
    converged = False
    it = 0
    while it < opts.max_iters:
        it += 1
        momentum = opts.accelerate and tk > 1.0
        if momentum:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
            y = x + ((tk - 1.0) / t_next) * (x - x_prev)
            _, Wy = form.evaluate(y)
            z = form.project(y - 2.0 * step * Wy)
            Gz, Wz = form.evaluate(z)
            if Gz > Gx + jitter * (1.0 + abs(Gx)):
                momentum = False
                tk = 1.0
        if not momentum:
            z, Gz, Wz, step, ok = _plain_step(form, x, Gx, Wx, step, jitter)
            if not ok:
                converged = True
                trace.append(TraceRow(it, Gx, step, 0.0))
                break
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk)) if opts.accelerate else 1.0
        move = form.movement(z - x)
        x_prev, x, Gx, Wx = x, z, Gz, Wz
        tk = t_next
        trace.append(TraceRow(it, Gx, step, move))
        trailing.append(x.copy())
        if opts.record_iterates:
            iterates.append(x.copy())
        if move <= opts.tol:
            if not momentum:
                converged = True
                break
            # confirm with a plain projected step from the new iterate
            z2, _, _, _, ok = _plain_step(form, x, Gx, Wx, step, jitter)
            if not ok or form.movement(z2 - x) <= opts.tol:
                converged = True
                break
    if not converged:
        logger.warning("solve stopped at the iteration cap (%d) without reaching tol %.1e",
                       opts.max_iters, opts.tol)
    trail = list(trailing)
    dists = [form.distance(u, v) for u, v in itertools.combinations(trail, 2)]
    return SolveReport(VectorMeasure.from_stacked(p.condenser, x), Gx, it, converged,
                       trace, dists, lip, iterates)


def _plain_step(form: _Form, x, Gx, Wx, step, jitter):
    """Projected gradient step with Armijo backtracking; ok=False when no decrease is possible."""
    for _ in range(60):
        z = form.project(x - 2.0 * step * Wx)
        Gz, Wz = form.evaluate(z)
        d = z - x
        bound = Gx + 2.0 * float(Wx @ d) + float(d @ d) / (2.0 * step)
        if Gz <= Gx + jitter * (1.0 + abs(Gx)) and Gz <= bound + jitter * (1.0 + abs(Gx)):
            return z, Gz, Wz, step, True
        step *= 0.5
    return x, Gx, Wx, step, False


def random_feasible(p: Problem, rng: np.random.Generator) -> VectorMeasure:
    form = _Form(p)
    return VectorMeasure.from_stacked(p.condenser, form.random_start(rng))


def quadratic_data(p: Problem):
    """Dense (Q, f, g, upper, slices) of the stacked problem; used by the oracle."""
    form = _Form(p)
    n = form.size
    A = np.zeros((form.n_support, n))
    A[form.idx, np.arange(n)] = form.sgn
    Q = A.T @ form.K @ A
    return form, 0.5 * (Q + Q.T)


@dataclass
class Solution:
    minimizer: VectorMeasure
    G: float
    candidates: list
    ties: bool
    patterns: int


def brute_force_solve(p: Problem, max_nodes: int = BRUTE_FORCE_MAX_NODES) -> Solution:
    """Exhaustive active-set enumeration; an independent exact oracle for small problems.

    Each coordinate is fixed at 0, fixed at its cap, or free.  For every
    pattern the equality-constrained stationarity system on the free
    coordinates is solved; feasible solutions are kept and the best returned
    (first in lexicographic pattern order on ties).
    """
    form, Q = quadratic_data(p)
    n = form.size
    if n > max_nodes:
        raise InvalidArgumentError(f"brute force refuses {n} nodes (budget {max_nodes})")
    m = len(form.slices)
    B = np.zeros((m, n))
    for i, s in enumerate(form.slices):
        B[i, s] = form.g[s]
    upper, f, a = form.upper, form.f, form.a
    choices = []
    for j in range(n):
        opts = [0]
        if np.isfinite(upper[j]) and upper[j] > 0:
            opts.append(1)
        if upper[j] > 0:
            opts.append(2)
        choices.append(opts)

    scale = 1.0 + float(np.max(np.abs(Q))) + float(np.max(np.abs(f), initial=0.0))
    candidates = []
    patterns = 0
    for pattern in itertools.product(*choices):
        patterns += 1
        pat = np.array(pattern)
        free = pat == 2
        x = np.where(pat == 1, np.where(np.isfinite(upper), upper, 0.0), 0.0)
        F = np.flatnonzero(free)
        rhs_mass = a - B @ x
        if F.size == 0:
            if np.all(np.abs(rhs_mass) <= 1e-10 * a):
                candidates.append(x)
            continue
        C = np.flatnonzero(~free)
        kkt = np.zeros((F.size + m, F.size + m))
        kkt[:F.size, :F.size] = Q[np.ix_(F, F)]
        kkt[:F.size, F.size:] = B[:, F].T
        kkt[F.size:, :F.size] = B[:, F]
        rhs = np.concatenate([-(Q[np.ix_(F, C)] @ x[C]) - f[F], rhs_mass])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        if np.linalg.norm(kkt @ sol - rhs) > 1e-9 * scale * (1.0 + np.linalg.norm(rhs)):
            continue
        xf = sol[:F.size]
        lo_tol = 1e-10 * (1.0 + np.abs(xf))
        if np.any(xf < -lo_tol) or np.any(xf > upper[F] + lo_tol):
            continue
        x[F] = np.clip(xf, 0.0, upper[F])
        if np.any(np.abs(B @ x - a) > 1e-9 * a):
            continue
        candidates.append(x)
    if not candidates:
        raise InfeasibleError("no feasible stationary point found")
    values = [float(x @ Q @ x + 2.0 * f @ x) for x in candidates]
    best = int(np.argmin(values))
    gbest = values[best]
    ties = any(
        abs(v - gbest) <= 1e-12 * (1.0 + abs(gbest)) and np.max(np.abs(x - candidates[best])) > 1e-9
        for v, x in zip(values, candidates))
    measures = [(VectorMeasure.from_stacked(p.condenser, x), v) for x, v in zip(candidates, values)]
    return Solution(measures[best][0], gbest, measures, ties, patterns)


def ensure_psd(p: Problem, tol: float = 1e-10):
    res = check_psd(p.K, tol)
    if not res.psd:
        raise NonPsdError(f"kernel matrix is not PSD: smallest eigenvalue {res.min_eigenvalue:.3e}")
    return res
