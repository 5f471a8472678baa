"""Kernels, regularized kernel matrices and potentials of discrete measures."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial.distance import cdist, pdist

from .errors import InvalidArgumentError, KernelError
from .geometry import Condenser

RIESZ = "riesz"
LOG = "log"


@dataclass(frozen=True)
class Kernel:
    """Riesz kernel |x-y|^(alpha-n) with 0 < alpha < n, or -log|x-y| in the plane."""

    family: str = RIESZ
    alpha: float = 2.0
    dim: int = 3

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise InvalidArgumentError("kernel dimension must be 2 or 3")
        if self.family == RIESZ:
            if not 0 < self.alpha < self.dim:
                raise InvalidArgumentError(
                    f"Riesz kernel needs 0 < alpha < n, got alpha={self.alpha}, n={self.dim}")
        elif self.family == LOG:
            if self.dim != 2:
                raise InvalidArgumentError("the logarithmic kernel is only used in R^2")
        else:
            raise InvalidArgumentError(f"unknown kernel family {self.family!r}")

    @classmethod
    def riesz(cls, alpha: float, dim: int = 3) -> "Kernel":
        return cls(RIESZ, float(alpha), dim)

    @classmethod
    def newtonian(cls) -> "Kernel":
        return cls(RIESZ, 2.0, 3)

    @classmethod
    def logarithmic(cls) -> "Kernel":
        return cls(LOG, 0.0, 2)

    @property
    def exponent(self) -> float:
        return self.alpha - self.dim

    def of_distance(self, r) -> np.ndarray:
        """Kernel as a function of distance; +inf at r = 0."""
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            if self.family == RIESZ:
                return np.where(r > 0, np.power(r, self.exponent), np.inf)
            return np.where(r > 0, -np.log(r), np.inf)

    def describe(self) -> dict:
        return {"family": self.family, "alpha": self.alpha, "dimension": self.dim}


def kernel_eval(k: Kernel, x, y) -> float:
    r = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)))
    return float(k.of_distance(r))


@dataclass
class KernelMatrix:
    """Symmetric kernel matrix on the support points of a condenser.

    ``owners[u]`` lists the (plate, node) pairs located at support point u.
    The diagonal holds the kernel evaluated at ``self_radius``.
    """

    entries: np.ndarray
    points: np.ndarray
    self_radius: np.ndarray
    kernel: Kernel
    owners: Optional[list] = None

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def potential(self, weights, eval_points) -> np.ndarray:
        return potential(self.kernel, self.points, weights, eval_points, self.self_radius)

    def quadratic(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(v @ (self.entries @ v))


def check_log_geometry(points: np.ndarray) -> float:
    """Diameter of the node set; the logarithmic kernel requires it to be < 1."""
    diam = float(pdist(points).max()) if len(points) > 1 else 0.0
    if not diam < 1.0:
        raise KernelError(
            f"logarithmic kernel needs all geometry inside a disc of diameter < 1 "
            f"(node-set diameter {diam:.4g})")
    return diam


def kernel_matrix_from_points(k: Kernel, points: np.ndarray,
                              self_radius: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if k.family == LOG:
        check_log_geometry(pts)
    d = cdist(pts, pts)
    np.fill_diagonal(d, 1.0)
    m = k.of_distance(d)
    np.fill_diagonal(m, k.of_distance(np.asarray(self_radius, dtype=float)))
    return 0.5 * (m + m.T)


def assemble_kernel_matrix(k: Kernel, c: Condenser) -> KernelMatrix:
    """Dense regularized kernel matrix on the distinct nodes of ``c``."""
    if c.dim != k.dim:
        raise KernelError(f"kernel dimension {k.dim} does not match condenser dimension {c.dim}")
    radii = c.support_self_radius()
    entries = kernel_matrix_from_points(k, c.points, radii)
    return KernelMatrix(entries, c.points, radii, k, owners=c.owners())


def potential(k: Kernel, nodes, weights, eval_points, self_radius=None) -> np.ndarray:
    """Values of x -> sum_p k(x, node_p) weight_p at each evaluation point.

    When an evaluation point coincides with a node the regularized diagonal
    value is used (requires ``self_radius``; otherwise that term is +inf).
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    w = np.asarray(weights, dtype=float).reshape(-1)
    x = np.atleast_2d(np.asarray(eval_points, dtype=float))
    d = cdist(x, nodes)
    hit = d == 0
    with np.errstate(invalid="ignore"):
        vals = k.of_distance(np.where(hit, 1.0, d))
        if np.any(hit):
            if self_radius is None:
                diag = np.full(nodes.shape[0], np.inf)
            else:
                diag = k.of_distance(np.asarray(self_radius, dtype=float))
            vals = np.where(hit, diag[None, :], vals)
        # zero weight times +inf contributes nothing
        vals = np.where(w[None, :] == 0, 0.0, vals)
    return vals @ w


@dataclass
class PsdCheck:
    min_eigenvalue: float
    psd: bool
    threshold: float
    method: str


DENSE_EIG_LIMIT = 200


def check_psd(m, tol: float = 1e-10) -> PsdCheck:
    """Estimate the smallest eigenvalue and flag positive semidefiniteness.

    Flag is true iff the estimate is >= -tol * (largest diagonal entry).
    Large matrices use Lanczos (ARPACK); small ones a dense symmetric solve.
    """
    a = m.entries if isinstance(m, KernelMatrix) else np.asarray(m, dtype=float)
    n = a.shape[0]
    if n <= DENSE_EIG_LIMIT:
        lam = float(eigh(a, eigvals_only=True, subset_by_index=[0, 0])[0])
        method = "dense"
    else:
        # fixed start vector: ARPACK otherwise draws a random one
        v0 = np.cos(np.arange(n) * 0.7) + 0.5
        try:
            lam = float(eigsh(a, k=1, which="SA", tol=1e-10, maxiter=20 * n, v0=v0,
                              return_eigenvectors=False)[0])
        except ArpackNoConvergence as exc:
            raise KernelError(f"smallest-eigenvalue iteration did not converge: {exc}") from exc
        method = "lanczos"
    thresh = -tol * float(np.max(np.abs(np.diag(a)))) if n else 0.0
    return PsdCheck(lam, lam >= thresh, thresh, method)


def largest_eigenvalue(matvec, n: int, iters: int = 200, rtol: float = 1e-6) -> float:
    """Power iteration for the top eigenvalue of a symmetric PSD operator."""
    v = 1.0 + 0.01 * np.cos(np.arange(n) * 1.7)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        if abs(new - lam) <= rtol * abs(new):
            return new
        lam = new
    return lam

