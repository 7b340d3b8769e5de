"""Periodic Lagrange finite elements on the unit interval.

Uniform meshes of (0, 1) with the endpoints identified, nodal elements of
degree 1 or 2, and the matrices/vectors the flow solver needs: cyclic-banded
mass and stiffness matrices, slope-weighted stiffness for Newton
linearization, quadrature load vectors for the nonlinear terms (arctan of
the slope, gradient-magnitude noise coefficient), L2 and combined H1+L2
projections, and the duality-defined discrete second derivative.

All matrices are stored as :class:`PeriodicBandedMatrix`, a cyclic band
layout whose linear solves go through a bordered elimination on top of a
banded Cholesky factorization (dense fallback for very small systems).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cho_solve_banded, cholesky_banded

__all__ = [
    "Mesh",
    "FemSpace",
    "FeFunction",
    "PeriodicBandedMatrix",
    "build_space",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_weighted_stiffness",
    "assemble_arctan_vector",
    "assemble_noise_vector",
    "l2_project",
    "elliptic_project",
    "discrete_laplacian",
    "l2_norm",
    "h1_seminorm",
    "gauss_rule",
]

# Exact local matrices for degree-1 and degree-2 Lagrange elements; scale by
# h (mass) resp. 1/h (stiffness).
_MASS_LOCAL = {
    1: np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0,
    2: np.array([[4.0, 2.0, -1.0], [2.0, 16.0, 2.0], [-1.0, 2.0, 4.0]]) / 30.0,
}
_STIFF_LOCAL = {
    1: np.array([[1.0, -1.0], [-1.0, 1.0]]),
    2: np.array([[7.0, -8.0, 1.0], [-8.0, 16.0, -8.0], [1.0, -8.0, 7.0]]) / 3.0,
}

# Quadrature orders fixed by the build: nonlinear integrands use 4 Gauss
# points per element, projection load vectors use 8 (controls the cusp error
# of fractional-power initial data).
NONLINEAR_QUAD = 4
PROJECTION_QUAD = 8


@functools.lru_cache(maxsize=None)
def gauss_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on the reference element [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def _shape_values(degree: int, xi: np.ndarray) -> np.ndarray:
    """Nodal basis values on [0, 1], shape (degree+1, len(xi))."""
    xi = np.asarray(xi, dtype=float)
    if degree == 1:
        return np.stack([1.0 - xi, xi])
    if degree == 2:
        return np.stack([(1.0 - xi) * (1.0 - 2.0 * xi),
                         4.0 * xi * (1.0 - xi),
                         xi * (2.0 * xi - 1.0)])
    raise ValueError(f"unsupported degree {degree}")


def _shape_derivs(degree: int, xi: np.ndarray) -> np.ndarray:
    """Reference derivatives of the nodal basis, shape (degree+1, len(xi))."""
    xi = np.asarray(xi, dtype=float)
    if degree == 1:
        one = np.ones_like(xi)
        return np.stack([-one, one])
    if degree == 2:
        return np.stack([4.0 * xi - 3.0, 4.0 - 8.0 * xi, 4.0 * xi - 1.0])
    raise ValueError(f"unsupported degree {degree}")


@dataclass(frozen=True)
class Mesh:
    """Uniform partition of [0, 1] into ``num_intervals`` elements."""

    num_intervals: int
    h: float
    nodes: np.ndarray

    def __post_init__(self):
        if self.num_intervals < 2:
            raise ValueError("mesh needs at least 2 intervals")
        d = np.diff(self.nodes)
        if self.nodes[0] != 0.0 or self.nodes[-1] != 1.0 or np.any(d <= 0):
            raise ValueError("nodes must increase strictly from 0 to 1")
        # absolute on the unit interval: node rounding near x=1 exceeds a
        # relative-to-h bound once h < ~100 ulp
        if np.any(np.abs(d - self.h) > 1e-14):
            raise ValueError("mesh is not uniform")


class FemSpace:
    """Periodic nodal finite element space on a uniform mesh.

    The identification x=0 ~ x=1 merges the first and last mesh node into a
    single degree of freedom, so ``dof_count = degree * num_intervals``.
    Element ``e`` covers ``[e*h, (e+1)*h]`` and its local nodes map to the
    global indices ``(e*degree + k) % dof_count``, giving cyclic bandwidth
    equal to the polynomial degree.
    """

    def __init__(self, mesh: Mesh, degree: int):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.mesh = mesh
        self.degree = degree
        self.dof_count = degree * mesh.num_intervals
        e = np.arange(mesh.num_intervals)[:, None]
        k = np.arange(degree + 1)[None, :]
        self.element_dofs = (e * degree + k) % self.dof_count

    @property
    def num_elements(self) -> int:
        return self.mesh.num_intervals

    @property
    def h(self) -> float:
        return self.mesh.h

    @property
    def dof_coordinates(self) -> np.ndarray:
        """Physical position of each degree of freedom (dof 0 sits at x=0)."""
        return np.arange(self.dof_count) * (self.h / self.degree)

    def quadrature_points(self, n_quad: int) -> np.ndarray:
        """Physical coordinates of the Gauss points, shape (elements, n_quad)."""
        xi, _ = gauss_rule(n_quad)
        return (np.arange(self.num_elements)[:, None] + xi[None, :]) * self.h

    def element_values(self, coeffs: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Evaluate the function at reference points xi on every element."""
        return coeffs[self.element_dofs] @ _shape_values(self.degree, xi)

    def element_slopes(self, coeffs: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Evaluate the spatial derivative at reference points on every element."""
        return coeffs[self.element_dofs] @ _shape_derivs(self.degree, xi) / self.h

    # Matrices are immutable once assembled; cache them per space.
    @functools.cached_property
    def mass(self) -> "PeriodicBandedMatrix":
        return assemble_mass(self)

    @functools.cached_property
    def stiffness(self) -> "PeriodicBandedMatrix":
        return assemble_stiffness(self)


def build_space(num_intervals: int, degree: int = 1) -> FemSpace:
    """Uniform periodic space on (0, 1); rejects fewer than 2 intervals."""
    if num_intervals < 2:
        raise ValueError("num_intervals must be >= 2")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    h = 1.0 / num_intervals
    nodes = np.linspace(0.0, 1.0, num_intervals + 1)
    return FemSpace(Mesh(num_intervals, h, nodes), degree)


@dataclass
class FeFunction:
    """Coefficient vector of a finite element function."""

    space: FemSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.dof_count,):
            raise ValueError("coefficient length does not match dof count")

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        e = np.clip(np.floor(x / self.space.h).astype(int), 0, self.space.num_elements - 1)
        xi = x / self.space.h - e
        return x, e, xi

    def __call__(self, x):
        """Point evaluation (scalar or array argument, values in [0, 1])."""
        x, e, xi = self._locate(x)
        n = _shape_values(self.space.degree, np.atleast_1d(xi))
        vals = np.einsum("ek,ke->e", self.coeffs[self.space.element_dofs[e.ravel()]], n)
        return vals.reshape(x.shape) if x.ndim else float(vals[0])

    def derivative(self, x):
        """Point evaluation of the spatial derivative."""
        x, e, xi = self._locate(x)
        d = _shape_derivs(self.space.degree, np.atleast_1d(xi))
        vals = np.einsum("ek,ke->e", self.coeffs[self.space.element_dofs[e.ravel()]], d)
        vals = vals / self.space.h
        return vals.reshape(x.shape) if x.ndim else float(vals[0])


class PeriodicBandedMatrix:
    """Symmetric matrix with cyclic band structure.

    Storage is by cyclic diagonals: ``bands[p + k][i]`` holds the entry
    ``A[i, (i + k) % n]`` for offsets ``k`` in ``[-p, p]``, which captures
    the wrap-around corners of periodic assembly.  Solves use a bordered
    elimination: the last ``p`` unknowns form the border, the leading block
    is strictly banded and factored by a banded Cholesky, and the border
    goes through the Schur complement.  Systems too small to split fall
    back to a dense Cholesky.  The factorization is cached, so repeated
    solves with one matrix are cheap.
    """

    def __init__(self, n: int, p: int, bands: np.ndarray | None = None,
                 symmetric: bool = True):
        self.n = n
        self.p = p
        self.bands = np.zeros((2 * p + 1, n)) if bands is None else bands
        self.symmetric = symmetric
        self._factor = None

    def copy(self) -> "PeriodicBandedMatrix":
        return PeriodicBandedMatrix(self.n, self.p, self.bands.copy(), self.symmetric)

    def __add__(self, other: "PeriodicBandedMatrix") -> "PeriodicBandedMatrix":
        if (self.n, self.p) != (other.n, other.p):
            raise ValueError("band layouts differ")
        return PeriodicBandedMatrix(self.n, self.p, self.bands + other.bands,
                                    self.symmetric and other.symmetric)

    def scaled(self, a: float) -> "PeriodicBandedMatrix":
        return PeriodicBandedMatrix(self.n, self.p, a * self.bands, self.symmetric)

    def scatter_add(self, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray):
        """Accumulate A[rows, cols] += vals; offsets must lie in the band."""
        d = (cols - rows) % self.n
        k = np.where(d <= self.p, d, d - self.n)
        if np.any(np.abs(k) > self.p):
            raise ValueError("entry outside cyclic bandwidth")
        np.add.at(self.bands, (self.p + k, rows), vals)
        self._factor = None

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """A @ x along the last axis (x may carry leading batch axes)."""
        y = self.bands[self.p] * x
        for k in range(1, self.p + 1):
            y += self.bands[self.p + k] * np.roll(x, -k, axis=-1)
            y += self.bands[self.p - k] * np.roll(x, k, axis=-1)
        return y

    def quadform(self, x: np.ndarray) -> np.ndarray:
        """x^T A x along the last axis (x may carry leading batch axes)."""
        return (x * self.matvec(x)).sum(axis=-1)

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        i = np.arange(self.n)
        for k in range(-self.p, self.p + 1):
            # += rather than =: offsets +k and -k alias when n <= 2p
            a[i, (i + k) % self.n] += self.bands[self.p + k]
        return a

    def _factorize(self):
        if not self.symmetric:
            raise NotImplementedError("solve requires a symmetric matrix")
        n, p = self.n, self.p
        if n <= 3 * p + 1:
            self._factor = ("dense", cho_factor(self.to_dense()))
            return
        m = n - p
        dense = self.to_dense()
        a11, a12, a22 = dense[:m, :m], dense[:m, m:], dense[m:, m:]
        ab = np.zeros((p + 1, m))
        for k in range(0, p + 1):
            j = np.arange(k, m)
            ab[p - k, j] = a11[j - k, j]
        cb = cholesky_banded(ab, lower=False)
        y = cho_solve_banded((cb, False), a12)
        schur = cho_factor(a22 - a12.T @ y)
        self._factor = ("bordered", cb, a12, y, schur)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve A x = b for b of shape (n,) or (..., n); A must be SPD."""
        if self._factor is None:
            self._factorize()
        b = np.asarray(b, dtype=float)
        flat = b.reshape(-1, self.n)
        if self._factor[0] == "dense":
            x = cho_solve(self._factor[1], flat.T).T
            return np.ascontiguousarray(x).reshape(b.shape)
        _, cb, a12, y, schur = self._factor
        m = self.n - self.p
        b1 = np.ascontiguousarray(flat[:, :m].T)
        b2 = np.ascontiguousarray(flat[:, m:].T)
        y1 = cho_solve_banded((cb, False), b1)
        x2 = cho_solve(schur, b2 - a12.T @ y1)
        x1 = y1 - y @ x2
        x = np.concatenate([x1, x2], axis=0).T
        return np.ascontiguousarray(x).reshape(b.shape)


def _assemble_exact(space: FemSpace, local: np.ndarray) -> PeriodicBandedMatrix:
    r = space.degree
    mat = PeriodicBandedMatrix(space.dof_count, r)
    dofs = space.element_dofs
    rows = np.repeat(dofs, r + 1, axis=1).ravel()
    cols = np.tile(dofs, (1, r + 1)).ravel()
    vals = np.tile(local.ravel(), space.num_elements)
    mat.scatter_add(rows, cols, vals)
    return mat


def assemble_mass(space: FemSpace) -> PeriodicBandedMatrix:
    """Periodic mass matrix, M[i,j] = integral of phi_i phi_j; SPD."""
    return _assemble_exact(space, _MASS_LOCAL[space.degree] * space.h)


def assemble_stiffness(space: FemSpace) -> PeriodicBandedMatrix:
    """Periodic stiffness matrix, K[i,j] = integral of phi_i' phi_j'.

    Positive semidefinite; the constant vector spans its null space.
    """
    return _assemble_exact(space, _STIFF_LOCAL[space.degree] / space.h)


def assemble_weighted_stiffness(space: FemSpace, weights: np.ndarray,
                                n_quad: int = NONLINEAR_QUAD) -> PeriodicBandedMatrix:
    """Stiffness matrix with a pointwise weight given at the Gauss points.

    ``weights`` has shape (elements, n_quad); entry (i, j) of the result is
    the quadrature value of ``integral w(x) phi_i'(x) phi_j'(x) dx``.
    """
    xi, wq = gauss_rule(n_quad)
    d = _shape_derivs(space.degree, xi)
    # local[e, a, b] = sum_q wq * weights[e, q] * d[a, q] * d[b, q] / h
    local = np.einsum("q,eq,aq,bq->eab", wq / space.h, weights, d, d)
    r = space.degree
    mat = PeriodicBandedMatrix(space.dof_count, r)
    dofs = space.element_dofs
    rows = np.repeat(dofs, r + 1, axis=1).ravel()
    cols = np.tile(dofs, (1, r + 1)).ravel()
    mat.scatter_add(rows, cols, local.reshape(space.num_elements, -1).ravel())
    return mat


def _scatter_vector(space: FemSpace, local: np.ndarray) -> np.ndarray:
    out = np.zeros(space.dof_count)
    np.add.at(out, space.element_dofs.ravel(), local.ravel())
    return out


def assemble_arctan_vector(space: FemSpace, u: FeFunction,
                           n_quad: int = NONLINEAR_QUAD) -> np.ndarray:
    """Load vector b[i] = integral arctan(u') phi_i' dx by Gauss quadrature."""
    xi, wq = gauss_rule(n_quad)
    s = space.element_slopes(u.coeffs, xi)
    d = _shape_derivs(space.degree, xi)
    # jacobian h and derivative scaling 1/h cancel
    local = np.einsum("q,eq,aq->ea", wq, np.arctan(s), d)
    return _scatter_vector(space, local)


def assemble_noise_vector(space: FemSpace, u: FeFunction, field=None,
                          n_quad: int = NONLINEAR_QUAD) -> np.ndarray:
    """Load vector g[i] = integral sqrt(1+u'^2) * field * phi_i dx.

    ``field`` is an optional callable evaluated at the physical Gauss
    points (used for the spatially colored noise increment); without it the
    integrand is just the gradient-magnitude factor.
    """
    xi, wq = gauss_rule(n_quad)
    s = space.element_slopes(u.coeffs, xi)
    g = np.sqrt(1.0 + s * s)
    if field is not None:
        g = g * field(space.quadrature_points(n_quad))
    n = _shape_values(space.degree, xi)
    local = np.einsum("q,eq,aq->ea", wq * space.h, g, n)
    return _scatter_vector(space, local)


def l2_project(space: FemSpace, f, n_quad: int = PROJECTION_QUAD) -> FeFunction:
    """Best L2 approximation of the callable f in the space."""
    xi, wq = gauss_rule(n_quad)
    fvals = f(space.quadrature_points(n_quad))
    n = _shape_values(space.degree, xi)
    load = _scatter_vector(space, np.einsum("q,eq,aq->ea", wq * space.h, fvals, n))
    return FeFunction(space, space.mass.solve(load))


def elliptic_project(space: FemSpace, w, w_prime=None,
                     n_quad: int = PROJECTION_QUAD) -> FeFunction:
    """Projection defined by combined H1+L2 orthogonality.

    Solves (K + M) c = integral(w' phi_i' + w phi_i); ``w`` may be an
    :class:`FeFunction` (then its own derivative is used) or a callable,
    in which case ``w_prime`` must be supplied.
    """
    if isinstance(w, FeFunction):
        w_prime = w.derivative
    elif w_prime is None:
        raise ValueError("w_prime is required for a plain callable")
    xi, wq = gauss_rule(n_quad)
    xq = space.quadrature_points(n_quad)
    n = _shape_values(space.degree, xi)
    d = _shape_derivs(space.degree, xi)
    local = np.einsum("q,eq,aq->ea", wq * space.h, w(xq), n)
    local += np.einsum("q,eq,aq->ea", wq, w_prime(xq), d)
    load = _scatter_vector(space, local)
    return FeFunction(space, (space.stiffness + space.mass).solve(load))


def discrete_laplacian(space: FemSpace, w: FeFunction) -> FeFunction:
    """Discrete second derivative defined by duality against the H1 form.

    Returns z with M z = -K w, i.e. (z, v) = -(w', v') for all v in the
    space.
    """
    return FeFunction(space, space.mass.solve(-space.stiffness.matvec(w.coeffs)))


def l2_norm(u: FeFunction) -> float:
    """L2 norm of the finite element function."""
    return float(np.sqrt(u.space.mass.quadform(u.coeffs)))


def h1_seminorm(u: FeFunction) -> float:
    """L2 norm of the spatial derivative."""
    return float(np.sqrt(u.space.stiffness.quadform(u.coeffs)))
