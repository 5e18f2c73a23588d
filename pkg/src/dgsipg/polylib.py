"""1D orthogonal polynomials, Gauss quadrature rules and interpolation matrices.

Everything here lives on the reference interval [-1, 1].  Quadrature nodes are
computed with the Golub-Welsch eigenvalue method and polished with one Newton
step on the defining polynomial, which keeps node residuals near 1e-15 up to
n = 20 without extended precision.  All returned arrays are frozen
(read-only), so rules and bases can be shared freely across threads.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadKind",
    "QuadRule",
    "BasisKind",
    "Basis1D",
    "jacobi_eval",
    "quad_rule",
    "lagrange_interp_matrix",
    "diff_matrix",
    "barycentric_weights",
    "basis_1d",
    "eval_basis_1d",
]


class QuadKind(enum.Enum):
    GAUSS_LEGENDRE = "gauss_legendre"     # both endpoints excluded
    GAUSS_RADAU_M = "gauss_radau_m"       # -1 included, +1 excluded
    GAUSS_LOBATTO = "gauss_lobatto"       # both endpoints included


_EXACTNESS = {
    QuadKind.GAUSS_LEGENDRE: lambda n: 2 * n - 1,
    QuadKind.GAUSS_RADAU_M: lambda n: 2 * n - 2,
    QuadKind.GAUSS_LOBATTO: lambda n: 2 * n - 3,
}


@dataclass(frozen=True, eq=False)
class QuadRule:
    """Gauss-type quadrature rule on [-1, 1] with ascending abscissae.

    Instances are cached singletons (see quad_rule), so identity comparison
    and hashing are well defined.
    """

    kind: QuadKind
    n: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def exactness(self) -> int:
        """Largest polynomial degree integrated exactly."""
        return _EXACTNESS[self.kind](self.n)

    @property
    def includes_left(self) -> bool:
        return self.kind in (QuadKind.GAUSS_RADAU_M, QuadKind.GAUSS_LOBATTO)

    @property
    def includes_right(self) -> bool:
        return self.kind is QuadKind.GAUSS_LOBATTO

    def includes_endpoint(self, side: int) -> bool:
        return self.includes_left if side < 0 else self.includes_right


def jacobi_eval(alpha: float, beta: float, n: int, x):
    """Evaluate the Jacobi polynomial P_n^(alpha,beta) and its derivative.

    Uses the standard three-term recurrence; `x` may be a scalar or an array.
    Returns a pair (value, derivative) with the shape of `x`.
    """
    if n < 0:
        raise ValueError("polynomial degree must be non-negative")
    x = np.asarray(x, dtype=float)
    val = _jacobi_value(alpha, beta, n, x)
    if n == 0:
        dval = np.zeros_like(x)
    else:
        dval = 0.5 * (n + alpha + beta + 1) * _jacobi_value(
            alpha + 1.0, beta + 1.0, n - 1, x
        )
    return val, dval


def _jacobi_value(alpha: float, beta: float, n: int, x: np.ndarray) -> np.ndarray:
    if n == 0:
        return np.ones_like(x)
    pm1 = np.ones_like(x)
    p = 0.5 * ((alpha + beta + 2.0) * x + (alpha - beta))
    for k in range(2, n + 1):
        s = 2.0 * k + alpha + beta
        c = 2.0 * k * (k + alpha + beta) * (s - 2.0)
        a1 = (s - 1.0) * (alpha * alpha - beta * beta)
        a2 = (s - 1.0) * s * (s - 2.0)
        a3 = 2.0 * (k + alpha - 1.0) * (k + beta - 1.0) * s
        pm1, p = p, ((a1 + a2 * x) * p - a3 * pm1) / c
    return p


def _jacobi_golub_welsch(alpha: float, beta: float, n: int) -> np.ndarray:
    """Nodes of P_n^(alpha,beta) as eigenvalues of the recurrence matrix."""
    if n == 0:
        return np.empty(0)
    k = np.arange(n, dtype=float)
    s = 2.0 * k + alpha + beta
    diag = np.empty(n)
    if alpha + beta == 0.0:
        diag[0] = 0.0
    else:
        diag[0] = (beta - alpha) / (alpha + beta + 2.0)
    if n > 1:
        diag[1:] = (beta * beta - alpha * alpha) / (s[1:] * (s[1:] + 2.0))
    kk = k[1:]
    ss = s[1:]
    off = np.sqrt(
        4.0 * kk * (kk + alpha) * (kk + beta) * (kk + alpha + beta)
        / (ss * ss * (ss + 1.0) * (ss - 1.0))
    )
    nodes = np.linalg.eigvalsh(
        np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    )
    return np.sort(nodes)


def _newton_polish(alpha: float, beta: float, n: int, x: np.ndarray) -> np.ndarray:
    val, dval = jacobi_eval(alpha, beta, n, x)
    return x - val / dval


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@functools.lru_cache(maxsize=None)
def quad_rule(kind: QuadKind, n: int) -> QuadRule:
    """Construct the n-point rule of the given kind (results are cached)."""
    if n < 1:
        raise ValueError(f"cannot build a {kind.value} rule with n={n}")
    if kind is QuadKind.GAUSS_LEGENDRE:
        x = _jacobi_golub_welsch(0.0, 0.0, n)
        x = _newton_polish(0.0, 0.0, n, x)
        _, dp = jacobi_eval(0.0, 0.0, n, x)
        w = 2.0 / ((1.0 - x * x) * dp * dp)
    elif kind is QuadKind.GAUSS_RADAU_M:
        if n == 1:
            x = np.array([-1.0])
            w = np.array([2.0])
        else:
            xi = _jacobi_golub_welsch(0.0, 1.0, n - 1)
            xi = _newton_polish(0.0, 1.0, n - 1, xi)
            x = np.concatenate(([-1.0], xi))
            pl, _ = jacobi_eval(0.0, 0.0, n - 1, x)
            w = (1.0 - x) / (n * n * pl * pl)
            w[0] = 2.0 / (n * n)
    elif kind is QuadKind.GAUSS_LOBATTO:
        if n < 2:
            raise ValueError("Gauss-Lobatto rules need n >= 2")
        if n == 2:
            xi = np.empty(0)
        else:
            xi = _jacobi_golub_welsch(1.0, 1.0, n - 2)
            xi = _newton_polish(1.0, 1.0, n - 2, xi)
        x = np.concatenate(([-1.0], xi, [1.0]))
        pl, _ = jacobi_eval(0.0, 0.0, n - 1, x)
        w = 2.0 / (n * (n - 1) * pl * pl)
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unknown quadrature kind {kind}")
    return QuadRule(kind, n, _freeze(x), _freeze(w))


def barycentric_weights(points: np.ndarray) -> np.ndarray:
    """Barycentric weights 1/prod(x_j - x_k) for a distinct point set."""
    x = np.asarray(points, dtype=float)
    _check_distinct(x)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def _check_distinct(x: np.ndarray) -> None:
    if x.ndim != 1:
        raise ValueError("point set must be one-dimensional")
    xs = np.sort(x)
    if x.size > 1 and np.min(np.diff(xs)) < 1e-14:
        raise ValueError("interpolation points must be pairwise distinct")


def lagrange_interp_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Matrix mapping nodal values on `src` to interpolated values at `dst`.

    Row r holds the Lagrange cardinal functions of `src` evaluated at
    dst[r]; rows sum to one by construction (barycentric form).
    """
    src = np.asarray(src, dtype=float)
    dst = np.atleast_1d(np.asarray(dst, dtype=float))
    lam = barycentric_weights(src)
    out = np.empty((dst.size, src.size))
    for r, y in enumerate(dst):
        d = y - src
        hit = np.nonzero(d == 0.0)[0]
        if hit.size:
            row = np.zeros(src.size)
            row[hit[0]] = 1.0
        else:
            t = lam / d
            row = t / t.sum()
        out[r] = row
    return out


def diff_matrix(points: np.ndarray) -> np.ndarray:
    """Collocation differentiation matrix for a distinct point set."""
    x = np.asarray(points, dtype=float)
    lam = barycentric_weights(x)
    n = x.size
    d = np.zeros((n, n))
    for i in range(n):
        dx = x[i] - x
        dx[i] = 1.0
        row = (lam / lam[i]) / dx
        row[i] = 0.0
        row[i] = -row.sum()
        d[i] = row
    return d


class BasisKind(enum.Enum):
    MODIFIED_MODAL = "modified_modal"
    ORTHOGONAL = "orthogonal"
    LAGRANGE = "lagrange"


@dataclass(frozen=True)
class Basis1D:
    """A 1D basis tabulated on a quadrature rule.

    V[q, i] = psi_i(xi_q) and dV[q, i] = psi_i'(xi_q) on `rule.points`;
    `nodes` holds the interpolation nodes for the Lagrange kind, None
    otherwise.
    """

    kind: BasisKind
    n_modes: int
    rule: QuadRule
    nodes: np.ndarray | None
    V: np.ndarray
    dV: np.ndarray

    @property
    def has_boundary_interior_split(self) -> bool:
        """True when face values depend only on endpoint modes (Table-style
        boundary/interior decomposition)."""
        if self.kind is BasisKind.MODIFIED_MODAL:
            return True
        if self.kind is BasisKind.LAGRANGE:
            return bool(
                np.any(self.nodes == -1.0) and np.any(self.nodes == 1.0)
            )
        return False

    def boundary_mode(self, side: int) -> int:
        """Index of the single mode carrying the value at endpoint `side`."""
        if not self.has_boundary_interior_split:
            raise ValueError(
                "basis has no boundary/interior decomposition; "
                "use the full evaluation path"
            )
        if self.kind is BasisKind.MODIFIED_MODAL:
            return 0 if side < 0 else self.n_modes - 1
        return int(np.argmin(np.abs(self.nodes - (-1.0 if side < 0 else 1.0))))


def eval_modified_modal(n_modes: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Modified modal family: psi_0=(1-x)/2, psi_{n-1}=(1+x)/2, interior
    bubbles (1-x)/2 (1+x)/2 P^(1,1)_{i-1}; spans P_{n-1} with a B/I split."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.empty((x.size, n_modes))
    dv = np.empty((x.size, n_modes))
    v[:, 0] = 0.5 * (1.0 - x)
    dv[:, 0] = -0.5
    if n_modes > 1:
        v[:, n_modes - 1] = 0.5 * (1.0 + x)
        dv[:, n_modes - 1] = 0.5
    bub = 0.25 * (1.0 - x) * (1.0 + x)
    dbub = -0.5 * x
    for i in range(1, n_modes - 1):
        p, dp = jacobi_eval(1.0, 1.0, i - 1, x)
        v[:, i] = bub * p
        dv[:, i] = dbub * p + bub * dp
    return v, dv


def eval_orthonormal(n_modes: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Legendre polynomials normalised to unit L2 norm on [-1, 1]."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.empty((x.size, n_modes))
    dv = np.empty((x.size, n_modes))
    for i in range(n_modes):
        scale = math.sqrt(i + 0.5)
        p, dp = jacobi_eval(0.0, 0.0, i, x)
        v[:, i] = scale * p
        dv[:, i] = scale * dp
    return v, dv


def eval_lagrange(nodes: np.ndarray, x) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange cardinal functions of `nodes` and their derivatives at x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = lagrange_interp_matrix(nodes, x)
    # l_j' is a polynomial of degree m-2; its nodal samples are D[:, j], so
    # interpolating those samples reproduces it exactly.
    dv = v @ diff_matrix(nodes)
    return v, dv


def eval_basis_1d(
    kind: BasisKind, n_modes: int, x, nodes: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Tabulate (V, dV) of the requested 1D family at arbitrary points."""
    if kind is BasisKind.MODIFIED_MODAL:
        return eval_modified_modal(n_modes, x)
    if kind is BasisKind.ORTHOGONAL:
        return eval_orthonormal(n_modes, x)
    if kind is BasisKind.LAGRANGE:
        if nodes is None:
            raise ValueError("Lagrange basis needs its node set")
        return eval_lagrange(nodes, x)
    raise ValueError(f"unknown basis kind {kind}")


def basis_1d(
    kind: BasisKind,
    n_modes: int,
    rule: QuadRule,
    node_kind: QuadKind | None = None,
) -> Basis1D:
    """Build a Basis1D on `rule`.

    For the Lagrange kind the nodes default to the n_modes-point rule of the
    same quadrature family (Lagrange-GLL on Gauss-Lobatto rules, Lagrange-GL
    on Gauss rules, matching the usual collocation pairing).
    """
    if n_modes < 1:
        raise ValueError("basis needs at least one mode")
    nodes = None
    if kind is BasisKind.LAGRANGE:
        nodes = quad_rule(node_kind or rule.kind, n_modes).points
    v, dv = eval_basis_1d(kind, n_modes, rule.points, nodes)
    return Basis1D(kind, n_modes, rule, nodes, _freeze(v), _freeze(dv))
