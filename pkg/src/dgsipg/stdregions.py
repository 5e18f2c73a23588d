"""Reference-element expansions with sum-factorised matrix-free kernels.

Supported shapes are segments, quadrilaterals, triangles and hexahedra.  The
triangle uses the collapsed (Duffy) coordinate system: its physical points are
a full tensor grid in eta, its modes follow the generalized tensor layout
(i, then j <= n_modes-1-i, lexicographic), and derivative kernels return
d/d_eta which callers chain to d/d_xi with `collapse_jacobian`.

All kernels accept coefficient/physical arrays with an optional trailing
batch axis (n, W); a batch is a group of W elements sharing one expansion,
stored point-major so the W values of one entry are contiguous.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .polylib import (
    Basis1D,
    BasisKind,
    QuadKind,
    QuadRule,
    basis_1d,
    eval_basis_1d,
    jacobi_eval,
    lagrange_interp_matrix,
    diff_matrix,
    quad_rule,
)

__all__ = [
    "Shape",
    "Face",
    "Expansion",
    "expansion",
    "faces",
    "duffy_collapse",
    "duffy_expand",
    "bwd_trans",
    "iproduct",
    "iproduct_deriv",
    "phys_deriv",
    "boundary_bwd_trans",
    "face_eval",
    "face_iproduct",
    "face_values_from_phys",
    "interleave",
    "deinterleave",
    "costs",
]


class Shape(enum.Enum):
    SEG = "seg"
    QUAD = "quad"
    TRI = "tri"
    HEX = "hex"

    @property
    def dim(self) -> int:
        return {Shape.SEG: 1, Shape.QUAD: 2, Shape.TRI: 2, Shape.HEX: 3}[self]

    @property
    def collapsed(self) -> bool:
        return self is Shape.TRI


class CostCounter:
    """Nominal multiply-add tallies for the sum-factorised kernels.

    Counts are per element (independent of the batch width) and only
    accumulated while `enabled` is set, so production runs pay one branch.
    """

    def __init__(self) -> None:
        self.enabled = False
        self._tally: dict[str, int] = {}

    def reset(self) -> None:
        self._tally.clear()

    def add(self, name: str, macs: int) -> None:
        self._tally[name] = self._tally.get(name, 0) + int(macs)

    def get(self, name: str) -> int:
        return self._tally.get(name, 0)

    def total(self) -> int:
        return sum(self._tally.values())


costs = CostCounter()


# ---------------------------------------------------------------------------
# Reference face topology


@dataclass(frozen=True)
class Face:
    """One face of a reference element.

    The face parametrisation is xi = center + sum_i s_i * tangents[i] with
    s in [-1, 1]^(d-1); `run_axes` are the tensor (eta) axes that vary along
    the face and `fixed_axis`/`side` locate it in the tensor grid.
    """

    index: int
    fixed_axis: int
    side: int
    run_axes: tuple[int, ...]
    center: tuple[float, ...]
    tangents: tuple[tuple[float, ...], ...]
    ref_normal: tuple[float, ...]
    corner_verts: tuple[int, ...]

    def param_to_ref(self, coords: np.ndarray) -> np.ndarray:
        """Map face parameters (npts, d-1) to reference coordinates."""
        c = np.asarray(self.center)
        t = np.asarray(self.tangents)
        return c + coords @ t

    @property
    def corner_params(self) -> np.ndarray:
        d1 = len(self.run_axes)
        if d1 == 0:
            return np.zeros((1, 0))
        grids = np.meshgrid(*([np.array([-1.0, 1.0])] * d1), indexing="ij")
        return np.stack([g.reshape(-1) for g in reversed(grids)], axis=-1)


def _mk_faces(defs) -> tuple[Face, ...]:
    return tuple(Face(i, *d) for i, d in enumerate(defs))


_FACES = {
    Shape.SEG: _mk_faces(
        [
            (0, -1, (), (-1.0,), (), (-1.0,), (0,)),
            (0, +1, (), (+1.0,), (), (+1.0,), (1,)),
        ]
    ),
    Shape.QUAD: _mk_faces(
        [
            (0, -1, (1,), (-1.0, 0.0), ((0.0, 1.0),), (-1.0, 0.0), (0, 3)),
            (0, +1, (1,), (+1.0, 0.0), ((0.0, 1.0),), (+1.0, 0.0), (1, 2)),
            (1, -1, (0,), (0.0, -1.0), ((1.0, 0.0),), (0.0, -1.0), (0, 1)),
            (1, +1, (0,), (0.0, +1.0), ((1.0, 0.0),), (0.0, +1.0), (3, 2)),
        ]
    ),
    Shape.TRI: _mk_faces(
        [
            (1, -1, (0,), (0.0, -1.0), ((1.0, 0.0),), (0.0, -1.0), (0, 1)),
            (
                0,
                +1,
                (1,),
                (0.0, 0.0),
                ((-1.0, 1.0),),
                (math.sqrt(0.5), math.sqrt(0.5)),
                (1, 2),
            ),
            (0, -1, (1,), (-1.0, 0.0), ((0.0, 1.0),), (-1.0, 0.0), (0, 2)),
        ]
    ),
    Shape.HEX: _mk_faces(
        [
            (0, -1, (1, 2), (-1.0, 0.0, 0.0),
             ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0)), (-1.0, 0.0, 0.0),
             (0, 3, 4, 7)),
            (0, +1, (1, 2), (+1.0, 0.0, 0.0),
             ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0)), (+1.0, 0.0, 0.0),
             (1, 2, 5, 6)),
            (1, -1, (0, 2), (0.0, -1.0, 0.0),
             ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)), (0.0, -1.0, 0.0),
             (0, 1, 4, 5)),
            (1, +1, (0, 2), (0.0, +1.0, 0.0),
             ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)), (0.0, +1.0, 0.0),
             (3, 2, 7, 6)),
            (2, -1, (0, 1), (0.0, 0.0, -1.0),
             ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0)), (0.0, 0.0, -1.0),
             (0, 1, 3, 2)),
            (2, +1, (0, 1), (0.0, 0.0, +1.0),
             ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0)), (0.0, 0.0, +1.0),
             (4, 5, 7, 6)),
        ]
    ),
}

_SHAPE_VERTS = {
    Shape.SEG: np.array([[-1.0], [1.0]]),
    Shape.QUAD: np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]),
    Shape.TRI: np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]]),
    Shape.HEX: np.array(
        [
            [-1.0, -1.0, -1.0],
            [1.0, -1.0, -1.0],
            [1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
            [1.0, -1.0, 1.0],
            [1.0, 1.0, 1.0],
            [-1.0, 1.0, 1.0],
        ]
    ),
}


def faces(shape: Shape) -> tuple[Face, ...]:
    return _FACES[shape]


def shape_ref_verts(shape: Shape) -> np.ndarray:
    return _SHAPE_VERTS[shape]


# ---------------------------------------------------------------------------
# Collapsed coordinates


def duffy_collapse(shape: Shape, xi, limit: bool = False) -> np.ndarray:
    """Map reference coordinates to collapsed (tensor) coordinates.

    Triangle: eta1 = 2(1+xi1)/(1-xi2) - 1, eta2 = xi2.  The top vertex
    xi2 = 1 is singular; pass limit=True to adopt the eta1 = -1 convention
    there instead of raising.
    """
    xi = np.asarray(xi, dtype=float)
    if shape is not Shape.TRI:
        return xi.copy()
    eta = xi.copy()
    x1 = xi[..., 0]
    x2 = xi[..., 1]
    sing = x2 == 1.0
    if np.any(sing):
        if not limit:
            raise ValueError(
                "collapsed coordinates are singular at xi2 = 1; "
                "pass limit=True for the eta1 = -1 convention"
            )
        safe = np.where(sing, 0.0, 1.0 - x2)
        eta[..., 0] = np.where(sing, -1.0, 2.0 * (1.0 + x1) / safe - 1.0)
    else:
        eta[..., 0] = 2.0 * (1.0 + x1) / (1.0 - x2) - 1.0
    return eta


def duffy_expand(shape: Shape, eta) -> np.ndarray:
    """Inverse of duffy_collapse; total (no singular point)."""
    eta = np.asarray(eta, dtype=float)
    if shape is not Shape.TRI:
        return eta.copy()
    xi = eta.copy()
    xi[..., 0] = 0.5 * (1.0 + eta[..., 0]) * (1.0 - eta[..., 1]) - 1.0
    return xi


# ---------------------------------------------------------------------------
# Triangle basis tables (generalized tensor)


@dataclass(frozen=True)
class TriGroup:
    """Modes sharing one direction-1 function: coefficient indices plus the
    direction-2 tables B, dB of shape (npts2, len(modes))."""

    modes: np.ndarray
    B: np.ndarray
    dB: np.ndarray


def _one_minus_half_pow(z: np.ndarray, e: int) -> tuple[np.ndarray, np.ndarray]:
    f = (0.5 * (1.0 - z)) ** e
    df = -0.5 * e * (0.5 * (1.0 - z)) ** (e - 1) if e > 0 else np.zeros_like(z)
    return f, df


def _tri_flat(n: int, i: int, j: int) -> int:
    return sum(n - k for k in range(i)) + j


def tri_dir1_table(kind: BasisKind, n: int, pts) -> tuple[np.ndarray, np.ndarray]:
    """Direction-1 table, one column per group (see tri_groups)."""
    z = np.atleast_1d(np.asarray(pts, dtype=float))
    if kind is BasisKind.ORTHOGONAL:
        return eval_basis_1d(BasisKind.ORTHOGONAL, n, z)
    if kind is not BasisKind.MODIFIED_MODAL:
        raise ValueError(
            "triangles support the modified modal and orthogonal bases only "
            "(nodal point sets on the collapsed element are out of scope)"
        )
    mm, dmm = eval_basis_1d(BasisKind.MODIFIED_MODAL, n, z)
    # groups: row 0 family, collapsed-vertex mode (constant), hypotenuse
    # family, then interior rows i >= 2
    cols = [0, None, n - 1] + list(range(1, n - 1))
    a = np.empty((z.size, len(cols)))
    da = np.empty_like(a)
    for g, c in enumerate(cols):
        if c is None:
            a[:, g] = 1.0
            da[:, g] = 0.0
        else:
            a[:, g] = mm[:, c]
            da[:, g] = dmm[:, c]
    return a, da


def tri_groups(kind: BasisKind, n: int, pts) -> list[TriGroup]:
    """Direction-2 tables per group, aligned with tri_dir1_table columns.

    Modified modal layout (lexicographic (i, j), j <= n-1-i):
      group 0: modes (0, j), j != 1  -> 1D modified family without the (1+z)/2
               vertex, paired with (1-eta1)/2;
      group 1: the collapsed-vertex mode (0, 1) = (1+eta2)/2 alone;
      group 2: modes (1, j) paired with (1+eta1)/2 (hypotenuse family);
      group 2+i: interior rows, B = ((1-z)/2)^i [1 or (1+z)/2 P^(2i-1,1)_{j-1}].
    """
    z = np.atleast_1d(np.asarray(pts, dtype=float))
    groups: list[TriGroup] = []
    if kind is BasisKind.ORTHOGONAL:
        for i in range(n):
            nj = n - i
            b = np.empty((z.size, nj))
            db = np.empty_like(b)
            f, df = _one_minus_half_pow(z, i)
            for j in range(nj):
                scale = math.sqrt(i + j + 1.0)
                p, dp = jacobi_eval(2.0 * i + 1.0, 0.0, j, z)
                b[:, j] = scale * f * p
                db[:, j] = scale * (df * p + f * dp)
            modes = np.array([_tri_flat(n, i, j) for j in range(nj)])
            groups.append(TriGroup(modes, b, db))
        return groups
    if kind is not BasisKind.MODIFIED_MODAL:
        raise ValueError("unsupported triangle basis kind")
    mm, dmm = eval_basis_1d(BasisKind.MODIFIED_MODAL, n, z)
    # group 0: row i=0, vertex mode excluded
    j0 = [0] + list(range(2, n))
    cols = [j - 1 if j >= 2 else 0 for j in j0]
    groups.append(
        TriGroup(
            np.array([_tri_flat(n, 0, j) for j in j0]),
            mm[:, cols].copy(),
            dmm[:, cols].copy(),
        )
    )
    # group 1: collapsed-vertex mode (0, 1)
    groups.append(
        TriGroup(
            np.array([_tri_flat(n, 0, 1)]),
            mm[:, [n - 1]].copy(),
            dmm[:, [n - 1]].copy(),
        )
    )
    # group 2: hypotenuse row i=1
    nj = n - 1
    groups.append(
        TriGroup(
            np.array([_tri_flat(n, 1, j) for j in range(nj)]),
            mm[:, :nj].copy(),
            dmm[:, :nj].copy(),
        )
    )
    # interior rows i >= 2
    for i in range(2, n):
        nj = n - i
        b = np.empty((z.size, nj))
        db = np.empty_like(b)
        f, df = _one_minus_half_pow(z, i)
        b[:, 0] = f
        db[:, 0] = df
        half_p = 0.5 * (1.0 + z)
        for j in range(1, nj):
            p, dp = jacobi_eval(2.0 * i - 1.0, 1.0, j - 1, z)
            b[:, j] = f * half_p * p
            db[:, j] = df * half_p * p + f * (0.5 * p + half_p * dp)
        modes = np.array([_tri_flat(n, i, j) for j in range(nj)])
        groups.append(TriGroup(modes, b, db))
    return groups


# ---------------------------------------------------------------------------
# Expansion


@dataclass(frozen=True, eq=False)
class Expansion:
    """A reference-element discretisation (shape, basis, orders, rules).

    Immutable after construction; every derived table is precomputed here so
    kernels are pure functions of (expansion, data).
    """

    shape: Shape
    basis_kind: BasisKind
    n_modes: int
    rules: tuple[QuadRule, ...]
    bases: tuple[Basis1D, ...] | None
    tri_A: np.ndarray | None
    tri_dA: np.ndarray | None
    tri_rows: tuple[TriGroup, ...] | None
    n_coeffs: int
    nq: tuple[int, ...]
    n_phys: int
    ref_weights: np.ndarray        # tensor weights incl. Duffy factor
    xi_phys: np.ndarray            # (n_phys, d) reference coords of points
    eta_phys: np.ndarray           # (n_phys, d) collapsed coords of points
    _diff: tuple[np.ndarray, ...] = field(default=None)

    @property
    def dim(self) -> int:
        return self.shape.dim

    @property
    def faces(self) -> tuple[Face, ...]:
        return _FACES[self.shape]

    def face_rule(self, face: Face) -> tuple[QuadRule, ...]:
        return tuple(self.rules[a] for a in face.run_axes)

    def face_n_phys(self, face: Face) -> int:
        return int(np.prod([self.nq[a] for a in face.run_axes], initial=1))

    def collapse_jacobian(self) -> np.ndarray | None:
        """d eta / d xi at the physical points, (d, d, n_phys); None when the
        shape is not collapsed (identity chain)."""
        if self.shape is not Shape.TRI:
            return None
        e1 = self.eta_phys[:, 0]
        e2 = self.eta_phys[:, 1]
        out = np.zeros((2, 2, self.n_phys))
        out[0, 0] = 2.0 / (1.0 - e2)
        out[0, 1] = (1.0 + e1) / (1.0 - e2)
        out[1, 1] = 1.0
        return out

    def boundary_mode_indices(self, face_id: int) -> np.ndarray:
        """Flat coefficient indices that influence values on the given face
        (requires a basis with boundary/interior decomposition)."""
        face = self.faces[face_id]
        if self.shape is Shape.TRI:
            if self.basis_kind is not BasisKind.MODIFIED_MODAL:
                raise ValueError(
                    "basis has no boundary/interior decomposition; "
                    "use the full evaluation path"
                )
            n = self.n_modes
            vertex = _tri_flat(n, 0, 1)
            if face_id == 0:    # eta2 = -1: modes (i, 0)
                return np.array([_tri_flat(n, i, 0) for i in range(n)])
            if face_id == 1:    # hypotenuse: row i=1 plus the vertex mode
                return np.array(
                    [vertex] + [_tri_flat(n, 1, j) for j in range(n - 1)]
                )
            return np.arange(n)  # left edge: row i=0 (includes the vertex)
        idx = []
        b = self.bases[face.fixed_axis].boundary_mode(face.side)
        grid = np.arange(self.n_coeffs).reshape(
            tuple(bb.n_modes for bb in self.bases)
        )
        idx = np.take(grid, b, axis=face.fixed_axis).reshape(-1)
        return idx


def _tensor_points(rules: tuple[QuadRule, ...]) -> np.ndarray:
    grids = np.meshgrid(*[r.points for r in rules], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def _tensor_weights(rules: tuple[QuadRule, ...]) -> np.ndarray:
    w = rules[0].weights
    for r in rules[1:]:
        w = np.multiply.outer(w, r.weights)
    return w.reshape(-1)


_DEFAULT_RULE = {
    Shape.SEG: (QuadKind.GAUSS_LOBATTO,),
    Shape.QUAD: (QuadKind.GAUSS_LOBATTO,) * 2,
    Shape.TRI: (QuadKind.GAUSS_LEGENDRE,) * 2,
    Shape.HEX: (QuadKind.GAUSS_LOBATTO,) * 3,
}


@functools.lru_cache(maxsize=None)
def expansion(
    shape: Shape,
    basis_kind: BasisKind,
    n_modes: int,
    n_quad,
    rule_kinds=None,
) -> Expansion:
    """Build (and cache) an expansion.

    n_modes is the per-direction mode count (triangle: generalized-tensor
    order, n_coeffs = n(n+1)/2).  n_quad is an int or per-direction tuple;
    rule kinds default to Gauss-Lobatto on tensor shapes and Gauss-Legendre
    on both triangle directions (keeps the collapsed vertex out of the grid).
    """
    d = shape.dim
    if n_modes < 2:
        raise ValueError("expansions need n_modes >= 2")
    nq = (n_quad,) * d if isinstance(n_quad, int) else tuple(n_quad)
    kinds = rule_kinds or _DEFAULT_RULE[shape]
    kinds = (kinds,) * d if isinstance(kinds, QuadKind) else tuple(kinds)
    if shape is Shape.TRI and kinds[1] is QuadKind.GAUSS_LOBATTO:
        raise ValueError(
            "the triangle collapsed direction cannot carry an endpoint at "
            "eta2 = +1; use Gauss-Legendre or Gauss-Radau rules"
        )
    rules = tuple(quad_rule(k, q) for k, q in zip(kinds, nq))
    pts = _tensor_points(rules)
    w = _tensor_weights(rules)
    if shape is Shape.TRI:
        a, da = tri_dir1_table(basis_kind, n_modes, rules[0].points)
        rows = tuple(tri_groups(basis_kind, n_modes, rules[1].points))
        n_coeffs = n_modes * (n_modes + 1) // 2
        eta = pts
        xi = duffy_expand(shape, eta)
        ref_w = w * 0.5 * (1.0 - eta[:, 1])
        bases = None
    else:
        bases = tuple(basis_1d(basis_kind, n_modes, r) for r in rules)
        a = da = None
        rows = None
        n_coeffs = n_modes**d
        xi = eta = pts
        ref_w = w
    diffs = tuple(diff_matrix(r.points) for r in rules)
    ref_w = np.ascontiguousarray(ref_w)
    ref_w.flags.writeable = False
    return Expansion(
        shape=shape,
        basis_kind=basis_kind,
        n_modes=n_modes,
        rules=rules,
        bases=bases,
        tri_A=a,
        tri_dA=da,
        tri_rows=rows,
        n_coeffs=n_coeffs,
        nq=nq,
        n_phys=int(np.prod(nq)),
        ref_weights=ref_w,
        xi_phys=xi,
        eta_phys=eta,
        _diff=diffs,
    )


# ---------------------------------------------------------------------------
# Batched tensor contractions


def _with_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], False
    return x, True


def _apply_axis(mat: np.ndarray, t: np.ndarray, axis: int, tag: str) -> np.ndarray:
    """Contract `axis` of t (last axis is the batch) with mat (out, in)."""
    if costs.enabled:
        w = t.shape[-1]
        costs.add(tag, mat.shape[0] * (t.size // t.shape[axis]) // w * mat.shape[1])
    out = np.tensordot(mat, t, axes=(1, axis))
    return np.moveaxis(out, 0, axis)


def bwd_trans(exp: Expansion, coeffs) -> np.ndarray:
    """Physical values from coefficients, u(q) = sum_i phi_i(q) u_i."""
    c, batched = _with_batch(coeffs)
    if c.shape[0] != exp.n_coeffs:
        raise ValueError(
            f"expected {exp.n_coeffs} coefficients, got {c.shape[0]}"
        )
    w = c.shape[1]
    if exp.shape is Shape.TRI:
        t = np.empty((exp.tri_A.shape[1], exp.nq[1], w))
        for g, row in enumerate(exp.tri_rows):
            t[g] = row.B @ c[row.modes]
            if costs.enabled:
                costs.add("bwd_trans", row.B.shape[0] * row.B.shape[1])
        u = np.tensordot(exp.tri_A, t, axes=(1, 0))
        if costs.enabled:
            costs.add("bwd_trans", exp.tri_A.size * exp.nq[1])
    else:
        u = c.reshape(*(b.n_modes for b in exp.bases), w)
        for ax, b in enumerate(exp.bases):
            u = _apply_axis(b.V, u, ax, "bwd_trans")
    u = u.reshape(exp.n_phys, w)
    return u if batched else u[:, 0]


def iproduct(exp: Expansion, phys, metric=None) -> np.ndarray:
    """Quadrature inner product against all basis functions.

    coeffs_i = sum_q phi_i(q) phys_q metric_q; `metric` is the combined
    weight x Jacobian array (defaults to 1, i.e. pre-multiplied input).
    """
    f, batched = _with_batch(phys)
    if f.shape[0] != exp.n_phys:
        raise ValueError(f"expected {exp.n_phys} point values, got {f.shape[0]}")
    if metric is not None:
        m = np.asarray(metric, dtype=float)
        f = f * (m[:, None] if m.ndim == 1 else m)
    w = f.shape[1]
    if exp.shape is Shape.TRI:
        s = np.tensordot(exp.tri_A.T, f.reshape(exp.nq[0], exp.nq[1], w),
                         axes=(1, 0))
        if costs.enabled:
            costs.add("iproduct", exp.tri_A.size * exp.nq[1])
        out = np.empty((exp.n_coeffs, w))
        for g, row in enumerate(exp.tri_rows):
            out[row.modes] = row.B.T @ s[g]
            if costs.enabled:
                costs.add("iproduct", row.B.shape[0] * row.B.shape[1])
    else:
        t = f.reshape(*exp.nq, w)
        for ax, b in enumerate(exp.bases):
            t = _apply_axis(b.V.T, t, ax, "iproduct")
        out = t.reshape(exp.n_coeffs, w)
    return out if batched else out[:, 0]


def iproduct_deriv(exp: Expansion, direction: int, phys, metric=None) -> np.ndarray:
    """Inner product against d phi_i / d eta_k (tensor-direction derivative)."""
    f, batched = _with_batch(phys)
    if metric is not None:
        m = np.asarray(metric, dtype=float)
        f = f * (m[:, None] if m.ndim == 1 else m)
    w = f.shape[1]
    if exp.shape is Shape.TRI:
        a = exp.tri_dA if direction == 0 else exp.tri_A
        s = np.tensordot(a.T, f.reshape(exp.nq[0], exp.nq[1], w), axes=(1, 0))
        if costs.enabled:
            costs.add("iproduct_deriv", a.size * exp.nq[1])
        out = np.empty((exp.n_coeffs, w))
        for g, row in enumerate(exp.tri_rows):
            b = row.B if direction == 0 else row.dB
            out[row.modes] = b.T @ s[g]
            if costs.enabled:
                costs.add("iproduct_deriv", b.size)
    else:
        t = f.reshape(*exp.nq, w)
        for ax, b in enumerate(exp.bases):
            mat = b.dV if ax == direction else b.V
            t = _apply_axis(mat.T, t, ax, "iproduct_deriv")
        out = t.reshape(exp.n_coeffs, w)
    return out if batched else out[:, 0]


def phys_deriv(exp: Expansion, phys) -> np.ndarray:
    """Collocation derivatives along each tensor direction.

    Returns (d, n_phys[, W]); for collapsed shapes these are d/d_eta and the
    caller chains to d/d_xi with `Expansion.collapse_jacobian`.
    """
    f, batched = _with_batch(phys)
    if f.shape[0] != exp.n_phys:
        raise ValueError(f"expected {exp.n_phys} point values, got {f.shape[0]}")
    w = f.shape[1]
    t = f.reshape(*exp.nq, w)
    out = np.empty((exp.dim, exp.n_phys, w))
    for ax in range(exp.dim):
        out[ax] = _apply_axis(exp._diff[ax], t, ax, "phys_deriv").reshape(
            exp.n_phys, w
        )
    return out if batched else out[:, :, 0]


# ---------------------------------------------------------------------------
# Face evaluation (sum-factorised trace operators on the reference element)


def _face_pts(exp: Expansion, face: Face, pts=None) -> tuple[np.ndarray, ...]:
    if pts is None:
        return tuple(exp.rules[a].points for a in face.run_axes)
    if isinstance(pts, np.ndarray):
        pts = (pts,)
    return tuple(np.atleast_1d(np.asarray(p, dtype=float)) for p in pts)


def _tensor_face_tables(exp, face, pts, deriv_axis=None):
    """1D tables for a sum-factorised face evaluation: the fixed-axis row and
    one (npts, n_modes) matrix per running axis."""
    side = float(face.side)
    tabs = []
    b = exp.bases[face.fixed_axis]
    v, dv = eval_basis_1d(b.kind, b.n_modes, np.array([side]), b.nodes)
    tabs.append((dv if deriv_axis == face.fixed_axis else v))
    for k, ax in enumerate(face.run_axes):
        b = exp.bases[ax]
        v, dv = eval_basis_1d(b.kind, b.n_modes, pts[k], b.nodes)
        tabs.append(dv if deriv_axis == ax else v)
    return tabs


def face_eval(exp: Expansion, face_id: int, coeffs, pts=None, deriv_axis=None):
    """Evaluate the expansion (or one of its eta-derivatives) on a face grid.

    `pts` overrides the face quadrature points (used for shared-trace /
    mortar grids); the result is flattened in run-axis order.  This is the
    trace-evaluation kernel: the fixed axis is contracted first so the
    nominal cost on a hexahedron face is N_P^3 + N_P^2 N_Q + N_P N_Q^2.
    """
    face = exp.faces[face_id]
    pts = _face_pts(exp, face, pts)
    c, batched = _with_batch(coeffs)
    if c.shape[0] != exp.n_coeffs:
        raise ValueError(f"expected {exp.n_coeffs} coefficients, got {c.shape[0]}")
    w = c.shape[1]
    if exp.shape is Shape.TRI:
        a, da = tri_dir1_table(exp.basis_kind, exp.n_modes, pts[0]) \
            if face.fixed_axis == 1 else (None, None)
        if face.fixed_axis == 0:
            av, dav = tri_dir1_table(
                exp.basis_kind, exp.n_modes, np.array([float(face.side)])
            )
            arow = dav if deriv_axis == 0 else av
            rows = tri_groups(exp.basis_kind, exp.n_modes, pts[0])
            out = np.zeros((pts[0].size, w))
            for g, row in enumerate(rows):
                if arow[0, g] == 0.0:
                    continue
                b = row.dB if deriv_axis == 1 else row.B
                out += arow[0, g] * (b @ c[row.modes])
                if costs.enabled:
                    costs.add("face_eval", b.size)
            return out if batched else out[:, 0]
        # bottom edge: contract eta2 at side, then apply the dir-1 table
        rows = tri_groups(exp.basis_kind, exp.n_modes,
                          np.array([float(face.side)]))
        s = np.empty((len(rows), w))
        for g, row in enumerate(rows):
            b = row.dB if deriv_axis == 1 else row.B
            s[g] = b[0] @ c[row.modes]
            if costs.enabled:
                costs.add("face_eval", b.size)
        arun = da if deriv_axis == 0 else a
        out = arun @ s
        if costs.enabled:
            costs.add("face_eval", arun.size)
        return out if batched else out[:, 0]
    tabs = _tensor_face_tables(exp, face, pts, deriv_axis)
    t = c.reshape(*(b.n_modes for b in exp.bases), w)
    t = _apply_axis(tabs[0], t, face.fixed_axis, "face_eval")
    t = np.squeeze(t, axis=face.fixed_axis)
    for k in range(len(face.run_axes)):
        ax = k  # after removing the fixed axis, run axes are ordered first
        t = _apply_axis(tabs[1 + k], t, ax, "face_eval")
    out = t.reshape(-1, w)
    return out if batched else out[:, 0]


def face_iproduct(exp: Expansion, face_id: int, vals, pts=None, deriv_axis=None,
                  metric=None):
    """Transpose of face_eval: accumulate face values into coefficients.

    coeffs_i = sum_q phi_i(face q) vals_q metric_q (phi replaced by its
    eta-derivative when deriv_axis is given).
    """
    face = exp.faces[face_id]
    pts = _face_pts(exp, face, pts)
    f, batched = _with_batch(vals)
    if metric is not None:
        m = np.asarray(metric, dtype=float)
        f = f * (m[:, None] if m.ndim == 1 else m)
    w = f.shape[1]
    if exp.shape is Shape.TRI:
        out = np.zeros((exp.n_coeffs, w))
        if face.fixed_axis == 0:
            av, dav = tri_dir1_table(
                exp.basis_kind, exp.n_modes, np.array([float(face.side)])
            )
            arow = dav if deriv_axis == 0 else av
            rows = tri_groups(exp.basis_kind, exp.n_modes, pts[0])
            for g, row in enumerate(rows):
                if arow[0, g] == 0.0:
                    continue
                b = row.dB if deriv_axis == 1 else row.B
                out[row.modes] = arow[0, g] * (b.T @ f)
        else:
            a, da = tri_dir1_table(exp.basis_kind, exp.n_modes, pts[0])
            arun = da if deriv_axis == 0 else a
            s = arun.T @ f
            rows = tri_groups(exp.basis_kind, exp.n_modes,
                              np.array([float(face.side)]))
            for g, row in enumerate(rows):
                b = row.dB if deriv_axis == 1 else row.B
                out[row.modes] = b[0][:, None] * s[g][None, :]
        return out if batched else out[:, 0]
    tabs = _tensor_face_tables(exp, face, pts, deriv_axis)
    shape = [p.size for p in pts]
    t = f.reshape(*shape, w)
    for k in range(len(face.run_axes) - 1, -1, -1):
        t = _apply_axis(tabs[1 + k].T, t, k, "face_iproduct")
    t = np.expand_dims(t, axis=face.fixed_axis)
    t = _apply_axis(tabs[0].T, t, face.fixed_axis, "face_iproduct")
    out = t.reshape(exp.n_coeffs, w)
    return out if batched else out[:, 0]


def boundary_bwd_trans(exp: Expansion, coeffs, face_id: int):
    """Face values touching only the boundary modes of that face.

    Requires a basis with a boundary/interior decomposition; equals the face
    restriction of bwd_trans but skips the interior contraction, so the
    nominal hexahedron cost drops to N_P^2 N_Q + N_P N_Q^2.
    """
    face = exp.faces[face_id]
    c, batched = _with_batch(coeffs)
    w = c.shape[1]
    if exp.shape is Shape.TRI:
        idx = exp.boundary_mode_indices(face_id)  # raises without B/I split
        cb = c[idx]
        pts = _face_pts(exp, face, None)[0]
        mm, _ = eval_basis_1d(BasisKind.MODIFIED_MODAL, exp.n_modes, pts)
        if face_id == 0:
            tab = tri_dir1_table(exp.basis_kind, exp.n_modes, pts)[0]
            # modes (i,0) map to groups [0 (i=0), 2 (i=1), 3.. (i>=2)]
            cols = [0] + list(range(2, exp.n_modes + 1))
            tab = tab[:, cols]
        elif face_id == 1:
            tab = np.column_stack([mm[:, exp.n_modes - 1], mm[:, : exp.n_modes - 1]])
        else:
            tab = np.column_stack(
                [mm[:, [0]], mm[:, [exp.n_modes - 1]], mm[:, 1 : exp.n_modes - 1]]
            )
        if costs.enabled:
            costs.add("boundary_bwd_trans", tab.size)
        out = tab @ cb
        return out if batched else out[:, 0]
    b = exp.bases[face.fixed_axis]
    bm = b.boundary_mode(face.side)  # raises without B/I split
    t = c.reshape(*(bb.n_modes for bb in exp.bases), w)
    t = np.take(t, bm, axis=face.fixed_axis)
    for k, ax in enumerate(face.run_axes):
        bb = exp.bases[ax]
        t = _apply_axis(bb.V, t, k, "boundary_bwd_trans")
    out = t.reshape(-1, w)
    return out if batched else out[:, 0]


@functools.lru_cache(maxsize=None)
def _endpoint_row(rule: QuadRule, side: int) -> np.ndarray:
    return lagrange_interp_matrix(rule.points, np.array([float(side)]))


def face_values_from_phys(exp: Expansion, face_id: int, phys):
    """Restrict a physical-space field to a face grid.

    A pure gather when the fixed-axis rule carries the endpoint (the
    Gauss-Lobatto path); otherwise a one-dimensional interpolation along the
    fixed axis (the Gauss / augmented-endpoint path).  Both return values on
    the face's natural grid in run-axis order.
    """
    face = exp.faces[face_id]
    f, batched = _with_batch(phys)
    w = f.shape[1]
    t = f.reshape(*exp.nq, w)
    rule = exp.rules[face.fixed_axis]
    if rule.includes_endpoint(face.side):
        idx = 0 if face.side < 0 else rule.n - 1
        out = np.take(t, idx, axis=face.fixed_axis)
    else:
        row = _endpoint_row(rule, face.side)
        out = np.tensordot(row, t, axes=(1, face.fixed_axis))[0]
        if costs.enabled:
            costs.add("face_restrict", rule.n * (exp.n_phys // rule.n))
    out = out.reshape(-1, w)
    return out if batched else out[:, 0]


def face_volume_indices(exp: Expansion, face_id: int) -> np.ndarray | None:
    """Flat volume-point indices of the face grid, or None when the face grid
    is not a subset of the volume grid (endpoint-free rules)."""
    face = exp.faces[face_id]
    rule = exp.rules[face.fixed_axis]
    if not rule.includes_endpoint(face.side):
        return None
    idx = np.arange(exp.n_phys).reshape(exp.nq)
    sel = 0 if face.side < 0 else rule.n - 1
    return np.take(idx, sel, axis=face.fixed_axis).reshape(-1)


# ---------------------------------------------------------------------------
# Interleaved element batches


def interleave(fields) -> np.ndarray:
    """Stack per-element arrays (n,) into the batched layout (n, W): the W
    values of one entry are contiguous in memory."""
    out = np.ascontiguousarray(np.stack(fields, axis=-1))
    return out


def deinterleave(batch: np.ndarray) -> list[np.ndarray]:
    """Inverse of interleave; exact round trip."""
    return [np.ascontiguousarray(batch[..., k]) for k in range(batch.shape[-1])]
