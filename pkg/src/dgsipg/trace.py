"""Element-trace coupling: gather/scatter, trace evaluation, transfers
between non-matching face grids, the point-to-point symmetry certificate and
the mortar-equivalence check.

Two strategies couple a non-conforming interface:

* shared trace: one quadrature grid (order of the higher side) on which both
  sides evaluate and absorb the flux through trace-conforming tables, making
  the coupling blocks exact transposes by construction;
* point-to-point: each side interpolates the adjacent data onto its own face
  grid and integrates locally, which is symmetric only when the certificate
  below passes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import orient
from .polylib import (
    BasisKind,
    QuadKind,
    QuadRule,
    eval_basis_1d,
    lagrange_interp_matrix,
    quad_rule,
)
from .stdregions import (
    Expansion,
    Shape,
    costs,
    face_eval,
    face_iproduct,
    face_values_from_phys,
    face_volume_indices,
    tri_dir1_table,
    tri_groups,
)

__all__ = [
    "Certificate",
    "certify_p2p",
    "Transfer",
    "transfer_matrix",
    "shared_trace_rule",
    "face_basis_at",
    "gathr_interp",
    "scatr_interp",
    "trace_phys_eval",
    "trace_iproduct",
    "mortar_routes",
    "certificate_report",
]


# ---------------------------------------------------------------------------
# Point-to-point symmetry certificate


@dataclass(frozen=True)
class Certificate:
    """Outcome of the two point-to-point symmetry conditions.

    condition1: interpolation between the grids preserves the polynomial
    content exchanged in each direction (N_Q of each side at least the
    adjacent mode count).  condition2: the coarser rule integrates the
    coupling integrand, whose degree is the sum of both sides' polynomial
    degrees plus the geometric-metric degree.
    """

    condition1: bool
    condition2: bool
    required_degree: int
    actual_degree: int
    left: tuple[int, int]
    right: tuple[int, int]

    @property
    def symmetric(self) -> bool:
        return self.condition1 and self.condition2


def certify_p2p(left, right, p_geom: int = 1, deformed: bool = False) -> Certificate:
    """Certify a point-to-point interface given (n_modes, n_quad, rule kind)
    per side.

    The metric contributes degree p_geom for straight-sided (planar-face)
    elements -- the surface Jacobian of a linear-geometry trapezoid face is
    linear while the normal stays constant -- and up to 3 p_geom (Jacobian,
    normal and coordinate derivatives) for deformed geometry.
    """
    npl, nql, kl = left
    npr, nqr, kr = right
    condition1 = (nql >= npr) and (nqr >= npl)
    metric_degree = 3 * p_geom if deformed else p_geom
    required = (npl - 1) + (npr - 1) + metric_degree
    actual = min(quad_rule(kl, nql).exactness, quad_rule(kr, nqr).exactness)
    return Certificate(
        condition1=condition1,
        condition2=actual >= required,
        required_degree=required,
        actual_degree=actual,
        left=(npl, nql),
        right=(npr, nqr),
    )


def certificate_report(entries) -> str:
    """One line per non-conforming interface: orders, degrees, verdict."""
    lines = [
        "# interface  left(P,Q)  right(P,Q)  strategy  cond1  cond2  "
        "required  actual  symmetric"
    ]
    for iid, cert, strategy in entries:
        lines.append(
            "%d  P%dQ%d  P%dQ%d  %s  %s  %s  %d  %d  %s"
            % (
                iid,
                cert.left[0], cert.left[1],
                cert.right[0], cert.right[1],
                strategy,
                "yes" if cert.condition1 else "no",
                "yes" if cert.condition2 else "no",
                cert.required_degree,
                cert.actual_degree,
                "yes" if cert.symmetric else "no",
            )
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Grid-to-grid transfers (interpolation + orientation in one table)


@dataclass
class Transfer:
    """Maps face values from a source grid to target-grid values.

    Either a pure index permutation (conforming grids: memory traffic only)
    or a dense interpolation matrix that already folds in the orientation.
    """

    perm: np.ndarray | None
    matrix: np.ndarray | None
    identity: bool = False

    @property
    def is_identity(self) -> bool:
        return self.identity

    def apply(self, vals: np.ndarray) -> np.ndarray:
        """vals (..., n_src) -> (..., n_dst) along the last axis."""
        if self.identity:
            return vals
        if self.perm is not None:
            return vals[..., self.perm]
        out = vals @ self.matrix.T
        if costs.enabled:
            costs.add("transfer", self.matrix.size)
        return out


def _tensor_params(pts_axes) -> np.ndarray:
    if not pts_axes:
        return np.zeros((1, 0))
    grids = np.meshgrid(*pts_axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def transfer_matrix(src_pts_axes, dst_pts_axes, code: int = 0) -> Transfer:
    """Build the transfer from a source tensor face grid to a destination
    grid whose parameters map through orientation `code` (destination param
    -> source param)."""
    src_pts_axes = tuple(np.atleast_1d(p) for p in src_pts_axes)
    dst_pts_axes = tuple(np.atleast_1d(p) for p in dst_pts_axes)
    dst = _tensor_params(dst_pts_axes)
    mapped = orient.apply_points(code, dst)
    mats = [
        lagrange_interp_matrix(src_pts_axes[k], mapped[:, k])
        for k in range(len(src_pts_axes))
    ]
    if not mats:
        m = np.ones((1, 1))
    else:
        m = mats[0]
        for k in range(1, len(mats)):
            m = np.einsum("ti,tj->tij", m, mats[k]).reshape(m.shape[0], -1)
    # permutation fast path: every row one-hot
    if m.shape[0] == m.shape[1]:
        hits = np.isclose(m, 1.0, atol=1e-12)
        if np.all(hits.sum(axis=1) == 1) and np.allclose(
            m, hits.astype(float), atol=1e-12
        ):
            perm = np.argmax(hits, axis=1)
            return Transfer(perm=perm, matrix=None,
                            identity=bool(np.all(perm == np.arange(perm.size))))
    return Transfer(perm=None, matrix=m)


def shared_trace_rule(rule_l: QuadRule, rule_r: QuadRule) -> QuadRule:
    """Trace quadrature: the point count of the higher-order side (never
    below either side), rule kind inherited from that side."""
    hi = rule_r if rule_r.n > rule_l.n else rule_l
    return quad_rule(hi.kind, max(rule_l.n, rule_r.n))


# ---------------------------------------------------------------------------
# Dense face-basis tables at arbitrary face parameters


def face_basis_at(exp: Expansion, face_id: int, params, deriv_axis=None) -> np.ndarray:
    """Tabulate every mode (or its eta-derivative) at face parameter points.

    `params` is (npts, d-1) in the face's own parametrisation; the table has
    one column per coefficient.  Used to build trace-conforming evaluation
    and absorption tables at shared-trace or mortar grids.
    """
    face = exp.faces[face_id]
    params = np.atleast_2d(np.asarray(params, dtype=float))
    npts = params.shape[0]
    if exp.shape is Shape.TRI:
        n = exp.n_modes
        out = np.zeros((npts, exp.n_coeffs))
        if face.fixed_axis == 0:
            av, dav = tri_dir1_table(exp.basis_kind, n, np.array([float(face.side)]))
            arow = dav if deriv_axis == 0 else av
            rows = tri_groups(exp.basis_kind, n, params[:, 0])
            for g, row in enumerate(rows):
                b = row.dB if deriv_axis == 1 else row.B
                out[:, row.modes] = arow[0, g] * b
        else:
            a, da = tri_dir1_table(exp.basis_kind, n, params[:, 0])
            arun = da if deriv_axis == 0 else a
            rows = tri_groups(exp.basis_kind, n, np.array([float(face.side)]))
            for g, row in enumerate(rows):
                b = row.dB if deriv_axis == 1 else row.B
                out[:, row.modes] = arun[:, [g]] * b[0][None, :]
        return out
    tabs = []
    run_pos = {ax: k for k, ax in enumerate(face.run_axes)}
    for ax, b in enumerate(exp.bases):
        if ax == face.fixed_axis:
            x = np.array([float(face.side)])
        else:
            x = params[:, run_pos[ax]]
        v, dv = eval_basis_1d(b.kind, b.n_modes, x, b.nodes)
        tab = dv if deriv_axis == ax else v
        if ax == face.fixed_axis:
            tab = np.broadcast_to(tab, (npts, b.n_modes))
        tabs.append(tab)
    m = tabs[0]
    for t in tabs[1:]:
        m = np.einsum("ti,tj->tij", m, t).reshape(npts, -1)
    return m


# ---------------------------------------------------------------------------
# The four element <-> trace operators


def gathr_interp(exp: Expansion, face_id: int, elem_phys, transfer: Transfer | None = None):
    """Gather face values from element physical data, then interpolate /
    permute onto the flux grid.

    On endpoint-bearing rules the gather is a pure index restriction; a
    conforming same-order interface keeps `transfer` as a permutation, so the
    whole operation involves no floating-point work.
    """
    vals = face_values_from_phys(exp, face_id, elem_phys)
    if transfer is not None:
        vals = np.moveaxis(transfer.apply(np.moveaxis(vals, 0, -1)), -1, 0)
    return vals


def scatr_interp(exp: Expansion, face_id: int, face_vals, out,
                 transfer: Transfer | None = None):
    """Transform adjacent/trace-grid data onto the local face grid and
    scatter-add it into an element-shaped physical accumulator.

    After scattering, one whole-element inner product absorbs every face
    contribution at once.  Requires the face grid to be a subset of the
    volume grid (endpoint-bearing rules).
    """
    vals = face_vals
    if transfer is not None:
        vals = np.moveaxis(transfer.apply(np.moveaxis(vals, 0, -1)), -1, 0)
    idx = face_volume_indices(exp, face_id)
    if idx is None:
        raise ValueError(
            "face grid is not contained in the volume grid; scattering needs "
            "endpoint-bearing rules (use trace_iproduct on this face)"
        )
    out[idx] += vals
    return out


def trace_phys_eval(exp: Expansion, face_id: int, coeffs, pts=None):
    """Evaluate the solution and its tensor-direction derivatives on a face
    grid straight from coefficients (works for endpoint-free rules).

    Returns (u, (du/d_eta_k ...)); chaining the derivatives to physical
    space uses the element metric at the face points.
    """
    u = face_eval(exp, face_id, coeffs, pts=pts)
    grads = tuple(
        face_eval(exp, face_id, coeffs, pts=pts, deriv_axis=k)
        for k in range(exp.dim)
    )
    return u, grads


def trace_iproduct(exp: Expansion, face_id: int, flux, metric, pts=None,
                   deriv_axis=None):
    """Inner product of a trace flux against the (trace-conforming) basis,
    returning element coefficient contributions."""
    return face_iproduct(exp, face_id, flux, pts=pts, deriv_axis=deriv_axis,
                         metric=metric)


# ---------------------------------------------------------------------------
# Mortar equivalence


def mortar_routes(mesh, e: int, exp: Expansion, face_id: int, coeffs,
                  mortar_modes: int, mortar_nq: int | None = None):
    """Physical trace values via the imprint route and via an explicit dense
    L2 projection onto a mortar space.

    The imprint route evaluates the local solution directly at the mortar
    quadrature points; the projection route assembles the mortar mass matrix
    and the transfer mass matrix, solves for mortar coefficients and
    evaluates them back.  The two agree whenever the mortar space contains
    the local trace space.  Returns (u_imprint, u_projected).
    """
    from .mesh import face_geometry

    face = exp.faces[face_id]
    fd = len(face.run_axes)
    nq = mortar_nq or (mortar_modes + 2)
    rule = quad_rule(QuadKind.GAUSS_LEGENDRE, nq)
    pts_axes = (rule.points,) * fd
    params = _tensor_params(pts_axes)
    w = rule.weights
    for _ in range(fd - 1):
        w = np.multiply.outer(w, rule.weights).reshape(-1)
    geom = face_geometry(mesh, e, exp, face_id, pts=pts_axes, weights=w)
    jw = geom.surf_jw
    # mortar basis: orthonormal tensor modes on the face
    vm = None
    for k in range(fd):
        v, _ = eval_basis_1d(BasisKind.ORTHOGONAL, mortar_modes, params[:, k])
        vm = v if vm is None else np.einsum(
            "ti,tj->tij", vm, v
        ).reshape(params.shape[0], -1)
    b = face_basis_at(exp, face_id, params)
    u_imprint = b @ coeffs
    mass = vm.T @ (jw[:, None] * vm)
    s = vm.T @ (jw[:, None] * b)
    u_hat = np.linalg.solve(mass, s @ coeffs)
    return u_imprint, vm @ u_hat
