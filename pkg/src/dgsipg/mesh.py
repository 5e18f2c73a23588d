"""Box meshes, geometric factors and per-element order maps.

Meshes are structured boxes of segments, quadrilaterals (optionally split
into two triangles along the low-low / high-high diagonal) or hexahedra.
Generation is deterministic: identical inputs give byte-identical topology
dumps.  A `taper` knob stretches the first axis linearly along the last one,
producing straight-sided trapezoidal elements whose face metrics vary with
polynomial degree one; `perturb_mesh` jiggles interior vertices for general
deformed-geometry testing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import orient
from .stdregions import Expansion, Face, Shape, duffy_expand, shape_ref_verts

__all__ = [
    "Element",
    "Interface",
    "MeshTopology",
    "OrderMap",
    "GeometricFactors",
    "generate_box",
    "perturb_mesh",
    "geometric_factors",
    "element_geometry",
    "face_geometry",
    "assign_orders",
    "insert_transition_layer",
    "map_eval",
    "map_grad",
]


@dataclass(frozen=True)
class Element:
    shape: Shape
    verts: tuple[int, ...]


@dataclass(frozen=True)
class Interface:
    """Either an interior interface (right is an (elem, face) pair) or a
    boundary face (right is None and `tag` names the condition)."""

    left: tuple[int, int]
    right: tuple[int, int] | None
    orientation: int
    tag: str | None = None

    @property
    def is_boundary(self) -> bool:
        return self.right is None


@dataclass
class MeshTopology:
    dim: int
    vertices: np.ndarray
    elements: list[Element]
    interfaces: list[Interface]

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def interior(self) -> list[tuple[int, Interface]]:
        return [(i, f) for i, f in enumerate(self.interfaces) if not f.is_boundary]

    def boundary(self) -> list[tuple[int, Interface]]:
        return [(i, f) for i, f in enumerate(self.interfaces) if f.is_boundary]

    def element_verts(self, e: int) -> np.ndarray:
        return self.vertices[list(self.elements[e].verts)]

    def centroid(self, e: int) -> np.ndarray:
        return self.element_verts(e).mean(axis=0)

    def dump(self) -> str:
        """Plain-text topology dump.

        Field order: `vertex id x [y z]`, `element id shape v0 v1 ...`,
        `interface id eL fL eR fR orient tag` with -1 for absent sides.
        """
        out = []
        for i, v in enumerate(self.vertices):
            out.append("vertex %d %s" % (i, " ".join("%.17g" % c for c in v)))
        for i, e in enumerate(self.elements):
            out.append(
                "element %d %s %s"
                % (i, e.shape.value, " ".join(str(v) for v in e.verts))
            )
        for i, f in enumerate(self.interfaces):
            r = f.right or (-1, -1)
            out.append(
                "interface %d %d %d %d %d %d %s"
                % (i, f.left[0], f.left[1], r[0], r[1], f.orientation,
                   f.tag or "-")
            )
        return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Vertex-based geometry mappings


def _vertex_shape_funcs(shape: Shape, xi: np.ndarray):
    xi = np.atleast_2d(xi)
    npts = xi.shape[0]
    if shape is Shape.SEG:
        n = np.stack([0.5 * (1 - xi[:, 0]), 0.5 * (1 + xi[:, 0])], axis=1)
        dn = np.broadcast_to(np.array([[[-0.5], [0.5]]]), (npts, 2, 1))
        return n, np.ascontiguousarray(dn)
    if shape is Shape.TRI:
        n = np.stack(
            [-0.5 * (xi[:, 0] + xi[:, 1]), 0.5 * (1 + xi[:, 0]),
             0.5 * (1 + xi[:, 1])],
            axis=1,
        )
        dn = np.broadcast_to(
            np.array([[[-0.5, -0.5], [0.5, 0.0], [0.0, 0.5]]]), (npts, 3, 2)
        )
        return n, np.ascontiguousarray(dn)
    ref = shape_ref_verts(shape)
    d = shape.dim
    terms = 0.5 * (1.0 + xi[:, None, :] * ref[None, :, :])  # (npts, nv, d)
    n = terms.prod(axis=2)
    dn = np.empty((npts, ref.shape[0], d))
    for j in range(d):
        others = [k for k in range(d) if k != j]
        prod = terms[:, :, others].prod(axis=2)
        dn[:, :, j] = 0.5 * ref[None, :, j] * prod
    return n, dn


def map_eval(shape: Shape, verts: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Physical coordinates of reference points, (npts, d)."""
    n, _ = _vertex_shape_funcs(shape, xi)
    return n @ verts


def map_grad(shape: Shape, verts: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Jacobian matrices F[p, i, j] = dx_i/dxi_j, (npts, d, d)."""
    _, dn = _vertex_shape_funcs(shape, xi)
    return np.einsum("pvj,vi->pij", dn, verts)


# ---------------------------------------------------------------------------
# Mesh generation


def _grid_vertices(axes: list[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def generate_box(dim: int, nx, shape: Shape, extent=None, taper: float = 0.0,
                 tag: str = "dirichlet") -> MeshTopology:
    """Structured box mesh with deterministic numbering.

    nx is the cell count per axis (int or tuple).  With shape=TRI each quad
    cell splits into two triangles along its low-low to high-high diagonal.
    taper != 0 stretches axis 0 by the factor 1 + taper*(t+1)/2 where t is
    the normalised last coordinate, turning elements into straight-sided
    trapezoids (linear geometry whose face metric has degree one).
    """
    if shape.dim != dim:
        raise ValueError(f"shape {shape.value} is not {dim}-dimensional")
    nxs = (nx,) * dim if isinstance(nx, int) else tuple(nx)
    if len(nxs) != dim or any(n < 1 for n in nxs):
        raise ValueError("need one positive cell count per axis")
    if extent is None:
        extent = ((-1.0, 1.0),) * dim
    if np.ndim(extent) == 1:
        extent = (tuple(extent),) * dim
    axes = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(extent, nxs)]
    verts = _grid_vertices(axes)
    if taper != 0.0:
        lo, hi = extent[-1]
        t = (verts[:, -1] - lo) / (hi - lo)
        verts = verts.copy()
        verts[:, 0] = verts[:, 0] * (1.0 + taper * t)

    shp = [n + 1 for n in nxs]

    def vid(*idx):
        out = 0
        for i, s in zip(idx, shp):
            out = out * s + i
        return out

    elements: list[Element] = []
    if dim == 1:
        for i in range(nxs[0]):
            elements.append(Element(Shape.SEG, (vid(i), vid(i + 1))))
    elif dim == 2:
        for i in range(nxs[0]):
            for j in range(nxs[1]):
                v00, v10 = vid(i, j), vid(i + 1, j)
                v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
                if shape is Shape.QUAD:
                    elements.append(Element(Shape.QUAD, (v00, v10, v11, v01)))
                else:
                    elements.append(Element(Shape.TRI, (v00, v10, v11)))
                    elements.append(Element(Shape.TRI, (v00, v11, v01)))
    else:
        if shape is not Shape.HEX:
            raise ValueError("3D meshes support hexahedra only")
        for i in range(nxs[0]):
            for j in range(nxs[1]):
                for k in range(nxs[2]):
                    elements.append(
                        Element(
                            Shape.HEX,
                            (
                                vid(i, j, k), vid(i + 1, j, k),
                                vid(i + 1, j + 1, k), vid(i, j + 1, k),
                                vid(i, j, k + 1), vid(i + 1, j, k + 1),
                                vid(i + 1, j + 1, k + 1), vid(i, j + 1, k + 1),
                            ),
                        )
                    )
    return _build_topology(dim, verts, elements, tag)


def _face_corner_coords(mesh_verts, elem: Element, face: Face) -> np.ndarray:
    ids = [elem.verts[v] for v in face.corner_verts]
    return mesh_verts[ids]


def _build_topology(dim, verts, elements, tag) -> MeshTopology:
    from .stdregions import faces as shape_faces

    seen: dict[frozenset, tuple[int, int]] = {}
    pairs: list[tuple[tuple[int, int], tuple[int, int]]] = []
    unmatched: dict[tuple[int, int], None] = {}
    for e, el in enumerate(elements):
        for f, face in enumerate(shape_faces(el.shape)):
            key = frozenset(el.verts[v] for v in face.corner_verts)
            if key in seen:
                pairs.append((seen.pop(key), (e, f)))
            else:
                seen[key] = (e, f)
                unmatched[(e, f)] = None
    for k in list(unmatched):
        if k not in seen.values():
            del unmatched[k]
    scale = max(np.ptp(verts, axis=0).max(), 1.0)
    interfaces: list[Interface] = []
    for left, right in pairs:
        le, lf = left
        re_, rf = right
        lface = shape_faces(elements[le].shape)[lf]
        rface = shape_faces(elements[re_].shape)[rf]
        lc = _face_corner_coords(verts, elements[le], lface)
        rc = _face_corner_coords(verts, elements[re_], rface)
        code = orient.match_orientation(lc, rc, dim - 1, 1e-10 * scale)
        interfaces.append(Interface(left, right, code))
    interfaces.sort(key=lambda i: (i.left, i.right))
    for (e, f) in sorted(seen.values()):
        interfaces.append(Interface((e, f), None, 0, tag))
    return MeshTopology(dim, verts, elements, interfaces)


def perturb_mesh(mesh: MeshTopology, amplitude: float, seed: int = 0) -> MeshTopology:
    """Displace interior vertices by a random fraction of the local spacing.

    Boundary vertices stay put, so the domain (and p_geom = 1) is preserved
    while elements become genuinely deformed.
    """
    v = mesh.vertices.copy()
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    scale = (hi - lo).max()
    on_bnd = np.zeros(len(v), dtype=bool)
    for d in range(mesh.dim):
        on_bnd |= np.abs(v[:, d] - lo[d]) < 1e-12 * scale
        on_bnd |= np.abs(v[:, d] - hi[d]) < 1e-12 * scale
    h = np.inf
    for e in range(mesh.n_elements):
        ev = mesh.element_verts(e)
        h = min(h, np.ptp(ev, axis=0).min())
    rng = np.random.default_rng(seed)
    disp = rng.uniform(-1.0, 1.0, v.shape) * amplitude * h
    v[~on_bnd] += disp[~on_bnd]
    return MeshTopology(mesh.dim, v, mesh.elements, mesh.interfaces)


# ---------------------------------------------------------------------------
# Geometric factors


@dataclass
class FaceFactors:
    normal: np.ndarray       # (d, 1) regular or (d, n) deformed
    surf_jac: np.ndarray     # (1,) or (n,)
    surf_jw: np.ndarray      # (n,) quadrature weight x surface Jacobian
    x: np.ndarray            # (d, n) physical coordinates
    area: float
    dxi_dx: np.ndarray | None = None   # (d, d, 1|n) metric at the face points


@dataclass
class ElementFactors:
    regular: bool
    J: np.ndarray            # (1,) or (n_phys,)
    dxi_dx: np.ndarray       # (d, d, 1) or (d, d, n_phys)
    jac_w: np.ndarray        # (n_phys,) weight x |J| (incl. Duffy factor)
    x: np.ndarray            # (d, n_phys)
    volume: float
    faces: list[FaceFactors] = field(default_factory=list)


@dataclass
class GeometricFactors:
    elements: list[ElementFactors]

    def __getitem__(self, e: int) -> ElementFactors:
        return self.elements[e]


def _is_const(a: np.ndarray, axis: int = 0) -> bool:
    ref = np.take(a, 0, axis=axis)
    scale = np.abs(ref).max() + 1.0
    return bool(np.abs(a - np.expand_dims(ref, axis)).max() < 1e-12 * scale)


def element_geometry(mesh: MeshTopology, e: int, exp: Expansion) -> ElementFactors:
    verts = mesh.element_verts(e)
    xi = exp.xi_phys
    x = map_eval(exp.shape, verts, xi)
    f = map_grad(exp.shape, verts, xi)
    jac = np.linalg.det(f)
    if np.any(jac <= 0.0):
        raise ValueError(f"element {e} has a non-positive Jacobian")
    inv = np.linalg.inv(f)             # inv[p, m, i] = dxi_m/dx_i
    jac_w = jac * exp.ref_weights
    regular = _is_const(f)
    ff = [face_geometry(mesh, e, exp, fid) for fid in range(len(exp.faces))]
    if regular:
        js = jac[:1].copy()
        dxidx = np.ascontiguousarray(inv[:1].transpose(1, 2, 0))
    else:
        js = jac
        dxidx = np.ascontiguousarray(inv.transpose(1, 2, 0))
    return ElementFactors(
        regular=regular,
        J=js,
        dxi_dx=dxidx,
        jac_w=jac_w,
        x=np.ascontiguousarray(x.T),
        volume=float(jac_w.sum()),
        faces=ff,
    )


def face_geometry(mesh: MeshTopology, e: int, exp: Expansion, face_id: int,
                  pts=None, weights=None, params=None) -> FaceFactors:
    """Normals, surface Jacobians and coordinates on a face grid.

    `pts` overrides the per-axis face parameter points and `weights` the
    matching flat quadrature weights (shared-trace grids); both default to
    the element's own face rule.  `params` gives the flat parameter list
    directly (orientation-mapped grids that are not tensor products).
    """
    face = exp.faces[face_id]
    verts = mesh.element_verts(e)
    if params is not None:
        params = np.atleast_2d(np.asarray(params, dtype=float))
    else:
        if pts is None:
            rules = [exp.rules[a] for a in face.run_axes]
            pts = tuple(r.points for r in rules)
            if weights is None and rules:
                weights = rules[0].weights
                for r in rules[1:]:
                    weights = np.multiply.outer(weights, r.weights).reshape(-1)
        elif isinstance(pts, np.ndarray):
            pts = (pts,)
        if pts:
            grids = np.meshgrid(*pts, indexing="ij")
            params = np.stack([g.reshape(-1) for g in grids], axis=-1)
        else:
            params = np.zeros((1, 0))
    if weights is None:
        weights = np.ones(params.shape[0])
    xi = face.param_to_ref(params)
    x = map_eval(exp.shape, verts, xi)
    d = exp.dim
    if d == 1:
        surf = np.ones(1)
        nrm = np.array([[float(face.side)]])
        f1 = map_grad(exp.shape, verts, xi)
        dxidx = np.ascontiguousarray(np.linalg.inv(f1)[:1].transpose(1, 2, 0))
        return FaceFactors(np.ascontiguousarray(nrm.T), surf, surf * weights,
                           np.ascontiguousarray(x.T), 1.0, dxidx)
    f = map_grad(exp.shape, verts, xi)
    tang = np.asarray(face.tangents)
    t_phys = np.einsum("pij,kj->pki", f, tang)   # (npts, d-1, d)
    if d == 2:
        t = t_phys[:, 0, :]
        surf = np.linalg.norm(t, axis=1)
        nrm = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        nrm = np.cross(t_phys[:, 0, :], t_phys[:, 1, :])
        surf = np.linalg.norm(nrm, axis=1)
    nrm = nrm / surf[:, None]
    # orient outward via the contravariant image F^{-T} n_ref of the
    # reference normal (the physical gradient of the face level set)
    ref_n = np.asarray(face.ref_normal)
    out_dir = np.einsum("pji,j->pi", np.linalg.inv(f), ref_n)
    sgn = np.where(np.einsum("pi,pi->p", nrm, out_dir) >= 0.0, 1.0, -1.0)
    nrm = nrm * sgn[:, None]
    jw = surf * weights
    inv = np.linalg.inv(f)
    # compactness is per factor: a planar face keeps a single normal even
    # when the in-plane metric varies (this distinction feeds the
    # point-to-point certificate's metric degree)
    sn = slice(0, 1) if _is_const(nrm) else slice(None)
    ss = slice(0, 1) if _is_const(surf) else slice(None)
    si = slice(0, 1) if _is_const(inv) else slice(None)
    return FaceFactors(
        normal=np.ascontiguousarray(nrm[sn].T),
        surf_jac=surf[ss].copy(),
        surf_jw=jw,
        x=np.ascontiguousarray(x.T),
        area=float(jw.sum()),
        dxi_dx=np.ascontiguousarray(inv[si].transpose(1, 2, 0)),
    )


def geometric_factors(mesh: MeshTopology, exps) -> GeometricFactors:
    """Factors for every element; `exps` maps element id -> Expansion."""
    out = [element_geometry(mesh, e, exps[e]) for e in range(mesh.n_elements)]
    # sanity: interior normals must oppose at matched points (checked cheaply
    # on regular faces; deformed faces are covered by the test suite)
    return GeometricFactors(out)


# ---------------------------------------------------------------------------
# Order maps


@dataclass
class OrderMap:
    """Per-element (n_modes, n_quad) assignment."""

    n_modes: np.ndarray
    n_quad: np.ndarray

    def pair(self, e: int) -> tuple[int, int]:
        return int(self.n_modes[e]), int(self.n_quad[e])

    def levels(self) -> list[tuple[int, int]]:
        return sorted(set(zip(self.n_modes.tolist(), self.n_quad.tolist())))

    def non_conforming(self, mesh: MeshTopology) -> list[int]:
        out = []
        for i, itf in mesh.interior():
            if self.pair(itf.left[0]) != self.pair(itf.right[0]):
                out.append(i)
        return out


def assign_orders(mesh: MeshTopology, base: tuple[int, int],
                  refined_region=None,
                  refined: tuple[int, int] | None = None) -> OrderMap:
    """Uniform orders, optionally bumped where the centroid predicate holds."""
    n = mesh.n_elements
    nm = np.full(n, base[0], dtype=int)
    nq = np.full(n, base[1], dtype=int)
    if refined_region is not None and refined is not None:
        for e in range(n):
            if refined_region(mesh.centroid(e)):
                nm[e], nq[e] = refined
    if np.any(nq < nm):
        raise ValueError("quadrature counts below collocation (n_quad < n_modes)")
    return OrderMap(nm, nq)


def insert_transition_layer(order_map: OrderMap, mesh: MeshTopology) -> OrderMap:
    """Give background neighbours of the refined region the refined point
    count but the background mode count.

    With background (Pb, Qb) and refined (Pr, Qr), elements in the layer
    become (Pb, Qr): their refined-side interfaces share trace points and
    their background-side interfaces only need the background rule to be
    exact for the lower-order integrand.
    """
    levels = order_map.levels()
    if len(levels) == 1:
        return OrderMap(order_map.n_modes.copy(), order_map.n_quad.copy())
    if len(levels) != 2:
        raise ValueError("transition layers support exactly two order levels")
    base, refined = levels  # sorted: base has the lower (n_modes, n_quad)
    nm = order_map.n_modes.copy()
    nq = order_map.n_quad.copy()
    for _, itf in mesh.interior():
        le, re_ = itf.left[0], itf.right[0]
        pl = order_map.pair(le)
        pr = order_map.pair(re_)
        if pl == base and pr == refined:
            nq[le] = refined[1]
        elif pr == base and pl == refined:
            nq[re_] = refined[1]
    return OrderMap(nm, nq)
