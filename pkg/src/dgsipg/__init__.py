"""Matrix-free discontinuous Galerkin spectral element library.

Discretises the Helmholtz equation with the symmetric interior penalty
method on unstructured meshes of mixed shapes and mixed polynomial orders,
with both shared-trace and point-to-point interface coupling.
"""

from .polylib import (
    Basis1D,
    BasisKind,
    QuadKind,
    QuadRule,
    basis_1d,
    diff_matrix,
    jacobi_eval,
    lagrange_interp_matrix,
    quad_rule,
)
from .stdregions import (
    Expansion,
    Shape,
    bwd_trans,
    boundary_bwd_trans,
    costs,
    deinterleave,
    duffy_collapse,
    duffy_expand,
    expansion,
    face_eval,
    face_iproduct,
    face_values_from_phys,
    interleave,
    iproduct,
    iproduct_deriv,
    phys_deriv,
)

__all__ = [
    "Basis1D",
    "BasisKind",
    "QuadKind",
    "QuadRule",
    "Shape",
    "Expansion",
    "basis_1d",
    "bwd_trans",
    "boundary_bwd_trans",
    "costs",
    "deinterleave",
    "diff_matrix",
    "duffy_collapse",
    "duffy_expand",
    "expansion",
    "face_eval",
    "face_iproduct",
    "face_values_from_phys",
    "interleave",
    "iproduct",
    "iproduct_deriv",
    "jacobi_eval",
    "lagrange_interp_matrix",
    "phys_deriv",
    "quad_rule",
]

__version__ = "0.1.0"
