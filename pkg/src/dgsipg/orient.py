"""Orientation codes between the two parametrisations of a shared face.

Edges have 2 codes (forward / reversed).  Quadrilateral faces have 8: bit 2
swaps the two axes, bits 1 and 0 flip the first and second axis of the
result.  `apply_points(code, p)` maps LEFT face parameters to the RIGHT
side's parameters of the same physical point.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "n_codes",
    "apply_points",
    "inverse_code",
    "orientation_perm",
    "match_orientation",
]


def n_codes(face_dim: int) -> int:
    return {0: 1, 1: 2, 2: 8}[face_dim]


def apply_points(code: int, p: np.ndarray) -> np.ndarray:
    """Map face parameters (npts, face_dim) through an orientation code."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    d = p.shape[1]
    if d == 0:
        return p.copy()
    if d == 1:
        return -p if code == 1 else p.copy()
    out = p[:, ::-1].copy() if (code >> 2) & 1 else p.copy()
    if (code >> 1) & 1:
        out[:, 0] = -out[:, 0]
    if code & 1:
        out[:, 1] = -out[:, 1]
    return out


def inverse_code(code: int, face_dim: int) -> int:
    """Code c' with apply(c') o apply(c) = identity."""
    if face_dim == 0:
        return 0
    probe = np.array([[0.25, 0.625]])[:, :face_dim]
    fwd = apply_points(code, probe)
    for c in range(n_codes(face_dim)):
        if np.allclose(apply_points(c, fwd), probe):
            return c
    raise ValueError(f"no inverse for code {code}")  # pragma: no cover


def orientation_perm(code: int, pts_axes: tuple[np.ndarray, ...]) -> np.ndarray | None:
    """Index permutation realising the orientation on a tensor face grid.

    Returns indices `perm` with values_right_order = values_left[perm], or
    None when the mapped points do not coincide with grid points (e.g.
    non-symmetric point distributions under a flip).
    """
    if not pts_axes:
        return np.array([0])
    grids = np.meshgrid(*pts_axes, indexing="ij")
    p = np.stack([g.reshape(-1) for g in grids], axis=-1)
    q = apply_points(code, p)
    perm = np.empty(p.shape[0], dtype=int)
    for r in range(q.shape[0]):
        d = np.abs(p - q[r]).max(axis=1)
        j = int(np.argmin(d))
        if d[j] > 1e-12:
            return None
        perm[r] = j
    return perm


def match_orientation(left_corners: np.ndarray, right_corners: np.ndarray,
                      face_dim: int, tol: float) -> int:
    """Find the code mapping left corner params onto the right side's.

    Both arrays hold the physical coordinates of the face corners in each
    side's own parameter order (the Face.corner_params order).
    """
    if face_dim == 0:
        return 0
    params = _corner_params(face_dim)
    for code in range(n_codes(face_dim)):
        mapped = apply_points(code, params)
        ok = True
        for i, mp in enumerate(mapped):
            j = int(np.argmin(np.abs(params - mp).sum(axis=1)))
            if np.abs(left_corners[i] - right_corners[j]).max() > tol:
                ok = False
                break
        if ok:
            return code
    raise ValueError("faces do not match geometrically under any orientation")


def _corner_params(face_dim: int) -> np.ndarray:
    if face_dim == 1:
        return np.array([[-1.0], [1.0]])
    return np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])
