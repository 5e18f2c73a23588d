"""Matrix-free conjugate gradient and restarted GMRES, dense operator
probing and the asymmetry diagnostic.

Both solvers are unpreconditioned and work on the relative residual
||b - A x|| / ||b||.  CG verifies the true residual before declaring
convergence and reports indefinite directions or stagnation instead of
looping: on a non-symmetric system its failure is the expected outcome.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SolveReport",
    "cg",
    "gmres",
    "probe_dense",
    "asymmetry_norm",
    "DEFAULT_PROBE_LIMIT",
]

DEFAULT_PROBE_LIMIT = 20000


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    reason: str = ""

    def __str__(self) -> str:
        state = "converged" if self.converged else f"FAILED ({self.reason})"
        return f"{state} in {self.iterations} iterations, relres {self.residual:.3e}"


def cg(apply_op, b: np.ndarray, tol: float = 1e-9, maxiter: int | None = None):
    """Unpreconditioned conjugate gradient; returns (x, SolveReport)."""
    b = np.asarray(b, dtype=float)
    n = b.size
    nb = float(np.linalg.norm(b))
    x = np.zeros(n)
    if nb == 0.0:
        return x, SolveReport(True, 0, 0.0)
    if maxiter is None:
        maxiter = max(10 * n, 200)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    best = np.sqrt(rr) / nb
    stall = 0
    for it in range(1, maxiter + 1):
        ap = apply_op(p)
        pap = float(p @ ap)
        if pap <= 0.0 or not np.isfinite(pap):
            return x, SolveReport(False, it, np.sqrt(max(rr, 0.0)) / nb,
                                  "indefinite direction")
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        rel = np.sqrt(rr_new) / nb
        if rel <= tol:
            true_rel = float(np.linalg.norm(b - apply_op(x))) / nb
            if true_rel <= 10.0 * tol:
                return x, SolveReport(True, it, true_rel)
            # recurrence drifted from the true residual (non-symmetric A)
            return x, SolveReport(False, it, true_rel, "residual drift")
        if rel < 0.999 * best:
            best = rel
            stall = 0
        else:
            stall += 1
            if stall >= 250:
                return x, SolveReport(False, it, rel, "stagnation")
        beta = rr_new / rr
        rr = rr_new
        p = r + beta * p
    return x, SolveReport(False, maxiter, np.sqrt(rr) / nb, "maxiter")


def gmres(apply_op, b: np.ndarray, tol: float = 1e-9, restart: int = 50,
          maxiter: int | None = None):
    """Restarted GMRES with modified Gram-Schmidt; returns (x, SolveReport)."""
    b = np.asarray(b, dtype=float)
    n = b.size
    nb = float(np.linalg.norm(b))
    x = np.zeros(n)
    if nb == 0.0:
        return x, SolveReport(True, 0, 0.0)
    if maxiter is None:
        maxiter = max(20 * n, 400)
    restart = max(1, min(restart, n))
    total = 0
    while total < maxiter:
        r = b - apply_op(x)
        beta = float(np.linalg.norm(r))
        if beta / nb <= tol:
            return x, SolveReport(True, total, beta / nb)
        m = min(restart, maxiter - total)
        q = np.zeros((m + 1, n))
        h = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        q[0] = r / beta
        k_done = 0
        for k in range(m):
            w = apply_op(q[k])
            for i in range(k + 1):
                h[i, k] = float(w @ q[i])
                w = w - h[i, k] * q[i]
            h[k + 1, k] = float(np.linalg.norm(w))
            if h[k + 1, k] > 1e-300:
                q[k + 1] = w / h[k + 1, k]
            for i in range(k):
                t = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = t
            denom = np.hypot(h[k, k], h[k + 1, k])
            cs[k] = h[k, k] / denom
            sn[k] = h[k + 1, k] / denom
            h[k, k] = denom
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_done = k + 1
            total += 1
            if abs(g[k + 1]) / nb <= tol:
                break
        y = np.linalg.solve(h[:k_done, :k_done] + 0.0, g[:k_done]) \
            if k_done else np.zeros(0)
        x = x + q[:k_done].T @ y
        rel = float(np.linalg.norm(b - apply_op(x))) / nb
        if rel <= tol:
            return x, SolveReport(True, total, rel)
    rel = float(np.linalg.norm(b - apply_op(x))) / nb
    return x, SolveReport(False, total, rel, "maxiter")


def probe_dense(apply_op, n: int, limit: int = DEFAULT_PROBE_LIMIT) -> np.ndarray:
    """Assemble the operator column by column from unit-vector applications."""
    if n > limit:
        raise ValueError(
            f"probe size {n} exceeds the limit {limit}; use a smaller mesh"
        )
    a = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        a[:, j] = apply_op(e)
        e[j] = 0.0
    return a


def asymmetry_norm(m: np.ndarray) -> float:
    """||M - M^T||_1 / ||M||_1 with the max-absolute-column-sum norm."""
    m = np.asarray(m)
    num = np.abs(m - m.T).sum(axis=0).max()
    den = np.abs(m).sum(axis=0).max()
    return float(num / den) if den else 0.0


def block_sparsity(m: np.ndarray, offsets: np.ndarray, tol: float = 1e-12):
    """Nonzero pattern of the element blocks of a probed matrix.

    offsets are the per-element dof offsets (len n_elem + 1); returns a
    boolean (n_elem, n_elem) array marking blocks with entries above tol
    relative to the largest entry.
    """
    m = np.asarray(m)
    ne = len(offsets) - 1
    scale = np.abs(m).max()
    out = np.zeros((ne, ne), dtype=bool)
    for i in range(ne):
        for j in range(ne):
            blk = m[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]]
            out[i, j] = np.abs(blk).max() > tol * scale
    return out
