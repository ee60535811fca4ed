"""Dense linear-algebra kernels: thin SVD and Frobenius-energy rank selection.

Matrices are float64 numpy arrays with row-major semantics. Gradient sets are
stacked columns-as-gradients (w x n), so the SVD here is tuned for tall thin
inputs: it eigendecomposes the small-side Gram matrix with cyclic Jacobi
sweeps and recovers the long-side singular vectors by one matrix product,
O(w * n^2) instead of O(w^2 * n).

All functions are pure; identical inputs give bit-identical outputs on one
platform (singular-vector signs are canonicalized).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DegenerateInputError, ValidationError

# Singular values below SIGMA_FLOOR * sigma_max are treated as exact zeros.
SIGMA_FLOOR = 1e-12

JACOBI_MAX_SWEEPS = 100
# Off-diagonal Frobenius norm target, relative to the input's norm so that
# termination is scale-invariant.
JACOBI_TOL = 1e-14


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValidationError(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Validate and return `a` as a finite 1-D float64 array."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} contains non-finite entries")
    return v


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD of a w x n matrix: u (w x k), sigma (k, descending), v (n x k).

    k = min(w, n); u @ diag(sigma) @ v.T reconstructs the input. Column signs
    are canonicalized so the first nonzero entry of each column of u is
    nonnegative.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def matvec(a, x) -> np.ndarray:
    a = as_matrix(a, "a")
    x = as_vector(x, "x")
    if a.shape[1] != x.shape[0]:
        raise ValidationError(f"matvec dimension mismatch: {a.shape} x {x.shape}")
    return a @ x


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def frobenius_norm_sq(a) -> float:
    """Sum of squared entries; equals the sum of squared singular values."""
    m = as_matrix(a)
    return float(np.sum(m * m))


def _offdiag_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def _jacobi_eigh(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted. Terminates when
    the off-diagonal Frobenius norm drops below JACOBI_TOL relative to the
    input norm; raises after JACOBI_MAX_SWEEPS sweeps without convergence.
    """
    n = s.shape[0]
    a = s.copy()
    vecs = np.eye(n)
    if n == 1:
        return np.array([a[0, 0]]), vecs
    scale = max(float(np.sqrt(np.sum(s * s))), 1.0)
    tol = JACOBI_TOL * scale
    # Rotations smaller than this cannot move the off-diagonal norm above tol.
    skip = tol / (n * n)

    converged = False
    for _ in range(JACOBI_MAX_SWEEPS):
        if _offdiag_norm(a) <= tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                # Golub-Van Loan symmetric Schur rotation zeroing a[p, q].
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c

                app, aqq = a[p, p], a[q, q]
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                new_p = c * row_p - sn * row_q
                new_q = sn * row_p + c * row_q
                a[p, :] = new_p
                a[q, :] = new_q
                a[:, p] = new_p
                a[:, q] = new_q
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0

                col_p = vecs[:, p].copy()
                col_q = vecs[:, q].copy()
                vecs[:, p] = c * col_p - sn * col_q
                vecs[:, q] = sn * col_p + c * col_q
    if not converged and _offdiag_norm(a) > tol:
        raise ConvergenceError(
            "Jacobi eigensolver did not converge", residual=_offdiag_norm(a)
        )
    return np.diag(a).copy(), vecs


def _gram_schmidt_polish(u: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt with reorthogonalization over columns, in order.

    Leading (dominant-sigma) columns are already near-orthonormal and barely
    move; trailing near-floor columns get cleaned up, which costs only
    O(sigma_tail) reconstruction error. The second projection pass removes
    the cancellation noise left when a column is nearly dependent on its
    predecessors; a column that cancels exactly is replaced by a completion
    direction from the standard basis.
    """
    out = u.copy()
    dim = out.shape[0]
    for j in range(out.shape[1]):
        for _ in range(2):
            for i in range(j):
                out[:, j] -= np.dot(out[:, i], out[:, j]) * out[:, i]
        nrm = float(np.linalg.norm(out[:, j]))
        # residuals below the double-precision dust floor are numerically
        # dependent columns; normalizing them would amplify rounding noise
        if nrm > 1e-8:
            out[:, j] /= nrm
            continue
        for axis in range(dim):
            cand = np.zeros(dim)
            cand[axis] = 1.0
            for _ in range(2):
                for i in range(j):
                    cand -= np.dot(out[:, i], cand) * out[:, i]
            cnrm = float(np.linalg.norm(cand))
            if cnrm > 1e-8:
                out[:, j] = cand / cnrm
                break
    return out


def _complete_orthonormal(u: np.ndarray, n_missing: int, dim: int) -> np.ndarray:
    """Append n_missing orthonormal columns built deterministically from
    standard basis vectors via Gram-Schmidt."""
    if n_missing == 0:
        return u
    cols = [u[:, j] for j in range(u.shape[1])]
    added = []
    for i in range(dim):
        if len(added) == n_missing:
            break
        cand = np.zeros(dim)
        cand[i] = 1.0
        for _ in range(2):
            for c in cols:
                cand -= np.dot(c, cand) * c
        nrm = float(np.linalg.norm(cand))
        if nrm > 1e-8:
            cand /= nrm
            cols.append(cand)
            added.append(cand)
    if len(added) < n_missing:
        raise ConvergenceError("orthonormal completion failed", residual=0.0)
    return np.column_stack([u] + added)


def _canonicalize_signs(u: np.ndarray, v: np.ndarray, sigma: np.ndarray) -> None:
    """Flip column signs in place so the first nonzero entry of each u column
    is nonnegative. For sigma > 0 the paired v column flips with it."""
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0.0:
            u[:, j] = -col
            if sigma[j] > 0.0:
                v[:, j] = -v[:, j]
        if sigma[j] == 0.0:
            # Unpaired v column: canonicalize independently.
            vcol = v[:, j]
            nzv = np.nonzero(vcol)[0]
            if nzv.size and vcol[nzv[0]] < 0.0:
                v[:, j] = -vcol


def svd(g) -> SvdResult:
    """Thin SVD via Jacobi eigendecomposition of the smaller Gram matrix.

    For w >= n: eigendecompose G^T G (n x n), take v and sigma = sqrt(eig),
    recover u = G v / sigma. Mirror construction when w < n. Columns whose
    sigma falls below SIGMA_FLOOR * sigma_max are zeroed and their long-side
    vectors completed orthonormally from the standard basis.
    """
    g = as_matrix(g, "g")
    w, n = g.shape
    tall = w >= n
    long_dim = w if tall else n
    gram = g.T @ g if tall else g @ g.T
    eigvals, eigvecs = _jacobi_eigh(gram)
    order = np.argsort(-eigvals, kind="stable")

    k = min(w, n)
    small = eigvecs[:, order][:, :k]  # Gram eigenvectors, small side
    # Re-estimate singular values as ||G v|| rather than sqrt(eig): for
    # eigenpairs whose eigenvalue is dominated by Jacobi rounding noise this
    # recovers the true (near-zero) magnitude instead of sqrt(noise).
    mapped = g @ small if tall else g.T @ small
    sigma = np.linalg.norm(mapped, axis=0)
    resort = np.argsort(-sigma, kind="stable")
    sigma = sigma[resort]
    small = small[:, resort]
    mapped = mapped[:, resort]
    floor = SIGMA_FLOOR * (sigma[0] if sigma.size else 0.0)
    sigma = np.where(sigma > floor, sigma, 0.0)

    pos = sigma > 0.0
    n_pos = int(np.count_nonzero(pos))
    if n_pos:
        long_pos = _gram_schmidt_polish(mapped[:, pos] / sigma[pos])
    else:
        long_pos = np.zeros((long_dim, 0))
    long = _complete_orthonormal(long_pos, k - n_pos, long_dim)

    u, v = (long, small) if tall else (small, long)
    u = u.copy()
    v = v.copy()
    _canonicalize_signs(u, v, sigma)
    return SvdResult(u=u, sigma=sigma, v=v)


def select_rank(sigma, tau: float) -> int:
    """Smallest r with sum(sigma[:r]**2) >= tau * sum(sigma**2).

    The rank-r truncation of a matrix has squared Frobenius norm equal to the
    partial sum of sigma^2, so this is the energy-retention criterion.
    """
    s = as_vector(sigma, "sigma")
    if not (0.0 < tau <= 1.0):
        raise ValidationError(f"tau must be in (0, 1], got {tau}")
    if np.any(s < 0.0):
        raise ValidationError("sigma must be nonnegative")
    if np.any(np.diff(s) > 0.0):
        raise ValidationError("sigma must be sorted descending")
    energy = np.cumsum(s * s)
    total = energy[-1]
    if total == 0.0:
        raise DegenerateInputError("all-zero sigma: no energy to retain")
    r = int(np.searchsorted(energy, tau * total, side="left")) + 1
    return min(r, s.shape[0])
