"""Complex Hermitian linear-algebra kernels shared by all beamformers.

Matrices here are small (number of microphones, or microphones times
prediction taps), so the solvers favour robustness and determinism over
asymptotic speed.
"""

import numpy as np
import scipy.linalg

__all__ = [
    "SingularMatrixError",
    "EigenConvergenceError",
    "hermitian_solve",
    "max_generalized_eigvec",
]


class SingularMatrixError(np.linalg.LinAlgError):
    """Coefficient matrix numerically singular even after diagonal loading."""


class EigenConvergenceError(RuntimeError):
    """Power iteration did not reach tolerance within the iteration cap."""


def _loaded(a, ridge):
    """Apply scale-invariant diagonal loading ``a + ridge*trace(a)/dim*I``."""
    if ridge < 0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    if ridge == 0:
        return a
    dim = a.shape[0]
    return a + (ridge * np.trace(a).real / dim) * np.eye(dim, dtype=a.dtype)


def hermitian_solve(a, b, ridge=0.0):
    """Solve ``(A + ridge*trace(A)/dim * I) X = B`` for Hermitian A.

    Parameters
    ----------
    a : (n, n) complex ndarray, Hermitian
    b : (n,) or (n, m) complex ndarray
    ridge : float
        Diagonal loading relative to the mean diagonal magnitude, so the
        regularization is invariant to a rescaling of ``a``.

    Raises
    ------
    SingularMatrixError
        If the loaded matrix is still numerically singular. No further
        regularization is attempted silently.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    a = _loaded(a, ridge)
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            f"{a.shape[0]}x{a.shape[1]} Hermitian system is singular "
            f"(ridge={ridge})"
        ) from exc


def max_generalized_eigvec(a, b, tol=1e-10, max_iter=200):
    """Dominant eigenvector of ``B^{-1} A`` for Hermitian A and PD B.

    Runs power iteration on the whitened matrix ``L^{-1} A L^{-H}`` where
    ``B = L L^H``, with a ``trace/dim`` spectral shift so that for positive
    semidefinite ``a`` the iteration converges to the eigenvalue of largest
    (real) value. The starting vector is the first canonical basis vector,
    which makes repeated calls on identical inputs bit-identical.

    Returns
    -------
    v : (n,) complex ndarray
        Unit-norm eigenvector, phase-fixed so its first nonzero entry is
        real positive.
    value : float
        Rayleigh quotient ``(v^H A v) / (v^H B v)``.

    Raises
    ------
    np.linalg.LinAlgError
        If ``b`` is not positive-definite (Cholesky failure).
    EigenConvergenceError
        If the iterate still moves by more than ``tol`` after ``max_iter``
        iterations.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"shape mismatch: a {a.shape}, b {b.shape}")
    n = a.shape[0]
    chol = np.linalg.cholesky(b)
    inv_chol = scipy.linalg.solve_triangular(
        chol, np.eye(n, dtype=complex), lower=True
    )
    whitened = inv_chol @ a @ inv_chol.conj().T
    whitened = 0.5 * (whitened + whitened.conj().T)

    u = np.zeros(n, dtype=complex)
    u[0] = 1.0
    if not np.any(whitened):
        value = 0.0
        converged = True
    else:
        # Shift keeps the dominant-magnitude eigenvalue equal to the largest
        # signed eigenvalue for PSD input without changing eigenvectors.
        shift = float(np.trace(whitened).real) / n
        shifted = whitened + shift * np.eye(n)
        converged = False
        for _ in range(max_iter):
            w = shifted @ u
            norm = np.linalg.norm(w)
            if norm == 0.0:
                # u is in the nullspace of the shifted matrix: accept it.
                converged = True
                break
            w /= norm
            overlap = np.vdot(u, w)
            if abs(overlap) > 0:
                w *= overlap.conjugate() / abs(overlap)
            delta = np.linalg.norm(w - u)
            u = w
            if delta <= tol:
                converged = True
                break
            # Square the (renormalized) iteration matrix so the next step
            # applies a doubled power: the eigenvalue gap amplifies
            # quadratically per iteration and even near-degenerate spectra
            # settle far inside the iteration cap. Frobenius renormalization
            # keeps the dominant eigenvalue in [1/sqrt(n), 1], so repeated
            # squaring neither overflows nor underflows.
            shifted = shifted / np.linalg.norm(shifted)
            shifted = shifted @ shifted
            shifted = 0.5 * (shifted + shifted.conj().T)
        value = float(np.vdot(u, whitened @ u).real)
    if not converged:
        raise EigenConvergenceError(
            f"power iteration did not converge within {max_iter} iterations "
            f"(tol={tol}, dim={n})"
        )

    v = scipy.linalg.solve_triangular(chol.conj().T, u, lower=False)
    v /= np.linalg.norm(v)
    # Deterministic phase: first entry that is not negligible made real positive.
    mags = np.abs(v)
    idx = int(np.argmax(mags > 1e-12 * mags.max()))
    phase = v[idx] / abs(v[idx])
    v = v * phase.conjugate()
    return v, value
