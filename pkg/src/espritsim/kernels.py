"""Dense complex linear-algebra and FFT primitives shared by all estimators.

Thin, contract-carrying wrappers around LAPACK (via numpy) and pocketfft.
Every routine validates its input, normalizes the output layout (descending
singular values, complex dtype) and converts backend failures into the
package's error types so callers can distinguish bad input from a
non-converged factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operand is empty, non-finite, or mis-shaped."""


class NumericFailureError(RuntimeError):
    """Raised when an iterative factorization fails to converge."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``A = left @ diag(singular_values) @ right.conj().T``."""

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray


@dataclass(frozen=True)
class EigResult:
    """General eigendecomposition; ``eigenvectors[:, k]`` pairs with ``eigenvalues[k]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_matrix(a, name="matrix"):
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be 2-D and nonempty, got shape {a.shape}")
    if not np.all(np.isfinite(a.real)) or not np.all(np.isfinite(a.imag if np.iscomplexobj(a) else a.real)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a.astype(np.complex128, copy=False)


def svd_thin(a):
    """Thin SVD with min(m, n) triplets and descending singular values.

    Parameters
    ----------
    a : (m, n) array_like
        Finite complex matrix.

    Returns
    -------
    SvdResult
        ``left`` is (m, k), ``right`` is (n, k), k = min(m, n);
        reconstruction holds to ~1e-10 * ||a||_F.
    """
    a = _as_matrix(a)
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"SVD did not converge: {exc}") from exc
    return SvdResult(left=u, singular_values=s, right=vh.conj().T)


def eig_general(a):
    """Eigendecomposition of a general square complex matrix (no ordering)."""
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"eig_general needs a square matrix, got {a.shape}")
    try:
        w, v = np.linalg.eig(a)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"eigendecomposition did not converge: {exc}") from exc
    return EigResult(eigenvalues=w, eigenvectors=v)


def pinv(a, rtol=1e-12):
    """Moore-Penrose pseudoinverse with singular values below ``rtol * s_max`` truncated.

    An all-zero matrix maps to the all-zero transpose-shaped matrix.
    """
    a = _as_matrix(a)
    res = svd_thin(a)
    s = res.singular_values
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]), dtype=np.complex128)
    keep = s > rtol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (res.right * inv_s) @ res.left.conj().T


def lstsq_pinv(a, b, rtol=1e-12):
    """Minimum-norm least-squares solve ``pinv(a) @ b`` without forming the pseudoinverse."""
    a = _as_matrix(a, "lhs")
    b = np.asarray(b, dtype=np.complex128)
    res = svd_thin(a)
    s = res.singular_values
    if s.size == 0 or s[0] == 0.0:
        shape = (a.shape[1],) if b.ndim == 1 else (a.shape[1], b.shape[1])
        return np.zeros(shape, dtype=np.complex128)
    keep = s > rtol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    proj = res.left.conj().T @ b
    if b.ndim == 1:
        return res.right @ (inv_s * proj)
    return res.right @ (inv_s[:, None] * proj)


def fft_convolve(a, b):
    """Full linear convolution of two complex vectors via zero-padded FFT.

    Output length is ``len(a) + len(b) - 1``; matches the direct O(n^2)
    convolution to ~1e-12 relative.
    """
    a = np.asarray(a, dtype=np.complex128).ravel()
    b = np.asarray(b, dtype=np.complex128).ravel()
    if a.size < 1 or b.size < 1:
        raise InvalidInputError("fft_convolve needs nonempty vectors")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("fft_convolve operands must be finite")
    n_out = a.size + b.size - 1
    nfft = _next_pow2(n_out)
    out = np.fft.ifft(np.fft.fft(a, nfft) * np.fft.fft(b, nfft))[:n_out]
    return out


def _next_pow2(n):
    return 1 << max(int(n) - 1, 0).bit_length()
