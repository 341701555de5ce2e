"""Matrix-based beamspace ESPRIT: smoothing, subspace, auto-pairing, gains.

Pipeline (one trial): frequency-domain spatial smoothing of the vectorized
estimate -> truncated SVD for the signal subspace (dense LAPACK or the
FFT/Lanczos fast path) -> per-dimension rotation factors through the lifted
selectors -> one eigendecomposition of a random beta-combination for
auto-pairing -> frequency, parameter, and gain recovery.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import channel, shift
from .kernels import InvalidInputError, eig_general, lstsq_pinv, svd_thin


class InvalidSmoothingError(ValueError):
    """Smoothing window outside 1 <= L5 <= M5."""


class PairingFailureError(RuntimeError):
    """Eigenvalues of the beta-combination stayed clustered across redraws."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CannotLiftError(ValueError):
    """Transform is row-rank deficient; the mode cannot be lifted."""


@dataclass(frozen=True)
class SmoothedMatrix:
    """Spatially smoothed stack, shape (N1 N2 N3 N4 K5, L5)."""

    values: np.ndarray
    beam_dims: tuple
    k5: int
    l5: int


@dataclass
class EspritEstimate:
    """Auto-paired frequency, parameter, and gain estimates for L paths."""

    freqs: list                 # list[AngularFreqs], index l consistent across dims
    gains: np.ndarray
    params: list                # list[PathParams]
    diagnostics: dict = field(default_factory=dict)

    @property
    def omega(self):
        return np.stack([f.omega for f in self.freqs])


def default_l5(m5):
    """Balanced smoothing window: ceil((M5 + 1) / 2)."""
    return (m5 + 2) // 2


def spatial_smooth(tensor, l5):
    """Hankel smoothing over the frequency axis (K5 = M5 + 1 - L5 windows).

    Column ell holds the subtensor of frequency taps ell .. ell + K5 - 1,
    flattened with the frequency index fastest.
    """
    tensor = np.asarray(tensor)
    m5 = tensor.shape[-1]
    if not 1 <= l5 <= m5:
        raise InvalidSmoothingError(f"L5={l5} outside [1, {m5}]")
    k5 = m5 + 1 - l5
    windows = np.lib.stride_tricks.sliding_window_view(tensor, k5, axis=-1)
    # windows: (..., L5, K5) -> rows (..., K5) fastest, columns L5
    values = np.ascontiguousarray(np.swapaxes(windows, -1, -2)).reshape(-1, l5)
    return SmoothedMatrix(values=values, beam_dims=tensor.shape[:4], k5=k5, l5=l5)


def signal_subspace(smoothed, n_paths, method="dense", fast_opts=None):
    """Orthonormal basis of the top-``n_paths`` left singular subspace.

    ``dense`` routes through LAPACK; ``fast`` through the Hankel-block
    Lanczos path. Returns (U_s, diagnostics) where diagnostics carries the
    spectral gap sigma_L / sigma_{L+1} (a warning flag when absent).
    """
    rows = int(np.prod(smoothed.beam_dims)) * smoothed.k5
    if n_paths > min(rows, smoothed.l5):
        raise InvalidInputError("more paths than the smoothed matrix can support")
    diagnostics = {}
    if method == "dense":
        res = svd_thin(smoothed.values)
        u_s = res.left[:, :n_paths]
        s = res.singular_values
    elif method == "fast":
        from . import fastsvd

        opts = fast_opts or {}
        op = opts.get("operator")
        if op is None:
            op = fastsvd.HankelBlockOperator.from_smoothed(smoothed)
        u_s, s, fast_diag = fastsvd.fast_signal_subspace(
            op, n_paths, steps=opts.get("steps"), reorth=opts.get("reorth", "full"),
            v0=opts.get("v0"), return_details=True)
        diagnostics.update(fast_diag)
    else:
        raise InvalidInputError(f"unknown subspace method {method!r}")

    if len(s) > n_paths and s[n_paths - 1] > 0:
        gap = s[n_paths - 1] / max(s[n_paths], 1e-300)
        diagnostics["subspace_gap"] = float(gap)
        diagnostics["gap_warning"] = bool(gap < 1 + 1e-12)
    return u_s, diagnostics


def gamma_n(u_s, pair, rtol=1e-12):
    """Per-dimension rotation factor (J1 U_s)^+ (J2 U_s); similar to Phi_n."""
    lhs = pair.first.apply(u_s)
    rhs = pair.second.apply(u_s)
    return lstsq_pinv(lhs, rhs, rtol=rtol)


def auto_pair(gammas, rng, beta=None, sep_tol=1e-6, max_redraws=8):
    """Joint eigenbasis of a random beta-combination; recovers paired frequencies.

    Returns (E, omega, diagnostics) where omega is (L, n_dims) with row l
    consistent across every dimension and diagnostics carries the achieved
    eigenvalue separation. Redraws beta when the combined eigenvalues
    cluster closer than ``sep_tol`` times their magnitude scale.
    """
    n_dims = len(gammas)
    n_paths = gammas[0].shape[0]
    if n_paths == 1:
        omega = np.array([[float(np.angle(g[0, 0])) for g in gammas]])
        return (np.ones((1, 1), dtype=np.complex128), omega,
                {"pairing_separation": np.inf, "beta_redraws": 0})

    attempts = 0
    seps = []
    while attempts <= max_redraws:
        b = beta if (beta is not None and attempts == 0) else rng.uniform(0.0, 1.0, n_dims)
        k = sum(bi * g for bi, g in zip(b, gammas))
        res = eig_general(k)
        lam = res.eigenvalues
        diff = np.abs(lam[:, None] - lam[None, :])
        np.fill_diagonal(diff, np.inf)
        sep = diff.min() / max(np.abs(lam).max(), 1e-300)
        seps.append(float(sep))
        if sep >= sep_tol:
            e = res.eigenvectors
            phases = np.empty((n_paths, n_dims))
            for n, g in enumerate(gammas):
                phi_n = np.linalg.solve(e, g @ e)
                phases[:, n] = np.angle(np.diagonal(phi_n))
            return e, phases, {"pairing_separation": float(sep),
                               "beta_redraws": attempts}
        attempts += 1
    raise PairingFailureError(
        f"eigenvalues stayed within {max(seps):.3e} of collision after {max_redraws} redraws",
        diagnostics={"separations": seps})


def estimate_gains(omega, transforms, h_vec, m5, rtol=1e-12):
    """Least-squares gains from the reconstructed Khatri-Rao factor matrix."""
    mats = []
    for i in range(4):
        t = channel.transform_matrix(transforms[i])
        a_n = channel.steering_matrix(t.shape[0], omega[:, i])
        mats.append(t.conj().T @ a_n)
    mats.append(channel.steering_matrix(m5, omega[:, 4]))
    b_hat = channel.khatri_rao(mats)
    s = np.linalg.svd(b_hat, compute_uv=False)
    cond = float(s[0] / max(s[-1], 1e-300))
    gains = lstsq_pinv(b_hat, h_vec, rtol=rtol)
    return gains, {"gain_matrix_condition": cond}


def hybrid_lift(tensor, n, transform, rank_rtol=1e-10):
    """Undo the mode-``n`` beam transform: mode product with pinv(T_n^H).

    Restores the element-space Vandermonde factor so plain selectors apply.
    Requires T_n full row rank (the M_n < N_n regime).
    """
    t = np.asarray(transform.t if hasattr(transform, "t") else transform,
                   dtype=np.complex128)
    s = np.linalg.svd(t, compute_uv=False)
    if t.shape[0] > t.shape[1] or s[t.shape[0] - 1] <= rank_rtol * s[0]:
        raise CannotLiftError("transform is not full row rank")
    th_pinv = np.linalg.pinv(t.conj().T)  # (M_n x N_n)
    axis = n - 1
    out = np.tensordot(th_pinv, np.asarray(tensor, dtype=np.complex128),
                       axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def element_selectors(m_n):
    """Plain maximum-overlap selectors [I, 0] and [0, I] for element space."""
    eye = np.eye(m_n, dtype=np.complex128)
    return eye[:-1, :], eye[1:, :]


def esprit_pipeline(noisy, transforms, n_paths, l5, delta_f,
                    method="dense", rng=None, beta=None, hybrid_modes=(),
                    fast_opts=None, sep_tol=1e-6):
    """Run the full matrix-based beamspace ESPRIT chain on a noisy tensor.

    Parameters
    ----------
    noisy : (N1, N2, N3, N4, M5) complex array
    transforms : 4-tuple of BeamTransform
    n_paths : assumed model order L
    l5 : smoothing window (columns)
    method : 'dense' or 'fast' signal subspace
    hybrid_modes : spatial dimensions (1-based) to lift to element space
        before smoothing; their selectors become the plain windows.
    """
    rng = np.random.default_rng() if rng is None else rng
    noisy = np.asarray(noisy, dtype=np.complex128)
    t_start = time.perf_counter()

    work = noisy
    eff_transforms = list(transforms)
    for n in hybrid_modes:
        work = hybrid_lift(work, n, transforms[n - 1])
        eff_transforms[n - 1] = None

    k5 = work.shape[-1] + 1 - l5
    if method == "fast":
        # the operator works off the raw taps; never materialize the stack
        from . import fastsvd

        opts = dict(fast_opts or {})
        opts.setdefault("operator",
                        fastsvd.HankelBlockOperator.from_tensor(work, l5))
        smoothed = SmoothedMatrix(values=None, beam_dims=work.shape[:4],
                                  k5=k5, l5=l5)
        u_s, diagnostics = signal_subspace(smoothed, n_paths, method="fast",
                                           fast_opts=opts)
    else:
        smoothed = spatial_smooth(work, l5)
        u_s, diagnostics = signal_subspace(smoothed, n_paths, method=method,
                                           fast_opts=fast_opts)

    pairs = []
    for i in range(4):
        t = eff_transforms[i]
        if t is None:
            l1, l2 = element_selectors(work.shape[i])
        else:
            l1, l2 = t.l1, t.l2
        pairs.append(shift.lifted_selectors(i + 1, work.shape[:4], k5,
                                            l1=l1, l2=l2))
    pairs.append(shift.lifted_selectors(5, work.shape[:4], k5))

    gammas = [gamma_n(u_s, p) for p in pairs]
    residual = 0.0
    for pair, gam in zip(pairs, gammas):
        lhs = pair.first.apply(u_s) @ gam
        rhs = pair.second.apply(u_s)
        residual = max(residual,
                       np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))
    diagnostics["rotation_residual"] = float(residual)

    _, omega, pair_diag = auto_pair(gammas, rng=rng, beta=beta, sep_tol=sep_tol)
    diagnostics.update(pair_diag)

    clamped_paths = []
    params = []
    for l in range(n_paths):
        om, clamped = channel.clamp_freqs(omega[l])
        omega[l] = om
        if clamped:
            clamped_paths.append(l)
        params.append(channel.from_angular(channel.AngularFreqs(om), delta_f))

    # gains always solve against the original beamspace observation
    gains, gain_diag = estimate_gains(omega, transforms, noisy.reshape(-1),
                                      noisy.shape[-1])
    diagnostics.update(gain_diag)
    diagnostics["clamped_paths"] = clamped_paths
    diagnostics["runtime_s"] = time.perf_counter() - t_start

    freqs = [channel.AngularFreqs(omega[l]) for l in range(n_paths)]
    params = [channel.PathParams(
        phi_az=p.phi_az, phi_el=p.phi_el, theta_az=p.theta_az,
        theta_el=p.theta_el, tau=p.tau, gamma=complex(gains[l]))
        for l, p in enumerate(params)]
    return EspritEstimate(freqs=freqs, gains=gains, params=params,
                          diagnostics=diagnostics)
