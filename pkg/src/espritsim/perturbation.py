"""Closed-form first-order perturbation of the matrix-ESPRIT estimates.

Everything is linearized in the vectorized observation error dh:

* per-(path, dimension) sensitivity rows xi / upsilon such that
  dPhi = xi^H dh / gamma and domega = Im(upsilon^H dh);
* per-path kappa vectors mapping dh to channel-parameter errors;
* the gain sensitivity pair (B^+, Upsilon_n) and its real stacking Pi;
* the 3 x J position sensitivity Psi through the localization geometry.

With dh circular Gaussian of per-entry variance N0 / (N_P E_s) every RMSE
is sqrt(N0 ||.||^2 / (2 N_P E_s)).

Sign note: the elevation and delay maps enter the angular frequencies with a
negative derivative (w2 = pi cos el, w5 = -2 pi df tau), so kappa_2, kappa_4
and kappa_5 carry a minus sign relative to upsilon; the azimuth rows already
absorb it through the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import channel, shift, slac
from .channel import SPEED_OF_LIGHT
from .kernels import InvalidInputError, lstsq_pinv, pinv


class IllPosedScenarioError(ValueError):
    """The noiseless factorization loses rank; sensitivities are undefined."""


class SingularParameterizationError(ValueError):
    """cos(az) or sin(el) vanishes for some path; the angle map is singular."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


@dataclass
class PerturbationKit:
    """Sensitivity vectors for one (paths, transforms, L5) configuration."""

    paths: list
    transforms: tuple
    scenario: object
    l5: int
    k5: int
    omega: np.ndarray            # (L, 5)
    phi: np.ndarray              # (L, 5) unit-circle rotations e^{j omega}
    gains: np.ndarray            # (L,)
    xi: np.ndarray               # (L, 5, J)
    upsilon: np.ndarray          # (L, 5, J)
    kappa: np.ndarray | None = None        # (L, 5, J)
    upsilon_gain: np.ndarray | None = None  # (5, L, L) Upsilon_n
    b_pinv: np.ndarray | None = None        # (L, J)
    pi: np.ndarray | None = None            # (L, 2, 2J)
    psi: np.ndarray | None = None           # (3, J)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return len(self.paths)

    @property
    def j_total(self):
        return self.xi.shape[-1]


def _blockwise_convolve(vec_blocks, kernel, m5):
    """Convolve each K5 block with the L5 kernel; returns (B, M5)."""
    b, k5 = vec_blocks.shape
    nfft = 1 << (m5 - 1).bit_length()
    out = np.fft.ifft(np.fft.fft(vec_blocks, nfft, axis=1)
                      * np.fft.fft(kernel, nfft)[None, :], axis=1)
    return out[:, :m5]


def build_xi_upsilon(paths, transforms, scenario, l5):
    """Frequency-error sensitivities xi and upsilon for every (path, dim).

    Built from the noiseless factorization H = P Diag(gamma) G^T: the
    lambda row lives on the smoothed stack, chi on the smoothing window, and
    their blockwise convolution lifts the pair onto the full observation.
    """
    m5 = scenario.m[4]
    k5 = m5 + 1 - l5
    gains = np.array([p.gamma for p in paths], dtype=np.complex128)
    if np.any(gains == 0):
        raise InvalidInputError("perturbation needs nonzero path gains")
    omega = np.stack([channel.to_angular(p, scenario.delta_f).omega for p in paths])
    phi = np.exp(1j * omega)
    n_paths = len(paths)

    factors = channel.beamspace_factors(paths, transforms, scenario)
    p_mat = channel.khatri_rao(factors[:4] + [channel.steering_matrix(k5, omega[:, 4])])
    g_mat = channel.steering_matrix(l5, omega[:, 4])

    sel = shift.selectors_for_transforms(transforms, k5)
    # chi_l^* is the l-th column of (G^T)^+
    chi = pinv(g_mat.T).conj()                      # (L5, L): column l = chi_l

    beam_dims = tuple(t.n for t in transforms)
    n_blocks = int(np.prod(beam_dims))
    j_total = n_blocks * m5
    xi = np.empty((n_paths, 5, j_total), dtype=np.complex128)
    upsilon = np.empty_like(xi)

    for n in range(5):
        pair = sel[n]
        j1p = pair.first.apply(p_mat)
        s = np.linalg.svd(j1p, compute_uv=False)
        if s[-1] <= 1e-12 * s[0]:
            raise IllPosedScenarioError(f"J1 P rank deficient in dimension {n + 1}")
        j1p_pinv = pinv(j1p)                        # (L, rows)
        for l in range(n_paths):
            # lambda^H = u^T (J2 - Phi J1) with u^T the l-th pinv row,
            # so lambda = (J2 - Phi J1)^H u^*
            row = j1p_pinv[l].conj()
            lam = pair.second.apply_adjoint(row) \
                - np.conj(phi[l, n]) * pair.first.apply_adjoint(row)
            lam_blocks = lam.reshape(n_blocks, k5)
            xi_ln = _blockwise_convolve(lam_blocks, chi[:, l], m5).reshape(-1)
            xi[l, n] = xi_ln
            upsilon[l, n] = phi[l, n] * xi_ln / np.conj(gains[l])

    return PerturbationKit(paths=list(paths), transforms=tuple(transforms),
                           scenario=scenario, l5=l5, k5=k5, omega=omega,
                           phi=phi, gains=gains, xi=xi, upsilon=upsilon)


def build_kappa(kit, angle_tol=1e-9):
    """Channel-parameter sensitivities kappa and the gain pair (Upsilon, Pi)."""
    scen = kit.scenario
    n_paths = kit.n_paths
    j_total = kit.j_total
    kappa = np.empty((n_paths, 5, j_total), dtype=np.complex128)

    for l, p in enumerate(kit.paths):
        sp_el, cp_el = np.sin(p.phi_el), np.cos(p.phi_el)
        st_el, ct_el = np.sin(p.theta_el), np.cos(p.theta_el)
        cp_az, sp_az = np.cos(p.phi_az), np.sin(p.phi_az)
        ct_az, st_az = np.cos(p.theta_az), np.sin(p.theta_az)
        if abs(cp_az) < angle_tol or abs(ct_az) < angle_tol:
            raise SingularParameterizationError(
                f"cos(az) ~ 0 on path {l}: azimuth sensitivity diverges", path=l)
        if abs(sp_el) < angle_tol or abs(st_el) < angle_tol:
            raise SingularParameterizationError(
                f"sin(el) ~ 0 on path {l}", path=l)
        u = kit.upsilon[l]
        kappa[l, 0] = u[0] / (np.pi * cp_az * sp_el) \
            + sp_az * cp_el * u[1] / (np.pi * cp_az * sp_el ** 2)
        kappa[l, 1] = -u[1] / (np.pi * sp_el)
        kappa[l, 2] = u[2] / (np.pi * ct_az * st_el) \
            + st_az * ct_el * u[3] / (np.pi * ct_az * st_el ** 2)
        kappa[l, 3] = -u[3] / (np.pi * st_el)
        kappa[l, 4] = -u[4] / (2 * np.pi * scen.delta_f)

    # gain sensitivities: B = B_1 o..o B_4 o A_5^{M5}
    factors = channel.beamspace_factors(kit.paths, kit.transforms, scen)
    b_mat = channel.khatri_rao(factors)
    b_pinv = pinv(b_mat)                             # (L, J)
    upsilon_gain = np.empty((5, n_paths, n_paths), dtype=np.complex128)
    for n in range(5):
        if n < 4:
            t = kit.transforms[n].t
            m_n = t.shape[0]
            a_n = channel.steering_matrix(m_n, kit.omega[:, n])
            deriv = t.conj().T @ (1j * np.arange(m_n)[:, None] * a_n)
        else:
            m5 = scen.m[4]
            a_5 = channel.steering_matrix(m5, kit.omega[:, 4])
            deriv = 1j * np.arange(m5)[:, None] * a_5
        b_breve = channel.khatri_rao([deriv if i == n else factors[i]
                                      for i in range(5)])
        upsilon_gain[n] = (b_pinv @ b_breve) * kit.gains[None, :]

    v_stacks = [kit.upsilon[:, n, :].T for n in range(5)]  # each (J, L)
    pi = np.empty((n_paths, 2, 2 * j_total))
    for l in range(n_paths):
        row = b_pinv[l]
        pi_l = np.block([[row.real[None, :], -row.imag[None, :]],
                         [row.imag[None, :], row.real[None, :]]])
        for n in range(5):
            coeff = upsilon_gain[n][l]               # (L,)
            vh = v_stacks[n].conj().T                # (L, J)
            right = np.concatenate([vh.imag, vh.real], axis=1)
            pi_l -= np.vstack([coeff.real, coeff.imag]) @ right
        pi[l] = pi_l

    kit.kappa = kappa
    kit.upsilon_gain = upsilon_gain
    kit.b_pinv = b_pinv
    kit.pi = pi
    return kit


PARAM_KEYS = ("rmse_phi_az", "rmse_phi_el", "rmse_theta_az", "rmse_theta_el",
              "rmse_tau")


def analytic_param_rmse(kit, n0, n_p=None, e_s=None):
    """Per-path closed-form RMSE of angles (rad), delay (s), and gain.

    Each is sqrt(N0 ||kappa||^2 / (2 N_P E_s)); the gain uses ||Pi||_F.
    """
    if kit.kappa is None:
        raise InvalidInputError("call build_kappa first")
    n_p = kit.scenario.n_p if n_p is None else n_p
    e_s = kit.scenario.e_s if e_s is None else e_s
    scale = n0 / (2 * n_p * e_s)
    out = []
    for l in range(kit.n_paths):
        row = {key: float(np.sqrt(scale) * np.linalg.norm(kit.kappa[l, i]))
               for i, key in enumerate(PARAM_KEYS)}
        row["rmse_gamma"] = float(np.sqrt(scale) * np.linalg.norm(kit.pi[l]))
        out.append(row)
    return out


def _rotation_jacobian(az, el):
    """d f / d(az, el) for f = [cos az sin el, sin az sin el, cos el]."""
    return np.array([
        [-np.sin(az) * np.sin(el), np.cos(az) * np.cos(el)],
        [np.cos(az) * np.sin(el), np.sin(az) * np.cos(el)],
        [0.0, -np.sin(el)],
    ])


def build_psi(kit, p_t, p_r, weights=None, tx_axis_sign=1.0, rx_axis_sign=1.0,
              mu_rtol=1e-9):
    """Position sensitivity Psi (3 x J): dp = Im(Psi dh).

    Uses the same localization geometry as the estimator. A direct path
    (mu = 0) contributes the identity constraint, so its projector
    derivative vanishes and only the delta term survives.
    """
    if kit.kappa is None:
        raise InvalidInputError("call build_kappa first")
    p_t = np.asarray(p_t, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    if weights is None:
        weights = np.ones(kit.n_paths)
    geos = slac.localization_geometry(kit.paths, p_t, weights,
                                      tx_axis_sign, rx_axis_sign, mu_rtol)
    c_sum = sum(g.c_mat for g in geos)
    evals = np.linalg.eigvalsh(c_sum)
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        raise slac.DegenerateLocalizationError("constraint matrix is singular")
    c_inv = np.linalg.inv(c_sum)

    mirror_t = np.diag([tx_axis_sign, 1.0, 1.0])
    mirror_r = np.diag([rx_axis_sign, 1.0, 1.0])
    psi = np.zeros((3, kit.j_total), dtype=np.complex128)
    for l, (p, g, w) in enumerate(zip(kit.paths, geos, weights)):
        ct = SPEED_OF_LIGHT * p.tau
        omega_t = mirror_t @ _rotation_jacobian(p.phi_az, p.phi_el)
        omega_r = mirror_r @ _rotation_jacobian(p.theta_az, p.theta_el)
        d_breve = -SPEED_OF_LIGHT * c_inv @ g.c_mat @ np.column_stack(
            [p.tau * omega_r, g.f_r])
        psi += d_breve @ kit.kappa[l, 2:5].conj()
        if g.direct:
            continue
        mu, delta = g.mu, g.delta
        mu2 = mu @ mu
        proj = mu @ (delta - p_r)
        c_breve = w * (2 * proj * np.outer(mu, mu) / mu2 ** 2
                       - (proj * np.eye(3) + np.outer(mu, delta - p_r)) / mu2)
        e_breve = SPEED_OF_LIGHT * c_inv @ c_breve @ np.column_stack(
            [p.tau * omega_t, p.tau * omega_r, g.f_t + g.f_r])
        psi += e_breve @ kit.kappa[l].conj()
    kit.psi = psi
    return kit


def build_psi_scenario(kit, weights=None, mu_rtol=1e-9):
    """``build_psi`` with the kit's scenario geometry and frame signs."""
    scen = kit.scenario
    tx_sign, rx_sign = channel.array_axis_signs(scen)
    if weights is None:
        weights = slac.path_weights(kit.paths, scen.weights)
    return build_psi(kit, scen.p_t, scen.p_r, weights, tx_sign, rx_sign, mu_rtol)


def analytic_pos_rmse(kit, n0, n_p=None, e_s=None):
    """Closed-form position RMSE sqrt(N0 ||Psi||_F^2 / (2 N_P E_s)) in meters."""
    if kit.psi is None:
        raise InvalidInputError("call build_psi first")
    n_p = kit.scenario.n_p if n_p is None else n_p
    e_s = kit.scenario.e_s if e_s is None else e_s
    return float(np.sqrt(n0 / (2 * n_p * e_s)) * np.linalg.norm(kit.psi))


def build_kit(paths, transforms, scenario, l5, with_position=True):
    """Convenience: xi/upsilon -> kappa -> (optionally) psi in one call."""
    kit = build_xi_upsilon(paths, transforms, scenario, l5)
    build_kappa(kit)
    if with_position:
        build_psi_scenario(kit)
    return kit
