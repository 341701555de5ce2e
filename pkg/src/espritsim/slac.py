"""Localization from channel parameters and effective achievable rate.

The weighted least-squares position fix intersects one line constraint per
path: delta_l = p_T - c tau f_R is a point on the path's locus and
mu_l = c tau (f_T + f_R) the unconstrained direction along it. A direct
path has f_T = -f_R globally, so mu vanishes and the constraint is the full
3-D point delta_l itself; such paths contribute the identity instead of the
projector (the projector form is 0/0 there).

Direction vectors are produced from array-frame angles through the known
per-side frame signs (see channel.array_axis_signs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel
from .channel import SPEED_OF_LIGHT, direction_from_angles
from .kernels import InvalidInputError


class DegenerateLocalizationError(ValueError):
    """The weighted constraint matrix is singular (unlocatable geometry)."""


@dataclass(frozen=True)
class PathGeometry:
    """Per-path localization quantities evaluated at given parameters."""

    f_t: np.ndarray
    f_r: np.ndarray
    mu: np.ndarray
    delta: np.ndarray
    c_mat: np.ndarray
    direct: bool            # mu ~ 0: full 3-D constraint


@dataclass(frozen=True)
class LocalizationResult:
    p_hat: np.ndarray
    per_path: tuple
    condition: float


def path_weights(params, kind="uniform"):
    """Localization weights iota_l: uniform, or proportional to |gamma|^2."""
    if kind == "uniform":
        return np.ones(len(params))
    if kind == "gain":
        return np.array([abs(p.gamma) ** 2 if p.gamma is not None else 1.0
                         for p in params])
    raise InvalidInputError(f"unknown weight kind {kind!r}")


def localization_geometry(params, p_t, weights=None, tx_axis_sign=1.0,
                          rx_axis_sign=1.0, mu_rtol=1e-9):
    """Per-path (f_T, f_R, mu, delta, C_l) at the given channel parameters."""
    p_t = np.asarray(p_t, dtype=float)
    if weights is None:
        weights = np.ones(len(params))
    weights = np.asarray(weights, dtype=float)
    out = []
    for w, p in zip(weights, params):
        f_t = direction_from_angles(p.phi_az, p.phi_el, tx_axis_sign)
        f_r = direction_from_angles(p.theta_az, p.theta_el, rx_axis_sign)
        ct = SPEED_OF_LIGHT * p.tau
        mu = ct * (f_t + f_r)
        delta = p_t - ct * f_r
        direct = np.linalg.norm(mu) <= mu_rtol * max(ct, 1e-300)
        if direct:
            c_mat = w * np.eye(3)
        else:
            c_mat = w * (np.eye(3) - np.outer(mu, mu) / (mu @ mu))
        out.append(PathGeometry(f_t=f_t, f_r=f_r, mu=mu, delta=delta,
                                c_mat=c_mat, direct=direct))
    return out


def localize(params, p_t, weights=None, tx_axis_sign=1.0, rx_axis_sign=1.0,
             mu_rtol=1e-9):
    """Weighted least-squares position fix from per-path (angles, delay).

    Exact on exact inputs for any nondegenerate geometry; invariant to a
    uniform scaling of the weights. Raises DegenerateLocalizationError when
    the summed constraint matrix is singular (e.g. all paths collinear).
    """
    if not params:
        raise InvalidInputError("need at least one path")
    geos = localization_geometry(params, p_t, weights, tx_axis_sign,
                                 rx_axis_sign, mu_rtol)
    c_sum = sum(g.c_mat for g in geos)
    rhs = sum(g.c_mat @ g.delta for g in geos)
    evals = np.linalg.eigvalsh(c_sum)
    condition = float(evals[-1] / max(evals[0], 1e-300))
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        raise DegenerateLocalizationError("constraint matrix is singular")
    p_hat = np.linalg.solve(c_sum, rhs)
    return LocalizationResult(p_hat=p_hat, per_path=tuple(geos),
                              condition=condition)


def localize_scenario(params, scenario, weights=None, mu_rtol=1e-9):
    """``localize`` with the scenario's array frame signs and weight policy."""
    tx_sign, rx_sign = channel.array_axis_signs(scenario)
    if weights is None:
        weights = path_weights(params, scenario.weights)
    return localize(params, scenario.p_t, weights, tx_sign, rx_sign, mu_rtol)


def element_space_channels(params, scenario):
    """Element-space per-subcarrier channels (M5, M3 M4, M1 M2) from parameters."""
    omegas = np.stack([channel.to_angular(p, scenario.delta_f).omega for p in params])
    gains = np.array([p.gamma for p in params], dtype=np.complex128)
    m1, m2, m3, m4, m5 = scenario.m
    a_t = channel.khatri_rao([channel.steering_matrix(m1, omegas[:, 0]),
                              channel.steering_matrix(m2, omegas[:, 1])])
    a_r = channel.khatri_rao([channel.steering_matrix(m3, omegas[:, 2]),
                              channel.steering_matrix(m4, omegas[:, 3])])
    taps = channel.steering_matrix(m5, omegas[:, 4])     # e^{-j 2 pi df tau (m-1)}
    weighted = taps * gains[None, :]                      # (M5, L)
    return np.einsum("ml,rl,tl->mrt", weighted, a_r, a_t, optimize=True)


def rate_terms(est_params, true_params, scenario):
    """Per-subcarrier desired and interference terms (U, I) for one estimate.

    The precoder/combiner are the dominant right/left singular vectors of the
    reconstructed channel; U = w^H Hhat f and I = w^H (Hhat - H) f.
    """
    h_hat = element_space_channels(est_params, scenario)
    h_true = element_space_channels(true_params, scenario)
    u_vecs, svals, v_hs = np.linalg.svd(h_hat, full_matrices=False)
    w = u_vecs[:, :, 0]
    f = v_hs[:, 0, :].conj()
    u_term = svals[:, 0].astype(np.complex128)
    i_term = np.einsum("mr,mrt,mt->m", w.conj(), h_hat - h_true, f, optimize=True)
    return u_term, i_term


def effective_rate(u_terms, mean_i2, scenario, n0):
    """Pilot-overhead-discounted sum rate for one trial's U given batch E|I|^2."""
    m5 = scenario.m[4]
    sinr = scenario.e_s * np.abs(u_terms) ** 2 / (n0 + scenario.e_s * mean_i2)
    overhead = (scenario.n_c - scenario.n_p) / (m5 * scenario.n_c)
    return float(overhead * np.sum(np.log2(1.0 + sinr)))


def rate(estimates, true_params, scenario, n0):
    """Effective achievable rate averaged over a batch of estimates.

    ``estimates`` is one parameter list or a batch of them; the interference
    power E|I|^2 is estimated per subcarrier across the batch. Perfect CSI
    (estimates == truth) gives I = 0 and a deterministic rate.
    """
    if estimates and isinstance(estimates[0], channel.PathParams):
        estimates = [estimates]
    terms = [rate_terms(est, true_params, scenario) for est in estimates]
    mean_i2 = np.mean([np.abs(i) ** 2 for _, i in terms], axis=0)
    rates = [effective_rate(u, mean_i2, scenario, n0) for u, _ in terms]
    return float(np.mean(rates)), {"per_trial": rates, "mean_i2": mean_i2}
