"""Geometric multipath channel synthesis and the beamspace observation model.

Conventions (fixed once here, consumed everywhere):

* Arrays are URAs in the y-z plane with half-wavelength spacing; dimension
  order is (1, 2) = transmit (y, z), (3, 4) = receive (y, z), 5 = subcarrier.
* A unit direction ``f = [cos(az) sin(el), sin(az) sin(el), cos(el)]`` is
  expressed in the owning array's frame. Each array's frame keeps azimuths in
  (-pi/2, pi/2): the local x axis points toward the half-space containing the
  far end of every path (known orientation). ``array_axis_signs`` reports the
  local-to-global x-axis sign per side so downstream geometry can undo it.
* Angular frequencies per path: w1 = pi sin(phi_az) sin(phi_el),
  w2 = pi cos(phi_el), w3/w4 likewise for the arrival angles, and
  w5 = wrap(-2 pi df tau).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import shift
from .kernels import InvalidInputError

SPEED_OF_LIGHT = 299792458.0

DFT_BEAM_SPACING = np.pi / 4  # matches an 8-element DFT grid
DIRECTIONAL_BEAM_SPACING = np.pi / 8


class DegenerateGeometryError(ValueError):
    """Scenario geometry does not admit the angular parameterization."""


class OutOfDomainError(ValueError):
    """Angular frequencies outside the invertible domain of the parameter map."""


class UnderdeterminedPilotError(ValueError):
    """Fewer pilot blocks than transmit beams."""


class SingularTransformError(ValueError):
    """Beam grid with duplicate frequencies."""


@dataclass(frozen=True)
class PathParams:
    """Geometric parameters of one propagation path (angles in array frames)."""

    phi_az: float
    phi_el: float
    theta_az: float
    theta_el: float
    tau: float
    gamma: complex | None = None

    def angles(self):
        return np.array([self.phi_az, self.phi_el, self.theta_az, self.theta_el])


@dataclass(frozen=True)
class AngularFreqs:
    """Per-path angular frequencies, dimensions 1..5, each in (-pi, pi]."""

    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        if self.omega.shape != (5,):
            raise InvalidInputError("AngularFreqs needs exactly 5 frequencies")


@dataclass(frozen=True)
class BeamTransform:
    """Per-dimension transformation matrix with cached shift-invariance data.

    ``t`` is M_n x N_n (columns are beams), ``f`` satisfies
    J1 t = J2 t f (exactly when ``exact_shift``), ``q`` is the restoring
    projector and ``l1``/``l2`` the modified selectors Q and Q f^H.
    """

    t: np.ndarray
    f: np.ndarray
    q: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    exact_shift: bool
    grid: np.ndarray | None = None

    @property
    def m(self):
        return self.t.shape[0]

    @property
    def n(self):
        return self.t.shape[1]

    @classmethod
    def from_matrix(cls, t, grid=None):
        """Build the restoration machinery for an arbitrary transform matrix."""
        t = np.asarray(t, dtype=np.complex128)
        f, exact = shift.shift_basis(t)
        q = shift.restore_projector(t, f)
        return cls(t=t, f=f, q=q, l1=q, l2=q @ f.conj().T, exact_shift=exact,
                   grid=None if grid is None else np.asarray(grid, dtype=float))


@dataclass(frozen=True)
class Scenario:
    """Geometry, array/beam configuration and OFDM numerology for one setup."""

    p_t: np.ndarray
    p_r: np.ndarray
    scatterers: tuple
    m: tuple            # (M1, M2, M3, M4, M5)
    n: tuple            # (N1, N2, N3, N4) beam counts
    delta_f: float
    f_c: float
    n_p: int
    n_c: int
    e_s: float
    n0: float
    seed: int
    beam_kind_tx: str = "dft"
    beam_kind_rx: str = "dft"
    nlos_power_scale: float = 0.1
    weights: str = "uniform"  # localization weights: uniform | gain

    def __post_init__(self):
        object.__setattr__(self, "p_t", np.asarray(self.p_t, dtype=float))
        object.__setattr__(self, "p_r", np.asarray(self.p_r, dtype=float))
        object.__setattr__(self, "scatterers",
                           tuple(np.asarray(s, dtype=float) for s in self.scatterers))
        object.__setattr__(self, "m", tuple(int(v) for v in self.m))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        if len(self.m) != 5 or len(self.n) != 4:
            raise InvalidInputError("scenario needs 5 array sizes and 4 beam counts")
        if self.m[4] < 2:
            raise InvalidInputError("need at least two subcarriers")
        if self.n_p < self.n[0] * self.n[1]:
            raise UnderdeterminedPilotError(
                f"N_P={self.n_p} < N1*N2={self.n[0] * self.n[1]} transmit beams")

    @property
    def wavelength(self):
        return SPEED_OF_LIGHT / self.f_c

    @property
    def num_paths(self):
        return 1 + len(self.scatterers)

    def with_noise(self, n0):
        return replace(self, n0=float(n0))

    @classmethod
    def from_dict(cls, d):
        return cls(
            p_t=d["p_t"], p_r=d["p_r"], scatterers=d.get("scatterers", []),
            m=d["m"], n=d["n"], delta_f=float(d["delta_f_hz"]),
            f_c=float(d["carrier_hz"]), n_p=int(d["n_p"]),
            n_c=int(d.get("n_c", 600)), e_s=float(d.get("e_s", 1.0)),
            n0=float(d.get("n0", 0.0)), seed=int(d.get("seed", 0)),
            beam_kind_tx=_beam_kind(d, "tx"), beam_kind_rx=_beam_kind(d, "rx"),
            nlos_power_scale=float(d.get("nlos_power_scale", 0.1)),
            weights=d.get("weights", "uniform"),
        )

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _beam_kind(d, side):
    kind = d.get("beam_kind", "dft")
    if isinstance(kind, dict):
        return kind[side]
    return kind


def steering_vector(m, omega):
    """Vandermonde steering vector: entry k (0-based) is exp(j k omega)."""
    if m < 1:
        raise InvalidInputError("steering_vector needs m >= 1")
    return np.exp(1j * omega * np.arange(m))


def steering_matrix(m, omegas):
    """Columns are steering vectors of the given frequencies."""
    omegas = np.asarray(omegas, dtype=float)
    return np.exp(1j * np.outer(np.arange(m), omegas))


def wrap_angle(w):
    """Wrap to (-pi, pi]."""
    return np.angle(np.exp(1j * np.asarray(w, dtype=float)))


def array_axis_signs(scenario):
    """Local-to-global x-axis sign for the (transmit, receive) array frames.

    The transmit frame looks toward the receiver-side half-space, the receive
    frame toward the transmitter side; every path endpoint must lie strictly
    in that half-space, otherwise azimuths leave the resolvable branch.
    """
    tx_targets = [scenario.p_r] + list(scenario.scatterers)
    rx_sources = [scenario.p_t] + list(scenario.scatterers)
    tx_dx = np.array([p[0] - scenario.p_t[0] for p in tx_targets])
    rx_dx = np.array([p[0] - scenario.p_r[0] for p in rx_sources])
    if np.any(tx_dx == 0) or np.any(rx_dx == 0):
        raise DegenerateGeometryError("path endpoint in an array's broadside plane")
    if len(set(np.sign(tx_dx))) > 1 or len(set(np.sign(rx_dx))) > 1:
        raise DegenerateGeometryError("paths straddle both azimuth half-spaces")
    return float(np.sign(tx_dx[0])), float(np.sign(rx_dx[0]))


def _unit(v):
    nrm = np.linalg.norm(v)
    if nrm == 0:
        raise DegenerateGeometryError("zero-length path segment")
    return v / nrm


def _angles_of(direction, axis_sign):
    """(az, el) of a global unit direction, expressed in an array frame."""
    local = direction.copy()
    local[0] *= axis_sign
    el = np.arccos(np.clip(local[2], -1.0, 1.0))
    if np.sin(el) < 1e-12:
        raise DegenerateGeometryError("elevation at a pole (sin el = 0)")
    az = np.arctan2(local[1], local[0])
    if not (-np.pi / 2 < az < np.pi / 2):
        raise DegenerateGeometryError("azimuth outside the resolvable branch")
    return float(az), float(el)


def direction_from_angles(az, el, axis_sign=1.0):
    """Global unit direction for array-frame (az, el)."""
    local = np.array([np.cos(az) * np.sin(el), np.sin(az) * np.sin(el), np.cos(el)])
    local[0] *= axis_sign
    return local


def params_from_geometry(scenario, rng=None):
    """Per-path geometric parameters for a scenario; path 0 is the LOS path.

    Gain magnitudes follow |gamma|^2 = varsigma * (lambda / (4 pi d))^2 with
    varsigma = 1 for the LOS path and ``scenario.nlos_power_scale`` otherwise;
    phases are drawn uniformly (deterministic in ``scenario.seed``).
    """
    p_t, p_r = scenario.p_t, scenario.p_r
    if np.allclose(p_t, p_r):
        raise DegenerateGeometryError("transmitter and receiver coincide")
    tx_sign, rx_sign = array_axis_signs(scenario)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=(0xA1,)))
    lam = scenario.wavelength

    paths = []
    los_d = np.linalg.norm(p_r - p_t)
    phi = _angles_of(_unit(p_r - p_t), tx_sign)
    theta = _angles_of(_unit(p_t - p_r), rx_sign)
    paths.append((phi, theta, los_d / SPEED_OF_LIGHT, 1.0, los_d))

    for p_s in scenario.scatterers:
        d_t = np.linalg.norm(p_s - p_t)
        d_r = np.linalg.norm(p_r - p_s)
        phi = _angles_of(_unit(p_s - p_t), tx_sign)
        theta = _angles_of(_unit(p_s - p_r), rx_sign)
        paths.append((phi, theta, (d_t + d_r) / SPEED_OF_LIGHT,
                      scenario.nlos_power_scale, d_t + d_r))

    out = []
    for (phi, theta, tau, varsigma, dist) in paths:
        mag = np.sqrt(varsigma) * lam / (4 * np.pi * dist)
        phase = rng.uniform(0.0, 2 * np.pi)
        out.append(PathParams(phi_az=phi[0], phi_el=phi[1],
                              theta_az=theta[0], theta_el=theta[1],
                              tau=tau, gamma=mag * np.exp(1j * phase)))
    return out


def to_angular(p, delta_f):
    """Angular frequencies of a path; delay maps to w5 = wrap(-2 pi df tau)."""
    w = np.array([
        np.pi * np.sin(p.phi_az) * np.sin(p.phi_el),
        np.pi * np.cos(p.phi_el),
        np.pi * np.sin(p.theta_az) * np.sin(p.theta_el),
        np.pi * np.cos(p.theta_el),
        wrap_angle(-2 * np.pi * delta_f * p.tau),
    ])
    return AngularFreqs(omega=w)


def from_angular(w, delta_f):
    """Invert ``to_angular`` on the restricted domain (gain left unset).

    Raises OutOfDomainError when |w2| or |w4| reaches pi, or when the azimuth
    ratio w1 / (pi sin el) leaves [-1, 1].
    """
    om = np.asarray(w.omega if isinstance(w, AngularFreqs) else w, dtype=float)
    if abs(om[1]) >= np.pi or abs(om[3]) >= np.pi:
        raise OutOfDomainError("elevation frequency at or beyond pi")
    phi_el = np.arccos(om[1] / np.pi)
    theta_el = np.arccos(om[3] / np.pi)
    r1 = om[0] / (np.pi * np.sin(phi_el))
    r3 = om[2] / (np.pi * np.sin(theta_el))
    if abs(r1) > 1 or abs(r3) > 1:
        raise OutOfDomainError("azimuth frequency inconsistent with elevation")
    tau = (-om[4] / (2 * np.pi * delta_f)) % (1.0 / delta_f)
    return PathParams(phi_az=float(np.arcsin(r1)), phi_el=float(phi_el),
                      theta_az=float(np.arcsin(r3)), theta_el=float(theta_el),
                      tau=float(tau), gamma=None)


def clamp_freqs(omega, margin=1e-9):
    """Pull a 5-vector of frequencies into the invertible domain.

    Returns (clamped vector, True if anything moved). Heavy noise can push
    elevation/azimuth frequencies out of range; estimators clamp and flag
    rather than fail the trial.
    """
    om = np.array(omega, dtype=float)
    lim = np.pi * (1 - margin)
    clamped = False
    for i in (1, 3):
        if abs(om[i]) > lim:
            om[i] = np.sign(om[i]) * lim
            clamped = True
    for i_az, i_el in ((0, 1), (2, 3)):
        bound = np.pi * np.sin(np.arccos(om[i_el] / np.pi))
        if abs(om[i_az]) > bound:
            om[i_az] = np.sign(om[i_az]) * bound
            clamped = True
    return om, clamped


def beam_focus(scenario, paths=None):
    """Per-dimension midpoint of the true path frequencies (prior knowledge).

    Beam grids are pointed from the scenario geometry, mirroring a system that
    selects beams from prior user/scatterer location information.
    """
    if paths is None:
        # gains are irrelevant for the focus; use a throwaway stream
        paths = params_from_geometry(scenario)
    w = np.stack([to_angular(p, scenario.delta_f).omega for p in paths])
    return 0.5 * (w[:, :4].min(axis=0) + w[:, :4].max(axis=0))


def dft_grid(m_n, n_n, focus):
    """The n_n frequencies of the m_n-point DFT grid closest to ``focus``."""
    bins = wrap_angle(2 * np.pi * np.arange(m_n) / m_n)
    dist = np.abs(wrap_angle(bins - focus))
    order = np.lexsort((np.arange(m_n), dist))
    chosen = np.sort(wrap_angle(bins[order[:n_n]] - focus) + focus)
    return chosen


def directional_grid(n_n, focus, spacing=DIRECTIONAL_BEAM_SPACING):
    """n_n beams with the given spacing, centered on ``focus``."""
    offsets = spacing * (np.arange(n_n) - (n_n - 1) / 2.0)
    return focus + offsets


def make_beam_transform(kind, m_n, n_n, grid=None, focus=0.0):
    """Build a steering-grid transform T_n and its shift-invariance data.

    ``kind`` is one of ``dft`` (orthogonal pi/4-spaced grid for M=8, i.e. the
    m-point DFT bins nearest the focus), ``directional`` (pi/8-spaced beams
    centered on the focus) or ``custom`` (explicit ``grid`` of frequencies).
    Columns are steering vectors scaled by 1/sqrt(m_n).
    """
    if kind == "dft":
        grid = dft_grid(m_n, n_n, focus)
    elif kind == "directional":
        grid = directional_grid(n_n, focus)
    elif kind == "custom":
        if grid is None:
            raise InvalidInputError("custom beam transform needs an explicit grid")
        grid = np.asarray(grid, dtype=float)
    else:
        raise InvalidInputError(f"unknown beam kind {kind!r}")
    if n_n > m_n and kind in ("dft", "directional"):
        raise InvalidInputError("more beams than elements; use hybrid mode")
    if len(grid) != n_n:
        raise InvalidInputError("grid size must match the beam count")
    wrapped = np.sort(wrap_angle(grid))
    if np.any(np.abs(np.diff(wrapped)) < 1e-12):
        raise SingularTransformError("duplicate beam frequencies")

    t = steering_matrix(m_n, grid) / np.sqrt(m_n)
    f = np.diag(np.exp(-1j * grid))
    q = shift.restore_projector(t, f)
    return BeamTransform(t=t, f=f, q=q, l1=q, l2=q @ f.conj().T,
                         exact_shift=True, grid=np.asarray(grid, dtype=float))


def scenario_transforms(scenario, paths=None):
    """The four spatial beam transforms pointed by the scenario's prior."""
    focus = beam_focus(scenario, paths)
    kinds = [scenario.beam_kind_tx] * 2 + [scenario.beam_kind_rx] * 2
    return tuple(make_beam_transform(kinds[i], scenario.m[i], scenario.n[i],
                                     focus=focus[i]) for i in range(4))


def transform_matrix(t):
    """The M_n x N_n matrix of a BeamTransform or a raw array."""
    return t.t if isinstance(t, BeamTransform) else np.asarray(t, dtype=np.complex128)


def beamspace_factors(paths, transforms, scenario):
    """Per-dimension factor matrices B_n = T_n^H A_n (n = 1..4) and A_5."""
    omegas = np.stack([to_angular(p, scenario.delta_f).omega for p in paths])
    factors = []
    for i in range(4):
        t = transform_matrix(transforms[i])
        a_n = steering_matrix(t.shape[0], omegas[:, i])
        factors.append(t.conj().T @ a_n)
    factors.append(steering_matrix(scenario.m[4], omegas[:, 4]))
    return factors


def synth_beamspace_tensor(paths, transforms, scenario):
    """Noiseless beamspace channel tensor of shape (N1, N2, N3, N4, M5)."""
    if not paths:
        raise InvalidInputError("need at least one path")
    gains = np.array([p.gamma for p in paths], dtype=np.complex128)
    b1, b2, b3, b4, b5 = beamspace_factors(paths, transforms, scenario)
    return np.einsum("al,bl,cl,dl,el,l->abcde", b1, b2, b3, b4, b5, gains,
                     optimize=True)


def khatri_rao(mats):
    """Columnwise Kronecker product of a list of (m_i, L) matrices."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, m.shape[1])
    return out


def observe_and_estimate(tensor, scenario, rng, mode="direct", n0=None):
    """Noisy beamspace channel estimate from the pilot stage.

    ``direct`` injects the estimation error with its known statistics
    (iid circular Gaussian, variance N0 / (N_P E_s) per entry); ``pilot``
    simulates the pilot transmission Y = H S + Z explicitly and correlates
    with S^H. The two modes are statistically identical.
    """
    tensor = np.asarray(tensor, dtype=np.complex128)
    n0 = scenario.n0 if n0 is None else float(n0)
    if n0 == 0.0:
        return tensor.copy()
    n1, n2, n3, n4, m5 = tensor.shape
    scale_sq = n0 / (scenario.n_p * scenario.e_s)
    if mode == "direct":
        noise = rng.standard_normal(tensor.shape) + 1j * rng.standard_normal(tensor.shape)
        return tensor + np.sqrt(scale_sq / 2) * noise
    if mode != "pilot":
        raise InvalidInputError(f"unknown observation mode {mode!r}")

    s = pilot_matrix(n1 * n2, scenario.n_p, scenario.e_s)
    est = np.empty_like(tensor)
    for k in range(m5):
        h = tensor[..., k].reshape(n1 * n2, n3 * n4).T  # rows: RX beams
        z = rng.standard_normal((n3 * n4, scenario.n_p)) \
            + 1j * rng.standard_normal((n3 * n4, scenario.n_p))
        y = h @ s + np.sqrt(n0 / 2) * z
        h_hat = (y @ s.conj().T) / (scenario.n_p * scenario.e_s)
        est[..., k] = h_hat.T.reshape(n1, n2, n3, n4)
    return est


def pilot_matrix(n_beams, n_p, e_s):
    """Rows of a scaled DFT matrix: S S^H = N_P E_s I."""
    if n_p < n_beams:
        raise UnderdeterminedPilotError(f"N_P={n_p} < {n_beams} transmit beams")
    k = np.arange(n_p)
    rows = np.arange(n_beams)
    return np.sqrt(e_s) * np.exp(-2j * np.pi * np.outer(rows, k) / n_p)


def element_space_gram(paths, scenario):
    """Receive-side Grams used by the closed-form SNR: (A_R^H A_R, taus, gains)."""
    omegas = np.stack([to_angular(p, scenario.delta_f).omega for p in paths])
    a3 = steering_matrix(scenario.m[2], omegas[:, 2])
    a4 = steering_matrix(scenario.m[3], omegas[:, 3])
    a_r = khatri_rao([a3, a4])
    return a_r.conj().T @ a_r


def link_metrics(paths, transforms, scenario, n0=None):
    """SNR before combining, plus per-path received powers.

    SNR = E_s sum_m ||H_m F||_F^2 / sum_m E||Z_m||^2 with F = (T1 (x) T2)^*
    and Z_m the beamspace pilot noise (N3 N4 x N_P entries of variance N0).
    The subcarrier sum collapses to a geometric series in the delay spacings.
    """
    n0 = scenario.n0 if n0 is None else float(n0)
    gains = np.array([p.gamma for p in paths], dtype=np.complex128)
    taus = np.array([p.tau for p in paths])
    omegas = np.stack([to_angular(p, scenario.delta_f).omega for p in paths])

    a1 = steering_matrix(scenario.m[0], omegas[:, 0])
    a2 = steering_matrix(scenario.m[1], omegas[:, 1])
    a_t = khatri_rao([a1, a2])                       # M1 M2 x L
    f_mat = np.kron(transform_matrix(transforms[0]),
                    transform_matrix(transforms[1])).conj()
    atf = a_t.T @ f_mat                              # L x N1 N2
    gram_t = atf @ atf.conj().T                      # L x L
    gram_r = element_space_gram(paths, scenario)     # L x L

    m5 = scenario.m[4]
    dw = 2 * np.pi * scenario.delta_f * (taus[:, None] - taus[None, :])
    z = np.exp(1j * dw)
    degenerate = np.abs(z - 1.0) < 1e-12
    cross = np.where(degenerate, m5, (z ** m5 - 1) / np.where(degenerate, 1.0, z - 1.0))
    signal = np.real(np.einsum("l,k,lk,lk,kl->", gains.conj(), gains, cross,
                               gram_r, gram_t))
    signal *= scenario.e_s

    n3n4 = scenario.n[2] * scenario.n[3]
    noise = m5 * n3n4 * scenario.n_p * n0
    per_path = scenario.e_s * m5 * (np.abs(gains) ** 2
                                    * np.real(np.diag(gram_r)) * np.real(np.diag(gram_t)))
    snr = np.inf if noise == 0 else signal / noise
    return {
        "snr": snr,
        "snr_db": np.inf if noise == 0 else 10 * np.log10(snr),
        "signal_power": signal,
        "noise_per_n0": m5 * n3n4 * scenario.n_p,
        "per_path_power": per_path,
    }


def n0_for_snr_db(paths, transforms, scenario, snr_db):
    """Invert the SNR definition: the N0 achieving the target SNR."""
    metrics = link_metrics(paths, transforms, scenario, n0=1.0)
    return metrics["signal_power"] / (metrics["noise_per_n0"] * 10 ** (snr_db / 10))
