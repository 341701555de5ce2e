import numpy as np
import pytest

from espritsim import channel


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def tiny_scenario():
    """Small fast scenario: 4-element dims, 3 beams, 8 subcarriers."""
    return channel.Scenario(
        p_t=[20, 5, 8], p_r=[0, 5, 1.5], scatterers=[[10, 2.5, 0]],
        m=(4, 4, 4, 4, 8), n=(3, 3, 3, 3), delta_f=8e6, f_c=30e9,
        n_p=16, n_c=600, e_s=1.0, n0=0.0, seed=5)


@pytest.fixture
def desk_scenario():
    """Reference layout at desk scale: M5=64 keeping the 60 MHz sweep."""
    return channel.Scenario(
        p_t=[20, 5, 8], p_r=[0, 5, 1.5], scatterers=[[10, 2.5, 0]],
        m=(8, 8, 8, 8, 64), n=(4, 4, 4, 4), delta_f=1.875e6, f_c=30e9,
        n_p=32, n_c=600, e_s=1.0, n0=0.0, seed=7)


@pytest.fixture
def desk_setup(desk_scenario):
    paths = channel.params_from_geometry(desk_scenario)
    transforms = channel.scenario_transforms(desk_scenario, paths)
    tensor = channel.synth_beamspace_tensor(paths, transforms, desk_scenario)
    truth = np.stack([channel.to_angular(p, desk_scenario.delta_f).omega
                      for p in paths])
    return desk_scenario, paths, transforms, tensor, truth


def synthetic_paths(omegas, gains, delta_f):
    """PathParams whose angular frequencies equal the given 5-vectors."""
    out = []
    for om, g in zip(np.atleast_2d(omegas), gains):
        p = channel.from_angular(channel.AngularFreqs(np.asarray(om, float)),
                                 delta_f)
        out.append(channel.PathParams(
            phi_az=p.phi_az, phi_el=p.phi_el, theta_az=p.theta_az,
            theta_el=p.theta_el, tau=p.tau, gamma=complex(g)))
    return out


def match_rows(est_omega, truth_omega):
    """Reorder estimate rows to the truth order (cheap exhaustive match)."""
    from itertools import permutations

    est = np.asarray(est_omega)
    tru = np.asarray(truth_omega)
    best, best_perm = np.inf, None
    for perm in permutations(range(tru.shape[0])):
        cost = np.sum(channel.wrap_angle(est[list(perm)] - tru) ** 2)
        if cost < best:
            best, best_perm = cost, perm
    return est[list(best_perm)], list(best_perm)
