import time

import numpy as np
import pytest

from espritsim import channel, esprit, fastsvd
from espritsim.kernels import InvalidInputError


def random_operator(rng, beam_dims, m5, l5):
    h = rng.standard_normal((int(np.prod(beam_dims)), m5)) \
        + 1j * rng.standard_normal((int(np.prod(beam_dims)), m5))
    return fastsvd.HankelBlockOperator.from_vector(h.reshape(-1), beam_dims, l5)


class TestHankelMatvec:
    def test_hand_2x2(self):
        op = fastsvd.HankelBlockOperator.from_vector([1, 2, 3], (1, 1, 1, 1), 2)
        y = fastsvd.hankel_matvec(op, [1, 1])
        assert np.allclose(y, [3, 5])

    def test_matches_dense(self, rng):
        op = random_operator(rng, (2, 3, 2, 2), 9, 4)
        dense = op.to_dense()
        x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        y = fastsvd.hankel_matvec(op, x)
        assert np.linalg.norm(y - dense @ x) <= 1e-10 * np.linalg.norm(dense @ x)
        z = rng.standard_normal(dense.shape[0]) + 1j * rng.standard_normal(dense.shape[0])
        w = fastsvd.hankel_matvec(op, z, adjoint=True)
        want = dense.conj().T @ z
        assert np.linalg.norm(w - want) <= 1e-10 * np.linalg.norm(want)

    def test_adjoint_inner_product(self, rng):
        op = random_operator(rng, (2, 2, 2, 2), 12, 5)
        x = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        y = rng.standard_normal(op.shape[0]) + 1j * rng.standard_normal(op.shape[0])
        lhs = np.vdot(y, fastsvd.hankel_matvec(op, x))
        rhs = np.vdot(fastsvd.hankel_matvec(op, y, adjoint=True), x)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_all_partitions_match_dense(self, rng):
        m5 = 10
        for l5 in range(1, m5 + 1):
            op = random_operator(rng, (1, 2, 1, 2), m5, l5)
            dense = op.to_dense()
            x = rng.standard_normal(l5) + 1j * rng.standard_normal(l5)
            assert np.allclose(fastsvd.hankel_matvec(op, x), dense @ x,
                               atol=1e-10 * max(1, np.linalg.norm(dense)))

    def test_shape_mismatch(self, rng):
        op = random_operator(rng, (1, 1, 1, 1), 8, 3)
        with pytest.raises(InvalidInputError):
            fastsvd.hankel_matvec(op, np.ones(4))

    def test_matches_smoothed_matrix(self, desk_setup):
        scen, _, _, tensor, _ = desk_setup
        l5 = esprit.default_l5(scen.m[4])
        sm = esprit.spatial_smooth(tensor, l5)
        op = fastsvd.HankelBlockOperator.from_tensor(tensor, l5)
        x = np.exp(1j * np.linspace(0, 3, l5))
        assert np.allclose(fastsvd.hankel_matvec(op, x), sm.values @ x,
                           atol=1e-10 * np.linalg.norm(sm.values @ x))

    def test_bit_stable_across_calls(self, rng):
        op = random_operator(rng, (2, 2, 2, 2), 16, 7)
        x = rng.standard_normal(7) + 1j * rng.standard_normal(7)
        assert np.array_equal(fastsvd.hankel_matvec(op, x),
                              fastsvd.hankel_matvec(op, x))


class TestLanczos:
    def test_rank_one_early_termination(self):
        blocks = np.outer([1.0], np.ones(6)).astype(complex)  # constant taps
        # rank-1 Hankel needs a constant generator: h[m] = c
        op = fastsvd.HankelBlockOperator.from_vector(blocks.reshape(-1),
                                                     (1, 1, 1, 1), 3)
        bd = fastsvd.lanczos_bidiag(op, 3)
        assert bd.terminated_early
        assert len(bd.a) == 1
        dense_s = np.linalg.svd(op.to_dense(), compute_uv=False)
        assert bd.a[0] == pytest.approx(dense_s[0], rel=1e-10)

    def test_singular_values_match_dense(self, rng):
        op = random_operator(rng, (2, 2, 2, 1), 12, 6)
        bd = fastsvd.lanczos_bidiag(op, 6)
        got = np.sort(fastsvd.bidiag_svd(bd).singular_values)[::-1]
        want = np.sort(np.linalg.svd(op.to_dense(), compute_uv=False))[::-1]
        assert np.allclose(got[:4], want[:4], rtol=1e-8)

    def test_frame_orthonormality_with_reorth(self, rng):
        op = random_operator(rng, (2, 2, 2, 2), 16, 8)
        bd = fastsvd.lanczos_bidiag(op, 8, reorth="full")
        k = len(bd.a)
        assert np.linalg.norm(bd.u_frame.conj().T @ bd.u_frame - np.eye(k)) < 1e-8
        assert np.linalg.norm(bd.v_frame.conj().T @ bd.v_frame - np.eye(k)) < 1e-8

    def test_no_reorth_loses_orthogonality(self, desk_setup):
        # noiseless rank-2 data: classical Lanczos drifts once the invariant
        # subspace is captured, which is why full reorthogonalization is the
        # default
        scen, _, _, tensor, _ = desk_setup
        rng = np.random.default_rng(3)
        noisy = tensor + 1e-9 * np.linalg.norm(tensor) / np.sqrt(tensor.size) * (
            rng.standard_normal(tensor.shape) + 1j * rng.standard_normal(tensor.shape))
        op = fastsvd.HankelBlockOperator.from_tensor(noisy, esprit.default_l5(scen.m[4]))
        bd = fastsvd.lanczos_bidiag(op, 20, reorth="none")
        k = len(bd.a)
        drift = np.linalg.norm(bd.u_frame.conj().T @ bd.u_frame - np.eye(k))
        assert drift > 1e-4

    def test_reconstruction(self, rng):
        op = random_operator(rng, (1, 2, 2, 1), 10, 5)
        bd = fastsvd.lanczos_bidiag(op, 5)
        dense = op.to_dense()
        recon = bd.u_frame.conj().T @ dense @ bd.v_frame
        assert np.linalg.norm(recon - bd.matrix()) <= 1e-8 * np.linalg.norm(dense)


class TestBidiagSvd:
    def test_already_diagonal(self):
        bd = fastsvd.Bidiagonal(a=np.array([3.0, 1.0]), b=np.array([0.0]),
                                u_frame=np.eye(2, dtype=complex),
                                v_frame=np.eye(2, dtype=complex))
        res = fastsvd.bidiag_svd(bd)
        assert np.allclose(res.singular_values, [3, 1])
        assert np.allclose(np.abs(res.left), np.eye(2), atol=1e-12)

    def test_golden_ratio_pair(self):
        bd = fastsvd.Bidiagonal(a=np.array([1.0, 1.0]), b=np.array([1.0]),
                                u_frame=np.eye(2, dtype=complex),
                                v_frame=np.eye(2, dtype=complex))
        res = fastsvd.bidiag_svd(bd)
        golden = (1 + np.sqrt(5)) / 2
        assert np.allclose(res.singular_values, [golden, golden - 1], rtol=1e-12)

    def test_matches_dense(self, rng):
        a = rng.uniform(0.5, 2.0, 7)
        b = rng.uniform(0.1, 1.0, 6)
        bd = fastsvd.Bidiagonal(a=a, b=b, u_frame=np.eye(7, dtype=complex),
                                v_frame=np.eye(7, dtype=complex))
        res = fastsvd.bidiag_svd(bd)
        want = np.linalg.svd(np.diag(a) + np.diag(b, 1), compute_uv=False)
        assert np.allclose(res.singular_values, want, rtol=1e-10)


class TestFastSignalSubspace:
    def test_projector_matches_dense(self, desk_setup):
        scen, _, _, tensor, _ = desk_setup
        l5 = esprit.default_l5(scen.m[4])
        op = fastsvd.HankelBlockOperator.from_tensor(tensor, l5)
        u_fast = fastsvd.fast_signal_subspace(op, 2)
        u_dense, _, _ = np.linalg.svd(op.to_dense(), full_matrices=False)
        u_dense = u_dense[:, :2]
        gap = np.linalg.norm(u_fast @ u_fast.conj().T
                             - u_dense @ u_dense.conj().T)
        assert gap < 1e-9

    def test_full_rank_span(self, rng):
        op = random_operator(rng, (1, 1, 2, 1), 6, 3)
        u = fastsvd.fast_signal_subspace(op, 3, steps=3)
        dense = op.to_dense()
        # U spans the whole column space
        resid = dense - u @ (u.conj().T @ dense)
        assert np.linalg.norm(resid) < 1e-8 * np.linalg.norm(dense)

    def test_matvec_scaling(self, rng):
        # O(J log N5): per-call time normalized by J log2(M5) stays within
        # a 2x envelope across subcarrier counts at the full-scale block count
        rates = []
        for m5 in (64, 128, 256, 512):
            op = random_operator(rng, (4, 4, 4, 4), m5, (m5 + 2) // 2)
            x = rng.standard_normal(op.l5) + 1j * rng.standard_normal(op.l5)
            fastsvd.hankel_matvec(op, x)  # warm caches
            best = np.inf
            for _ in range(7):
                t0 = time.perf_counter()
                for _ in range(10):
                    fastsvd.hankel_matvec(op, x)
                best = min(best, (time.perf_counter() - t0) / 10)
            rates.append(best / (256 * m5 * np.log2(m5)))
        assert max(rates) / min(rates) < 2
