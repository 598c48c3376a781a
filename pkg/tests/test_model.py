"""Oracle tests for the feature map, Woodbury algebra, objective, gradient,
and spectral-map recovery."""
import numpy as np
import pytest

from nlunmix.embed import PcaBasis, lle_weights, pca_basis
from nlunmix.model import (
    LatentState,
    ModelContext,
    WoodburyError,
    WoodburySolver,
    feature_dim,
    grad_neg_log_posterior,
    map_P,
    neg_log_posterior,
    objective_function,
    pack,
    psi,
    psi_batch,
    psi_jacobian,
    reconstruct,
    unpack,
)


def random_sum_to_one(rng, n, R, scale=0.4):
    free = rng.normal(scale=scale, size=(n, R - 1)) + 1.0 / R
    return np.hstack([free, 1.0 - free.sum(axis=1, keepdims=True)])


def tiny_ctx(rng, n=10, l=7, R=2, gamma=1.0):
    Y = rng.normal(size=(n, l))
    Yc = Y - Y.mean(axis=0)
    pb = pca_basis(Yc, feature_dim(R))
    lle = lle_weights(Yc, K=R)
    return ModelContext(Yc=Yc, pbar=pb, lle=lle, gamma=gamma)


def random_state(rng, n, R, s2=0.5, sigma2=0.3):
    D = feature_dim(R)
    return LatentState(
        X=random_sum_to_one(rng, n, R),
        U=rng.normal(scale=0.6, size=(D, D)),
        s2=s2,
        sigma2=sigma2,
    )


def dense_sigma(state: LatentState):
    C = psi_batch(state.X) @ state.U
    return state.s2 * (C @ C.T) + state.sigma2 * np.eye(C.shape[0]), C


class TestPsi:
    def test_pure_vertex(self):
        assert np.array_equal(psi([1.0, 0.0, 0.0]), [1, 0, 0, 0, 0, 0])

    def test_direct_products(self):
        assert np.array_equal(psi([0.5, 0.5, 0.0]), [0.5, 0.5, 0.0, 0.25, 0.0, 0.0])

    def test_length_r4(self):
        assert psi(np.full(4, 0.25)).shape == (10,)
        assert feature_dim(4) == 10

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 3))
        B = psi_batch(X)
        for n in range(6):
            assert np.array_equal(B[n], psi(X[n]))


class TestPsiJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        h = 1e-6
        for _ in range(100):
            R = int(rng.integers(2, 5))
            x = rng.normal(size=R)
            J = psi_jacobian(x)
            for r in range(R):
                e = np.zeros(R)
                e[r] = h
                fd = (psi(x + e) - psi(x - e)) / (2 * h)
                assert np.max(np.abs(J[:, r] - fd)) < 1e-7

    def test_at_origin(self):
        J = psi_jacobian(np.zeros(3))
        assert np.array_equal(J[:3], np.eye(3))
        assert np.array_equal(J[3:], np.zeros((3, 3)))

    def test_r2_by_hand(self):
        a, b = 0.3, -1.2
        assert np.array_equal(psi_jacobian([a, b]), [[1, 0], [0, 1], [b, a]])


class TestWoodbury:
    def test_s2_zero_diagonal(self):
        rng = np.random.default_rng(2)
        C = rng.normal(size=(6, 3))
        wb = WoodburySolver(C, s2=0.0, sigma2=0.25)
        B = rng.normal(size=(6, 2))
        assert np.allclose(wb.solve(B), B / 0.25, atol=1e-15)
        assert wb.logdet() == pytest.approx(6 * np.log(0.25), rel=1e-14)
        assert wb.trace_inv() == pytest.approx(6 / 0.25, rel=1e-14)

    def test_dense_oracle_small(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(1, 4))
            C = rng.normal(size=(n, d))
            s2 = float(rng.uniform(0, 2))
            sigma2 = float(rng.uniform(0.05, 2))
            Sigma = s2 * (C @ C.T) + sigma2 * np.eye(n)
            wb = WoodburySolver(C, s2, sigma2)
            B = rng.normal(size=(n, 3))
            ref = np.linalg.solve(Sigma, B)
            assert np.max(np.abs(wb.solve(B) - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))
            ld = np.linalg.slogdet(Sigma)[1]
            assert abs(wb.logdet() - ld) <= 1e-10 * (1 + abs(ld))
            tr = np.trace(np.linalg.inv(Sigma))
            assert abs(wb.trace_inv() - tr) <= 1e-10 * (1 + abs(tr))

    def test_solve_residual_unit_vectors(self):
        rng = np.random.default_rng(4)
        C = rng.normal(size=(10, 4))
        wb = WoodburySolver(C, 1.3, 0.2)
        Sigma = 1.3 * (C @ C.T) + 0.2 * np.eye(10)
        for k in [0, 3, 9]:
            e = np.zeros(10)
            e[k] = 1.0
            assert np.max(np.abs(Sigma @ wb.solve(e) - e)) < 1e-9

    def test_degenerate_core_reports_pivot(self):
        # duplicated unit columns with s2 large enough that sigma2 is lost to
        # float absorption: the core becomes exactly singular and the second
        # Cholesky pivot breaks down
        C = np.ones((5, 2))
        with pytest.raises(WoodburyError) as exc:
            WoodburySolver(C, s2=1e40, sigma2=1e-4)
        assert exc.value.pivot == 2

    def test_rejects_bad_scales(self):
        C = np.ones((3, 1))
        with pytest.raises(ValueError):
            WoodburySolver(C, s2=-1.0, sigma2=0.1)
        with pytest.raises(ValueError):
            WoodburySolver(C, s2=1.0, sigma2=0.0)


class TestNegLogPosterior:
    def test_diagonal_reduction(self):
        rng = np.random.default_rng(5)
        ctx = tiny_ctx(rng, n=8, l=6, R=2, gamma=0.0)
        D = feature_dim(2)
        state = LatentState(
            X=random_sum_to_one(rng, 8, 2), U=np.eye(D), s2=0.0, sigma2=0.4
        )
        got = neg_log_posterior(state, ctx)
        C = psi_batch(state.X) @ state.U
        Ybar = ctx.Yc - C @ ctx.pbar.basis.T
        want = 0.5 * 6 * 8 * np.log(0.4) + np.sum(Ybar**2) / (2 * 0.4)
        assert got == pytest.approx(want, rel=1e-12)

    def test_dense_oracle(self):
        rng = np.random.default_rng(6)
        ctx = tiny_ctx(rng, n=6, l=5, R=2, gamma=2.5)
        state = random_state(rng, 6, 2)
        got = neg_log_posterior(state, ctx)
        Sigma, C = dense_sigma(state)
        Ybar = ctx.Yc - C @ ctx.pbar.basis.T
        Mx = np.asarray(ctx._resid_op @ state.X)
        want = (
            0.5 * 5 * np.linalg.slogdet(Sigma)[1]
            + 0.5 * np.trace(np.linalg.solve(Sigma, Ybar) @ Ybar.T)
            + 0.5 * 2.5 * np.sum(Mx**2)
        )
        assert got == pytest.approx(want, rel=1e-9)

    def test_linear_in_gamma(self):
        rng = np.random.default_rng(7)
        Y = rng.normal(size=(9, 6))
        Yc = Y - Y.mean(axis=0)
        pb = pca_basis(Yc, 3)
        lle = lle_weights(Yc, K=2)
        state = random_state(rng, 9, 2)
        e1 = neg_log_posterior(state, ModelContext(Yc, pb, lle, gamma=1.0))
        e2 = neg_log_posterior(state, ModelContext(Yc, pb, lle, gamma=2.0))
        Mx = np.asarray(lle.residual_operator() @ state.X)
        assert e2 - e1 == pytest.approx(0.5 * np.sum(Mx**2), rel=1e-9)

    def test_out_of_bounds_is_inf(self):
        rng = np.random.default_rng(8)
        ctx = tiny_ctx(rng, n=6, l=5, R=2)
        state = random_state(rng, 6, 2, s2=1e9)
        assert neg_log_posterior(state, ctx) == np.inf

    def test_rotation_invariance_with_basis(self):
        # right-multiplying U by an orthogonal Q while rotating the basis the
        # same way leaves the likelihood untouched
        rng = np.random.default_rng(9)
        ctx = tiny_ctx(rng, n=8, l=6, R=2, gamma=1.3)
        state = random_state(rng, 8, 2)
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        pb2 = PcaBasis(
            basis=ctx.pbar.basis @ Q,
            eigenvalues=ctx.pbar.eigenvalues,
            residual_variance=ctx.pbar.residual_variance,
        )
        ctx2 = ModelContext(ctx.Yc, pb2, ctx.lle, gamma=1.3)
        state2 = LatentState(
            X=state.X, U=state.U @ Q, s2=state.s2, sigma2=state.sigma2
        )
        e1 = neg_log_posterior(state, ctx)
        e2 = neg_log_posterior(state2, ctx2)
        assert e2 == pytest.approx(e1, rel=1e-10)


class TestGradient:
    def _fd(self, fg, w, h=1e-5):
        g = np.empty_like(w)
        for i in range(w.size):
            e = np.zeros_like(w)
            e[i] = h
            g[i] = (fg(w + e)[0] - fg(w - e)[0]) / (2 * h)
        return g

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        checked_blocks = set()
        for trial in range(20):
            R = 2 if trial % 2 == 0 else 3
            n = int(rng.integers(8, 17))
            l = int(rng.integers(feature_dim(R) + 1, 12))
            ctx = tiny_ctx(rng, n=n, l=l, R=R, gamma=float(rng.uniform(0.5, 3)))
            state = random_state(
                rng, n, R, s2=float(rng.uniform(0.2, 1.5)), sigma2=float(rng.uniform(0.2, 1.0))
            )
            fg = objective_function(ctx, n, R)
            w = pack(state)
            _, g = fg(w)
            gfd = self._fd(fg, w)
            err = np.abs(g - gfd) / (1.0 + np.abs(gfd))
            assert np.max(err) <= 1e-5, f"trial {trial}: max rel err {np.max(err):.2e}"
            checked_blocks.add(("X", R))
        assert ("X", 2) in checked_blocks and ("X", 3) in checked_blocks

    def test_prior_gradient_vanishes_on_exact_reconstruction(self):
        # duplicate pixels give exact LLE reconstruction; the prior part of
        # the gradient (the difference across gamma) must vanish
        rng = np.random.default_rng(11)
        base = rng.normal(size=(4, 6))
        Y = np.vstack([base, base, base])  # every pixel duplicated twice
        Yc = Y - Y.mean(axis=0)
        pb = pca_basis(Yc, 3)
        lle = lle_weights(Yc, K=1)
        X = random_sum_to_one(rng, 12, 2)
        X = np.vstack([X[:4], X[:4], X[:4]])
        state = LatentState(X=X, U=rng.normal(size=(3, 3)), s2=0.4, sigma2=0.3)
        g1 = grad_neg_log_posterior(state, ModelContext(Yc, pb, lle, gamma=1.0))
        g2 = grad_neg_log_posterior(state, ModelContext(Yc, pb, lle, gamma=2.0))
        assert np.max(np.abs(g2["X_free"] - g1["X_free"])) < 1e-10

    def test_out_of_bounds_raises(self):
        rng = np.random.default_rng(12)
        ctx = tiny_ctx(rng, n=6, l=5, R=2)
        state = random_state(rng, 6, 2, sigma2=1e8)
        with pytest.raises(ValueError):
            grad_neg_log_posterior(state, ctx)


class TestPackUnpack:
    def test_round_trip(self):
        rng = np.random.default_rng(13)
        state = random_state(rng, 7, 3)
        X, U, s2, sigma2 = unpack(pack(state), 7, 3)
        assert np.allclose(X, state.X, atol=1e-15)
        assert np.array_equal(U, state.U)
        assert s2 == pytest.approx(state.s2, rel=1e-15)
        assert sigma2 == pytest.approx(state.sigma2, rel=1e-15)

    def test_rows_sum_to_one_for_any_vector(self):
        rng = np.random.default_rng(14)
        D = feature_dim(3)
        w = rng.normal(size=(5 * 2 + D * D + 2,))
        X, _, _, _ = unpack(w, 5, 3)
        assert np.max(np.abs(X.sum(axis=1) - 1.0)) < 1e-12


class TestMapP:
    def _fixture(self, rng, n=20, l=8, R=2):
        ctx = tiny_ctx(rng, n=n, l=l, R=R, gamma=1.0)
        state = random_state(rng, n, R, s2=1.0, sigma2=0.2)
        return ctx, state

    def test_vague_prior_limit_is_ols(self):
        rng = np.random.default_rng(15)
        ctx, state = self._fixture(rng)
        big = LatentState(X=state.X, U=state.U, s2=1e12, sigma2=state.sigma2)
        # bounds would reject s2=1e12 in the objective, but map_P is a pure
        # linear solve and accepts it
        P = map_P(big, ctx)
        C = psi_batch(state.X) @ state.U
        ols = np.linalg.lstsq(C, ctx.Yc, rcond=None)[0].T
        assert np.max(np.abs(P - ols)) < 1e-6

    def test_infinite_noise_limit_is_prior_mean(self):
        rng = np.random.default_rng(16)
        ctx, state = self._fixture(rng)
        vague = LatentState(X=state.X, U=state.U, s2=state.s2, sigma2=1e12)
        P = map_P(vague, ctx)
        assert np.max(np.abs(P - ctx.pbar.basis)) < 1e-6

    def test_noise_free_realizable_reconstruction(self):
        rng = np.random.default_rng(17)
        n, l, R = 24, 8, 2
        D = feature_dim(R)
        X = random_sum_to_one(rng, n, R)
        U = rng.normal(size=(D, D))
        Ptrue = rng.normal(size=(l, D))
        Yc_raw = psi_batch(X) @ U @ Ptrue.T
        Yc = Yc_raw - Yc_raw.mean(axis=0)
        # recenter the generating map so the fixture stays exactly realizable
        pb = pca_basis(Yc, D)
        ctx = ModelContext(Yc, pb, lle_weights(Yc, K=2), gamma=1.0)
        state = LatentState(X=X, U=U, s2=1e10, sigma2=1e-6)
        Phat = map_P(state, ctx)
        recon = reconstruct(state, Phat)
        resid = recon - Yc_raw
        # reconstruction matches up to the removed column means
        resid -= resid.mean(axis=0)
        assert np.max(np.abs(resid)) < 1e-6


class TestReconstruct:
    def test_truth_latents_identity_u_reach_noise_floor(self):
        # exact linear scene, latents set to the true abundances, identity
        # coupling: the posterior spectral map must make the reconstruction
        # error vanish
        from nlunmix.embed import lle_weights, pca_basis
        from nlunmix.metrics import are
        from nlunmix.scene import SceneRecipe, mix, sample_abundances, synth_endmembers

        M = synth_endmembers(3, 16, seed=21)
        A = sample_abundances(60, 3, amax=1.0, seed=21)
        img = mix(SceneRecipe(model="lmm", R=3, L=16, N=60, sigma2=1e-4, seed=21), A, M)
        Yc = img.pixels - img.pixels.mean(axis=0)
        ctx = ModelContext(Yc, pca_basis(Yc, 6), lle_weights(Yc, K=3), gamma=1.0)
        state = LatentState(X=A.values, U=np.eye(6), s2=1e10, sigma2=1e-8)
        Phat = map_P(state, ctx)
        assert are(Yc, reconstruct(state, Phat)) <= 1e-6

    def test_zero_u_annihilates(self):
        rng = np.random.default_rng(18)
        state = LatentState(
            X=random_sum_to_one(rng, 5, 2), U=np.zeros((3, 3)), s2=0.1, sigma2=0.1
        )
        P = rng.normal(size=(7, 3))
        assert np.array_equal(reconstruct(state, P), np.zeros((5, 7)))

    def test_pixel_permutation_equivariance(self):
        rng = np.random.default_rng(19)
        state = random_state(rng, 8, 2)
        P = rng.normal(size=(6, 3))
        base = reconstruct(state, P)
        perm = rng.permutation(8)
        permuted = LatentState(X=state.X[perm], U=state.U, s2=state.s2, sigma2=state.sigma2)
        assert np.array_equal(reconstruct(permuted, P), base[perm])

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(20)
        state = random_state(rng, 5, 2)
        with pytest.raises(ValueError):
            reconstruct(state, np.zeros((7, 5)))
