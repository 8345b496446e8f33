import numpy as np
import pytest

from clgsmooth.backward import (
    backward_messages,
    backward_simulate,
    bwd_init,
    bwd_meas_update,
    bwd_predict_hier,
    bwd_predict_mixed,
    bwd_weights,
    smooth_linear,
    smooth_trajectories,
)
from clgsmooth.forward import rbpf_run
from clgsmooth.gauss import InfoPotential, quad_form
from clgsmooth.models import builtin_theta_model, simulate

from conftest import make_hier_model, make_mixed_model, make_tiny_hier_model
from oracles import (
    backward_weights_by_suffix_kf,
    enumerate_backward_paths,
    plain_conditional_kf,
    rts_reference,
    suffix_loglik,
)


def quad_log(pot, z):
    """log of the potential exp(-(z'Ωz - 2λ'z)/2 + log_z) at point z."""
    return (
        -0.5 * (quad_form(z, pot.omega) - 2.0 * np.dot(pot.lam, z)) + pot.log_z
    )


def scalar_meas_model(c, r, h):
    """Minimal hierarchical model with fixed scalar measurement triple."""
    from clgsmooth.models import GaussianInitial, HierarchicalModel
    from clgsmooth.gauss import MomentGaussian

    def meas(u, t):
        lead = np.asarray(u).shape[:-1]
        return (
            np.broadcast_to(np.atleast_1d(h), lead + (1,)),
            np.broadcast_to(np.atleast_2d(c), lead + (1, 1)),
            np.broadcast_to(np.atleast_2d(r), lead + (1, 1)),
        )

    return HierarchicalModel(
        n_u=1, n_z=1, n_v=1, n_y=1,
        trans_sample=lambda rng, u, t: u,
        trans_logpdf=lambda un, u, t: np.zeros(np.asarray(un).shape[:-1]),
        dyn=lambda un, t: (np.zeros(1), np.eye(1), np.eye(1)),
        meas=meas,
        init_u=GaussianInitial(np.zeros(1), np.eye(1)),
        init_z=MomentGaussian(np.zeros(1), np.eye(1)),
        vectorized=True,
    )


class TestBwdInit:
    def test_scalar_substitution(self):
        model = scalar_meas_model(1.0, 0.5, 0.0)
        pot = bwd_init(model, [0.0], [2.0], t=1)
        assert pot.omega[0, 0] == pytest.approx(2.0)
        assert pot.lam[0] == pytest.approx(4.0)

    def test_uninformative(self):
        model = scalar_meas_model(0.0, 0.5, 0.3)
        pot = bwd_init(model, [0.0], [2.0], t=1)
        assert pot.omega[0, 0] == pytest.approx(0.0)
        assert pot.lam[0] == pytest.approx(0.0)

    def test_proportional_to_likelihood_on_grid(self, rng):
        model = make_hier_model(rng, n_z=3, n_y=2)
        u = rng.standard_normal(1)
        y = rng.standard_normal(2)
        pot = bwd_init(model, u, y, t=4)
        h, c, r = model.meas(u, 4)
        from oracles import logpdf_gauss

        # exp(-(z'Ωz-2λ'z)/2 + log_z) must equal N(y; h+Cz, R) pointwise
        for _ in range(6):
            z = rng.standard_normal(3)
            direct = logpdf_gauss(y, np.asarray(h) + np.asarray(c) @ z, r)
            assert quad_log(pot, z) == pytest.approx(direct, rel=1e-10)


class TestBwdMeasUpdate:
    def test_uninformative_passthrough(self, rng):
        model = scalar_meas_model(0.0, 1.0, 0.0)
        pred = InfoPotential([[0.7]], [0.3], -1.2)
        out = bwd_meas_update(model, [0.0], [1.0], 1, pred)
        assert out.omega[0, 0] == pytest.approx(0.7)
        assert out.lam[0] == pytest.approx(0.3)

    def test_zero_pred_matches_init(self):
        model = scalar_meas_model(1.3, 0.6, -0.2)
        init = bwd_init(model, [0.0], [0.9], t=2)
        upd = bwd_meas_update(model, [0.0], [0.9], 2, InfoPotential.zero(1))
        assert upd.omega[0, 0] == pytest.approx(init.omega[0, 0])
        assert upd.lam[0] == pytest.approx(init.lam[0])
        assert upd.log_z == pytest.approx(init.log_z)

    def test_scalar_addition(self):
        model = scalar_meas_model(1.0, 1.0, 0.0)
        out = bwd_meas_update(model, [0.0], [3.0], 1, InfoPotential([[1.0]], [1.0]))
        assert out.omega[0, 0] == pytest.approx(2.0)
        assert out.lam[0] == pytest.approx(4.0)


class TestBwdPredictHier:
    def _model_with_dyn(self, f, a, fm, rng):
        model = make_hier_model(rng, n_z=len(np.atleast_1d(f)))
        model.dyn = lambda un, t: (
            np.broadcast_to(np.atleast_1d(f),
                            np.asarray(un).shape[:-1] + (len(np.atleast_1d(f)),)),
            np.broadcast_to(np.atleast_2d(a),
                            np.asarray(un).shape[:-1] + np.atleast_2d(a).shape),
            np.broadcast_to(np.atleast_2d(fm),
                            np.asarray(un).shape[:-1] + np.atleast_2d(fm).shape),
        )
        return model

    def test_noiseless_prediction(self, rng):
        a = rng.standard_normal((2, 2))
        model = self._model_with_dyn(np.zeros(2), a, np.zeros((2, 2)), rng)
        upd = InfoPotential(np.eye(2) * 0.8, np.array([0.2, -0.1]))
        pot, _ = bwd_predict_hier(model, [0.0], 1, upd)
        assert np.allclose(pot.omega, a.T @ upd.omega @ a, atol=1e-12)
        assert np.allclose(pot.lam, a.T @ upd.lam, atol=1e-12)

    def test_scalar_marginalization(self, rng):
        model = self._model_with_dyn([0.0], [[1.0]], [[1.0]], rng)
        pot, _ = bwd_predict_hier(model, [0.0], 1, InfoPotential([[1.0]], [0.0]))
        assert pot.omega[0, 0] == pytest.approx(0.5)
        assert pot.lam[0] == pytest.approx(0.0)
        # lemma constant: -0.5 log|M| with M = 2
        assert pot.log_z == pytest.approx(-0.5 * np.log(2.0))

    def test_flat_message_propagates(self, rng):
        a = rng.standard_normal((2, 2))
        model = self._model_with_dyn(rng.standard_normal(2), a,
                                     rng.standard_normal((2, 2)), rng)
        lam = rng.standard_normal(2)
        pot, _ = bwd_predict_hier(model, [0.0], 1, InfoPotential(np.zeros((2, 2)), lam))
        assert np.allclose(pot.omega, 0.0, atol=1e-14)
        assert np.allclose(pot.lam, a.T @ lam, atol=1e-13)


class TestBwdPredictMixed:
    def test_projection_identity(self, rng):
        model = make_mixed_model(rng)
        g, b, gm, f, a, fm = model.dyn(np.zeros(1), 1)
        gm = np.asarray(gm)
        q = gm @ gm.T
        pi = np.eye(gm.shape[1]) - gm.T @ np.linalg.inv(q) @ gm
        assert np.allclose(pi @ pi, pi, atol=1e-10)

    def test_disjoint_noise_reduces_to_hier(self, rng):
        # B = 0 and G, F with disjoint support: the u-transition factors out
        mixed = make_mixed_model(rng, n_z=2, coupled_noise=False)
        orig = mixed.dyn

        def dyn(u, t):
            g, b, gm, f, a, fm = orig(u, t)
            return g, np.zeros_like(np.asarray(b)), gm, f, a, fm

        mixed.dyn = dyn
        u = np.array([0.3])
        u_next = np.array([0.8])
        half = rng.standard_normal((2, 2))
        upd = InfoPotential(half @ half.T, rng.standard_normal(2), -0.4)
        pot = bwd_predict_mixed(mixed, u, u_next, 2, upd)

        g, b, gm, f, a, fm = dyn(u, 2)
        hier = make_hier_model(rng, n_z=2)
        hier.dyn = lambda un, t: (f, a, np.asarray(fm)[:, 1:])
        ref, _ = bwd_predict_hier(hier, u_next, 2, upd)
        assert np.allclose(pot.omega, ref.omega, atol=1e-10)
        assert np.allclose(pot.lam, ref.lam, atol=1e-10)
        # prefactor = lemma constant + log N(u_next; g, Q)
        from oracles import logpdf_gauss

        q = np.asarray(gm) @ np.asarray(gm).T
        assert pot.log_z == pytest.approx(
            ref.log_z + logpdf_gauss(u_next, g, q), rel=1e-10
        )

    @pytest.mark.parametrize("coupled", [True, False])
    def test_grid_oracle_vs_suffix_kf(self, rng, coupled):
        # the module's master property, pointwise in z on a grid
        model = make_mixed_model(rng, n_z=2, coupled_noise=coupled)
        T = 6
        traj = simulate(model, T, seed=int(rng.integers(1 << 30)))
        # fixed path: use the simulated u's
        omegas, lams, logzs = backward_messages(model, traj.u, traj.y)
        for t in (1, 3, T - 1):
            pot = InfoPotential(omegas[t - 1], lams[t - 1], logzs[t - 1])
            for _ in range(5):
                z = rng.standard_normal(2)
                direct = suffix_loglik(
                    model, traj.u[t - 1 :], traj.y, t, z, np.zeros((2, 2))
                )
                assert quad_log(pot, z) == pytest.approx(direct, rel=1e-9, abs=1e-9)

    def test_hier_grid_oracle_vs_suffix_kf(self, rng):
        model = make_hier_model(rng, n_z=2, n_y=2)
        T = 6
        traj = simulate(model, T, seed=int(rng.integers(1 << 30)))
        omegas, lams, logzs = backward_messages(model, traj.u, traj.y)
        for t in (1, 2, T - 1):
            pot = InfoPotential(omegas[t - 1], lams[t - 1], logzs[t - 1])
            for _ in range(5):
                z = rng.standard_normal(2)
                direct = suffix_loglik(
                    model, traj.u[t - 1 :], traj.y, t, z, np.zeros((2, 2))
                )
                assert quad_log(pot, z) == pytest.approx(direct, rel=1e-9, abs=1e-9)


class TestBwdWeights:
    def test_flat_message_returns_forward_times_z(self, rng):
        n = 6
        logw = np.log(rng.dirichlet(np.ones(n)))
        logz = rng.standard_normal(n)
        means = rng.standard_normal((n, 2))
        gammas = np.broadcast_to(np.eye(2), (n, 2, 2))
        w = bwd_weights(logw, means, gammas, np.zeros((2, 2)), np.zeros(2), logz)
        expect = np.exp(logw + logz)
        expect /= expect.sum()
        assert np.allclose(w, expect, atol=1e-12)

    def test_single_particle(self):
        w = bwd_weights(
            np.array([0.0]), np.zeros((1, 2)), np.broadcast_to(np.eye(2), (1, 2, 2)),
            np.eye(2), np.zeros(2), np.array([-3.0]),
        )
        assert w[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("flavor", ["hier", "mixed"])
    def test_matches_suffix_kf_weights(self, rng, flavor):
        # normalized backward weights vs the O(T^2) suffix-KF route
        if flavor == "hier":
            model = make_hier_model(rng, n_z=2)
        else:
            model = make_mixed_model(rng, n_z=2)
        T, N = 8, 5
        traj = simulate(model, T, seed=int(rng.integers(1 << 30)))
        filt = rbpf_run(model, traj.y, N, seed=21)
        trajs, wbars = backward_simulate(filt, model, 1, seed=5,
                                         return_weights=True)
        u_path = trajs[0].u_path
        for t in range(1, T):
            ref = backward_weights_by_suffix_kf(model, filt, u_path[t:], t)
            got = wbars[t][0]
            assert np.allclose(got, ref, rtol=1e-8, atol=1e-12)


class TestBackwardSimulate:
    def test_seed_determinism(self):
        model = builtin_theta_model()
        traj = simulate(model, 30, seed=1)
        filt = rbpf_run(model, traj.y, 40, seed=2)
        a = backward_simulate(filt, model, 6, seed=3)
        b = backward_simulate(filt, model, 6, seed=3)
        for x, y_ in zip(a, b):
            assert np.array_equal(x.u_path, y_.u_path)
            assert np.array_equal(x.indices, y_.indices)

    def test_no_backward_information_flow(self, rng):
        # u-independent transition and measurement: backward weights equal
        # the forward weights at every step
        import math

        model = make_hier_model(rng, n_z=2, u_dependent=False)
        model.trans_sample = lambda r, u, t: 0.6 * r.standard_normal(u.shape)
        model.trans_logpdf = lambda un, u, t: (
            -0.5 * (np.asarray(un)[..., 0] / 0.6) ** 2
            - math.log(0.6)
            - 0.5 * math.log(2 * math.pi)
        ) + 0.0 * np.asarray(u)[..., 0]
        traj = simulate(model, 10, seed=int(rng.integers(1 << 30)))
        filt = rbpf_run(model, traj.y, 8, seed=7, resample="never")
        _, wbars = backward_simulate(filt, model, 3, seed=9, return_weights=True)
        for t, wb in wbars.items():
            assert np.allclose(wb, filt.weights[t - 1][None, :], atol=1e-10)

    def test_trajectories_live_on_forward_support(self, rng):
        model = make_mixed_model(rng)
        traj = simulate(model, 12, seed=int(rng.integers(1 << 30)))
        filt = rbpf_run(model, traj.y, 10, seed=3)
        trajs = backward_simulate(filt, model, 4, seed=4)
        for tr in trajs:
            for t in range(12):
                assert np.any(
                    np.all(filt.particles[t] == tr.u_path[t][None, :], axis=1)
                )

    def test_tiny_model_distribution_matches_enumeration(self):
        # 2 particles, T = 3: empirical path frequencies vs exact enumeration
        model = make_tiny_hier_model()
        traj = simulate(model, 3, seed=13)
        filt = rbpf_run(model, traj.y, 2, seed=17, resample="never")
        exact = enumerate_backward_paths(model, filt)
        n_draws = 40_000
        trajs = backward_simulate(filt, model, n_draws, seed=23)
        counts = {}
        for tr in trajs:
            key = tuple(int(i) for i in tr.indices)
            counts[key] = counts.get(key, 0) + 1
        for key, p in exact.items():
            expect = p * n_draws
            got = counts.get(key, 0)
            if expect < 5:
                continue
            # 3-sigma binomial band
            sd = np.sqrt(n_draws * p * (1 - p))
            assert abs(got - expect) < 3.5 * sd


class TestSmoothLinear:
    @pytest.mark.parametrize("flavor", ["hier", "mixed"])
    def test_matches_rts_reference(self, rng, flavor):
        if flavor == "hier":
            model = make_hier_model(rng, n_z=3, n_y=2)
        else:
            model = make_mixed_model(rng, n_z=3)
        T = 12
        traj = simulate(model, T, seed=int(rng.integers(1 << 30)))
        omegas, lams, logzs = backward_messages(model, traj.u, traj.y)
        from clgsmooth.backward import BackwardTrajectory

        btraj = BackwardTrajectory(
            u_path=traj.u, omegas=omegas, lams=lams, log_zs=logzs,
            indices=np.zeros(T, dtype=np.int64),
        )
        smooth_linear(model, btraj, traj.y)
        ms_ref, ps_ref = rts_reference(model, traj.u, traj.y)
        assert np.allclose(btraj.smoothed_means, ms_ref, atol=1e-8)
        covs = np.einsum(
            "tij,tkj->tik", btraj.smoothed_sqrt_covs, btraj.smoothed_sqrt_covs
        )
        assert np.allclose(covs, ps_ref, atol=1e-8)

    def test_final_time_is_filtered_moment(self, rng):
        model = make_hier_model(rng, n_z=2)
        T = 6
        traj = simulate(model, T, seed=int(rng.integers(1 << 30)))
        omegas, lams, logzs = backward_messages(model, traj.u, traj.y)
        from clgsmooth.backward import BackwardTrajectory

        btraj = BackwardTrajectory(traj.u, omegas, lams, logzs,
                                   np.zeros(T, dtype=np.int64))
        smooth_linear(model, btraj, traj.y)
        means_f, covs_f, _ = plain_conditional_kf(model, traj.u, traj.y)
        assert np.allclose(btraj.smoothed_means[-1], means_f[-1], atol=1e-9)

    def test_zero_messages_give_filter_marginals(self, rng):
        model = make_mixed_model(rng, n_z=2)
        T = 8
        traj = simulate(model, T, seed=int(rng.integers(1 << 30)))
        from clgsmooth.backward import BackwardTrajectory

        btraj = BackwardTrajectory(
            traj.u, np.zeros((T, 2, 2)), np.zeros((T, 2)), np.zeros(T),
            np.zeros(T, dtype=np.int64),
        )
        smooth_linear(model, btraj, traj.y)
        means_f, covs_f, _ = plain_conditional_kf(model, traj.u, traj.y)
        assert np.allclose(btraj.smoothed_means, means_f, atol=1e-8)

    def test_full_pipeline_oracle_on_sampled_trajectory(self, rng):
        # stored messages along a *sampled* trajectory match the suffix KF
        model = builtin_theta_model()
        traj = simulate(model, 10, seed=3)
        filt = rbpf_run(model, traj.y, 6, seed=4)
        trajs = backward_simulate(filt, model, 2, seed=5)
        for tr in trajs:
            for t in (2, 5, 9):
                pot = InfoPotential(tr.omegas[t - 1], tr.lams[t - 1],
                                    tr.log_zs[t - 1])
                z = rng.standard_normal(4)
                direct = suffix_loglik(
                    model, tr.u_path[t - 1 :], traj.y, t, z, np.zeros((4, 4))
                )
                assert quad_log(pot, z) == pytest.approx(direct, rel=1e-8,
                                                         abs=1e-8)


class TestHierarchicalSharing:
    def test_shared_prediction_bitwise(self, rng):
        # predicting once equals predicting redundantly per particle
        from clgsmooth.backward import _predict_hier_arrays

        model = make_hier_model(rng, n_z=3)
        f, a, fm = model.dyn(np.array([0.4]), 2)
        half = rng.standard_normal((3, 3))
        omh = half @ half.T
        lamh = rng.standard_normal(3)
        om1, lam1, c1 = _predict_hier_arrays(
            np.asarray(f), np.asarray(a), np.asarray(fm), omh, lamh
        )
        stacked = tuple(
            np.broadcast_to(np.asarray(m), (5,) + np.asarray(m).shape).copy()
            for m in (f, a, fm)
        )
        om5, lam5, c5 = _predict_hier_arrays(
            *stacked, np.broadcast_to(omh, (5, 3, 3)).copy(),
            np.broadcast_to(lamh, (5, 3)).copy()
        )
        for i in range(5):
            assert np.array_equal(om5[i], om1)
            assert np.array_equal(lam5[i], lam1)
            assert c5[i] == c1


class TestBackwardErrors:
    def test_bwd_init_r_not_pd(self, rng):
        from clgsmooth.exceptions import RNotPD

        model = scalar_meas_model(1.0, -1.0, 0.0)  # negative "R"
        with pytest.raises(RNotPD):
            bwd_init(model, [0.0], [1.0], t=1)

    def test_predict_mixed_q_not_pd(self, rng):
        from clgsmooth.exceptions import QNotPD

        model = make_mixed_model(rng)
        orig = model.dyn

        def dyn(u, t):
            g, b, gm, f, a, fm = orig(u, t)
            return g, b, np.zeros_like(np.asarray(gm)), f, a, fm

        model.dyn = dyn
        with pytest.raises(QNotPD):
            bwd_predict_mixed(model, [0.0], [0.1], 1,
                              InfoPotential(np.eye(2), np.zeros(2)))

    def test_all_backward_weights_zero(self, rng):
        from clgsmooth.exceptions import AllWeightsZero

        with pytest.raises(AllWeightsZero):
            bwd_weights(
                np.full(3, -np.inf), np.zeros((3, 1)),
                np.broadcast_to(np.eye(1), (3, 1, 1)),
                np.eye(1), np.zeros(1), np.zeros(3),
            )
