import numpy as np
import pytest

from clgsmooth.exceptions import AllWeightsZero, DegenerateWeights
from clgsmooth.forward import (
    ess,
    kf_meas_update,
    kf_time_update_hier,
    kf_time_update_mixed,
    rbpf_run,
    systematic_resample,
)
from clgsmooth.gauss import MomentGaussian, chol_psd
from clgsmooth.models import builtin_theta_model, simulate

from conftest import make_hier_model, make_mixed_model
from oracles import logpdf_gauss, plain_conditional_kf


class TestSystematicResample:
    def test_uniform_weights_identity_multiset(self, rng):
        idx = systematic_resample(np.full(4, 0.25), rng)
        assert sorted(idx.tolist()) == [0, 1, 2, 3]

    def test_point_mass(self, rng):
        idx = systematic_resample(np.array([1.0, 0.0, 0.0]), rng)
        assert np.all(idx == 0)

    def test_equal_split_counts(self, rng):
        # two equal atoms replicated to N = 1e5: counts within 1 of N/2 each
        n = 100_000
        w = np.full(n, 1.0 / n)
        idx = systematic_resample(w, rng)
        first_half = np.sum(idx < n // 2)
        assert abs(first_half - n / 2) <= 1.0

    def test_degenerate_rejected(self, rng):
        with pytest.raises(DegenerateWeights):
            systematic_resample(np.zeros(3), rng)
        with pytest.raises(DegenerateWeights):
            systematic_resample(np.array([np.nan, 1.0]), rng)


class TestEss:
    def test_uniform(self):
        assert ess(np.full(10, 0.1)) == pytest.approx(10.0)

    def test_one_hot(self):
        assert ess(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0)

    def test_direct_formula(self):
        assert ess(np.array([0.75, 0.25])) == pytest.approx(1.6)


class TestMeasUpdate:
    def test_uninformative_measurement(self):
        m = MomentGaussian([1.0, -1.0], np.eye(2))
        out, ll = kf_meas_update(m, [0.3], np.zeros((1, 2)), [[0.7]], [0.5])
        assert np.allclose(out.mean, m.mean)
        assert np.allclose(out.cov(), m.cov())
        assert ll == pytest.approx(logpdf_gauss([0.5], [0.3], [[0.49]]))

    def test_scalar_conjugate(self):
        m = MomentGaussian([0.0], [[1.0]])
        out, ll = kf_meas_update(m, [0.0], [[1.0]], [[1.0]], [2.0])
        assert out.mean[0] == pytest.approx(1.0)
        assert out.cov()[0, 0] == pytest.approx(0.5)
        assert ll == pytest.approx(logpdf_gauss([2.0], [0.0], [[2.0]]))

    def test_huge_noise_keeps_prior(self):
        m = MomentGaussian([0.4], [[1.3]])
        out, _ = kf_meas_update(m, [0.0], [[1.0]], [[1e4]], [50.0])
        assert out.mean[0] == pytest.approx(0.4, abs=1e-4)
        assert out.cov()[0, 0] == pytest.approx(1.69, rel=1e-4)

    def test_matches_plain_oracle(self, rng):
        for _ in range(10):
            n, k = 3, 2
            half = rng.standard_normal((n, n)) + 2 * np.eye(n)
            m = MomentGaussian(rng.standard_normal(n), chol_psd(half @ half.T))
            c = rng.standard_normal((k, n))
            h = rng.standard_normal(k)
            rhalf = rng.standard_normal((k, k)) + 2 * np.eye(k)
            r = rhalf @ rhalf.T
            y = rng.standard_normal(k)
            out, ll = kf_meas_update(m, h, c, chol_psd(r), y)
            s = c @ m.cov() @ c.T + r
            kg = m.cov() @ c.T @ np.linalg.inv(s)
            mean_ref = m.mean + kg @ (y - h - c @ m.mean)
            cov_ref = m.cov() - kg @ s @ kg.T
            assert np.allclose(out.mean, mean_ref, atol=1e-10)
            assert np.allclose(out.cov(), cov_ref, atol=1e-10)
            assert ll == pytest.approx(logpdf_gauss(y, h + c @ m.mean, s), rel=1e-10)


class TestTimeUpdates:
    def test_hier_identity(self):
        m = MomentGaussian([1.0, 2.0], np.eye(2))
        out = kf_time_update_hier(m, np.zeros(2), np.eye(2), np.zeros((2, 2)))
        assert np.allclose(out.mean, m.mean)
        assert np.allclose(out.cov(), m.cov())

    def test_hier_scalar(self):
        out = kf_time_update_hier(MomentGaussian([0.0], [[1.0]]), [3.0], [[2.0]],
                                  [[1.0]])
        assert out.mean[0] == pytest.approx(3.0)
        assert out.cov()[0, 0] == pytest.approx(5.0)

    def test_hier_rank_deficient_noise(self, rng):
        m = MomentGaussian(rng.standard_normal(3), chol_psd(np.eye(3)))
        a = rng.standard_normal((3, 3))
        fm = np.zeros((3, 2))
        fm[0, 0] = 0.5
        out = kf_time_update_hier(m, np.zeros(3), a, fm)
        assert np.allclose(out.cov(), a @ m.cov() @ a.T + fm @ fm.T, atol=1e-10)
        assert np.allclose(np.triu(out.sqrt_cov, 1), 0.0)

    def test_mixed_disjoint_noise_reduces_to_hier(self, rng):
        # B = 0 and disjoint noise support: u carries no information on z
        m = MomentGaussian(rng.standard_normal(2), chol_psd(0.5 * np.eye(2)))
        g = np.array([0.1])
        b = np.zeros((1, 2))
        gm = np.array([[0.9, 0.0, 0.0]])
        f = rng.standard_normal(2)
        a = rng.standard_normal((2, 2))
        fm = np.hstack([np.zeros((2, 1)), 0.3 * rng.standard_normal((2, 2))])
        out = kf_time_update_mixed(m, [0.7], g, b, gm, f, a, fm)
        ref = kf_time_update_hier(m, f, a, fm)
        assert np.allclose(out.mean, ref.mean, atol=1e-12)
        assert np.allclose(out.cov(), ref.cov(), atol=1e-12)

    def test_mixed_scalar_conditioning(self):
        m = MomentGaussian([0.0], [[1.0]])
        out = kf_time_update_mixed(
            m, [1.0], [0.0], [[1.0]], [[1.0]], [0.0], [[1.0]], [[0.0]]
        )
        assert out.mean[0] == pytest.approx(0.5)
        assert out.cov()[0, 0] == pytest.approx(0.5)

    def test_mixed_matches_joint_gaussian_conditioning(self, rng):
        # brute force: the joint Gaussian of (z_t, u', z') conditioned on u'
        n_u, n_z, n_v = 1, 2, 3
        for _ in range(8):
            mean0 = rng.standard_normal(n_z)
            half = rng.standard_normal((n_z, n_z)) + 1.5 * np.eye(n_z)
            p0 = half @ half.T
            g = rng.standard_normal(n_u)
            b = rng.standard_normal((n_u, n_z))
            gm = rng.standard_normal((n_u, n_v)) + np.array([[1.0, 0, 0]])
            f = rng.standard_normal(n_z)
            a = rng.standard_normal((n_z, n_z))
            fm = rng.standard_normal((n_z, n_v))
            u_next = rng.standard_normal(n_u)

            # joint of (z_t, x') with x' = [u'; z'] = mu + M z + N v
            mu = np.concatenate([g, f])
            mmat = np.vstack([b, a])
            nmat = np.vstack([gm, fm])
            mean_j = np.concatenate([mean0, mu + mmat @ mean0])
            top = np.hstack([p0, p0 @ mmat.T])
            bot = np.hstack([mmat @ p0, mmat @ p0 @ mmat.T + nmat @ nmat.T])
            cov_j = np.vstack([top, bot])
            # condition (z_t, z') on u' (index n_z within the joint)
            iu = slice(n_z, n_z + n_u)
            keep = np.r_[0:n_z, n_z + n_u : 2 * n_z + n_u]
            suu = cov_j[iu, iu]
            k = cov_j[np.ix_(keep, range(n_z, n_z + n_u))] @ np.linalg.inv(suu)
            mean_c = mean_j[keep] + (k @ (u_next - mean_j[iu]))
            cov_c = cov_j[np.ix_(keep, keep)] - k @ cov_j[np.ix_(range(n_z, n_z + n_u), keep)]
            mean_ref, cov_ref = mean_c[n_z:], cov_c[n_z:, n_z:]

            out = kf_time_update_mixed(
                MomentGaussian(mean0, chol_psd(p0)), u_next, g, b, gm, f, a, fm
            )
            assert np.allclose(out.mean, mean_ref, atol=1e-9)
            assert np.allclose(out.cov(), cov_ref, atol=1e-9)


class TestRbpfRun:
    def test_degenerate_u_equals_single_kf(self, rng):
        # p(u'|u) a point mass and u-independent matrices: every particle is
        # the same conditional KF
        model = make_hier_model(rng, n_z=2, u_dependent=False)
        model.trans_sample = lambda r, u, t: u
        model.trans_logpdf = lambda un, u, t: np.zeros(np.asarray(un).shape[:-1])
        model.init_u = type(model.init_u)(np.zeros(1), np.zeros((1, 1)))
        traj = simulate_override(model, 12, rng)
        filt = rbpf_run(model, traj, 6, seed=4)
        means_ref, covs_ref, _ = plain_conditional_kf(
            model, np.zeros((12, 1)), traj
        )
        for t in (0, 5, 11):
            for i in range(6):
                assert np.allclose(filt.means[t, i], means_ref[t], atol=1e-8)
                assert np.allclose(
                    filt.sqrt_covs[t, i] @ filt.sqrt_covs[t, i].T,
                    covs_ref[t],
                    atol=1e-8,
                )

    def test_benchmark_smoke_invariants(self):
        model = builtin_theta_model()
        traj = simulate(model, 60, seed=11)
        filt = rbpf_run(model, traj.y, 100, seed=12)
        assert np.allclose(filt.weights.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(filt.ess >= 1.0 - 1e-9)
        assert np.all(filt.ess <= 100.0 + 1e-9)

    def test_single_particle_moments_match_conditional_kf(self, rng):
        model = make_mixed_model(rng)
        traj = simulate_override(model, 15, rng)
        filt = rbpf_run(model, traj, 1, seed=3)
        assert np.allclose(filt.weights, 1.0)
        means_ref, covs_ref, _ = plain_conditional_kf(
            model, filt.particles[:, 0, :], traj
        )
        assert np.allclose(filt.means[:, 0, :], means_ref, atol=1e-8)
        covs = np.einsum("tij,tkj->tik", filt.sqrt_covs[:, 0], filt.sqrt_covs[:, 0])
        assert np.allclose(covs, covs_ref, atol=1e-8)

    @pytest.mark.parametrize("flavor", ["hier", "mixed"])
    def test_per_particle_moments_match_ancestral_path_kf(self, rng, flavor):
        if flavor == "hier":
            model = make_hier_model(rng, n_z=2)
        else:
            model = make_mixed_model(rng, n_z=2)
        T, N = 12, 6
        traj = simulate_override(model, T, rng)
        filt = rbpf_run(model, traj, N, seed=8)
        # trace each particle's ancestral u-path at several times
        for t in (3, 7, T - 1):
            for i in range(N):
                path = np.zeros((t + 1, model.n_u))
                j = i
                for s in range(t, -1, -1):
                    path[s] = filt.particles[s, j]
                    j = filt.ancestors[s, j]
                means_ref, covs_ref, _ = plain_conditional_kf(
                    model, path, traj[: t + 1]
                )
                assert np.allclose(filt.means[t, i], means_ref[-1], atol=1e-8)
                assert np.allclose(
                    filt.sqrt_covs[t, i] @ filt.sqrt_covs[t, i].T,
                    covs_ref[-1],
                    rtol=1e-7,
                    atol=1e-8,
                )

    def test_seed_determinism(self):
        model = builtin_theta_model()
        traj = simulate(model, 40, seed=2)
        f1 = rbpf_run(model, traj.y, 50, seed=9)
        f2 = rbpf_run(model, traj.y, 50, seed=9)
        assert np.array_equal(f1.particles, f2.particles)
        assert np.array_equal(f1.weights, f2.weights)
        assert np.array_equal(f1.ancestors, f2.ancestors)

    def test_all_weights_zero_raises(self, rng):
        # weights only underflow in the log domain at a genuine -inf; an
        # infinite innovation (model/data mismatch) is the loud failure mode
        model = make_hier_model(rng)
        y = np.full((5, model.n_y), np.inf)
        with pytest.raises(AllWeightsZero) as exc:
            rbpf_run(model, y, 10, seed=1)
        assert exc.value.log_weights is not None


def simulate_override(model, T, rng):
    """Simulate observations without the validation pass (test helper)."""
    from clgsmooth.models import simulate as sim

    return sim(model, T, seed=int(rng.integers(1 << 30))).y


class TestErrorPaths:
    def test_singular_innovation_raises(self):
        from clgsmooth.exceptions import SingularInnovation

        m = MomentGaussian([0.0], [[0.0]])  # degenerate prior
        with pytest.raises(SingularInnovation):
            kf_meas_update(m, [0.0], [[1.0]], [[0.0]], [1.0])

    def test_mixed_q_not_pd_raises(self):
        from clgsmooth.exceptions import QNotPD

        m = MomentGaussian([0.0], [[1.0]])
        with pytest.raises(QNotPD):
            kf_time_update_mixed(
                m, [0.0], [0.0], [[1.0]], [[0.0]], [0.0], [[1.0]], [[1.0]]
            )
