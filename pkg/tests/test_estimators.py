import numpy as np
import pytest

from doblab.estimators import (
    EstimationError,
    GaussianBelief,
    ImmState,
    MkcConfig,
    NkfDobState,
    PartitionedDobState,
    SiseState,
    gaussian_kernel,
    imm_dob_init,
    immkf_dob_step,
    kf_dob_init,
    kf_dob_partitioned_step,
    kf_dob_step,
    kf_step,
    mkc_loss,
    mkckf_dob_step,
    nkf_dob_init,
    nkf_dob_step,
    sise_init,
    sise_step,
)
from doblab.model import LinearSystem, ModelError, augment, symmetrize
from doblab.oracles import batch_kf_estimate


def rand_system(rng, n=None, m=None, p=1):
    """Random stable system (spectral radius < 1) satisfying rank(HG) = p."""
    n = n or int(rng.integers(2, 4))
    m = m if m is not None else n
    while True:
        F = rng.standard_normal((n, n))
        F *= rng.uniform(0.3, 0.95) / max(np.abs(np.linalg.eigvals(F)).max(), 1e-12)
        G = rng.standard_normal((n, p))
        H = rng.standard_normal((m, n)) + np.eye(m, n)
        A = rng.standard_normal((n, n))
        Q = 0.1 * (A @ A.T) + 0.01 * np.eye(n)
        B = rng.standard_normal((m, m))
        R = 0.1 * (B @ B.T) + 0.05 * np.eye(m)
        try:
            return LinearSystem(F=F, G=G, H=H, Q=Q, R=R)
        except ModelError:
            continue


def spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T + n * np.eye(n))


def tracking_system(q_x=1e-4, r=1e-2):
    return LinearSystem(F=[[1.0, 0.1], [0.0, 1.0]], G=[0.005, 0.1],
                        H=np.eye(2), Q=q_x * np.eye(2), R=r * np.eye(2))


# ---------------------------------------------------------------------------
# kf_step
# ---------------------------------------------------------------------------

class TestKfStep:
    def test_scalar_hand_case(self):
        # Phi=1, H=1, Q=0, R=1, prior (0, 1), y=2: K = 1/2 analytically
        post = kf_step(GaussianBelief([0.0], [[1.0]]),
                       [[1.0]], [[1.0]], [[0.0]], [[1.0]], [2.0])
        assert post.mean[0] == pytest.approx(1.0, abs=1e-14)
        assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-14)

    def test_huge_r_freezes_prediction(self):
        rng = np.random.default_rng(1)
        sys = rand_system(rng, n=3)
        belief = GaussianBelief(rng.standard_normal(3), spd(rng, 3))
        y = rng.standard_normal(sys.m)
        post = kf_step(belief, sys.F, sys.H, sys.Q, 1e12 * np.asarray(sys.R), y)
        predicted = np.asarray(sys.F) @ belief.mean
        assert np.abs(post.mean - predicted).max() <= 1e-6

    def test_matches_batch_oracle_after_20_steps(self):
        rng = np.random.default_rng(2)
        sys = rand_system(rng, n=3)
        x0 = rng.standard_normal(3)
        P0 = spd(rng, 3)
        ys = [rng.standard_normal(sys.m) for _ in range(20)]
        belief = GaussianBelief(x0, P0)
        for y in ys:
            belief = kf_step(belief, sys.F, sys.H, sys.Q, sys.R, y)
        batch = batch_kf_estimate(sys.F, sys.H, sys.Q, sys.R, x0, P0, ys)
        assert np.abs(belief.mean - batch).max() <= 1e-8

    def test_information_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            sys = rand_system(rng)
            belief = GaussianBelief(rng.standard_normal(sys.n), spd(rng, sys.n))
            post = kf_step(belief, sys.F, sys.H, sys.Q, sys.R,
                           rng.standard_normal(sys.m))
            P_pred = symmetrize(sys.F @ belief.cov @ sys.F.T + sys.Q)
            lhs = np.linalg.inv(post.cov)
            rhs = np.linalg.inv(P_pred) + sys.H.T @ np.linalg.solve(sys.R, sys.H)
            assert np.abs(lhs - rhs).max() <= 1e-8 * np.abs(rhs).max()

    def test_gain_complement_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            sys = rand_system(rng)
            belief = GaussianBelief(rng.standard_normal(sys.n), spd(rng, sys.n))
            post = kf_step(belief, sys.F, sys.H, sys.Q, sys.R,
                           rng.standard_normal(sys.m))
            P_pred = symmetrize(sys.F @ belief.cov @ sys.F.T + sys.Q)
            M_from_post = post.cov @ np.linalg.inv(P_pred)
            M_ident = np.linalg.inv(
                np.eye(sys.n) + P_pred @ sys.H.T @ np.linalg.solve(sys.R, sys.H))
            assert np.abs(M_from_post - M_ident).max() <= 1e-9

    def test_singular_innovation_reports_condition(self):
        belief = GaussianBelief([0.0, 0.0], np.zeros((2, 2)))
        with pytest.raises(EstimationError, match="cond"):
            kf_step(belief, np.eye(2), np.eye(2), np.zeros((2, 2)),
                    np.zeros((2, 2)) + 1e-320, [0.0, 0.0])


# ---------------------------------------------------------------------------
# kf_dob_step and the partitioned form
# ---------------------------------------------------------------------------

class TestKfDob:
    def test_zero_innovation_keeps_prediction(self):
        sys = tracking_system()
        D = [[1e-4]]
        belief = kf_dob_init(GaussianBelief([1.0, -2.0], 0.1 * np.eye(2)), D)
        aug = augment(sys, D)
        predicted = aug.Phi @ belief.mean
        y = aug.Haug @ predicted
        post, d_hat, d_cov = kf_dob_step(belief, sys, D, y)
        assert np.abs(post.mean - predicted).max() <= 1e-14
        assert d_hat[0] == pytest.approx(predicted[0], abs=1e-14)

    def test_partitioned_equivalence_over_50_steps(self):
        rng = np.random.default_rng(11)
        sys = tracking_system()
        D = [[2e-4]]
        x0 = GaussianBelief(rng.standard_normal(2), 0.1 * np.eye(2))
        joint = kf_dob_init(x0, D)
        part = PartitionedDobState(x0, np.zeros(1), np.asarray(D), np.zeros((1, 2)))
        worst = 0.0
        for _ in range(50):
            y = rng.standard_normal(2)
            joint, d_hat, d_cov = kf_dob_step(joint, sys, D, y)
            part = kf_dob_partitioned_step(part, sys, D, y)
            worst = max(
                worst,
                abs(part.d[0] - d_hat[0]),
                abs(part.d_cov[0, 0] - d_cov[0, 0]),
                np.abs(part.x_belief.mean - joint.mean[1:]).max(),
                np.abs(part.x_belief.cov - joint.cov[1:, 1:]).max(),
                np.abs(part.cross - joint.cov[:1, 1:]).max(),
            )
        assert worst <= 1e-9

    def test_partitioned_scalar_hand_step(self):
        # F=G=H=1, Q=0, R=1, D=0, P^dd=1, P^dx=0, P^xx=1:
        #   P^dd_pred=1, P^dx_pred=1, P^xx_pred=2, S=3, K^x=2/3, M^d=1/3
        sys = LinearSystem(F=[[1.0]], G=[[1.0]], H=[[1.0]], Q=[[0.0]], R=[[1.0]])
        state = PartitionedDobState(GaussianBelief([0.0], [[1.0]]),
                                    [0.0], [[1.0]], [[0.0]])
        out = kf_dob_partitioned_step(state, sys, [[0.0]], [3.0])
        assert out.x_belief.mean[0] == pytest.approx(2.0, abs=1e-12)   # 2/3 * 3
        assert out.d[0] == pytest.approx(1.0, abs=1e-12)               # 1/3 * 3
        assert out.x_belief.cov[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert out.d_cov[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-12)  # 1 - 1/3
        assert out.cross[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-12)  # 1 - 2/3

    def test_zero_disturbance_uncertainty_freezes_d(self):
        rng = np.random.default_rng(12)
        sys = tracking_system()
        state = PartitionedDobState(GaussianBelief([0.0, 0.0], 0.1 * np.eye(2)),
                                    [3.0], [[0.0]], np.zeros((1, 2)))
        for _ in range(5):
            state = kf_dob_partitioned_step(state, sys, [[0.0]],
                                            rng.standard_normal(2))
            assert state.d[0] == pytest.approx(3.0, abs=1e-12)


# ---------------------------------------------------------------------------
# NKF-DOB
# ---------------------------------------------------------------------------

class TestNkfDob:
    def test_zero_d_collapses_to_plain_kf(self):
        rng = np.random.default_rng(21)
        sys = tracking_system()
        x0 = GaussianBelief(rng.standard_normal(2), 0.1 * np.eye(2))
        state = nkf_dob_init(sys, x0)
        plain = x0
        for _ in range(10):
            y = rng.standard_normal(2)
            state = nkf_dob_step(state, sys, [[0.0]], y)
            plain = kf_step(plain, sys.F, sys.H, sys.Q, sys.R, y)
            assert state.d[0] == 0.0
            assert np.abs(state.x_belief.mean - plain.mean).max() <= 1e-12
            assert np.abs(state.x_belief.cov - plain.cov).max() <= 1e-12

    def test_gain_product_tends_to_identity(self):
        # M_k H G -> I as D grows
        rng = np.random.default_rng(22)
        sys = tracking_system()
        state = nkf_dob_init(sys, GaussianBelief([0.0, 0.0], 0.1 * np.eye(2)))
        D = 1e8 * np.eye(1)
        for _ in range(10):
            state = nkf_dob_step(state, sys, D, rng.standard_normal(2))
        # P^d = (I - M H G) D, so |M H G - I| = |P^d| / D
        assert abs(state.d_cov[0, 0]) / 1e8 <= 1e-4


# ---------------------------------------------------------------------------
# SISE
# ---------------------------------------------------------------------------

class TestSise:
    def test_scalar_hand_case(self):
        # F=H=G=1, Q=0, R=1, P=1: Rt=2, M*=1, d = y - x_pred, P^dd=2
        sys = LinearSystem(F=[[1.0]], G=[[1.0]], H=[[1.0]], Q=[[0.0]], R=[[1.0]])
        state = SiseState(GaussianBelief([0.5], [[1.0]]), [0.0], [[0.0]])
        out = sise_step(state, sys, [2.0])
        assert out.last_d[0] == pytest.approx(1.5, abs=1e-12)
        assert out.last_d_cov[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_gain_identity_on_100_seeded_systems(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            sys = rand_system(rng)
            P_pred = spd(rng, sys.n)
            Rt = symmetrize(sys.H @ P_pred @ sys.H.T + sys.R)
            HG = sys.H @ sys.G
            W = np.linalg.solve(Rt, HG)
            M = np.linalg.inv(HG.T @ W) @ W.T
            assert np.abs(M @ HG - np.eye(sys.p)).max() <= 1e-12

    def test_posterior_covariance_matches_error_equation(self):
        # Eq.-form P (single complement factor + cross term) equals the fully
        # sandwiched covariance of the error recursion.
        rng = np.random.default_rng(32)
        for _ in range(10):
            sys = rand_system(rng, n=3, m=3)
            P_pred = spd(rng, 3)
            Rt = symmetrize(sys.H @ P_pred @ sys.H.T + sys.R)
            Rti = np.linalg.inv(Rt)
            HG = sys.H @ sys.G
            M = np.linalg.inv(HG.T @ Rti @ HG) @ (HG.T @ Rti)
            K = P_pred @ sys.H.T @ Rti
            A = np.eye(3) - sys.G @ M @ sys.H
            P_star = A @ P_pred @ A.T + sys.G @ M @ sys.R @ M.T @ sys.G.T
            IKH = np.eye(3) - K @ sys.H
            p_form = IKH @ P_star + K @ sys.R @ M.T @ sys.G.T
            p_full = (IKH @ P_star @ IKH.T + K @ sys.R @ K.T
                      + IKH @ (sys.G @ M @ sys.R) @ K.T
                      + K @ (sys.R @ M.T @ sys.G.T) @ IKH.T)
            assert np.abs(p_form - p_full).max() <= 1e-10 * (1 + np.abs(p_full).max())

    def test_monte_carlo_unbiasedness(self):
        # Constant disturbance, many trials: per-step standardized mean error
        # bounded family-wise, global mean within 3 SE.
        from doblab.harness import MonteCarloConfig, Sise, run_monte_carlo
        from doblab.scenario import DisturbanceProfile

        sys = tracking_system()
        profile = DisturbanceProfile(segments=((0, 4.0),), noise_cov=[[1e-4]])
        cfg = MonteCarloConfig(
            sys=sys, profile=profile, steps=1000, estimators=(Sise("sise"),),
            base_seed=414, trials=100, window=(1, 1000),
            x0_cov=1e-2 * np.eye(2), time_trials=False)
        rep = run_monte_carlo(cfg).estimators["sise"]
        se = rep.std / np.sqrt(cfg.trials)
        z = np.abs(rep.bias) / np.maximum(se, 1e-300)
        assert z.max() <= 4.5
        z_mean = abs(rep.bias.mean()) / (rep.std.mean() / np.sqrt(cfg.trials))
        assert z_mean <= 3.0

    def test_unobservable_disturbance_raises_at_construction(self):
        with pytest.raises(ModelError, match="disturbance unobservable"):
            LinearSystem(F=np.eye(2), G=[0.0, 1.0], H=[[1.0, 0.0]],
                         Q=np.eye(2), R=[[1.0]])


# ---------------------------------------------------------------------------
# Kernel and MKC loss
# ---------------------------------------------------------------------------

class TestKernel:
    def test_zero_error_gives_one(self):
        assert gaussian_kernel(0.0, 3.7) == 1.0

    def test_one_sigma(self):
        assert gaussian_kernel(2.0, 2.0) == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_wide_kernel_limit(self):
        assert gaussian_kernel(3.0, 1e8) == pytest.approx(1.0, abs=1e-12)

    def test_positive_bandwidth_required(self):
        with pytest.raises(ModelError):
            gaussian_kernel(1.0, 0.0)


class TestMkcLoss:
    def test_zero_errors(self):
        assert mkc_loss([0.0, 0.0], [1.0, 2.0]) == 0.0

    def test_single_channel(self):
        assert mkc_loss([1.0], [1.0]) == pytest.approx(1 - np.exp(-0.5), rel=1e-12)

    def test_wide_bandwidth_recovers_half_squared_error(self):
        # sigma^2 (1 - exp(-e^2/2sigma^2)) -> e^2/2
        loss = mkc_loss([1.0, 2.0], [1e8, 1e8])
        assert loss == pytest.approx(0.5 * (1 + 4), abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ModelError):
            mkc_loss([1.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# MKCKF-DOB
# ---------------------------------------------------------------------------

class TestMkckfDob:
    def test_wide_bandwidths_reduce_to_kf_dob(self):
        rng = np.random.default_rng(41)
        sys = tracking_system()
        D = [[1e-4]]
        cfg = MkcConfig(sigma_d=[1e8])
        mkc = kf_dob_init(GaussianBelief([0.0, 0.0], 0.1 * np.eye(2)), D)
        kf = mkc
        worst = 0.0
        for _ in range(100):
            y = rng.standard_normal(2)
            res = mkckf_dob_step(mkc, sys, D, y, cfg)
            kf, d_hat, _ = kf_dob_step(kf, sys, D, y)
            mkc = res.belief
            worst = max(worst, np.abs(res.belief.mean - kf.mean).max(),
                        np.abs(res.belief.cov - kf.cov).max())
        assert worst <= 1e-6

    def test_zero_innovation_converges_in_one_iteration(self):
        sys = tracking_system()
        D = [[1e-4]]
        cfg = MkcConfig(sigma_d=[3.0])
        belief = kf_dob_init(GaussianBelief([1.0, 2.0], 0.1 * np.eye(2)), D)
        aug = augment(sys, D)
        predicted = aug.Phi @ belief.mean
        res = mkckf_dob_step(belief, sys, D, aug.Haug @ predicted, cfg)
        assert res.iters == 1
        assert res.converged
        assert np.abs(res.belief.mean - predicted).max() <= 1e-12

    def test_inflation_invariant_at_jump(self):
        # P_tilde >= P_pred and R_tilde >= R in the PSD order, every iteration.
        sys = tracking_system()
        D = [[1e-4]]
        cfg = MkcConfig(sigma_d=[3.0])
        belief = kf_dob_init(GaussianBelief([0.0, 0.0], 1e-2 * np.eye(2)), D)
        rng = np.random.default_rng(42)
        d_true = 0.0
        x = np.zeros(2)
        for k in range(60):
            if k == 30:
                d_true = 8.0  # step disturbance
            x = sys.F @ x + sys.G[:, 0] * d_true + 1e-2 * rng.standard_normal(2)
            y = x + 0.1 * rng.standard_normal(2)
            diags = []
            aug = augment(sys, D)
            P_pred = symmetrize(aug.Phi @ belief.cov @ aug.Phi.T + aug.Qaug)
            res = mkckf_dob_step(belief, sys, D, y, cfg, diagnostics=diags)
            belief = res.belief
            for P_tilde, R_tilde in diags:
                scale = 1.0 + np.abs(P_tilde).max()
                assert np.linalg.eigvalsh(P_tilde - P_pred).min() >= -1e-10 * scale
                assert np.linalg.eigvalsh(R_tilde - np.asarray(sys.R)).min() >= -1e-10

    def test_nonconvergence_flagged_not_raised(self):
        sys = tracking_system()
        D = [[1e-4]]
        cfg = MkcConfig(sigma_d=[0.05], epsilon=1e-15, max_iters=3)
        belief = kf_dob_init(GaussianBelief([0.0, 0.0], 0.5 * np.eye(2)), D)
        res = mkckf_dob_step(belief, sys, D, [4.0, -3.0], cfg)
        assert res.iters == 3
        assert not res.converged


# ---------------------------------------------------------------------------
# IMM KF-DOB
# ---------------------------------------------------------------------------

class TestImmKfDob:
    def test_single_model_equals_kf_dob_exactly(self):
        rng = np.random.default_rng(51)
        sys = tracking_system()
        D = [[1e-4]]
        x0 = GaussianBelief([0.3, -0.7], 0.1 * np.eye(2))
        imm = imm_dob_init(sys, x0, [D], [[1.0]])
        kf = kf_dob_init(x0, D)
        for _ in range(20):
            y = rng.standard_normal(2)
            imm, fused, d_hat, d_cov = immkf_dob_step(imm, sys, [D], sys.Q,
                                                      sys.R, y)
            kf, kf_d, kf_dc = kf_dob_step(kf, sys, D, y)
            assert np.array_equal(fused.mean, kf.mean)
            assert np.array_equal(fused.cov, kf.cov)
            assert np.array_equal(d_hat, kf_d)
            assert imm.mode_probs[0] == 1.0

    def test_identical_models_match_single_kf_dob(self):
        rng = np.random.default_rng(52)
        sys = tracking_system()
        D = [[1e-4]]
        x0 = GaussianBelief([0.0, 0.0], 0.1 * np.eye(2))
        imm = imm_dob_init(sys, x0, [D, D], [[0.5, 0.5], [0.5, 0.5]])
        kf = kf_dob_init(x0, D)
        for _ in range(30):
            y = rng.standard_normal(2)
            imm, fused, _, _ = immkf_dob_step(imm, sys, [D, D], sys.Q, sys.R, y)
            kf, _, _ = kf_dob_step(kf, sys, D, y)
            assert np.abs(fused.mean - kf.mean).max() <= 1e-9
            assert np.abs(fused.cov - kf.cov).max() <= 1e-9

    def test_scalar_two_model_hand_computed_probabilities(self):
        # One measurement, scalar augmented blocks computed by hand here to
        # check the likelihood/probability update of the IMM cycle.
        sys = LinearSystem(F=[[1.0]], G=[[1.0]], H=[[1.0]], Q=[[0.0]], R=[[1.0]])
        x0 = GaussianBelief([0.0], [[0.0]])
        D1, D2 = [[0.5]], [[2.0]]
        trans = np.array([[0.9, 0.1], [0.2, 0.8]])
        mu0 = np.array([0.6, 0.4])
        imm = imm_dob_init(sys, x0, [D1, D2], trans, mu0)
        y = 1.7

        # hand computation (augmented dim 2; all means zero so the mixed
        # covariance d-block is the probability-weighted mix of D1, D2)
        c_bar = trans.T @ mu0
        mix = trans * mu0[:, None] / c_bar[None, :]
        lik = []
        for j, Dj in enumerate((0.5, 2.0)):
            d_block = mix[0, j] * 0.5 + mix[1, j] * 2.0
            P0 = np.diag([d_block, 0.0])
            Phi = np.array([[1.0, 0.0], [1.0, 1.0]])
            Qa = np.diag([Dj, 0.0])
            P_pred = Phi @ P0 @ Phi.T + Qa
            S = P_pred[1, 1] + 1.0
            lik.append(np.exp(-0.5 * y * y / S) / np.sqrt(2 * np.pi * S))
        w = np.array(lik) * c_bar
        mu_hand = w / w.sum()

        imm, fused, _, _ = immkf_dob_step(imm, sys, [D1, D2], sys.Q, sys.R, [y])
        assert np.abs(imm.mode_probs - mu_hand).max() <= 1e-10

    def test_mode_probabilities_stay_in_simplex(self):
        rng = np.random.default_rng(53)
        sys = tracking_system()
        D_list = [[[1e-4]], [[1e-4 * np.exp(5)]]]
        imm = imm_dob_init(sys, GaussianBelief([0.0, 0.0], 0.1 * np.eye(2)),
                           D_list, [[0.98, 0.02], [0.5, 0.5]])
        for _ in range(200):
            y = 5.0 * rng.standard_normal(2)
            imm, _, _, _ = immkf_dob_step(imm, sys, D_list, sys.Q, sys.R, y)
            assert (imm.mode_probs >= 0).all()
            assert abs(imm.mode_probs.sum() - 1.0) <= 1e-12

    def test_mismatched_model_count_rejected(self):
        sys = tracking_system()
        imm = imm_dob_init(sys, GaussianBelief([0.0, 0.0], np.eye(2)),
                           [[[1e-4]]], [[1.0]])
        with pytest.raises(ModelError):
            immkf_dob_step(imm, sys, [[[1e-4]], [[1e-3]]], sys.Q, sys.R,
                           [0.0, 0.0])


# ---------------------------------------------------------------------------
# Estimator-family identity at large D
# ---------------------------------------------------------------------------

def test_family_identity_at_large_d():
    # SISE, NKF-DOB, KF-DOB agree at D = 1e8 I after a 2-step burn-in;
    # KF-DOB's d-covariance compared net of the random-walk inflation D.
    rng = np.random.default_rng(61)
    sys = tracking_system()
    D = 1e8 * np.eye(1)
    x0 = GaussianBelief([0.0, 0.0], 1e-2 * np.eye(2))
    sise = sise_init(sys, x0)
    nkf = nkf_dob_init(sys, x0)
    kf = kf_dob_init(x0, D)
    d_true = 5.0
    x = np.zeros(2)
    for k in range(1, 200):
        if k == 100:
            d_true = -3.0
        x = sys.F @ x + sys.G[:, 0] * d_true + 1e-2 * rng.standard_normal(2)
        y = x + 0.1 * rng.standard_normal(2)
        sise = sise_step(sise, sys, y)
        nkf = nkf_dob_step(nkf, sys, D, y)
        kf, kf_d, kf_dc = kf_dob_step(kf, sys, D, y)
        if k <= 2:
            continue
        ds = [sise.last_d[0], nkf.d[0], kf_d[0]]
        cs = [sise.last_d_cov[0, 0], nkf.d_cov[0, 0], kf_dc[0, 0] - 1e8]
        assert max(ds) - min(ds) <= 1e-3
        rel = (max(cs) - min(cs)) / max(abs(c) for c in cs)
        assert rel <= 1e-2
