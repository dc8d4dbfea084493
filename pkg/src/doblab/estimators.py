"""One-step recursions for the disturbance-observer estimator family.

Every step function is pure: it consumes a belief (or small state record)
plus one measurement and returns new values. Gains are always obtained
through factorization-based solves; covariance measurement updates use the
Joseph form so perturbed gains cannot break positive semi-definiteness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .model import (
    AugmentedModel,
    GaussianBelief,
    LinearSystem,
    ModelError,
    as_matrix,
    as_vector,
    augment,
    block_diag,
    check_psd,
    cholesky_factor,
    symmetrize,
)

# Kernel weights below this are floored before inverting the MKC weight
# matrix, which is singular at weight zero.
KERNEL_WEIGHT_FLOOR = 1e-12
# Bandwidth large enough to make the Gaussian kernel indistinguishable
# from 1 on whitened residuals; recovers the squared-error loss.
WIDE_BANDWIDTH = 1e8
# Mixing probabilities are floored here before division.
PROB_FLOOR = 1e-300


class EstimationError(RuntimeError):
    """A filter step could not be completed (singular or unstable algebra)."""


def _spd_solve(S: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    """Solve S X = B for symmetric S, reporting the conditioning on failure."""
    try:
        X = np.linalg.solve(S, B)
    except np.linalg.LinAlgError:
        raise EstimationError(
            f"{what} not invertible (cond ~ {np.linalg.cond(S):.3e})"
        ) from None
    if not np.all(np.isfinite(X)):
        raise EstimationError(
            f"{what} produced non-finite solve results (cond ~ {np.linalg.cond(S):.3e})"
        )
    return X


def _gain(P_pred: np.ndarray, H: np.ndarray, S: np.ndarray) -> np.ndarray:
    # K = P H^T S^{-1}, computed as (S^{-1} H P)^T without forming S^{-1}.
    return _spd_solve(S, H @ P_pred, "innovation covariance").T


def joseph_update(P_pred: np.ndarray, K: np.ndarray, H: np.ndarray,
                  R: np.ndarray) -> np.ndarray:
    """(I - K H) P (I - K H)^T + K R K^T, symmetrized."""
    IKH = np.eye(P_pred.shape[0]) - K @ H
    return symmetrize(IKH @ P_pred @ IKH.T + K @ R @ K.T)


# ---------------------------------------------------------------------------
# Plain Kalman step and the augmented disturbance observer built on it
# ---------------------------------------------------------------------------

def kf_step(belief: GaussianBelief, Phi, H, Q, R, y) -> GaussianBelief:
    """One predict/update cycle of the standard Kalman filter.

    Posterior covariance is the Joseph form, which also satisfies the
    information identity P_post^{-1} = P_pred^{-1} + H^T R^{-1} H.
    """
    Phi = np.asarray(Phi, dtype=float)
    H = np.asarray(H, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    y = as_vector(y, "measurement")
    x_pred = Phi @ belief.mean
    P_pred = symmetrize(Phi @ belief.cov @ Phi.T + Q)
    S = symmetrize(H @ P_pred @ H.T + R)
    K = _gain(P_pred, H, S)
    mean = x_pred + K @ (y - H @ x_pred)
    return GaussianBelief(mean, joseph_update(P_pred, K, H, R))


def kf_dob_init(x_belief: GaussianBelief, D) -> GaussianBelief:
    """Initial augmented belief: disturbance mean 0 with covariance D."""
    D = as_matrix(D, "D")
    p = D.shape[0]
    mean = np.concatenate([np.zeros(p), x_belief.mean])
    cov = block_diag(D, np.asarray(x_belief.cov))
    return GaussianBelief(mean, cov)


def kf_dob_step(belief: GaussianBelief, sys: LinearSystem, D, y):
    """KF-DOB step: exactly ``kf_step`` on the augmented model.

    Returns (belief', d_hat, d_cov) where d_hat/d_cov are the leading
    p-block of the posterior.
    """
    aug = augment(sys, D)
    if belief.dim != aug.dim:
        raise ModelError(
            f"belief dimension {belief.dim} does not match augmented dimension {aug.dim}"
        )
    post = kf_step(belief, aug.Phi, aug.Haug, aug.Qaug, sys.R, y)
    p = sys.p
    return post, post.mean[:p].copy(), post.cov[:p, :p].copy()


# ---------------------------------------------------------------------------
# Partitioned KF-DOB: the same filter written in (d, x) blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionedDobState:
    """KF-DOB posterior split into blocks: x belief, d mean, P^dd and P^dx."""

    x_belief: GaussianBelief
    d: np.ndarray
    d_cov: np.ndarray
    cross: np.ndarray  # P^{dx}, shape (p, n)

    def __post_init__(self):
        d = as_vector(self.d, "d")
        d_cov = as_matrix(self.d_cov, "P^dd")
        cross = as_matrix(self.cross, "P^dx")
        p, n = d.size, self.x_belief.dim
        if d_cov.shape != (p, p):
            raise ModelError(f"P^dd must be {p}x{p}, got {d_cov.shape}")
        if cross.shape != (p, n):
            raise ModelError(f"P^dx must be {p}x{n}, got {cross.shape}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "d_cov", symmetrize(d_cov))
        object.__setattr__(self, "cross", cross)


def kf_dob_partitioned_step(state: PartitionedDobState, sys: LinearSystem, D,
                            y) -> PartitionedDobState:
    """Block-partitioned KF-DOB step.

    Prediction:
        P^dd_pred = P^dd + D
        P^dx_pred = P^dd G^T + P^dx F^T
        P^xx_pred = G P^dd G^T + F P^xd G^T + G P^dx F^T + F P^xx F^T + Q
    then the joint gain pair (K^x, M^d) against S = H P^xx_pred H^T + R and
    the joint mean update for x_{k|k} and d_{k|k}. Algebraically identical to
    ``kf_dob_step``.
    """
    F, G, H, Q, R = (np.asarray(a) for a in (sys.F, sys.G, sys.H, sys.Q, sys.R))
    D = as_matrix(D, "D")
    if D.shape != (sys.p, sys.p):
        raise ModelError(f"D block must be {sys.p}x{sys.p}, got {D.shape}")
    D = check_psd(D, "D")
    y = as_vector(y, "measurement")
    x, Pxx = state.x_belief.mean, state.x_belief.cov
    d, Pdd, Pdx = state.d, state.d_cov, state.cross

    Pdd_pred = Pdd + D
    Pdx_pred = Pdd @ G.T + Pdx @ F.T
    Pxx_pred = symmetrize(
        G @ Pdd @ G.T + F @ Pdx.T @ G.T + G @ Pdx @ F.T + F @ Pxx @ F.T + Q
    )
    S = symmetrize(H @ Pxx_pred @ H.T + R)
    Kx = _gain(Pxx_pred, H, S)                       # P^xx H^T S^{-1}
    Md = _spd_solve(S, H @ Pdx_pred.T, "innovation covariance").T

    innov = y - H @ (F @ x + G @ d)
    x_new = F @ x + G @ d + Kx @ innov
    d_new = d + Md @ innov

    W = _spd_solve(S, H @ Pdx_pred.T, "innovation covariance")  # S^{-1} H P^xd
    Pdd_new = symmetrize(Pdd_pred - Pdx_pred @ H.T @ W)
    Pxx_new = symmetrize((np.eye(sys.n) - Kx @ H) @ Pxx_pred)
    Pdx_new = Pdx_pred - Pdx_pred @ H.T @ _spd_solve(S, H @ Pxx_pred,
                                                     "innovation covariance")
    return PartitionedDobState(GaussianBelief(x_new, Pxx_new), d_new, Pdd_new,
                               Pdx_new)


# ---------------------------------------------------------------------------
# NKF-DOB: disturbance in the state without the random-walk dynamic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NkfDobState:
    """NKF-DOB record: x belief plus the latest d_{k-1|k} estimate."""

    x_belief: GaussianBelief
    d: np.ndarray
    d_cov: np.ndarray

    def __post_init__(self):
        d = as_vector(self.d, "d")
        d_cov = as_matrix(self.d_cov, "d_cov")
        if d_cov.shape != (d.size, d.size):
            raise ModelError(f"d_cov must be {d.size}x{d.size}, got {d_cov.shape}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "d_cov", symmetrize(d_cov))


def nkf_dob_init(sys: LinearSystem, x_belief: GaussianBelief) -> NkfDobState:
    return NkfDobState(x_belief, np.zeros(sys.p), np.zeros((sys.p, sys.p)))


def nkf_dob_step(state: NkfDobState, sys: LinearSystem, D, y) -> NkfDobState:
    """Native KF-DOB step via the Gaussian conditional density formula.

        P_pred    = G D G^T + F P F^T + Q
        M_k       = D G^T H^T (H P_pred H^T + R)^{-1}
        d_{k-1|k} = M_k (y_k - H F x_{k-1|k-1})
        P^d       = (I - M_k H G) D
    with the x update driven by the plain gain K = P_pred H^T (.)^{-1}.
    """
    F, G, H, Q, R = (np.asarray(a) for a in (sys.F, sys.G, sys.H, sys.Q, sys.R))
    D = as_matrix(D, "D")
    if D.shape != (sys.p, sys.p):
        raise ModelError(f"D block must be {sys.p}x{sys.p}, got {D.shape}")
    D = check_psd(D, "D")
    y = as_vector(y, "measurement")
    x, P = state.x_belief.mean, state.x_belief.cov

    P_pred = symmetrize(G @ D @ G.T + F @ P @ F.T + Q)
    S = symmetrize(H @ P_pred @ H.T + R)
    K = _gain(P_pred, H, S)
    M = _spd_solve(S, H @ G @ D, "innovation covariance").T  # D G^T H^T S^{-1}

    innov = y - H @ (F @ x)
    d_new = M @ innov
    d_cov = symmetrize((np.eye(sys.p) - M @ H @ G) @ D)
    x_new = F @ x + K @ innov
    return NkfDobState(GaussianBelief(x_new, joseph_update(P_pred, K, H, R)),
                       d_new, d_cov)


# ---------------------------------------------------------------------------
# SISE: unbiased minimum-variance input and state estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiseState:
    """SISE record: x belief plus the latest d_{k-1} estimate and P^dd."""

    x_belief: GaussianBelief
    last_d: np.ndarray
    last_d_cov: np.ndarray

    def __post_init__(self):
        d = as_vector(self.last_d, "last_d")
        d_cov = as_matrix(self.last_d_cov, "last_d_cov")
        if d_cov.shape != (d.size, d.size):
            raise ModelError(
                f"last_d_cov must be {d.size}x{d.size}, got {d_cov.shape}")
        object.__setattr__(self, "last_d", d)
        object.__setattr__(self, "last_d_cov", symmetrize(d_cov))


def sise_init(sys: LinearSystem, x_belief: GaussianBelief) -> SiseState:
    """Start a SISE recursion; the d estimate is defined from the first step."""
    return SiseState(x_belief, np.zeros(sys.p), np.zeros((sys.p, sys.p)))


def sise_step(state: SiseState, sys: LinearSystem, y) -> SiseState:
    """One SISE cycle: time update, unknown-input estimation, measurement update.

        Rt   = H P_pred H^T + R
        M*   = (G^T H^T Rt^{-1} H G)^{-1} G^T H^T Rt^{-1}
        d    = M* (y - H x_pred)
        x*   = x_pred + G d
        K*   = P_pred H^T Rt^{-1}
        x    = x* + K* (y - H x*)
        P    = (I - K* H)[(I - G M* H) P_pred (I - G M* H)^T
                          + G M* R M*^T G^T] + K* R M*^T G^T
        P^dd = (G^T H^T Rt^{-1} H G)^{-1}
    """
    F, G, H, Q, R = (np.asarray(a) for a in (sys.F, sys.G, sys.H, sys.Q, sys.R))
    y = as_vector(y, "measurement")
    x, P = state.x_belief.mean, state.x_belief.cov
    n = sys.n

    x_pred = F @ x
    P_pred = symmetrize(F @ P @ F.T + Q)
    Rt = symmetrize(H @ P_pred @ H.T + R)
    HG = H @ G
    W = _spd_solve(Rt, HG, "innovation covariance")  # Rt^{-1} H G
    gram = symmetrize(HG.T @ W)                      # G^T H^T Rt^{-1} H G
    try:
        Pdd = np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        raise EstimationError("disturbance unobservable") from None
    M = Pdd @ W.T                                    # gram^{-1} G^T H^T Rt^{-1}

    d = M @ (y - H @ x_pred)
    x_star = x_pred + G @ d
    K = _gain(P_pred, H, Rt)
    x_new = x_star + K @ (y - H @ x_star)

    A = np.eye(n) - G @ M @ H
    P_star = A @ P_pred @ A.T + G @ M @ R @ M.T @ G.T
    P_new = symmetrize((np.eye(n) - K @ H) @ P_star + K @ R @ M.T @ G.T)
    return SiseState(GaussianBelief(x_new, P_new), d, symmetrize(Pdd))


# ---------------------------------------------------------------------------
# Multi-kernel correntropy machinery
# ---------------------------------------------------------------------------

def gaussian_kernel(e, sigma):
    """Gaussian kernel exp(-e^2 / (2 sigma^2)); equals 1 iff e = 0."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0.0):
        raise ModelError("kernel bandwidth must be positive")
    e = np.asarray(e, dtype=float)
    return np.exp(-(e * e) / (2.0 * sigma * sigma))


def mkc_loss(errors, sigmas) -> float:
    """Single-sample multi-kernel correntropy loss sum_i sigma_i^2 (1 - G_i(e_i))."""
    errors = as_vector(errors, "errors")
    sigmas = as_vector(sigmas, "sigmas")
    if errors.size != sigmas.size:
        raise ModelError(
            f"errors ({errors.size}) and sigmas ({sigmas.size}) length mismatch")
    if np.any(sigmas <= 0.0):
        raise ModelError("kernel bandwidth must be positive")
    # expm1 keeps the wide-bandwidth limit sigma^2 (1 - G) -> e^2 / 2 exact.
    x = (errors * errors) / (2.0 * sigmas * sigmas)
    return float(np.sum(-(sigmas**2) * np.expm1(-x)))


@dataclass(frozen=True)
class MkcConfig:
    """Kernel bandwidths and fixed-point settings for MKCKF-DOB.

    sigma_x and sigma_r default to wide (1e8) bandwidths so only the
    disturbance channels are reweighted.
    """

    sigma_d: np.ndarray
    sigma_x: np.ndarray | None = None
    sigma_r: np.ndarray | None = None
    epsilon: float = 1e-6
    max_iters: int = 50

    def __post_init__(self):
        object.__setattr__(self, "sigma_d", as_vector(self.sigma_d, "sigma_d"))
        for name in ("sigma_x", "sigma_r"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, as_vector(val, name))
        for name in ("sigma_d", "sigma_x", "sigma_r"):
            val = getattr(self, name)
            if val is not None and np.any(val <= 0.0):
                raise ModelError(f"{name} must be positive")
        if self.epsilon <= 0.0:
            raise ModelError("epsilon must be positive")
        if self.max_iters < 1:
            raise ModelError("max_iters must be a positive integer")

    def bandwidths(self, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Process bandwidth vector [sigma_d; sigma_x] and measurement vector."""
        sigma_x = self.sigma_x if self.sigma_x is not None else np.full(n, WIDE_BANDWIDTH)
        sigma_r = self.sigma_r if self.sigma_r is not None else np.full(m, WIDE_BANDWIDTH)
        if sigma_x.size != n:
            raise ModelError(f"sigma_x must have length {n}, got {sigma_x.size}")
        if sigma_r.size != m:
            raise ModelError(f"sigma_r must have length {m}, got {sigma_r.size}")
        return np.concatenate([self.sigma_d, sigma_x]), sigma_r


class MkcStepResult(NamedTuple):
    belief: GaussianBelief
    d_hat: np.ndarray
    d_cov: np.ndarray
    iters: int
    converged: bool


def mkckf_dob_step(belief: GaussianBelief, sys: LinearSystem, D, y,
                   cfg: MkcConfig, diagnostics: list | None = None) -> MkcStepResult:
    """MKCKF-DOB step: prediction, whitening, fixed-point reweighted update.

    After the augmented prediction, P_pred = Bp Bp^T and R = Br Br^T are
    factored once. Each iteration whitens the residuals against the current
    iterate,

        e_p = Bp^{-1} (x_pred - x_{t-1}),  e_r = Br^{-1} (y - H x_{t-1}),

    inflates P_tilde = Bp diag(w_p)^{-1} Bp^T and R_tilde likewise with the
    kernel weights (floored at 1e-12), recomputes the gain and the iterate

        x_t = x_pred + K_t (y - H x_pred),

    and stops once ||x_t - x_{t-1}|| <= epsilon ||x_t|| or max_iters is hit
    (the last iterate is then returned with converged=False). The final
    covariance is the Joseph form with the original P_pred and R.

    When a list is passed as ``diagnostics`` the (P_tilde, R_tilde) pair of
    every iteration is appended to it.
    """
    if cfg.sigma_d.size != sys.p:
        raise ModelError(f"sigma_d must have length {sys.p}, got {cfg.sigma_d.size}")
    aug = augment(sys, D)
    if belief.dim != aug.dim:
        raise ModelError(
            f"belief dimension {belief.dim} does not match augmented dimension {aug.dim}"
        )
    y = as_vector(y, "measurement")
    R = np.asarray(sys.R)
    sigma_p, sigma_r = cfg.bandwidths(sys.n, sys.m)

    x_pred = aug.Phi @ belief.mean
    P_pred = symmetrize(aug.Phi @ belief.cov @ aug.Phi.T + aug.Qaug)
    Bp = cholesky_factor(P_pred)
    Br = cholesky_factor(R)

    innovation = y - aug.Haug @ x_pred
    x_prev = x_pred
    K_t = None
    iters = 0
    converged = False
    for _ in range(cfg.max_iters):
        iters += 1
        e_p = np.linalg.solve(Bp, x_pred - x_prev)
        e_r = np.linalg.solve(Br, y - aug.Haug @ x_prev)
        w_p = np.maximum(gaussian_kernel(e_p, sigma_p), KERNEL_WEIGHT_FLOOR)
        w_r = np.maximum(gaussian_kernel(e_r, sigma_r), KERNEL_WEIGHT_FLOOR)
        P_tilde = symmetrize((Bp / w_p) @ Bp.T)
        R_tilde = symmetrize((Br / w_r) @ Br.T)
        if diagnostics is not None:
            diagnostics.append((P_tilde, R_tilde))
        S_tilde = symmetrize(aug.Haug @ P_tilde @ aug.Haug.T + R_tilde)
        K_t = _gain(P_tilde, aug.Haug, S_tilde)
        x_t = x_pred + K_t @ innovation
        step = float(np.linalg.norm(x_t - x_prev))
        x_prev = x_t
        if step <= cfg.epsilon * float(np.linalg.norm(x_t)):
            converged = True
            break

    post = GaussianBelief(x_prev, joseph_update(P_pred, K_t, aug.Haug, R))
    p = sys.p
    return MkcStepResult(post, post.mean[:p].copy(), post.cov[:p, :p].copy(),
                         iters, converged)


# ---------------------------------------------------------------------------
# IMM KF-DOB: a bank of KF-DOBs differing only in disturbance covariance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImmState:
    """Per-model beliefs, mode probabilities, and the Markov transition matrix."""

    beliefs: tuple[GaussianBelief, ...]
    mode_probs: np.ndarray
    transition: np.ndarray
    underflow: bool = False

    def __post_init__(self):
        beliefs = tuple(self.beliefs)
        mu = as_vector(self.mode_probs, "mode_probs")
        P = as_matrix(self.transition, "transition")
        q = len(beliefs)
        if q == 0:
            raise ModelError("at least one model is required")
        if mu.size != q:
            raise ModelError(f"mode_probs must have length {q}, got {mu.size}")
        if np.any(mu < 0.0) or abs(mu.sum() - 1.0) > 1e-12:
            raise ModelError("mode_probs must be nonnegative and sum to 1")
        if P.shape != (q, q):
            raise ModelError(f"transition must be {q}x{q}, got {P.shape}")
        if np.any(P < 0.0) or np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ModelError("transition rows must be nonnegative and sum to 1")
        dims = {b.dim for b in beliefs}
        if len(dims) != 1:
            raise ModelError("all model beliefs must share one dimension")
        object.__setattr__(self, "beliefs", beliefs)
        object.__setattr__(self, "mode_probs", mu)
        object.__setattr__(self, "transition", P)


def imm_dob_init(sys: LinearSystem, x_belief: GaussianBelief,
                 D_list: Sequence, transition, mode_probs=None) -> ImmState:
    """IMM-DOB start: one augmented belief per disturbance covariance."""
    beliefs = tuple(kf_dob_init(x_belief, D) for D in D_list)
    q = len(beliefs)
    if mode_probs is None:
        mode_probs = np.full(q, 1.0 / q)
    return ImmState(beliefs, mode_probs, as_matrix(transition, "transition"))


def _log_gaussian(innov: np.ndarray, S: np.ndarray) -> float:
    """Log density of N(0, S) at innov via a Cholesky factorization."""
    L = cholesky_factor(S)
    z = np.linalg.solve(L, innov)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    m = innov.size
    return -0.5 * (float(z @ z) + logdet + m * np.log(2.0 * np.pi))


def immkf_dob_step(state: ImmState, sys: LinearSystem, D_list: Sequence,
                   Q_x, R, y):
    """One IMM cycle over KF-DOB models sharing Phi and Haug.

    Stages, in order: mixing weights from the transition matrix and prior
    mode probabilities (c_bar floored at 1e-300 before division), mixed
    initial moments with the spread-of-means correction, a per-model KF
    step with Qaug_j = blockdiag(D_j, Q_x), mode-probability update with
    the full multivariate Gaussian innovation likelihood, and moment-matched
    fusion. If every likelihood underflows, the probabilities are reset to
    uniform and the returned state carries underflow=True.

    Returns (state', fused_belief, d_hat, d_cov).
    """
    q = len(state.beliefs)
    if len(D_list) != q:
        raise ModelError(f"expected {q} disturbance covariances, got {len(D_list)}")
    Q_x = as_matrix(Q_x, "Q_x")
    R = as_matrix(R, "R")
    y = as_vector(y, "measurement")
    aug0 = augment(sys, D_list[0])
    Phi, Haug = aug0.Phi, aug0.Haug
    Qaug = [aug0.Qaug if j == 0 else augment(sys, D_list[j]).Qaug for j in range(q)]
    if not np.array_equal(Q_x, np.asarray(sys.Q)):
        Qaug = [block_diag(as_matrix(D_list[j], "D"), Q_x) for j in range(q)]

    mu = state.mode_probs
    trans = state.transition
    c_bar = trans.T @ mu
    c_safe = np.maximum(c_bar, PROB_FLOOR)
    mix = trans * mu[:, None] / c_safe[None, :]     # mix[i, j] = P_ij mu_i / c_bar_j

    posts = []
    log_lik = np.empty(q)
    for j in range(q):
        mean0 = sum(mix[i, j] * state.beliefs[i].mean for i in range(q))
        cov0 = sum(
            mix[i, j] * (state.beliefs[i].cov
                         + np.outer(state.beliefs[i].mean - mean0,
                                    state.beliefs[i].mean - mean0))
            for i in range(q)
        )
        mixed = GaussianBelief(mean0, cov0)
        posts.append(kf_step(mixed, Phi, Haug, Qaug[j], R, y))
        P_pred = symmetrize(Phi @ mixed.cov @ Phi.T + Qaug[j])
        S = symmetrize(Haug @ P_pred @ Haug.T + R)
        log_lik[j] = _log_gaussian(y - Haug @ (Phi @ mixed.mean), S)

    # Scale out the largest log-likelihood before exponentiating.
    weights = np.exp(log_lik - log_lik.max()) * c_bar
    total = weights.sum()
    underflow = not np.isfinite(total) or total <= 0.0
    if underflow:
        mu_new = np.full(q, 1.0 / q)
    else:
        mu_new = weights / total

    fused_mean = sum(mu_new[j] * posts[j].mean for j in range(q))
    fused_cov = sum(
        mu_new[j] * (posts[j].cov + np.outer(posts[j].mean - fused_mean,
                                             posts[j].mean - fused_mean))
        for j in range(q)
    )
    fused = GaussianBelief(fused_mean, fused_cov)
    new_state = ImmState(tuple(posts), mu_new, trans, underflow)
    p = sys.p
    return new_state, fused, fused.mean[:p].copy(), fused.cov[:p, :p].copy()
