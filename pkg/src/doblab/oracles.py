"""Batch-form Kalman estimators and covariance-analysis oracles.

These are independent references used by the test suites: the stacked
extended state-space model, the batch (convolution-form) estimate, the
measurement/initial-value response decomposition, bias propagation under a
mismatched process covariance, and the ideal / filter-calculated / true
covariance triple.

All functions take the system matrices explicitly (Phi, H, Q, R) so the
same oracle serves both plain and disturbance-augmented models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import _gain, joseph_update
from .model import GaussianBelief, ModelError, as_matrix, as_vector, block_diag, symmetrize

# Dense-matrix cost caps; the oracle is for verification, not production.
MAX_BATCH_STEPS = 200
MAX_BATCH_ENTRIES = 2000


def _coerce(Phi, H, Q, R):
    Phi = as_matrix(Phi, "Phi")
    H = as_matrix(H, "H")
    Q = as_matrix(Q, "Q")
    R = as_matrix(R, "R")
    q = Phi.shape[0]
    if Phi.shape != (q, q) or Q.shape != (q, q) or H.shape[1] != q:
        raise ModelError("inconsistent system dimensions")
    if R.shape != (H.shape[0], H.shape[0]):
        raise ModelError("R dimension does not match H")
    return Phi, H, Q, R


@dataclass(frozen=True)
class ExtendedModel:
    """Stacked model over steps 1..k: X = Phi_1k x0 + G_1k W, Y = H_1k x0 + D_1k W + V."""

    Phi_1k: np.ndarray
    G_1k: np.ndarray
    H_1k: np.ndarray
    D_1k: np.ndarray
    Q_1k: np.ndarray
    R_1k: np.ndarray
    steps: int
    dim: int


def build_extended_model(Phi, H, Q, R, steps: int) -> ExtendedModel:
    """Assemble the stacked transition/observation operators for k steps.

    G_1k is lower block-triangular with Phi^(i-j) at block (i, j) for
    i >= j (identity on the diagonal); H_1k = Hbar_1k Phi_1k and
    D_1k = Hbar_1k G_1k.
    """
    Phi, H, Q, R = _coerce(Phi, H, Q, R)
    q, m = Phi.shape[0], H.shape[0]
    if steps < 1:
        raise ModelError("steps must be >= 1")
    if steps > MAX_BATCH_STEPS or q * steps > MAX_BATCH_ENTRIES:
        raise ModelError(
            f"batch oracle capped at {MAX_BATCH_STEPS} steps / "
            f"{MAX_BATCH_ENTRIES} stacked entries (requested {steps} x {q})")

    powers = [np.eye(q)]
    for _ in range(steps):
        powers.append(Phi @ powers[-1])

    Phi_1k = np.vstack([powers[i] for i in range(1, steps + 1)])
    G_1k = np.zeros((q * steps, q * steps))
    for i in range(steps):
        for j in range(i + 1):
            G_1k[i * q:(i + 1) * q, j * q:(j + 1) * q] = powers[i - j]
    Hbar = block_diag(*([H] * steps))
    H_1k = Hbar @ Phi_1k
    D_1k = Hbar @ G_1k
    Q_1k = block_diag(*([Q] * steps))
    R_1k = block_diag(*([R] * steps))
    return ExtendedModel(Phi_1k, G_1k, H_1k, D_1k, Q_1k, R_1k, steps, q)


def batch_kf_estimate(Phi, H, Q, R, x0_mean, x0_cov, ys) -> np.ndarray:
    """Batch Kalman estimate of x_k from the prior (x0_mean, x0_cov) and y_1..y_k.

    Gain: Hh = (Phi^k P0 H_1k^T + G_rk Q_1k D_1k^T)
               (H_1k P0 H_1k^T + D_1k Q_1k D_1k^T + R_1k)^{-1}
    and x_hat = Hh Y + (Phi^k - Hh H_1k) x0_mean. With x0_cov = 0 this is
    the exactly-known-x0 batch form.
    """
    ys = [as_vector(y, "measurement") for y in ys]
    k = len(ys)
    if k < 1:
        raise ModelError("at least one measurement is required")
    ext = build_extended_model(Phi, H, Q, R, k)
    Phi, H, Q, R = _coerce(Phi, H, Q, R)
    q = ext.dim
    x0_mean = as_vector(x0_mean, "x0_mean")
    P0 = as_matrix(x0_cov, "x0_cov")
    if x0_mean.size != q or P0.shape != (q, q):
        raise ModelError("prior dimensions do not match the system")

    Y = np.concatenate(ys)
    G_rk = ext.G_1k[(k - 1) * q:k * q, :]
    phi1k = ext.Phi_1k[(k - 1) * q:k * q, :]
    num = phi1k @ P0 @ ext.H_1k.T + G_rk @ ext.Q_1k @ ext.D_1k.T
    gram = (ext.H_1k @ P0 @ ext.H_1k.T + ext.D_1k @ ext.Q_1k @ ext.D_1k.T
            + ext.R_1k)
    try:
        Hh = np.linalg.solve(symmetrize(gram), num.T).T
    except np.linalg.LinAlgError:
        raise ModelError("batch gain Gram matrix is singular") from None
    return Hh @ Y + (phi1k - Hh @ ext.H_1k) @ x0_mean


def _gain_schedule(Phi, H, Q, R, P0, steps):
    """Kalman gains K_1..K_steps from the Riccati recursion started at P0."""
    P = symmetrize(P0)
    gains = []
    for _ in range(steps):
        P_pred = symmetrize(Phi @ P @ Phi.T + Q)
        S = symmetrize(H @ P_pred @ H.T + R)
        K = _gain(P_pred, H, S)
        gains.append(K)
        P = joseph_update(P_pred, K, H, R)
    return gains


def response_decomposition(Phi, H, Q, R, x0, ys, x0_cov=None):
    """Split the KF estimate into measurement and initial-value responses.

    x_h follows x_h <- (I - K H) Phi x_h + K y from 0, x_s follows
    x_s <- (I - K H) Phi x_s from x0, both driven by the same gain
    schedule; their sum is the full KF estimate. Returns arrays of shape
    (k+1, q) including the step-0 values.
    """
    Phi, H, Q, R = _coerce(Phi, H, Q, R)
    q = Phi.shape[0]
    x0 = as_vector(x0, "x0")
    P0 = np.zeros((q, q)) if x0_cov is None else as_matrix(x0_cov, "x0_cov")
    ys = [as_vector(y, "measurement") for y in ys]
    gains = _gain_schedule(Phi, H, Q, R, P0, len(ys))

    xh = np.zeros((len(ys) + 1, q))
    xs = np.zeros((len(ys) + 1, q))
    xs[0] = x0
    for k, (y, K) in enumerate(zip(ys, gains), start=1):
        closed = (np.eye(q) - K @ H) @ Phi
        xh[k] = closed @ xh[k - 1] + K @ y
        xs[k] = closed @ xs[k - 1]
    return xh, xs


def bias_propagation(Phi, H, Qu, R, x0_bias, steps: int, P0=None) -> np.ndarray:
    """Propagate an initialization bias through the (I - K H) Phi map.

    The gains come from the Riccati recursion driven by the used process
    covariance Qu = Q + dQ. Returns shape (steps+1, q) with row 0 = x0_bias.
    """
    Phi, H, Qu, R = _coerce(Phi, H, Qu, R)
    q = Phi.shape[0]
    b = as_vector(x0_bias, "x0_bias")
    if b.size != q:
        raise ModelError("x0_bias dimension does not match the system")
    P0 = np.zeros((q, q)) if P0 is None else as_matrix(P0, "P0")
    gains = _gain_schedule(Phi, H, Qu, R, P0, steps)

    out = np.zeros((steps + 1, q))
    out[0] = b
    for k, K in enumerate(gains, start=1):
        out[k] = (np.eye(q) - K @ H) @ Phi @ out[k - 1]
    return out


def convergence_index(bias_seq) -> np.ndarray:
    """Squared Euclidean norm of each bias vector in the sequence."""
    seq = np.atleast_2d(np.asarray(bias_seq, dtype=float))
    if seq.size == 0:
        raise ModelError("bias sequence must be nonempty")
    return np.sum(seq * seq, axis=1)


@dataclass(frozen=True)
class CovarianceTriple:
    """Ideal, filter-calculated, and true posterior covariances under mismatch."""

    ideal: np.ndarray
    filter_calc: np.ndarray
    true_cov: np.ndarray


def covariance_triple_step(Phi, H, Q, R, P_prev, dQ) -> CovarianceTriple:
    """One covariance step with true Q, used Q + dQ, and the mismatched gain.

    Both filters share P_prev. The ideal covariance uses the true predicted
    covariance and its optimal gain; the filter-calculated one uses the
    perturbed prediction and its own gain; the true covariance applies the
    mismatched gain to the true predicted covariance.
    """
    Phi, H, Q, R = _coerce(Phi, H, Q, R)
    P_prev = as_matrix(P_prev, "P_prev")
    dQ = as_matrix(dQ, "dQ")

    P_pred = symmetrize(Phi @ P_prev @ Phi.T + Q)
    S = symmetrize(H @ P_pred @ H.T + R)
    K = _gain(P_pred, H, S)
    ideal = joseph_update(P_pred, K, H, R)

    P_pred_f = symmetrize(P_pred + dQ)
    S_f = symmetrize(H @ P_pred_f @ H.T + R)
    K_f = _gain(P_pred_f, H, S_f)
    filter_calc = joseph_update(P_pred_f, K_f, H, R)

    true_cov = joseph_update(P_pred, K_f, H, R)
    return CovarianceTriple(ideal, filter_calc, true_cov)


def true_cov_gap_closed_form(Phi, H, Q, R, P_prev, dQ) -> np.ndarray:
    """Closed-form P^t - P gap: C R S A S^T R^T C^T with S = (A + A B^{-1} A)^{-1}.

    Here A = H P_pred H^T + R, B = H dQ H^T (required invertible), and
    C = H^T (H H^T)^{-1}. Exact for square invertible H.
    """
    Phi, H, Q, R = _coerce(Phi, H, Q, R)
    P_prev = as_matrix(P_prev, "P_prev")
    dQ = as_matrix(dQ, "dQ")
    P_pred = symmetrize(Phi @ P_prev @ Phi.T + Q)
    A = symmetrize(H @ P_pred @ H.T + R)
    B = symmetrize(H @ dQ @ H.T)
    try:
        C = H.T @ np.linalg.inv(H @ H.T)
        S = np.linalg.inv(A + A @ np.linalg.inv(B) @ A)
    except np.linalg.LinAlgError:
        raise ModelError("closed form needs full-row-rank H and invertible H dQ H^T") from None
    return C @ R @ S @ A @ S.T @ R.T @ C.T


def steady_state_gain(Phi, H, Q, R, iters: int = 500, P0=None):
    """(P_pred_inf, K_inf) after a fixed number of Riccati iterations."""
    Phi, H, Q, R = _coerce(Phi, H, Q, R)
    q = Phi.shape[0]
    P = np.zeros((q, q)) if P0 is None else as_matrix(P0, "P0")
    P_pred = symmetrize(Phi @ P @ Phi.T + Q)
    K = None
    for _ in range(iters):
        S = symmetrize(H @ P_pred @ H.T + R)
        K = _gain(P_pred, H, S)
        P = joseph_update(P_pred, K, H, R)
        P_pred = symmetrize(Phi @ P @ Phi.T + Q)
    return P_pred, K


def closed_loop_spectral_radius(Phi, H, K) -> float:
    """Spectral radius of the one-step predictor (I - K H) Phi."""
    Phi = as_matrix(Phi, "Phi")
    H = as_matrix(H, "H")
    closed = (np.eye(Phi.shape[0]) - K @ H) @ Phi
    return float(np.abs(np.linalg.eigvals(closed)).max())


def steady_state_true_cov(Phi, H, Q, R, Qu, gain_iters: int = 500,
                          lyap_iters: int = 5000, tol: float = 1e-12) -> np.ndarray:
    """Steady-state true posterior covariance under the Qu-tuned gain.

    The converged mismatched gain K_f comes from the Qu Riccati recursion;
    the true covariance solves the fixed point
    P = (I - K_f H)(Phi P Phi^T + Q)(I - K_f H)^T + K_f R K_f^T.
    """
    Phi, H, Q, R = _coerce(Phi, H, Q, R)
    Qu = as_matrix(Qu, "Qu")
    _, K_f = steady_state_gain(Phi, H, Qu, R, iters=gain_iters)
    q = Phi.shape[0]
    P = np.zeros((q, q))
    for _ in range(lyap_iters):
        P_next = joseph_update(symmetrize(Phi @ P @ Phi.T + Q), K_f, H, R)
        if np.abs(P_next - P).max() <= tol * (1.0 + np.abs(P_next).max()):
            return P_next
        P = P_next
    return P
