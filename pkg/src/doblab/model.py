"""State-space model types shared by every estimator.

Conventions used throughout the package:

* the augmented state is ordered ``[disturbance; state]`` (d first),
* covariances are stored in full (never factored) form,
* symmetric/PSD checks project onto the symmetric part first and use a
  tolerance scaled by ``(1 + max|A|)`` so that large-covariance runs
  (e.g. disturbance covariance ~1e8) do not trip on round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Base tolerance for symmetry / PSD checks (absolute at unit scale).
PSD_TOL = 1e-10
# One-shot jitter used when factoring a numerically semi-definite matrix.
CHOLESKY_JITTER = 1e-12


class ModelError(ValueError):
    """A model ingredient failed its structural checks."""


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce scalars / 1-d columns / nested lists to a float matrix.

    Scalars become 1x1; 1-d arrays are read as column vectors, which is
    the natural shape for a single-channel disturbance map G.
    """
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ModelError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} contains non-finite entries")
    return arr


def as_vector(value, name: str = "vector") -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    elif arr.ndim == 2 and 1 in arr.shape:
        arr = arr.reshape(-1)
    elif arr.ndim != 1:
        raise ModelError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} contains non-finite entries")
    return arr


def symmetrize(A: np.ndarray) -> np.ndarray:
    """Project onto the symmetric part: ``(A + A^T) / 2``."""
    return 0.5 * (A + A.T)


def _sym_tol(A: np.ndarray) -> float:
    return PSD_TOL * (1.0 + (np.abs(A).max() if A.size else 0.0))


def check_symmetric(A: np.ndarray, name: str = "matrix") -> np.ndarray:
    if A.shape[0] != A.shape[1]:
        raise ModelError(f"{name} must be square, got shape {A.shape}")
    dev = np.abs(A - A.T).max() if A.size else 0.0
    if dev > _sym_tol(A):
        raise ModelError(f"{name} is not symmetric (max asymmetry {dev:.3e})")
    return symmetrize(A)


def min_eigenvalue(A: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(A))[0])


def check_psd(A: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetric-part projection followed by an eigenvalue floor test."""
    A = check_symmetric(A, name)
    lo = min_eigenvalue(A)
    if lo < -_sym_tol(A):
        raise ModelError(f"{name} is not PSD (min eigenvalue {lo:.3e})")
    return A


def check_pd(A: np.ndarray, name: str = "matrix") -> np.ndarray:
    A = check_symmetric(A, name)
    lo = min_eigenvalue(A)
    if lo <= 0.0:
        raise ModelError(f"{name} is not positive definite (min eigenvalue {lo:.3e})")
    return A


def cholesky_factor(A) -> np.ndarray:
    """Lower-triangular B with ``B B^T = A`` for symmetric PSD ``A``.

    Numerically semi-definite input is retried once with ``1e-12 * I``
    jitter; anything still failing is reported with its most negative
    eigenvalue.
    """
    A = as_matrix(A, "cholesky input")
    if A.shape[0] != A.shape[1]:
        raise ModelError(f"cholesky input must be square, got shape {A.shape}")
    dev = np.abs(A - A.T).max() if A.size else 0.0
    if dev > _sym_tol(A):
        raise ModelError(f"cholesky input is not symmetric (max asymmetry {dev:.3e})")
    A = symmetrize(A)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(A + CHOLESKY_JITTER * np.eye(A.shape[0]))
    except np.linalg.LinAlgError:
        raise ModelError(
            "cholesky input is indefinite even after jitter "
            f"(min eigenvalue {min_eigenvalue(A):.3e})"
        ) from None


def block_diag(*blocks: np.ndarray) -> np.ndarray:
    """Dense block-diagonal assembly of square blocks."""
    sizes = [b.shape[0] for b in blocks]
    out = np.zeros((sum(sizes), sum(sizes)))
    at = 0
    for b, s in zip(blocks, sizes):
        out[at:at + s, at:at + s] = b
        at += s
    return out


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GaussianBelief:
    """Mean vector plus symmetric PSD covariance; the universal filter state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean, "belief mean")
        cov = as_matrix(self.cov, "belief cov")
        if cov.shape != (mean.size, mean.size):
            raise ModelError(
                f"belief cov shape {cov.shape} does not match mean dimension {mean.size}"
            )
        cov = check_psd(cov, "belief cov")
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "cov", _freeze(cov))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class LinearSystem:
    """Time-invariant model x_k = F x_{k-1} + G d_{k-1} + w_k, y_k = H x_k + v_k.

    Construction enforces dimensional consistency, Q symmetric PSD,
    R symmetric PD, and the disturbance-observability rank condition
    rank(H G) = rank(G) = p.
    """

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        F = as_matrix(self.F, "F")
        G = as_matrix(self.G, "G")
        H = as_matrix(self.H, "H")
        Q = as_matrix(self.Q, "Q")
        R = as_matrix(self.R, "R")
        n = F.shape[0]
        if F.shape != (n, n):
            raise ModelError(f"F must be square, got shape {F.shape}")
        if G.shape[0] != n:
            raise ModelError(f"G must have {n} rows to match F, got shape {G.shape}")
        p = G.shape[1]
        if H.shape[1] != n:
            raise ModelError(f"H must have {n} columns to match F, got shape {H.shape}")
        m = H.shape[0]
        if Q.shape != (n, n):
            raise ModelError(f"Q must be {n}x{n}, got shape {Q.shape}")
        if R.shape != (m, m):
            raise ModelError(f"R must be {m}x{m}, got shape {R.shape}")
        Q = check_psd(Q, "Q")
        R = check_pd(R, "R")
        if np.linalg.matrix_rank(G) != p or np.linalg.matrix_rank(H @ G) != p:
            raise ModelError(
                "disturbance unobservable: rank(H G) = rank(G) = p required "
                f"(p={p}, rank(G)={np.linalg.matrix_rank(G)}, "
                f"rank(HG)={np.linalg.matrix_rank(H @ G)})"
            )
        for name, arr in (("F", F), ("G", G), ("H", H), ("Q", Q), ("R", R)):
            object.__setattr__(self, name, _freeze(arr))

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def p(self) -> int:
        return self.G.shape[1]


@dataclass(frozen=True)
class AugmentedModel:
    """Blocks of the disturbance-augmented model over [d; x].

    Phi = [[I, 0], [G, F]], Haug = [0, H], Qaug = blockdiag(D, Q).
    """

    Phi: np.ndarray
    Haug: np.ndarray
    Qaug: np.ndarray
    n: int
    m: int
    p: int

    def __post_init__(self):
        q = self.p + self.n
        if self.Phi.shape != (q, q):
            raise ModelError(f"Phi block must be {q}x{q}, got {self.Phi.shape}")
        if self.Haug.shape != (self.m, q):
            raise ModelError(f"Haug block must be {self.m}x{q}, got {self.Haug.shape}")
        if self.Qaug.shape != (q, q):
            raise ModelError(f"Qaug block must be {q}x{q}, got {self.Qaug.shape}")
        object.__setattr__(self, "Phi", _freeze(self.Phi))
        object.__setattr__(self, "Haug", _freeze(self.Haug))
        object.__setattr__(self, "Qaug", _freeze(check_psd(self.Qaug, "Qaug")))

    @property
    def dim(self) -> int:
        return self.p + self.n


def augment(system: LinearSystem, D) -> AugmentedModel:
    """Augment the disturbance into the state under a random-walk model.

    D is the disturbance noise covariance; the returned blocks place the
    disturbance first: Phi = [[I, 0], [G, F]], Haug = [0, H],
    Qaug = blockdiag(D, Q).
    """
    D = as_matrix(D, "D")
    p, n, m = system.p, system.n, system.m
    if D.shape != (p, p):
        raise ModelError(f"D block must be {p}x{p} to match G, got shape {D.shape}")
    D = check_psd(D, "D")
    q = p + n
    Phi = np.zeros((q, q))
    Phi[:p, :p] = np.eye(p)
    Phi[p:, :p] = system.G
    Phi[p:, p:] = system.F
    Haug = np.zeros((m, q))
    Haug[:, p:] = system.H
    Qaug = block_diag(D, np.asarray(system.Q))
    return AugmentedModel(Phi=Phi, Haug=Haug, Qaug=Qaug, n=n, m=m, p=p)
