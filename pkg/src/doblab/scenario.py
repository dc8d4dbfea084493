"""Ground-truth generation: tracking system, step disturbances, seeded simulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import LinearSystem, ModelError, as_matrix, as_vector, check_psd, cholesky_factor

# Nominal disturbance noise covariance scale for the default scenario.
DEFAULT_D_STAR = 1e-4
# Counter-based noise streams, separated per source so adding trials or
# estimators never perturbs existing draws.
STREAM_X0 = 0
STREAM_PROCESS = 1
STREAM_MEASUREMENT = 2
STREAM_DISTURBANCE = 3


def noise_stream(seed: int, stream: int) -> np.random.Generator:
    """Independent counter-based generator for one (seed, stream) pair."""
    ss = np.random.SeedSequence((int(seed), int(stream)))
    return np.random.Generator(np.random.Philox(seed=ss))


@dataclass(frozen=True)
class DisturbanceProfile:
    """Piecewise-constant step levels plus a white-noise term.

    ``segments`` is a sorted tuple of (start_step, level); each segment is
    active on the closed-left, open-right interval up to the next start.
    """

    segments: tuple[tuple[int, float], ...]
    noise_cov: np.ndarray

    def __post_init__(self):
        segs = tuple((int(s), float(v)) for s, v in self.segments)
        if not segs:
            raise ModelError("profile needs at least one segment")
        if segs[0][0] != 0:
            raise ModelError("first segment must start at step 0")
        starts = [s for s, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ModelError("segment starts must be strictly increasing")
        if not all(np.isfinite(v) for _, v in segs):
            raise ModelError("segment levels must be finite")
        cov = check_psd(as_matrix(self.noise_cov, "noise_cov"), "noise_cov")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "noise_cov", cov)

    @property
    def p(self) -> int:
        return self.noise_cov.shape[0]

    def level_at(self, k: int) -> float:
        if k < 0:
            raise ModelError("step index must be nonnegative")
        starts = np.array([s for s, _ in self.segments])
        idx = int(np.searchsorted(starts, k, side="right")) - 1
        return self.segments[idx][1]

    def levels(self, steps: int) -> np.ndarray:
        starts = np.array([s for s, _ in self.segments])
        vals = np.array([v for _, v in self.segments])
        idx = np.searchsorted(starts, np.arange(steps + 1), side="right") - 1
        return vals[idx]

    def jump_steps(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.segments[1:])


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    # Exactly-zero covariance must produce exactly-zero noise.
    if not np.any(cov):
        return np.zeros_like(cov)
    return cholesky_factor(cov)


def sample_disturbance(profile: DisturbanceProfile, k: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Active step level plus a Gaussian draw with the profile covariance."""
    level = profile.level_at(k)
    L = _noise_factor(profile.noise_cov)
    return level * np.ones(profile.p) + L @ rng.standard_normal(profile.p)


def default_tracking_system(T: float = 0.1, q_x: float = 1e-4,
                            r: float = 1e-2) -> LinearSystem:
    """Constant-velocity tracking model with acceleration-like disturbance.

    F = [[1, T], [0, 1]], G = [T^2/2; T], H = I2, Q = q_x I2, R = r I2.
    """
    if T <= 0.0:
        raise ModelError("sampling time must be positive")
    F = np.array([[1.0, T], [0.0, 1.0]])
    G = np.array([[T * T / 2.0], [T]])
    H = np.eye(2)
    return LinearSystem(F=F, G=G, H=H, Q=q_x * np.eye(2), R=r * np.eye(2))


def default_disturbance_profile(d_star: float = DEFAULT_D_STAR) -> DisturbanceProfile:
    """Step levels cycling {0, 8, -3, 5} every 300 steps, one jump moved to 1260.

    The 1260 jump puts a level change inside the t in [126, 132] s analysis
    window (steps 1260..1320) so the window spans both a constant region and
    a jump response; the cycle order places the smallest level change (5 to
    0) at that window jump, which keeps the windowed jump-bias contribution
    of a fast estimator below the infinite-D variance floor.
    """
    starts = (0, 300, 600, 900, 1260, 1500, 1800)
    cycle = (0.0, 8.0, -3.0, 5.0)
    segments = tuple((s, cycle[i % len(cycle)]) for i, s in enumerate(starts))
    return DisturbanceProfile(segments=segments, noise_cov=[[d_star]])


@dataclass(frozen=True)
class Trajectory:
    """Simulated truth: states, disturbances, and measurements for steps 0..K."""

    states: np.ndarray        # (steps+1, n)
    disturbances: np.ndarray  # (steps+1, p)
    measurements: np.ndarray  # (steps+1, m)
    seed: int

    def __post_init__(self):
        if not (len(self.states) == len(self.disturbances) == len(self.measurements)):
            raise ModelError("trajectory arrays must have equal lengths")

    @property
    def steps(self) -> int:
        return len(self.states) - 1


def simulate_truth(sys: LinearSystem, profile: DisturbanceProfile, steps: int,
                   seed: int, x0_mean=None, x0_cov=None) -> Trajectory:
    """Simulate x_k = F x_{k-1} + G d_{k-1} + w_k, y_k = H x_k + v_k.

    x_0 is drawn from the configurable initial Gaussian (defaults to a
    point mass at zero); w, v, w_d, and x_0 use separate seeded streams.
    """
    if steps < 1:
        raise ModelError("steps must be >= 1")
    if profile.p != sys.p:
        raise ModelError(
            f"profile dimension {profile.p} does not match system p={sys.p}")
    n, m, p = sys.n, sys.m, sys.p
    x0_mean = np.zeros(n) if x0_mean is None else as_vector(x0_mean, "x0_mean")
    P0 = np.zeros((n, n)) if x0_cov is None else check_psd(
        as_matrix(x0_cov, "x0_cov"), "x0_cov")
    if x0_mean.size != n or P0.shape != (n, n):
        raise ModelError("initial Gaussian dimensions do not match the system")

    g_x0 = noise_stream(seed, STREAM_X0)
    g_w = noise_stream(seed, STREAM_PROCESS)
    g_v = noise_stream(seed, STREAM_MEASUREMENT)
    g_d = noise_stream(seed, STREAM_DISTURBANCE)

    x0 = x0_mean + _noise_factor(P0) @ g_x0.standard_normal(n)
    w = g_w.standard_normal((steps, n)) @ _noise_factor(np.asarray(sys.Q)).T
    v = g_v.standard_normal((steps + 1, m)) @ _noise_factor(np.asarray(sys.R)).T
    d = (profile.levels(steps)[:, None] * np.ones(p)[None, :]
         + g_d.standard_normal((steps + 1, p)) @ _noise_factor(profile.noise_cov).T)

    F, G, H = np.asarray(sys.F), np.asarray(sys.G), np.asarray(sys.H)
    x = np.zeros((steps + 1, n))
    y = np.zeros((steps + 1, m))
    x[0] = x0
    y[0] = H @ x0 + v[0]
    for k in range(1, steps + 1):
        x[k] = F @ x[k - 1] + G @ d[k - 1] + w[k - 1]
        y[k] = H @ x[k] + v[k]
    return Trajectory(states=x, disturbances=d, measurements=y, seed=int(seed))


def _float_fields(values) -> list[str]:
    # 17 significant digits keeps round-trips byte-exact.
    return [f"{v:.17g}" for v in values]


def trajectory_column_names(n: int, m: int, p: int) -> list[str]:
    d_cols = ["d_true"] if p == 1 else [f"d_true{i + 1}" for i in range(p)]
    return (["step", "t"] + d_cols + [f"x{i + 1}" for i in range(n)]
            + [f"y{i + 1}" for i in range(m)])


def trajectory_to_csv(traj: Trajectory, T: float, path) -> None:
    """Write `step,t,d_true,x1,x2,y1,y2` rows (generalized names for other dims)."""
    n = traj.states.shape[1]
    m = traj.measurements.shape[1]
    p = traj.disturbances.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(trajectory_column_names(n, m, p))
        for k in range(traj.steps + 1):
            row = [str(k), f"{k * T:.17g}"]
            row += _float_fields(traj.disturbances[k])
            row += _float_fields(traj.states[k])
            row += _float_fields(traj.measurements[k])
            writer.writerow(row)
