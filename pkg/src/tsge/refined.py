"""Stage-2 refinement on the carrier-aware (refined) signal model.

The refined model keeps the carrier offsets ``f'_c,m = f_c,m - f_c,1`` and the
residual phases ``phi'_m = phi_m - phi_1`` (``phi'_1 = 0``).  Path gains are
common to all subbands and enter linearly, so they are eliminated by least
squares and only ``theta = [tau, delta, phi']`` is searched.

When ``sigma_p == 0`` the timing offsets are pinned to zero and dropped from
``theta``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import TWO_PI, MultibandConfig, Observation

log = logging.getLogger(__name__)

RIDGE = 1e-10
COND_LIMIT = 1e10


@dataclass(frozen=True)
class RefinedParams:
    """Delays ``tau`` (K,), timing offsets ``delta`` (M,), residual phases ``phi_prime`` (M-1,)."""

    tau: np.ndarray
    delta: np.ndarray
    phi_prime: np.ndarray

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, float))
        delta = np.atleast_1d(np.asarray(self.delta, float))
        phi = np.atleast_1d(np.asarray(self.phi_prime, float))
        if tau.ndim != 1 or tau.size < 1:
            raise ValueError("tau must be a non-empty 1-D array")
        if phi.size != delta.size - 1:
            raise ValueError("phi_prime needs M-1 entries for M timing offsets")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "phi_prime", phi)

    @property
    def K(self) -> int:
        return self.tau.size

    @property
    def M(self) -> int:
        return self.delta.size

    @property
    def dim(self) -> int:
        return self.K + 2 * self.M - 1

    def to_vector(self, include_delta: bool = True) -> np.ndarray:
        parts = [self.tau, self.delta, self.phi_prime] if include_delta else [self.tau, self.phi_prime]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, v, K: int, M: int, include_delta: bool = True) -> "RefinedParams":
        v = np.asarray(v, float)
        tau = v[:K]
        if include_delta:
            delta, phi = v[K:K + M], v[K + M:]
        else:
            delta, phi = np.zeros(M), v[K:]
        return cls(tau, delta, phi)


def build_h(theta: RefinedParams, config: MultibandConfig) -> np.ndarray:
    """Stacked (N, K) system matrix of the refined model."""
    if theta.M != config.M:
        raise ValueError("theta has %d subbands, config has %d" % (theta.M, config.M))
    blocks = []
    fc1 = config.fc_hz[0]
    phi = np.concatenate([[0.0], theta.phi_prime])
    for m in range(config.M):
        n = config.indices(m)[:, None]
        fs = config.fs_hz[m]
        carrier = np.exp(-1j * TWO_PI * (config.fc_hz[m] - fc1) * theta.tau)
        ramp = np.exp(-1j * TWO_PI * n * fs * (theta.tau[None, :] + theta.delta[m]))
        blocks.append(ramp * carrier[None, :] * np.exp(1j * phi[m]))
    return np.vstack(blocks)


def ls_gains(H, y, return_flag: bool = False):
    """Least-squares gains ``(H^H H)^-1 H^H y``.

    Falls back to a ridge of ``1e-10 tr(H^H H) / K`` when the Gram matrix is
    ill-conditioned; ``return_flag`` also reports whether that happened.
    """
    H = np.asarray(H)
    y = np.asarray(y)
    G = H.conj().T @ H
    b = H.conj().T @ y
    K = G.shape[0]
    regularized = bool(np.linalg.cond(G) > COND_LIMIT)
    if regularized:
        G = G + RIDGE * np.real(np.trace(G)) / K * np.eye(K)
    g = np.linalg.solve(G, b)
    return (g, regularized) if return_flag else g


def _split_band(n, y):
    """Reshape ``y`` over contiguous indices ``n`` into an (R, C) block for :func:`_dtft`."""
    C = int(np.ceil(np.sqrt(n.size)))
    R = -(-n.size // C)
    Y = np.zeros(R * C, complex)
    Y[:n.size] = y
    return int(n[0]), Y.reshape(R, C)


def _dtft(block, theta):
    """``sum_n y[n] exp(1j theta n)`` for an array of ``theta``.

    Writing ``n = n0 + r C + c`` needs only ``R + C`` exponentials per theta
    instead of ``N``.
    """
    n0, Y = block
    R, C = Y.shape
    th = np.asarray(theta, float)[..., None]
    inner = np.exp(1j * th * np.arange(C)) @ Y.T
    outer = np.exp(1j * th * (C * np.arange(R)))
    return np.exp(1j * th[..., 0] * n0) * np.sum(inner * outer, axis=-1)


def _dirichlet(theta, n_sub):
    """Sum over n = -N/2..N/2-1 of exp(1j * theta * n)."""
    half = 0.5 * theta
    s = np.sin(half)
    small = np.abs(s) < 1e-12
    safe = np.where(small, 1.0, s)
    val = np.sin(n_sub * half) / safe
    val = np.where(small, n_sub * np.cos(n_sub * half) / np.where(small, np.cos(half), 1.0), val)
    return val * np.exp(-1j * half)


class RefinedObjective:
    """P3 objective ``||y - H g*||^2 / sigma^2 + sum delta^2 / (2 sigma_p^2)`` over ``theta``.

    All batch methods take positions of shape (Q, D) and are vectorized over
    the Q rows.

    Parameters
    ----------
    y : list of (N_m,) complex arrays
    config : MultibandConfig
    noise_var : float
        Must be positive.
    sigma_p : float
        Timing-offset prior std (s); 0 removes the offsets from ``theta``.
    K : int
        Number of paths.
    """

    def __init__(self, y, config: MultibandConfig, noise_var: float, sigma_p: float, K: int):
        if noise_var <= 0:
            raise ValueError("noise variance must be positive")
        if K < 1:
            raise ValueError("need at least one path")
        self.y = [np.asarray(v, complex) for v in y]
        self.config = config
        self.noise_var = float(noise_var)
        self.sigma_p = float(sigma_p)
        self.K = int(K)
        self.M = config.M
        self.include_delta = self.sigma_p > 0
        self.y_sq = float(sum(np.vdot(v, v).real for v in self.y))
        self.n_evals = 0
        self._blocks = [_split_band(config.indices(m), v) for m, v in enumerate(self.y)]

    @classmethod
    def from_observation(cls, obs: Observation, K: int, noise_floor: float = 1e-12) -> "RefinedObjective":
        nv = max(obs.sigma_ns_sq, noise_floor * obs.signal_power())
        return cls(obs.y, obs.config, nv, obs.sigma_p, K)

    @property
    def dim(self) -> int:
        return self.K + (2 * self.M - 1 if self.include_delta else self.M - 1)

    def unpack(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        K, M = self.K, self.M
        tau = X[:, :K]
        if self.include_delta:
            delta, phi = X[:, K:K + M], X[:, K + M:]
        else:
            delta, phi = np.zeros((X.shape[0], M)), X[:, K:]
        phi = np.concatenate([np.zeros((X.shape[0], 1)), phi], axis=1)
        return tau, delta, phi

    def params(self, x) -> RefinedParams:
        return RefinedParams.from_vector(x, self.K, self.M, self.include_delta)

    def vector(self, theta: RefinedParams) -> np.ndarray:
        return theta.to_vector(self.include_delta)

    def _normal_equations(self, X):
        """``b = H^H y`` (Q, K) and ``G = H^H H`` (Q, K, K)."""
        tau, delta, phi = self.unpack(X)
        Q, K = tau.shape
        cfg = self.config
        fc1 = cfg.fc_hz[0]
        b = np.zeros((Q, K), complex)
        G = np.zeros((Q, K, K), complex)
        dtau = tau[:, None, :] - tau[:, :, None]  # [q, k, l] = tau_l - tau_k
        for m in range(self.M):
            n = cfg.indices(m)
            fs = cfg.fs_hz[m]
            c = np.exp(-1j * (TWO_PI * (cfg.fc_hz[m] - fc1) * tau - phi[:, m:m + 1]))
            t = tau + delta[:, m:m + 1]
            b += np.conj(c) * _dtft(self._blocks[m], TWO_PI * fs * t)
            D = _dirichlet(-TWO_PI * fs * dtau, n.size)
            G += np.conj(c)[:, :, None] * c[:, None, :] * D
        return b, G

    def _solve(self, b, G):
        K = G.shape[-1]
        regularized = np.zeros(G.shape[0], bool)
        if K > 1:
            w = np.linalg.eigvalsh(G)
            regularized = w[:, 0] <= w[:, -1] / COND_LIMIT
            if regularized.any():
                tr = np.real(np.trace(G, axis1=1, axis2=2))
                G = G + (regularized * RIDGE * tr / K)[:, None, None] * np.eye(K)
        g = np.linalg.solve(G, b[..., None])[..., 0]
        return g, regularized

    def penalty(self, X) -> np.ndarray:
        if not self.include_delta:
            return np.zeros(np.atleast_2d(X).shape[0])
        _, delta, _ = self.unpack(X)
        return np.sum(delta ** 2, axis=1) / (2.0 * self.sigma_p ** 2)

    def batch(self, X) -> np.ndarray:
        """Fitness of each row of ``X`` via ``||y||^2 - Re(b^H g*)``."""
        X = np.atleast_2d(X)
        self.n_evals += X.shape[0]
        b, G = self._normal_equations(X)
        g, _ = self._solve(b, G)
        resid = self.y_sq - np.real(np.sum(np.conj(b) * g, axis=1))
        return np.maximum(resid, 0.0) / self.noise_var + self.penalty(X)

    def gains(self, x) -> tuple[np.ndarray, bool]:
        b, G = self._normal_equations(np.atleast_2d(x))
        g, reg = self._solve(b, G)
        return g[0], bool(reg[0])

    def __call__(self, x) -> float:
        """Fitness from an explicitly formed residual (reference evaluation)."""
        x = np.asarray(x, float)
        theta = self.params(x)
        H = build_h(theta, self.config)
        g, _ = self.gains(x)
        y = np.concatenate(self.y)
        r = y - H @ g
        return float(np.vdot(r, r).real / self.noise_var + self.penalty(x[None])[0])

    def joint(self, Z) -> np.ndarray:
        """P2 objective for rows ``Z = [theta, Re g, Im g]`` (gains searched explicitly)."""
        Z = np.atleast_2d(np.asarray(Z, float))
        self.n_evals += Z.shape[0]
        d = self.dim
        X, gr, gi = Z[:, :d], Z[:, d:d + self.K], Z[:, d + self.K:]
        g = gr + 1j * gi
        b, G = self._normal_equations(X)
        quad = np.real(np.einsum("qk,qkl,ql->q", np.conj(g), G, g))
        resid = self.y_sq - 2.0 * np.real(np.sum(np.conj(g) * b, axis=1)) + quad
        return np.maximum(resid, 0.0) / self.noise_var + self.penalty(X)


@dataclass(frozen=True)
class SearchSpace:
    """Box ``[lower, upper]`` over the search coordinates."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def clip(self, X):
        return np.clip(X, self.lower, self.upper)

    def contains(self, X) -> bool:
        X = np.asarray(X)
        return bool(np.all((X >= self.lower) & (X <= self.upper)))

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + rng.random((n, self.dim)) * (self.upper - self.lower)


def search_space(tau_center, delta_center, M: int, e_tau: float, e_delta: float = 0.0,
                 include_delta: bool = True) -> SearchSpace:
    """Box centred on point estimates; ``phi'`` always spans ``[0, 2 pi]`` and ``tau >= 0``."""
    tau_center = np.atleast_1d(np.asarray(tau_center, float))
    if tau_center.size == 0:
        raise ValueError("coarse support is empty")
    lo = [np.maximum(tau_center - e_tau, 0.0)]
    hi = [tau_center + e_tau]
    if include_delta:
        dc = np.broadcast_to(np.asarray(delta_center, float), (M,))
        lo.append(dc - e_delta)
        hi.append(dc + e_delta)
    lo.append(np.zeros(M - 1))
    hi.append(np.full(M - 1, TWO_PI))
    return SearchSpace(np.concatenate(lo), np.concatenate(hi))


def search_space_from_coarse(coarse, e_tau: float, sigma_p: float, e_delta: float | None = None) -> SearchSpace:
    """Search box from a Stage-1 estimate; ``e_delta`` defaults to ``3 sigma_p``."""
    if e_delta is None:
        e_delta = 3.0 * sigma_p
    M = np.asarray(coarse.delta).size
    return search_space(coarse.delays, coarse.delta, M, e_tau, e_delta, include_delta=sigma_p > 0)


@dataclass
class PSOOptions:
    """Swarm settings; ``w`` decays linearly from ``w_start`` to ``w_end`` over ``max_iters``."""

    n_particles: int = 100
    max_iters: int = 500
    c1: float = 2.5
    c2: float = 0.5
    w_start: float = 0.99
    w_end: float = 0.20
    eps: float = 1e-5
    patience: int | None = None
    max_evals: int | None = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.patience is None:
            self.patience = max(1, self.max_iters // 2)

    def inertia(self, i: int) -> float:
        if self.max_iters == 0:
            return self.w_start
        return self.w_start - (self.w_start - self.w_end) * i / self.max_iters


@dataclass
class SwarmState:
    X: np.ndarray
    V: np.ndarray
    pbest: np.ndarray
    pbest_f: np.ndarray
    gbest: np.ndarray
    gbest_f: float
    rng: np.random.Generator

    @classmethod
    def init(cls, space: SearchSpace, fitness_fn, n_particles: int, rng: np.random.Generator,
             positions=None) -> "SwarmState":
        X = space.uniform(rng, n_particles) if positions is None else space.clip(np.atleast_2d(positions).astype(float))
        f = np.asarray(fitness_fn(X), float)
        q = int(np.argmin(f))
        return cls(X, np.zeros_like(X), X.copy(), f.copy(), X[q].copy(), float(f[q]), rng)


def pso_step(swarm: SwarmState, fitness_fn, i: int, space: SearchSpace, opts: PSOOptions) -> SwarmState:
    """One velocity/position update with clamping, then pbest/gbest bookkeeping (in place)."""
    Q, D = swarm.X.shape
    r1 = swarm.rng.random((Q, D))
    r2 = swarm.rng.random((Q, D))
    w = opts.inertia(i)
    V = w * swarm.V + opts.c1 * r1 * (swarm.pbest - swarm.X) + opts.c2 * r2 * (swarm.gbest - swarm.X)
    cap = space.half_width
    V = np.clip(V, -cap, cap)
    X = space.clip(swarm.X + V)
    f = np.asarray(fitness_fn(X), float)
    better = f < swarm.pbest_f
    swarm.pbest[better] = X[better]
    swarm.pbest_f[better] = f[better]
    q = int(np.argmin(swarm.pbest_f))
    if swarm.pbest_f[q] < swarm.gbest_f:
        swarm.gbest = swarm.pbest[q].copy()
        swarm.gbest_f = float(swarm.pbest_f[q])
    swarm.X, swarm.V = X, V
    return swarm


@dataclass
class RefinedEstimate:
    theta: RefinedParams
    gains: np.ndarray
    fitness: float
    iters: int
    converged: bool
    trace: list = field(default_factory=list)
    n_evals: int = 0
    regularized: bool = False

    @property
    def los_delay(self) -> float:
        return float(np.min(self.theta.tau))

    def to_json(self) -> str:
        return json.dumps({
            "tau_s": self.theta.tau.tolist(),
            "delta_s": self.theta.delta.tolist(),
            "phi_prime": self.theta.phi_prime.tolist(),
            "gains": [{"re": float(g.real), "im": float(g.imag)} for g in self.gains],
            "fitness": self.fitness,
            "iters": self.iters,
        })

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "gbest_fitness"])
        for i, f in enumerate(self.trace):
            w.writerow([i, repr(float(f))])
        return buf.getvalue()


def _finish(objective: RefinedObjective, x, iters, converged, trace) -> RefinedEstimate:
    order = np.argsort(x[:objective.K], kind="stable")
    x = np.asarray(x, float).copy()
    x[:objective.K] = x[:objective.K][order]
    g, reg = objective.gains(x)
    return RefinedEstimate(objective.params(x), g, objective(x), iters, converged, trace,
                           objective.n_evals, reg)


def _run_swarm(fitness_fn, space: SearchSpace, opts: PSOOptions, rng, init_positions=None):
    evals = opts.n_particles if init_positions is None else np.atleast_2d(init_positions).shape[0]
    swarm = SwarmState.init(space, fitness_fn, opts.n_particles, rng, init_positions)
    trace = [swarm.gbest_f]
    width = np.where(space.upper > space.lower, space.upper - space.lower, 1.0)
    still, converged, it = 0, False, 0
    for it in range(1, opts.max_iters + 1):
        if opts.max_evals is not None and evals + swarm.X.shape[0] > opts.max_evals:
            it -= 1
            break
        prev = swarm.gbest.copy()
        pso_step(swarm, fitness_fn, it, space, opts)
        evals += swarm.X.shape[0]
        trace.append(swarm.gbest_f)
        moved = np.linalg.norm((swarm.gbest - prev) / width)
        still = still + 1 if moved <= opts.eps else 0
        if still >= opts.patience:
            converged = True
            break
    return swarm, it, converged, trace


def run_pso_ls(objective: RefinedObjective, space: SearchSpace, opts: PSOOptions = PSOOptions(),
               seed=None, init_positions=None) -> RefinedEstimate:
    """Bounded PSO over ``theta`` with gains eliminated by least squares.

    Stops after ``max_iters`` or once the box-normalized gbest movement stays
    at or below ``eps`` for ``patience`` consecutive iterations.
    """
    if space.dim != objective.dim:
        raise ValueError("search space has %d dims, objective expects %d" % (space.dim, objective.dim))
    rng = np.random.default_rng(seed)
    swarm, it, converged, trace = _run_swarm(objective.batch, space, opts, rng, init_positions)
    return _finish(objective, swarm.gbest, it, converged, trace)


def joint_space(objective: RefinedObjective, space: SearchSpace, gain_bound: float) -> SearchSpace:
    """Extend a ``theta`` box with ``[-gain_bound, gain_bound]`` for Re/Im of each gain."""
    k = objective.K
    lo = np.concatenate([space.lower, np.full(2 * k, -gain_bound)])
    hi = np.concatenate([space.upper, np.full(2 * k, gain_bound)])
    return SearchSpace(lo, hi)


def run_pso_joint(objective: RefinedObjective, space: SearchSpace, opts: PSOOptions = PSOOptions(),
                  seed=None, gain_bound: float | None = None) -> RefinedEstimate:
    """PSO over ``theta`` and the gains jointly (dimension ``3K + 2M - 1``).

    The default gain box is ``+-2 rms(y)`` per real coordinate.
    """
    if gain_bound is None:
        n = sum(v.size for v in objective.y)
        gain_bound = 2.0 * np.sqrt(objective.y_sq / n)
    big = joint_space(objective, space, gain_bound)
    rng = np.random.default_rng(seed)
    swarm, it, converged, trace = _run_swarm(objective.joint, big, opts, rng)
    return _finish(objective, swarm.gbest[:objective.dim], it, converged, trace)


@dataclass
class GDOptions:
    """Finite-difference descent settings; steps are in seconds and radians.

    ``method="bfgs"`` scales the descent direction by a BFGS inverse-Hessian
    estimate; ``"steepest"`` uses the raw gradient.
    """

    max_iters: int = 500
    time_step: float = 1e-12
    phase_step: float = 1e-6
    tol: float = 1e-10
    shrink: float = 0.5
    slope: float = 1e-4
    max_backtracks: int = 40
    initial_step: float = 1e-3
    method: str = "bfgs"

    def __post_init__(self):
        if self.method not in ("bfgs", "steepest"):
            raise ValueError("method must be 'bfgs' or 'steepest'")


def _scales(objective: RefinedObjective) -> np.ndarray:
    """Coordinate scale so that delays/offsets are handled in ns and phases in rad."""
    k = objective.K
    s = np.ones(objective.dim)
    n_time = k + (objective.M if objective.include_delta else 0)
    s[:n_time] = 1e-9
    return s


def fd_gradient(objective: RefinedObjective, x, opts: GDOptions = GDOptions()) -> np.ndarray:
    """Central-difference gradient in physical units, all probes in one batch."""
    x = np.asarray(x, float)
    d = x.size
    h = np.where(_scales(objective) < 1.0, opts.time_step, opts.phase_step)
    P = np.repeat(x[None], 2 * d, axis=0)
    idx = np.arange(d)
    P[2 * idx, idx] += h
    P[2 * idx + 1, idx] -= h
    f = objective.batch(P)
    return (f[0::2] - f[1::2]) / (2.0 * h)


def run_gradient_descent(objective: RefinedObjective, theta_init, opts: GDOptions = GDOptions(),
                         space: SearchSpace | None = None) -> RefinedEstimate:
    """Armijo descent on the decoupled objective from ``theta_init``.

    Works in scaled coordinates (ns, rad) with central-difference gradients.
    Stops when the accepted step or the scaled gradient falls below ``tol``,
    or when no step satisfies the Armijo condition. Optional ``space`` clamps
    iterates.
    """
    x = objective.vector(theta_init) if isinstance(theta_init, RefinedParams) else np.asarray(theta_init, float)
    s = _scales(objective)
    bfgs = opts.method == "bfgs"
    f = float(objective.batch(x[None])[0])
    trace = [f]
    g = fd_gradient(objective, x, opts) * s
    Hinv, fresh = np.eye(x.size), True
    step = opts.initial_step
    converged, it = False, 0
    for it in range(1, opts.max_iters + 1):
        if np.sqrt(np.dot(g, g)) < opts.tol:
            converged = True
            break
        d = -Hinv @ g if bfgs else -g
        slope = float(np.dot(g, d))
        if slope >= 0:
            Hinv, fresh = np.eye(x.size), True
            d, slope = -g, -float(np.dot(g, g))
        accepted = False
        # first and steepest steps: ``step`` is a displacement in ns / rad
        t = 1.0 if bfgs and not fresh else step / max(np.sqrt(-slope), 1e-300)
        for _ in range(opts.max_backtracks):
            cand = x + t * d * s
            if space is not None:
                cand = space.clip(cand)
            fc = float(objective.batch(cand[None])[0])
            if fc <= f + opts.slope * t * slope:
                accepted = True
                break
            t *= opts.shrink
        if not accepted:
            if bfgs and not fresh:
                Hinv, fresh = np.eye(x.size), True
                continue
            converged = True
            break
        dz = (cand - x) / s
        x, f = cand, fc
        trace.append(f)
        g_new = fd_gradient(objective, x, opts) * s
        if bfgs:
            yk = g_new - g
            sy = float(np.dot(dz, yk))
            if sy > 1e-12 * np.linalg.norm(dz) * np.linalg.norm(yk):
                if fresh:
                    Hinv = Hinv * (sy / float(np.dot(yk, yk)))
                    fresh = False
                rho = 1.0 / sy
                V = np.eye(x.size) - rho * np.outer(dz, yk)
                Hinv = V @ Hinv @ V.T + rho * np.outer(dz, dz)
        g = g_new
        step = 2.0 * float(np.linalg.norm(dz))
        if np.linalg.norm(dz) < opts.tol:
            converged = True
            break
    return _finish(objective, x, it, converged, trace)
