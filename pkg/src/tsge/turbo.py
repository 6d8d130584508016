"""Coarse-stage Turbo Bayesian inference over a common-support sparse delay model.

The E-step alternates an LMMSE module (A) with a Bernoulli-Gaussian sparsity
combiner (B) that couples subbands through a shared support vector.  The
M-step takes one preconditioned gradient-ascent step with Armijo backtracking
on the EM surrogate, first for the timing offsets and then for the off-grid
corrections.

Arrays indexed by subband and grid point have shape ``(M, L)``; per-band
covariances have shape ``(M, L, L)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from .grid import DelayGrid, basis_matrix, measurement_matrix, timing_offset_diag
from .model import TWO_PI, MultibandConfig, Observation

log = logging.getLogger(__name__)

EXT_CAP = 1e8
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class BGPrior:
    """Bernoulli-Gaussian prior: support probability and active-gain variances (M, L)."""

    p_s: float
    sigma_x_sq: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.p_s < 1.0:
            raise ValueError("p_s must lie in (0, 1)")
        s = np.asarray(self.sigma_x_sq, float)
        if s.ndim != 2 or np.any(s <= 0):
            raise ValueError("sigma_x_sq must be a positive (M, L) array")
        object.__setattr__(self, "sigma_x_sq", s)

    @classmethod
    def from_observation(cls, y, noise_var: float, L: int, expected_k: float = 4.0) -> "BGPrior":
        """Moment-matched prior: each band's excess power split over ``expected_k`` paths."""
        p_s = min(max(expected_k / L, 1e-6), 1 - 1e-6)
        var = []
        for ym in y:
            power = max(np.mean(np.abs(ym) ** 2) - noise_var, 1e-3 * np.mean(np.abs(ym) ** 2), 1e-300)
            var.append(np.full(L, power / (p_s * L)))
        return cls(p_s, np.array(var))


@dataclass
class ModuleAState:
    x_pri: np.ndarray
    v_pri: np.ndarray
    x_post: np.ndarray
    V_post: np.ndarray
    x_ext: np.ndarray
    v_ext: np.ndarray


@dataclass
class ModuleBState:
    x_pri: np.ndarray
    v_pri: np.ndarray
    x_post: np.ndarray
    v_post: np.ndarray
    pi: np.ndarray
    pi_hat: np.ndarray
    support_prob: np.ndarray
    x_ext: np.ndarray
    v_ext: np.ndarray


@dataclass
class EStepResult:
    a: ModuleAState
    b: ModuleBState
    iters: int
    converged: bool
    n_capped: int = 0


class SupportMessages(NamedTuple):
    pi: np.ndarray
    pi_hat: np.ndarray
    x_post: np.ndarray
    v_post: np.ndarray
    support_prob: np.ndarray


# --- Module A ----------------------------------------------------------------

def lmmse_update(phi, y, x_pri, v_pri, sigma_ns_sq, gram=None, phi_h_y=None):
    """Gaussian posterior of x given y = phi x + w and prior CN(x_pri, v_pri I).

    Returns ``(x_post, V_post)``.
    """
    if not (v_pri > 0 and sigma_ns_sq > 0):
        raise ValueError("LMMSE needs positive prior and noise variances")
    if gram is None:
        gram = phi.conj().T @ phi
    if phi_h_y is None:
        phi_h_y = phi.conj().T @ y
    L = gram.shape[0]
    prec = gram / sigma_ns_sq + np.eye(L) / v_pri
    factor = linalg.cho_factor(prec, lower=True)
    V = linalg.cho_solve(factor, np.eye(L, dtype=complex))
    V = 0.5 * (V + V.conj().T)
    x_post = V @ (x_pri / v_pri + phi_h_y / sigma_ns_sq)
    return x_post, V


def extrinsic_a(x_post, V_post, x_pri, v_pri, cap=EXT_CAP):
    """Per-element extrinsic mean/variance leaving Module A (prior contribution removed)."""
    v_post = np.real(np.diagonal(V_post)) if np.ndim(V_post) == 2 else np.asarray(V_post, float)
    return _extrinsic(x_post, v_post, x_pri, v_pri, cap)


def extrinsic_b(x_post, v_post, x_pri, v_pri, cap=EXT_CAP):
    """Extrinsic message from Module B back to A; scalar variance per subband."""
    return _extrinsic(x_post, v_post, x_pri, v_pri, cap)


def _extrinsic(x_post, v_post, x_pri, v_pri, cap):
    v_post = np.asarray(v_post, float)
    gain = 1.0 / v_post - 1.0 / v_pri
    with np.errstate(divide="ignore"):
        v_ext = np.where(gain > 0, 1.0 / np.where(gain > 0, gain, 1.0), cap * v_pri)
    x_ext = v_ext * (np.asarray(x_post) / v_post - np.asarray(x_pri) / v_pri)
    return x_ext, v_ext


# --- Module B ----------------------------------------------------------------

def log_pdf_ratio(x_pri, v_pri, sigma_sq):
    """ln[CN(0; x, v) / CN(0; x, v + s)] evaluated without forming either density."""
    a2 = np.abs(x_pri) ** 2
    return np.log1p(sigma_sq / v_pri) - a2 * sigma_sq / (v_pri * (v_pri + sigma_sq))


def support_messages(x_pri, v_pri, prior: BGPrior) -> SupportMessages:
    """Sum-product pass over the common-support factor graph.

    ``x_pri`` is (M, L), ``v_pri`` is (M,).  Messages are combined as logits so
    that products over subbands never underflow.
    """
    x_pri = np.atleast_2d(x_pri)
    v = np.asarray(v_pri, float).reshape(-1, 1)
    s2 = prior.sigma_x_sq
    lpi = -log_pdf_ratio(x_pri, v, s2)
    pooled = logit(prior.p_s) + lpi.sum(axis=0)
    pi = expit(lpi)
    pi_hat = expit(pooled[None, :] - lpi)
    rho = expit(pooled)

    mu = s2 * x_pri / (v + s2)
    va = v * s2 / (v + s2)
    x_post = rho * mu
    var = rho * va + rho * (1.0 - rho) * np.abs(mu) ** 2
    v_post = np.maximum(var.mean(axis=1), VAR_FLOOR * v[:, 0])
    return SupportMessages(pi, pi_hat, x_post, v_post, rho)


# --- E-step ------------------------------------------------------------------

def e_step(y, phis, prior: BGPrior, noise_var: float, init=None, tol=1e-6, max_iters=50,
           grams=None, cap=EXT_CAP, damping=1.0) -> EStepResult:
    """Turbo iterations between Module A and Module B for fixed (delta, delta_tau).

    ``init`` optionally supplies ``(x_A_pri, v_A_pri)``; by default the prior
    mean is zero and the prior variance is the mean active-gain variance.
    """
    if max_iters < 1:
        raise ValueError("e_step needs at least one turbo iteration")
    M, L = prior.sigma_x_sq.shape
    grams = [p.conj().T @ p for p in phis] if grams is None else grams
    phys = [p.conj().T @ ym for p, ym in zip(phis, y)]
    if init is None:
        x_a_pri = np.zeros((M, L), complex)
        v_a_pri = prior.sigma_x_sq.mean(axis=1).copy()
    else:
        x_a_pri, v_a_pri = np.array(init[0], complex), np.array(init[1], float)

    x_prev = None
    converged = False
    n_capped = 0
    it = 0
    for it in range(1, max_iters + 1):
        x_a_post = np.empty((M, L), complex)
        V_a_post = np.empty((M, L, L), complex)
        x_a_ext = np.empty((M, L), complex)
        v_a_ext = np.empty((M, L))
        for m in range(M):
            x_a_post[m], V_a_post[m] = lmmse_update(phis[m], y[m], x_a_pri[m], v_a_pri[m], noise_var,
                                                    gram=grams[m], phi_h_y=phys[m])
            x_a_ext[m], v_a_ext[m] = extrinsic_a(x_a_post[m], V_a_post[m], x_a_pri[m], v_a_pri[m], cap)
            n_capped += int(np.sum(v_a_ext[m] >= cap * v_a_pri[m]))
        x_b_pri, v_b_pri = x_a_ext, v_a_ext.mean(axis=1)
        msg = support_messages(x_b_pri, v_b_pri, prior)
        x_b_ext, v_b_ext = extrinsic_b(msg.x_post, msg.v_post[:, None], x_b_pri, v_b_pri[:, None], cap)
        v_b_ext = v_b_ext[:, 0]
        n_capped += int(np.sum(v_b_ext >= cap * v_b_pri))

        a_state = ModuleAState(x_a_pri, v_a_pri, x_a_post, V_a_post, x_a_ext, v_a_ext)
        b_state = ModuleBState(x_b_pri, v_b_pri, msg.x_post, msg.v_post, msg.pi, msg.pi_hat,
                               msg.support_prob, x_b_ext, v_b_ext)
        if damping < 1.0 and it > 1:
            x_b_ext = damping * x_b_ext + (1.0 - damping) * x_a_pri
            v_b_ext = damping * v_b_ext + (1.0 - damping) * v_a_pri
        x_a_pri, v_a_pri = x_b_ext, v_b_ext
        if x_prev is not None:
            scale = max(np.linalg.norm(msg.x_post), 1e-300)
            if np.linalg.norm(msg.x_post - x_prev) <= tol * scale:
                converged = True
                break
        x_prev = msg.x_post
    return EStepResult(a_state, b_state, it, converged, n_capped)


# --- surrogate and gradients -------------------------------------------------

def _deriv_weights(m, config):
    """-j 2 pi n fs: the elementwise derivative factor of exp(-j 2 pi n fs t)."""
    return -1j * TWO_PI * config.indices(m) * config.fs_hz[m]


def surrogate(y, config: MultibandConfig, grid: DelayGrid, delta, mu, Sigma, noise_var, sigma_p) -> float:
    """EM surrogate in (delta, delta_tau), up to terms that do not depend on them.

    u = -(1/s2) sum_m [||y_m - S_m A_m mu_m||^2 + tr(A_m Sigma_m A_m^H)] - sum_m delta_m^2 / (2 sigma_p^2)
    """
    u = 0.0
    for m in range(config.M):
        A = basis_matrix(m, grid, config)
        s = timing_offset_diag(m, delta[m], config)
        r = y[m] - s * (A @ mu[m])
        tr = np.real(np.sum((A @ Sigma[m]) * A.conj()))
        u -= (np.real(np.vdot(r, r)) + tr) / noise_var
    if sigma_p > 0:
        u -= np.sum(np.asarray(delta) ** 2) / (2.0 * sigma_p ** 2)
    return float(u)


def gradient_delta(m, mu_m, Sigma_m, A_m, y_m, delta_m, config, noise_var, sigma_p) -> float:
    """d u / d delta_m."""
    s = timing_offset_diag(m, delta_m, config)
    dw = _deriv_weights(m, config)
    b = s * (A_m @ mu_m)
    bp = dw * b
    # S^H S' is diagonal with entries dw
    tr = np.sum(dw * np.sum((A_m @ Sigma_m) * A_m.conj(), axis=1))
    val = -2.0 / noise_var * np.real(np.vdot(bp, b) - np.vdot(bp, y_m) + tr)
    if sigma_p > 0:
        val -= delta_m / sigma_p ** 2
    return float(val)


def gradient_dtau_all(y, config, grid, delta, mu, Sigma, noise_var) -> np.ndarray:
    """d u / d delta_tau_l for every grid point l."""
    g = np.zeros(grid.L)
    for m in range(config.M):
        A = basis_matrix(m, grid, config)
        Ap = _deriv_weights(m, config)[:, None] * A
        s = timing_offset_diag(m, delta[m], config)
        mu_m, Sig = mu[m], Sigma[m]
        sh_y = s.conj() * y[m]
        a_mu = A @ mu_m
        self_prod = np.sum(Ap.conj() * A, axis=0)           # a'_l^H S^H S a_l
        t1 = self_prod * (np.abs(mu_m) ** 2 + np.real(np.diagonal(Sig)))
        # a'_l^H S^H y_{m,-l}, with S^H y_{m,-l} = S^H y - A mu + a_l mu_l
        ap_y = Ap.conj().T @ sh_y - Ap.conj().T @ a_mu + self_prod * mu_m
        # a'_l^H sum_{j != l} Sigma_{jl} a_j
        ap_sig = np.sum(Ap.conj() * (A @ Sig), axis=0) - self_prod * np.diagonal(Sig)
        t2 = mu_m.conj() * ap_y - ap_sig
        g += -2.0 / noise_var * np.real(t1 - t2)
    return g


def gradient_dtau(l, y, config, grid, delta, mu, Sigma, noise_var) -> float:
    return float(gradient_dtau_all(y, config, grid, delta, mu, Sigma, noise_var)[l])


def gradient_delta_all(y, config, grid, delta, mu, Sigma, noise_var, sigma_p) -> np.ndarray:
    return np.array([
        gradient_delta(m, mu[m], Sigma[m], basis_matrix(m, grid, config), y[m], delta[m], config, noise_var, sigma_p)
        for m in range(config.M)
    ])


# --- M-step ------------------------------------------------------------------

@dataclass(frozen=True)
class ArmijoOptions:
    shrink: float = 0.5
    slope: float = 1e-4
    max_backtracks: int = 30


class MStepResult(NamedTuple):
    delta: np.ndarray
    delta_tau: np.ndarray
    u_start: float
    u_mid: float
    u_end: float
    backtracks: tuple[int, int]


def _armijo(f, x0, f0, grad, direction, project, opts: ArmijoOptions):
    """Backtracking ascent along ``direction``; returns (x, f(x), n_backtracks)."""
    step = 1.0
    for k in range(opts.max_backtracks + 1):
        x = project(x0 + step * direction)
        fx = f(x)
        if np.isfinite(fx) and fx >= f0 + opts.slope * float(np.dot(grad, x - x0)):
            return x, fx, k
        step *= opts.shrink
    return x0, f0, opts.max_backtracks + 1


def m_step(y, config, grid, delta, mu, Sigma, noise_var, sigma_p, opts: ArmijoOptions = ArmijoOptions()) -> MStepResult:
    """One ascent step on delta, then one on delta_tau (at the new delta).

    Steps are along the gradient scaled by a diagonal Gauss-Newton curvature,
    so a unit trial step is already on the right scale; Armijo then backtracks.
    """
    delta = np.asarray(delta, float)
    M = config.M
    u0 = surrogate(y, config, grid, delta, mu, Sigma, noise_var, sigma_p)

    # block 1: timing offsets; A is fixed so only S changes between trials
    new_delta, u1, bt1 = delta, u0, 0
    if sigma_p > 0:
        As = [basis_matrix(m, grid, config) for m in range(M)]
        b0 = [A @ mu[m] for m, A in enumerate(As)]
        tr = sum(np.real(np.sum((A @ Sigma[m]) * A.conj())) for m, A in enumerate(As))

        def u_delta(d):
            val = -tr / noise_var - np.sum(d ** 2) / (2 * sigma_p ** 2)
            for m in range(M):
                r = y[m] - timing_offset_diag(m, d[m], config) * b0[m]
                val -= np.real(np.vdot(r, r)) / noise_var
            return float(val)

        g = np.array([gradient_delta(m, mu[m], Sigma[m], As[m], y[m], delta[m], config, noise_var, sigma_p)
                      for m in range(M)])
        curv = np.array([2.0 / noise_var * np.sum(np.abs(_deriv_weights(m, config) * b0[m]) ** 2)
                         for m in range(M)]) + 1.0 / sigma_p ** 2
        half = 0.5 * grid.spacing
        new_delta, u1, bt1 = _armijo(u_delta, delta, u0, g, g / curv,
                                     lambda d: np.clip(d, -half, half), opts)

    # block 2: off-grid corrections
    g = gradient_dtau_all(y, config, grid, new_delta, mu, Sigma, noise_var)
    curv = np.zeros(grid.L)
    for m in range(M):
        w2 = np.sum(np.abs(_deriv_weights(m, config)) ** 2)
        curv += 2.0 / noise_var * (np.abs(mu[m]) ** 2 + np.real(np.diagonal(Sigma[m]))) * w2
    curv = np.maximum(curv, 1e-300)

    def u_tau(dt):
        return surrogate(y, config, grid.with_offsets(dt), new_delta, mu, Sigma, noise_var, sigma_p)

    new_dt, u2, bt2 = _armijo(u_tau, grid.delta_tau, u1, g, g / curv, grid.clamp, opts)
    return MStepResult(new_delta, new_dt, u0, u1, u2, (bt1, bt2))


# --- driver ------------------------------------------------------------------

@dataclass(frozen=True)
class TurboOptions:
    max_em: int = 100
    eps: float = 1e-5
    e_tol: float = 1e-6
    e_max_iters: int = 50
    expected_k: float = 4.0
    threshold: float = 0.5
    t_max: float = 250e-9
    oversample: float = 1.0
    noise_floor: float = 0.1
    damping: float = 0.7
    max_paths: int | None = None
    merge_fraction: float = 0.5
    min_energy_ratio: float = 0.005
    adapt_noise: bool = True
    armijo: ArmijoOptions = field(default_factory=ArmijoOptions)


@dataclass
class CoarseEstimate:
    delays: np.ndarray
    delta: np.ndarray
    support_prob: np.ndarray
    grid: DelayGrid
    support: np.ndarray
    x_post: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    iters: int
    converged: bool
    e_iters: list = field(default_factory=list)
    surrogate_trace: list = field(default_factory=list)
    n_capped: int = 0

    @property
    def los_delay(self) -> float:
        return float(self.delays[0])

    @property
    def K(self) -> int:
        return int(self.delays.size)

    def to_json(self) -> str:
        return json.dumps({
            "delays_s": self.delays.tolist(),
            "delta_s": self.delta.tolist(),
            "support_prob": self.support_prob.tolist(),
            "iters": self.iters,
            "converged": bool(self.converged),
        }, indent=2)


def effective_noise_var(obs: Observation, floor: float) -> float:
    return max(obs.sigma_ns_sq, floor * obs.signal_power(), 1e-300)


def cluster_support(support_prob, x_post, delays, threshold=0.5, min_separation=0.0, max_paths=None,
                    min_energy_ratio=0.0):
    """Group detected grid points into paths.

    Above-threshold points are visited in order of energy; points whose
    refined delays lie within ``min_separation`` of an earlier pick join its
    cluster. A cluster's energy is that of its coherently summed gains, so
    drifted neighbours that cancel each other do not count as a path.
    Clusters below ``min_energy_ratio`` of the strongest are dropped. Falls
    back to the most probable point when nothing survives.

    Parameters
    ----------
    support_prob : (L,) array
    x_post : (M, L) complex array
        Posterior gain means per subband.
    delays : (L,) array
        Refined grid delays.

    Returns
    -------
    list of int arrays, strongest member first, ordered by that member's delay
    """
    x_post = np.atleast_2d(x_post)
    energy = np.sum(np.abs(x_post) ** 2, axis=0)
    above = np.flatnonzero(support_prob > threshold)
    if above.size == 0:
        return [np.array([int(np.argmax(support_prob))])]
    picks, members = [], []
    for i in above[np.argsort(energy[above])[::-1]]:
        near = [c for c, j in enumerate(picks) if abs(delays[i] - delays[j]) < min_separation]
        if near:
            members[near[0]].append(i)
        else:
            picks.append(i)
            members.append([i])
    coherent = np.array([np.sum(np.abs(x_post[:, idx].sum(axis=1)) ** 2) for idx in members])
    keep = np.flatnonzero(coherent >= min_energy_ratio * coherent.max())
    if max_paths is not None:
        keep = keep[:max_paths]
    clusters = [np.array(members[c]) for c in keep]
    return sorted(clusters, key=lambda c: delays[c[0]])


def detect_support(support_prob, x_post, delays, threshold=0.5, min_separation=0.0, max_paths=None,
                   min_energy_ratio=0.0) -> np.ndarray:
    """Representative (strongest) grid index of each cluster from :func:`cluster_support`."""
    clusters = cluster_support(support_prob, x_post, delays, threshold, min_separation, max_paths,
                               min_energy_ratio)
    return np.sort(np.array([c[0] for c in clusters]))


def cluster_delays(clusters, x_post, delays) -> np.ndarray:
    """Energy-weighted mean refined delay of each cluster."""
    energy = np.sum(np.abs(np.atleast_2d(x_post)) ** 2, axis=0)
    out = []
    for c in clusters:
        w = energy[c]
        out.append(float(np.dot(w, delays[c]) / w.sum()) if w.sum() > 0 else float(delays[c[0]]))
    return np.array(out)


def _residual_power(y, phis, x):
    n = sum(ym.size for ym in y)
    return float(sum(np.sum(np.abs(ym - p @ xm) ** 2) for ym, p, xm in zip(y, phis, x)) / n)


def run_turbo_bi(obs: Observation, grid: DelayGrid | None = None, prior: BGPrior | None = None,
                 opts: TurboOptions = TurboOptions()) -> CoarseEstimate:
    """Alternate E- and M-steps and read out the detected delays."""
    config = obs.config
    y = obs.y
    if grid is None:
        grid = DelayGrid.for_config(config, opts.t_max, opts.oversample)
    noise_var = effective_noise_var(obs, opts.noise_floor)
    sigma_p = obs.sigma_p
    if prior is None:
        prior = BGPrior.from_observation(y, noise_var, grid.L, opts.expected_k)
    M, L = config.M, grid.L
    delta = np.zeros(M)
    spacing = grid.spacing if np.isfinite(grid.spacing) else 1.0

    e_iters, trace, n_capped, noise_trace = [], [], 0, []
    nv = noise_var
    if opts.adapt_noise:
        nv = max(noise_var, obs.signal_power())
    converged = False
    it = 0
    for it in range(1, opts.max_em + 1):
        phis = [measurement_matrix(m, delta[m], grid, config) for m in range(M)]
        est = e_step(y, phis, prior, nv, tol=opts.e_tol, max_iters=opts.e_max_iters,
                     damping=opts.damping)
        e_iters.append(est.iters)
        n_capped += est.n_capped
        if opts.adapt_noise:
            nv = max(noise_var, _residual_power(y, phis, est.b.x_post))
        noise_trace.append(nv)
        res = m_step(y, config, grid, delta, est.a.x_post, est.a.V_post, nv, sigma_p, opts.armijo)
        trace.append((res.u_start, res.u_mid, res.u_end))
        d_delta = np.linalg.norm(res.delta - delta) / spacing
        d_tau = np.linalg.norm(res.delta_tau - grid.delta_tau) / spacing
        delta, grid = res.delta, grid.with_offsets(res.delta_tau)
        if d_delta <= opts.eps and d_tau <= opts.eps:
            converged = True
            break
    if opts.max_em < 1:
        it = 0

    if it == 0:
        rho = np.full(L, prior.p_s)
        x_post = np.zeros((M, L), complex)
        mu = np.zeros((M, L), complex)
        Sigma = np.broadcast_to(np.eye(L) * prior.sigma_x_sq.mean(), (M, L, L)).astype(complex)
    else:
        phis = [measurement_matrix(m, delta[m], grid, config) for m in range(M)]
        est = e_step(y, phis, prior, nv, tol=opts.e_tol, max_iters=opts.e_max_iters,
                     damping=opts.damping)
        rho, x_post, mu, Sigma = est.b.support_prob, est.b.x_post, est.a.x_post, est.a.V_post
    clusters = cluster_support(rho, x_post, grid.delays, opts.threshold,
                               opts.merge_fraction * grid.spacing, opts.max_paths, opts.min_energy_ratio)
    delays = cluster_delays(clusters, x_post, grid.delays)
    order = np.argsort(delays, kind="stable")
    support = np.array([clusters[i][0] for i in order], dtype=int)
    delays = delays[order]
    if not converged:
        log.debug("Turbo-BI stopped after %d EM iterations without meeting eps", it)
    return CoarseEstimate(delays, delta, rho, grid, support, x_post, mu, Sigma,
                          it, converged, e_iters, trace, n_capped)
