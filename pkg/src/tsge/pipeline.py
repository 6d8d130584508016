"""Two-stage estimation, baselines, Monte-Carlo harness and likelihood scans."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from . import turbo
from .grid import DelayGrid, steering_vector
from .model import (TWO_PI, ChannelRealization, MultibandConfig, NoiseSpec, Observation,
                    observe, sample_channel)
from .refined import (GDOptions, PSOOptions, RefinedEstimate, RefinedObjective, RefinedParams,
                      SearchSpace, run_gradient_descent, run_pso_ls, search_space_from_coarse)

log = logging.getLogger(__name__)

SCHEMES = ("tsge", "turbo_bi", "tsgd", "igd")
SWEEPS = ("snr_db", "band_spacing_hz", "bandwidth_hz", "sigma_p_s")
THREADS_ENV = "TSGE_THREADS"
E_MULTIPLIER = 3.0


# --- search half-widths from the offline coarse-error table --------------------

@lru_cache(maxsize=None)
def _packaged_table() -> tuple:
    try:
        text = resources.files("tsge").joinpath("data/e_table.json").read_text()
    except FileNotFoundError:
        return ()
    return tuple(json.loads(text)["entries"])


def load_e_table(path=None) -> list[dict]:
    if path is None:
        return [dict(e) for e in _packaged_table()]
    with open(path) as fh:
        return json.load(fh)["entries"]


def lookup_coarse_rmse(bandwidth_hz: float, snr_db: float, sigma_p: float, table=None) -> float:
    """Nearest calibrated Stage-1 RMSE (s), distance in MHz, dB and ns."""
    table = load_e_table() if table is None else table
    if not table:
        raise LookupError("no calibration entries available; run `tsge calibrate-e`")
    snr_max = max(e["snr_db"] for e in table)
    snr = min(snr_db, snr_max) if np.isfinite(snr_db) else snr_max

    def dist(e):
        return ((e["bandwidth_hz"] - bandwidth_hz) / 1e6) ** 2 + (e["snr_db"] - snr) ** 2 \
            + ((e["sigma_p_s"] - sigma_p) / 1e-9) ** 2

    return float(min(table, key=dist)["rmse_s"])


def estimated_snr_db(obs: Observation) -> float:
    if obs.sigma_ns_sq <= 0:
        return math.inf
    sig = max(obs.signal_power() - obs.sigma_ns_sq, 1e-30)
    return 10.0 * math.log10(sig / obs.sigma_ns_sq)


# --- two-stage estimator and baselines ----------------------------------------

@dataclass
class TSGEOptions:
    """Settings for both stages.

    ``e_tau`` (s) fixes the delay half-width of the Stage-2 box; when None it is
    ``E_MULTIPLIER`` times the calibrated Stage-1 RMSE. ``polish`` finishes
    Stage 2 with a local descent (``gd``) from the swarm's best point, kept
    inside the box.
    """

    turbo: turbo.TurboOptions = field(default_factory=turbo.TurboOptions)
    pso: PSOOptions = field(default_factory=PSOOptions)
    gd: GDOptions = field(default_factory=GDOptions)
    e_tau: float | None = None
    e_delta_mult: float = 3.0
    refine_noise_floor: float = 1e-12
    polish: bool = True


def delay_half_width(obs: Observation, opts: TSGEOptions) -> float:
    if opts.e_tau is not None:
        return float(opts.e_tau)
    rmse = lookup_coarse_rmse(max(obs.config.bandwidth_hz), estimated_snr_db(obs), obs.sigma_p)
    return E_MULTIPLIER * rmse


def _objective(obs, K, opts: TSGEOptions) -> RefinedObjective:
    return RefinedObjective.from_observation(obs, K, opts.refine_noise_floor)


def run_stage1(obs: Observation, opts: TSGEOptions = TSGEOptions()) -> turbo.CoarseEstimate:
    coarse = turbo.run_turbo_bi(obs, opts=opts.turbo)
    if coarse.K == 0:
        raise RuntimeError("Stage 1 detected no paths")
    return coarse


def refine_pso(obs: Observation, coarse: turbo.CoarseEstimate, opts: TSGEOptions = TSGEOptions(),
               seed=None) -> RefinedEstimate:
    space = search_space_from_coarse(coarse, delay_half_width(obs, opts), obs.sigma_p,
                                     opts.e_delta_mult * obs.sigma_p)
    obj = _objective(obs, coarse.K, opts)
    est = run_pso_ls(obj, space, opts.pso, seed=seed)
    if not opts.polish:
        return est
    # the swarm stalls short of the exact optimum on sharp (high-SNR) objectives;
    # phases are periodic, so only delays and offsets stay boxed
    n_phi = obs.config.M - 1
    lo, hi = space.lower.copy(), space.upper.copy()
    lo[lo.size - n_phi:], hi[hi.size - n_phi:] = -np.inf, np.inf
    fine = run_gradient_descent(obj, est.theta, opts.gd, SearchSpace(lo, hi))
    if fine.fitness > est.fitness:
        return est
    theta = replace(fine.theta, phi_prime=fine.theta.phi_prime % TWO_PI)
    return replace(fine, theta=theta, iters=est.iters + fine.iters, converged=est.converged,
                   trace=est.trace + fine.trace[1:], n_evals=fine.n_evals)


def run_tsge(obs: Observation, opts: TSGEOptions = TSGEOptions(), seed=None):
    """Stage 1 (Turbo-BI, coarse model) then Stage 2 (PSO-LS, refined model).

    Returns
    -------
    (CoarseEstimate, RefinedEstimate)
    """
    coarse = run_stage1(obs, opts)
    return coarse, refine_pso(obs, coarse, opts, seed)


def coarse_phase_offsets(coarse: turbo.CoarseEstimate, config: MultibandConfig) -> np.ndarray:
    """Residual phases implied by the Stage-1 per-band gains.

    A coarse gain is ``alpha_k exp(-j 2 pi fc_m tau_k + j phi_m)``, so its ratio
    to the first band is ``exp(-j 2 pi fc'_m tau_k + j phi'_m)``; detected paths
    are pooled with their gains as weights.
    """
    g = coarse.x_post[:, coarse.support]
    out = np.empty(config.M - 1)
    for m in range(1, config.M):
        fcp = config.fc_hz[m] - config.fc_hz[0]
        z = np.sum(np.conj(g[0]) * g[m] * np.exp(1j * TWO_PI * fcp * coarse.delays))
        out[m - 1] = np.angle(z) % TWO_PI
    return out


def run_tsgd(obs: Observation, coarse: turbo.CoarseEstimate, opts: TSGEOptions = TSGEOptions()) -> RefinedEstimate:
    """Gradient descent on the refined model started from the Stage-1 estimate."""
    obj = _objective(obs, coarse.K, opts)
    delta = coarse.delta if obj.include_delta else np.zeros(obj.M)
    theta = RefinedParams(coarse.delays, delta, coarse_phase_offsets(coarse, obs.config))
    return run_gradient_descent(obj, theta, opts.gd)


def run_igd(obs: Observation, channel: ChannelRealization, opts: TSGEOptions = TSGEOptions()) -> RefinedEstimate:
    """Gradient descent on the refined model started from the true parameters."""
    obj = _objective(obs, channel.K, opts)
    theta = RefinedParams(channel.tau, channel.delta if obj.include_delta else np.zeros(obj.M),
                          channel.phi_prime())
    return run_gradient_descent(obj, theta, opts.gd)


# --- Monte-Carlo harness -------------------------------------------------------

@dataclass
class ExperimentPlan:
    """A sweep of one parameter over seeded trials.

    Parameters not being swept take their values from the base fields.
    ``band_spacing_hz`` is the carrier-to-carrier distance of two subbands and
    may produce overlapping bands.
    """

    sweep: str = "snr_db"
    values: list = field(default_factory=lambda: [7.0])
    trials: int = 10
    schemes: list = field(default_factory=lambda: ["tsge", "turbo_bi"])
    seed: int = 0
    snr_db: float = 7.0
    bandwidth_hz: float = 40e6
    fc_hz: list = field(default_factory=lambda: [1.80e9, 2.02e9])
    fs_hz: float = 60e3
    sigma_p_s: float = 0.0
    n_paths: int = 2
    delay_range_s: list = field(default_factory=lambda: [20e-9, 200e-9])
    on_grid: bool = False
    pso_particles: int = 100
    pso_iters: int = 500
    e_tau_s: float | None = None

    def __post_init__(self):
        if self.sweep not in SWEEPS:
            raise ValueError(f"unknown sweep variable {self.sweep!r}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not self.schemes:
            raise ValueError("scheme list is empty")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown schemes {bad}")
        if not self.values:
            raise ValueError("sweep value list is empty")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        d = json.loads(text)
        d["schemes"] = [s.replace("-", "_") for s in d.get("schemes", ["tsge"])]
        return cls(**d)

    def cell(self, value) -> dict:
        p = {k: getattr(self, k) for k in ("snr_db", "bandwidth_hz", "sigma_p_s")}
        p["fc_hz"] = list(self.fc_hz)
        p["overlap"] = False
        if self.sweep == "band_spacing_hz":
            p["fc_hz"] = [self.fc_hz[0], self.fc_hz[0] + float(value)]
            p["overlap"] = True
        else:
            p[self.sweep] = float(value)
        return p

    def config(self, value) -> MultibandConfig:
        p = self.cell(value)
        return MultibandConfig.from_bandwidth(p["fc_hz"], self.fs_hz, p["bandwidth_hz"], allow_overlap=p["overlap"])

    def options(self) -> TSGEOptions:
        return TSGEOptions(pso=PSOOptions(n_particles=self.pso_particles, max_iters=self.pso_iters),
                           e_tau=self.e_tau_s)


@dataclass(frozen=True)
class TrialResult:
    scheme: str
    sweep_value: float
    trial: int
    los_estimate: float
    error_s: float
    time_s: float
    truth_s: float


def trial_seeds(master: int, trial: int) -> dict:
    """Independent sub-seeds of one trial; shared by every sweep value."""
    ss = np.random.SeedSequence([int(master), int(trial)])
    ch, noise, swarm = ss.spawn(3)
    return {"channel": ch, "noise": noise, "swarm": swarm}


def _timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def simulate_trial(plan: ExperimentPlan, value, trial: int):
    """Channel, observation and sub-seeds of one (sweep value, trial) cell."""
    seeds = trial_seeds(plan.seed, trial)
    p = plan.cell(value)
    config = plan.config(value)
    support = None
    if plan.on_grid:
        support = DelayGrid.for_config(config, plan.options().turbo.t_max).d_bar
    channel = sample_channel(plan.n_paths, plan.delay_range_s, seeds["channel"], config.M,
                             p["sigma_p_s"], support)
    obs = observe(channel, config, NoiseSpec(p["snr_db"], seeds["noise"]))
    return channel, obs, seeds


def run_trial(plan: ExperimentPlan, value, trial: int) -> list[TrialResult]:
    """Run every requested scheme on one seeded trial; failures give NaN errors."""
    channel, obs, seeds = simulate_trial(plan, value, trial)
    opts = plan.options()
    truth = channel.los_delay
    rows = []

    def record(scheme, est, dt):
        e = abs(est - truth) if np.isfinite(est) else math.nan
        rows.append(TrialResult(scheme, float(value), trial, est, e, dt, truth))

    coarse, t1 = None, 0.0
    if {"tsge", "turbo_bi", "tsgd"} & set(plan.schemes):
        try:
            coarse, t1 = _timed(run_stage1, obs, opts)
        except Exception as exc:  # noqa: BLE001 - a failed trial must not stop the sweep
            log.warning("trial %d stage 1 failed: %s", trial, exc)
    for scheme in plan.schemes:
        try:
            if scheme == "igd":
                est, dt = _timed(run_igd, obs, channel, opts)
                record(scheme, est.los_delay, dt)
                continue
            if coarse is None:
                record(scheme, math.nan, t1)
            elif scheme == "turbo_bi":
                record(scheme, coarse.los_delay, t1)
            elif scheme == "tsge":
                est, dt = _timed(refine_pso, obs, coarse, opts, seeds["swarm"])
                record(scheme, est.los_delay, t1 + dt)
            elif scheme == "tsgd":
                est, dt = _timed(run_tsgd, obs, coarse, opts)
                record(scheme, est.los_delay, t1 + dt)
        except Exception as exc:  # noqa: BLE001
            log.warning("trial %d scheme %s failed: %s", trial, scheme, exc)
            record(scheme, math.nan, 0.0)
    return rows


def _task(args):
    plan, value, trial = args
    return run_trial(plan, value, trial)


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(threads))


def monte_carlo(plan: ExperimentPlan, threads: int | None = None) -> list[TrialResult]:
    """All (sweep value, trial) cells; output order is independent of scheduling."""
    tasks = [(plan, v, t) for v in plan.values for t in range(plan.trials)]
    n = thread_count(threads)
    if n == 1:
        chunks = [_task(a) for a in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            chunks = list(ex.map(_task, tasks))
    rows = [r for c in chunks for r in c]
    order = {s: i for i, s in enumerate(SCHEMES)}
    rows.sort(key=lambda r: (order[r.scheme], r.sweep_value, r.trial))
    return rows


def results_csv(rows) -> str:
    """Deterministic columns ``scheme,sweep_value,trial,error_s``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "sweep_value", "trial", "error_s"])
    for r in rows:
        w.writerow([r.scheme, repr(r.sweep_value), r.trial, repr(r.error_s)])
    return buf.getvalue()


def timings_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "sweep_value", "trial", "time_s"])
    for r in rows:
        w.writerow([r.scheme, repr(r.sweep_value), r.trial, repr(r.time_s)])
    return buf.getvalue()


def rmse(errors) -> float:
    e = np.asarray(errors, float)
    if e.size == 0:
        raise ValueError("empty error list")
    return float(np.sqrt(np.mean(e ** 2)))


def ecdf(errors):
    """Sorted errors and the fraction of samples at or below each."""
    e = np.sort(np.asarray(errors, float))
    if e.size == 0:
        raise ValueError("empty error list")
    return e, np.arange(1, e.size + 1) / e.size


def summarize(rows) -> dict:
    """``{scheme: {sweep_value: {rmse, median, p90, n, failures}}}`` with NaNs excluded."""
    cells: dict = {}
    for r in rows:
        cells.setdefault(r.scheme, {}).setdefault(r.sweep_value, []).append(r.error_s)
    out = {}
    for scheme, by_value in cells.items():
        out[scheme] = {}
        for v, errs in sorted(by_value.items()):
            e = np.asarray(errs, float)
            ok = e[np.isfinite(e)]
            stats = {"n": int(e.size), "failures": int(e.size - ok.size)}
            if ok.size:
                stats.update(rmse=rmse(ok), median=float(np.median(ok)), p90=float(np.quantile(ok, 0.9)))
            else:
                stats.update(rmse=math.nan, median=math.nan, p90=math.nan)
            out[scheme][repr(float(v))] = stats
    return out


def write_outputs(rows, outdir: str, prefix: str = "results") -> dict:
    os.makedirs(outdir, exist_ok=True)
    paths = {k: os.path.join(outdir, f"{prefix}{suf}") for k, suf in
             (("results", ".csv"), ("timings", "_timings.csv"), ("summary", "_summary.json"))}
    with open(paths["results"], "w") as fh:
        fh.write(results_csv(rows))
    with open(paths["timings"], "w") as fh:
        fh.write(timings_csv(rows))
    with open(paths["summary"], "w") as fh:
        json.dump(summarize(rows), fh, indent=2, sort_keys=True)
    return paths


# --- likelihood landscapes -------------------------------------------------------

MODELS = ("original", "coarse", "refined")


def _with_tau1(channel: ChannelRealization, t: float) -> np.ndarray:
    tau = np.array(channel.tau, float)
    tau[0] = t
    return tau


def scan_likelihood(model: str, obs: Observation, channel: ChannelRealization, values) -> np.ndarray:
    """Log-likelihood ``-||y - model||^2 / sigma^2`` along the LoS delay.

    Every other parameter sits at its true value. The original and coarse
    models use the true gains; the refined model uses least-squares gains.
    Noiseless observations are scaled by a unit variance.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    values = np.asarray(values, float)
    cfg = obs.config
    nv = obs.sigma_ns_sq if obs.sigma_ns_sq > 0 else 1.0
    out = np.empty(values.size)
    if model == "refined":
        obj = RefinedObjective(obs.y, cfg, nv, obs.sigma_p, channel.K)
        base = RefinedParams(channel.tau, channel.delta if obj.include_delta else np.zeros(cfg.M),
                             channel.phi_prime())
        X = np.repeat(obj.vector(base)[None], values.size, axis=0)
        X[:, 0] = values
        ll = -obj.batch(X) + obj.penalty(X)
        return ll
    # coarse gains alpha_{k,m} = alpha_k exp(-j 2 pi fc_m tau_k) exp(j phi_m) are fixed at truth
    coarse_gain = [channel.alpha * np.exp(-1j * TWO_PI * cfg.fc_hz[m] * channel.tau + 1j * channel.phi[m])
                   for m in range(cfg.M)]
    for i, t in enumerate(values):
        if model == "original":
            ys = _original(channel, _with_tau1(channel, t), cfg)
        else:
            tau = _with_tau1(channel, t)
            ys = []
            for m in range(cfg.M):
                n = cfg.indices(m)
                A = np.exp(-1j * TWO_PI * cfg.fs_hz[m] * np.outer(n, tau + channel.delta[m]))
                ys.append(A @ coarse_gain[m])
        out[i] = -sum(np.sum(np.abs(y - s) ** 2) for y, s in zip(obs.y, ys)) / nv
    return out


def _original(channel, tau, cfg):
    """Original-model CFR with the given delays; order and sign of ``tau`` are not checked."""
    ys = []
    for m in range(cfg.M):
        n = cfg.indices(m)
        f = cfg.fc_hz[m] + n * cfg.fs_hz[m]
        h = np.exp(-1j * TWO_PI * np.outer(f, tau)) @ channel.alpha
        ys.append(h * steering_vector(m, channel.delta[m], cfg) * np.exp(1j * channel.phi[m]))
    return ys


def _local_maxima(v):
    return np.flatnonzero((v[1:-1] > v[:-2]) & (v[1:-1] >= v[2:])) + 1


@dataclass
class LobeMetrics:
    """Shape of a 1-D log-likelihood curve.

    The mainlobe is the contiguous region around the global maximum where the
    curve stays above its median over the scan, which approximates the
    uncorrelated baseline when the scan spans several lobes.
    ``mainlobe_halfwidth`` is half its length; ``peak_spacing`` is the median
    gap between neighbouring local maxima.
    """

    peak: float
    mainlobe_halfwidth: float
    mainlobe: tuple
    peak_spacing: float
    n_peaks: int

    def contains(self, t: float) -> bool:
        return self.mainlobe[0] <= t <= self.mainlobe[1]


def lobe_metrics(x, ll) -> LobeMetrics:
    x = np.asarray(x, float)
    ll = np.asarray(ll, float)
    p = int(np.argmax(ll))
    above = ll > np.median(ll)
    lo = p
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = p
    while hi < x.size - 1 and above[hi + 1]:
        hi += 1
    # interpolate the crossings between samples
    left = x[lo] if lo == 0 else _cross(x[lo - 1], x[lo], ll[lo - 1], ll[lo], np.median(ll))
    right = x[hi] if hi == x.size - 1 else _cross(x[hi], x[hi + 1], ll[hi], ll[hi + 1], np.median(ll))
    peaks = _local_maxima(ll)
    spacing = float(np.median(np.diff(x[peaks]))) if peaks.size > 1 else math.nan
    return LobeMetrics(float(x[p]), 0.5 * float(right - left), (float(left), float(right)), spacing, int(peaks.size))


def _cross(x0, x1, y0, y1, level):
    return float(x0 + (level - y0) * (x1 - x0) / (y1 - y0)) if y1 != y0 else float(x0)


def scan_csv(values, ll) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau1_s", "loglik"])
    for v, l in zip(np.asarray(values).tolist(), np.asarray(ll).tolist()):
        w.writerow([repr(v), repr(l)])
    return buf.getvalue()


# --- calibration of the search half-widths ------------------------------------------

def calibrate_e(bandwidths, snrs, sigma_ps, trials: int = 30, seed: int = 0, threads=None,
                base: ExperimentPlan | None = None) -> list[dict]:
    """Stage-1 LoS RMSE per (bandwidth, SNR, sigma_p) cell from seeded trials.

    ``rmse_s`` is taken over trials whose error stays within one resolution
    cell ``1/B``; larger errors are detection failures that no search box
    around the coarse estimate can repair, and are reported as ``outlier_rate``.
    """
    base = ExperimentPlan(trials=trials, seed=seed, schemes=["turbo_bi"]) if base is None else base
    entries = []
    for bw in bandwidths:
        for sp in sigma_ps:
            plan = replace(base, sweep="snr_db", values=list(snrs), trials=trials, seed=seed,
                           schemes=["turbo_bi"], bandwidth_hz=float(bw), sigma_p_s=float(sp))
            errs: dict = {}
            for r in monte_carlo(plan, threads):
                errs.setdefault(r.sweep_value, []).append(r.error_s)
            for snr in snrs:
                e = np.asarray(errs[float(snr)], float)
                e = np.where(np.isfinite(e), e, np.inf)
                inlier = e[e <= 1.0 / bw]
                entries.append({"bandwidth_hz": float(bw), "snr_db": float(snr), "sigma_p_s": float(sp),
                                "rmse_s": rmse(inlier) if inlier.size else 1.0 / bw,
                                "median_s": float(np.median(e)),
                                "outlier_rate": float(1.0 - inlier.size / e.size), "trials": trials})
    return entries
