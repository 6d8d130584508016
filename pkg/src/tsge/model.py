"""Multiband OFDM frequency plan, synthetic multipath channels and CFR observations.

All delays are in seconds, frequencies in Hz and phases in radians.  Subcarrier
indices of subband ``m`` run over ``-N[m]/2, ..., N[m]/2 - 1``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class MultibandConfig:
    """Frequency plan: one carrier, subcarrier spacing and subcarrier count per subband."""

    fc_hz: tuple[float, ...]
    fs_hz: tuple[float, ...]
    n: tuple[int, ...]
    allow_overlap: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fc_hz", tuple(float(f) for f in self.fc_hz))
        object.__setattr__(self, "fs_hz", tuple(float(f) for f in self.fs_hz))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        if len(self.fc_hz) < 1:
            raise ValueError("need at least one subband")
        if not len(self.fc_hz) == len(self.fs_hz) == len(self.n):
            raise ValueError("fc_hz, fs_hz and n must have equal length")
        for fc, fs, nm in zip(self.fc_hz, self.fs_hz, self.n):
            if fc <= 0 or fs <= 0:
                raise ValueError("carrier frequency and subcarrier spacing must be positive")
            if nm < 2 or nm % 2:
                raise ValueError(f"subcarrier count must be even and >= 2, got {nm}")
        if not self.allow_overlap:
            spans = sorted(self.band_edges())
            for (lo0, hi0), (lo1, hi1) in zip(spans, spans[1:]):
                if lo1 < hi0:
                    raise ValueError("subband spectra overlap")

    @classmethod
    def from_bandwidth(cls, fc_hz: Sequence[float], fs_hz, bandwidth_hz, allow_overlap=False):
        """Build a plan from per-band bandwidths, using the largest even N with N*fs <= B."""
        m = len(fc_hz)
        fs = np.broadcast_to(np.asarray(fs_hz, float), (m,))
        bw = np.broadcast_to(np.asarray(bandwidth_hz, float), (m,))
        n = [2 * int(math.floor(b / (2.0 * s) + 1e-9)) for b, s in zip(bw, fs)]
        return cls(tuple(fc_hz), tuple(fs), tuple(n), allow_overlap=allow_overlap)

    @property
    def M(self) -> int:
        return len(self.fc_hz)

    @property
    def total(self) -> int:
        return sum(self.n)

    @property
    def bandwidth_hz(self) -> tuple[float, ...]:
        return tuple(nm * fs for nm, fs in zip(self.n, self.fs_hz))

    def indices(self, m: int) -> np.ndarray:
        """Subcarrier index set of subband ``m`` (0-based band index)."""
        half = self.n[m] // 2
        return np.arange(-half, half)

    def freqs(self, m: int) -> np.ndarray:
        return self.fc_hz[m] + self.indices(m) * self.fs_hz[m]

    def band_edges(self):
        return [(fc - nm * fs / 2, fc + nm * fs / 2) for fc, fs, nm in zip(self.fc_hz, self.fs_hz, self.n)]

    def slices(self) -> list[slice]:
        """Row slices of each subband inside the stacked N-vector."""
        out, start = [], 0
        for nm in self.n:
            out.append(slice(start, start + nm))
            start += nm
        return out


@dataclass(frozen=True)
class ChannelRealization:
    """K-path channel plus per-subband phase offsets ``phi`` and timing offsets ``delta``."""

    alpha: np.ndarray
    tau: np.ndarray
    phi: np.ndarray
    delta: np.ndarray
    sigma_p: float = 0.0

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=complex))
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        phi = np.mod(np.atleast_1d(np.asarray(self.phi, dtype=float)), TWO_PI)
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if alpha.shape != tau.shape or alpha.size < 1:
            raise ValueError("alpha and tau must be non-empty with equal length")
        if np.any(tau < 0) or np.any(np.diff(tau) <= 0):
            raise ValueError("delays must be non-negative and strictly increasing")
        if phi.shape != delta.shape:
            raise ValueError("phi and delta must have one entry per subband")
        for name, val in (("alpha", alpha), ("tau", tau), ("phi", phi), ("delta", delta)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def K(self) -> int:
        return self.tau.size

    @property
    def M(self) -> int:
        return self.phi.size

    @property
    def los_delay(self) -> float:
        return float(self.tau[0])

    def phi_prime(self) -> np.ndarray:
        """Residual phase offsets relative to subband 1, for subbands 2..M."""
        return np.mod(self.phi[1:] - self.phi[0], TWO_PI)


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = np.inf
    seed: int | np.random.SeedSequence | None = 0


@dataclass(frozen=True)
class Observation:
    """Noisy CFR samples, one array per subband."""

    y: tuple[np.ndarray, ...]
    sigma_ns_sq: float
    sigma_p: float
    config: MultibandConfig

    def __post_init__(self):
        ys = tuple(np.asarray(v, dtype=complex).copy() for v in self.y)
        if len(ys) != self.config.M or any(v.shape != (nm,) for v, nm in zip(ys, self.config.n)):
            raise ValueError("observation dimensions do not match the configuration")
        if self.sigma_ns_sq < 0 or self.sigma_p < 0:
            raise ValueError("variances must be non-negative")
        for v in ys:
            v.setflags(write=False)
        object.__setattr__(self, "y", ys)

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate(self.y)

    def signal_power(self) -> float:
        return float(np.mean(np.abs(self.stacked) ** 2))


def cfr_sample(channel: ChannelRealization, m: int, n: int, config: MultibandConfig) -> complex:
    """Noiseless, distortion-free CFR of subband ``m`` at subcarrier ``n``."""
    if not 0 <= m < config.M:
        raise IndexError(f"subband {m} out of range")
    half = config.n[m] // 2
    if not -half <= n < half:
        raise IndexError(f"subcarrier {n} out of range for subband {m}")
    f = config.fc_hz[m] + n * config.fs_hz[m]
    return complex(np.sum(channel.alpha * np.exp(-1j * TWO_PI * f * channel.tau)))


def cfr(channel: ChannelRealization, config: MultibandConfig, distorted: bool = True) -> tuple[np.ndarray, ...]:
    """Noiseless CFR of every subband, optionally with the phase/timing distortions applied."""
    _check_bands(channel, config)
    out = []
    for m in range(config.M):
        n = config.indices(m)
        f = config.fc_hz[m] + n * config.fs_hz[m]
        h = np.exp(-1j * TWO_PI * np.outer(f, channel.tau)) @ channel.alpha
        if distorted:
            h = h * np.exp(-1j * TWO_PI * n * config.fs_hz[m] * channel.delta[m]) * np.exp(1j * channel.phi[m])
        out.append(h)
    return tuple(out)


def snr_to_noise_var(snr_db: float, channel: ChannelRealization, config: MultibandConfig) -> float:
    """Noise variance giving ``snr_db`` relative to the mean noiseless sample power."""
    power = np.mean(np.abs(np.concatenate(cfr(channel, config))) ** 2)
    if np.isposinf(snr_db):
        return 0.0
    return float(power / 10.0 ** (snr_db / 10.0))


def observe(channel: ChannelRealization, config: MultibandConfig, noise: NoiseSpec) -> Observation:
    """Received training-symbol CFR (all training symbols equal to 1) plus complex AWGN."""
    clean = cfr(channel, config)
    var = snr_to_noise_var(noise.snr_db, channel, config)
    rng = np.random.default_rng(noise.seed)
    y = []
    for h in clean:
        w = rng.standard_normal(h.size) + 1j * rng.standard_normal(h.size)
        y.append(h + np.sqrt(var / 2.0) * w)
    return Observation(tuple(y), var, channel.sigma_p, config)


def sample_channel(
    k: int,
    delay_range=(20e-9, 200e-9),
    seed=None,
    n_bands: int = 2,
    sigma_p: float = 0.0,
    delay_support: np.ndarray | None = None,
) -> ChannelRealization:
    """Draw a K-path channel with Rayleigh magnitudes and uniform delays.

    ``delay_support``, when given, is a set of admissible delays (e.g. grid
    points); delays are then drawn from it without replacement.
    """
    if k < 1:
        raise ValueError("need at least one path")
    lo, hi = float(delay_range[0]), float(delay_range[1])
    if not hi > lo or lo < 0:
        raise ValueError("empty or negative delay range")
    rng = np.random.default_rng(seed)
    # draw order is fixed so sweeps over unrelated parameters reuse the same channel
    mag = rng.rayleigh(scale=np.sqrt(0.5), size=k)
    ph = rng.uniform(0.0, TWO_PI, size=k)
    if delay_support is None:
        tau = np.sort(rng.uniform(lo, hi, size=k))
    else:
        cand = np.asarray(delay_support, float)
        cand = cand[(cand >= lo) & (cand <= hi)]
        if cand.size < k:
            raise ValueError("not enough admissible delays in range")
        tau = np.sort(rng.choice(cand, size=k, replace=False))
    phi = rng.uniform(0.0, TWO_PI, size=n_bands)
    z = rng.standard_normal(n_bands)
    delta = sigma_p * z if sigma_p > 0 else np.zeros(n_bands)
    return ChannelRealization(mag * np.exp(1j * ph), tau, phi, delta, sigma_p=sigma_p)


def _check_bands(channel, config):
    if channel.M != config.M:
        raise ValueError(f"channel has {channel.M} subbands, config has {config.M}")


# --- serialization -----------------------------------------------------------

def config_to_dict(config: MultibandConfig) -> dict:
    d = {"subbands": [{"fc_hz": fc, "fs_hz": fs, "n": n} for fc, fs, n in zip(config.fc_hz, config.fs_hz, config.n)]}
    if config.allow_overlap:
        d["allow_overlap"] = True
    return d


def config_from_dict(d: dict) -> MultibandConfig:
    sb = d["subbands"]
    return MultibandConfig(
        tuple(b["fc_hz"] for b in sb),
        tuple(b["fs_hz"] for b in sb),
        tuple(b["n"] for b in sb),
        allow_overlap=bool(d.get("allow_overlap", False)),
    )


def channel_to_json(channel: ChannelRealization, config: MultibandConfig | None = None, **extra) -> str:
    d = config_to_dict(config) if config is not None else {}
    d.update(
        paths=[{"re": a.real, "im": a.imag, "tau_s": t} for a, t in zip(channel.alpha.tolist(), channel.tau.tolist())],
        phi=channel.phi.tolist(),
        delta=channel.delta.tolist(),
        sigma_p=channel.sigma_p,
    )
    d.update(extra)
    return json.dumps(d, indent=2)


def channel_from_json(text: str) -> tuple[ChannelRealization, MultibandConfig | None, dict]:
    """Parse a channel document; returns (channel, config or None, the raw dict)."""
    d = json.loads(text)
    paths = d["paths"]
    ch = ChannelRealization(
        np.array([p["re"] + 1j * p["im"] for p in paths]),
        np.array([p["tau_s"] for p in paths]),
        np.array(d["phi"]),
        np.array(d["delta"]),
        sigma_p=float(d.get("sigma_p", 0.0)),
    )
    cfg = config_from_dict(d) if "subbands" in d else None
    return ch, cfg, d


def observation_to_csv(obs: Observation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "n", "re", "im"])
    for m, ym in enumerate(obs.y):
        for n, v in zip(obs.config.indices(m).tolist(), ym.tolist()):
            w.writerow([m, n, repr(v.real), repr(v.imag)])
    return buf.getvalue()


def observation_from_csv(text: str, config: MultibandConfig, sigma_ns_sq: float, sigma_p: float = 0.0) -> Observation:
    y = [np.zeros(nm, dtype=complex) for nm in config.n]
    for row in csv.DictReader(io.StringIO(text)):
        m, n = int(row["m"]), int(row["n"])
        y[m][n + config.n[m] // 2] = float(row["re"]) + 1j * float(row["im"])
    return Observation(tuple(y), sigma_ns_sq, sigma_p, config)


def default_config(bandwidth_hz=40e6, fc_hz=(1.80e9, 2.02e9), fs_hz=60e3, allow_overlap=False) -> MultibandConfig:
    """Two-band default plan: 60 kHz spacing, 40 MHz per band at 1.80 / 2.02 GHz."""
    return MultibandConfig.from_bandwidth(fc_hz, fs_hz, bandwidth_hz, allow_overlap=allow_overlap)
