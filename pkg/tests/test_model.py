import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsge.model import (ChannelRealization, MultibandConfig, NoiseSpec, cfr, cfr_sample, channel_from_json,
                        channel_to_json, default_config, observation_from_csv, observation_to_csv, observe,
                        sample_channel, snr_to_noise_var)


def single_tone_config(f_hz, n=2):
    # band centred so that subcarrier 0 sits exactly at f_hz
    return MultibandConfig((f_hz,), (1e3,), (n,))


def test_cfr_sample_zero_delay():
    ch = ChannelRealization([1.0], [0.0], [0.0], [0.0])
    cfg = default_config()
    for m in range(cfg.M):
        for n in (-cfg.n[m] // 2, 0, cfg.n[m] // 2 - 1):
            assert cfr_sample(ch, m, n, cfg) == pytest.approx(1 + 0j)


def test_cfr_sample_integer_cycles():
    ch = ChannelRealization([1.0], [50e-9], [0.0], [0.0])
    val = cfr_sample(ch, 0, 0, single_tone_config(1.0e9))
    assert abs(val - 1.0) < 1e-9


def test_cfr_sample_two_paths_direct_sum():
    ch = ChannelRealization([1.0, 0.5j], [30e-9, 80e-9], [0.0], [0.0])
    f = 1.8e9
    want = np.exp(-2j * np.pi * f * 30e-9) + 0.5j * np.exp(-2j * np.pi * f * 80e-9)
    assert cfr_sample(ch, 0, 0, single_tone_config(f)) == pytest.approx(want, abs=1e-12)


def test_cfr_sample_rejects_bad_indices():
    ch = ChannelRealization([1.0], [0.0], [0.0], [0.0])
    cfg = single_tone_config(1e9, n=4)
    with pytest.raises(IndexError):
        cfr_sample(ch, 1, 0, cfg)
    with pytest.raises(IndexError):
        cfr_sample(ch, 0, 2, cfg)


def test_observe_noiseless_matches_cfr_sample():
    cfg = MultibandConfig((1.8e9, 2.0e9), (60e3, 60e3), (8, 6))
    ch = ChannelRealization([1.0, 0.3 - 0.2j], [25e-9, 70e-9], [0.0, 0.0], [0.0, 0.0])
    obs = observe(ch, cfg, NoiseSpec())
    for m in range(cfg.M):
        ref = [cfr_sample(ch, m, n, cfg) for n in cfg.indices(m)]
        np.testing.assert_allclose(obs.y[m], ref, atol=1e-12)
    assert obs.sigma_ns_sq == 0.0


def test_observe_phase_rotation():
    cfg = MultibandConfig((1.8e9, 2.0e9), (60e3, 60e3), (4, 4))
    ch = ChannelRealization([1.0], [0.0], [np.pi / 2, 0.0], [0.0, 0.0])
    obs = observe(ch, cfg, NoiseSpec())
    np.testing.assert_allclose(obs.y[0], 1j, atol=1e-12)
    np.testing.assert_allclose(obs.y[1], 1.0, atol=1e-12)


def test_default_plan_dimensions():
    cfg = default_config()
    assert cfg.M == 2
    assert cfg.n == (666, 666)
    assert all(n % 2 == 0 for n in cfg.n)
    ch = sample_channel(2, seed=0)
    obs = observe(ch, cfg, NoiseSpec(7.0, seed=1))
    assert [v.shape for v in obs.y] == [(666,), (666,)]


def test_config_validation():
    with pytest.raises(ValueError):
        MultibandConfig((1e9,), (60e3,), (5,))
    with pytest.raises(ValueError):
        MultibandConfig((1e9,), (0.0,), (4,))
    with pytest.raises(ValueError):
        MultibandConfig.from_bandwidth((1e9,), 60e3, 0.0)
    # 60 MHz bands 40 MHz apart overlap
    with pytest.raises(ValueError):
        MultibandConfig.from_bandwidth((1.8e9, 1.84e9), 60e3, 60e6)
    cfg = MultibandConfig.from_bandwidth((1.8e9, 1.84e9), 60e3, 60e6, allow_overlap=True)
    assert cfg.M == 2


def test_sample_channel_range_sorted_and_seeded():
    a = sample_channel(5, (20e-9, 200e-9), seed=42)
    b = sample_channel(5, (20e-9, 200e-9), seed=42)
    assert np.all(a.tau >= 20e-9) and np.all(a.tau <= 200e-9)
    assert np.all(np.diff(a.tau) > 0)
    np.testing.assert_array_equal(a.tau, b.tau)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    np.testing.assert_array_equal(a.phi, b.phi)


def test_sample_channel_zero_sigma_p():
    ch = sample_channel(3, seed=1, sigma_p=0.0)
    assert np.all(ch.delta == 0.0)
    ch = sample_channel(3, seed=1, sigma_p=2e-9)
    assert np.any(ch.delta != 0.0)


def test_sample_channel_sweeps_share_draws():
    # changing sigma_p only rescales the timing offsets
    a = sample_channel(2, seed=9, sigma_p=1e-9)
    b = sample_channel(2, seed=9, sigma_p=3e-9)
    np.testing.assert_array_equal(a.tau, b.tau)
    np.testing.assert_allclose(3 * a.delta, b.delta)


def test_channel_validation():
    with pytest.raises(ValueError):
        ChannelRealization([1.0, 1.0], [50e-9, 40e-9], [0.0], [0.0])
    with pytest.raises(ValueError):
        ChannelRealization([1.0], [-1e-9], [0.0], [0.0])
    with pytest.raises(ValueError):
        ChannelRealization([1.0], [1e-9], [0.0, 0.0], [0.0])


def test_snr_to_noise_var_unit_power():
    cfg = MultibandConfig((1e9,), (1e3,), (4,))
    ch = ChannelRealization([1.0], [0.0], [0.0], [0.0])
    assert snr_to_noise_var(0.0, ch, cfg) == pytest.approx(1.0)
    assert snr_to_noise_var(10.0, ch, cfg) == pytest.approx(0.1)
    assert snr_to_noise_var(np.inf, ch, cfg) == 0.0


def test_snr_matches_empirical_noise_power():
    cfg = default_config()
    ch = sample_channel(2, seed=3)
    var = snr_to_noise_var(7.0, ch, cfg)
    clean = np.concatenate(cfr(ch, cfg))
    draws = []
    for seed in range(751):  # ~1e6 noise samples
        obs = observe(ch, cfg, NoiseSpec(7.0, seed))
        draws.append(obs.stacked - clean)
    noise = np.concatenate(draws)
    assert noise.size >= 1_000_000
    emp_snr = np.mean(np.abs(clean) ** 2) / np.mean(np.abs(noise) ** 2)
    assert emp_snr == pytest.approx(10 ** 0.7, rel=0.01)
    assert np.mean(np.abs(noise) ** 2) == pytest.approx(var, rel=0.01)


def test_channel_json_roundtrip():
    cfg = default_config()
    ch = sample_channel(3, seed=5, sigma_p=1e-9)
    back, cfg2, meta = channel_from_json(channel_to_json(ch, cfg, snr_db=7.0))
    assert cfg2 == cfg
    assert meta["snr_db"] == 7.0
    np.testing.assert_array_equal(back.tau, ch.tau)
    np.testing.assert_array_equal(back.alpha, ch.alpha)
    np.testing.assert_array_equal(back.delta, ch.delta)


def test_observation_csv_roundtrip():
    cfg = MultibandConfig((1.8e9, 2.0e9), (60e3, 60e3), (8, 6))
    obs = observe(sample_channel(2, seed=2), cfg, NoiseSpec(5.0, 3))
    back = observation_from_csv(observation_to_csv(obs), cfg, obs.sigma_ns_sq)
    for a, b in zip(obs.y, back.y):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(tau=st.floats(0, 500e-9), phi=st.floats(0, 2 * np.pi), re=st.floats(-2, 2), im=st.floats(-2, 2))
def test_single_path_cfr_modulus(tau, phi, re, im):
    ch = ChannelRealization([complex(re, im)], [tau], [phi, 0.0], [0.0, 0.0])
    cfg = MultibandConfig((1.8e9, 2.0e9), (60e3, 60e3), (6, 4))
    for y in cfr(ch, cfg):
        np.testing.assert_allclose(np.abs(y), abs(complex(re, im)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 6))
def test_sample_channel_invariants(seed, k):
    ch = sample_channel(k, (20e-9, 200e-9), seed=seed)
    assert ch.K == k
    assert np.all(np.diff(ch.tau) > 0)
    assert np.all((ch.phi >= 0) & (ch.phi < 2 * np.pi))
