import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsge.grid import (DelayGrid, basis_matrix, measurement_matrix, steering_vector, timing_offset_diag,
                       timing_offset_matrix)
from tsge.model import ChannelRealization, MultibandConfig, cfr, default_config


def unit_config(n):
    # fs = 1 Hz, so delays in seconds map directly to cycles per subcarrier
    return MultibandConfig((10.0,), (1.0,), (n,))


def test_steering_vector_zero_delay():
    np.testing.assert_allclose(steering_vector(0, 0.0, default_config()), 1.0)


def test_steering_vector_quarter_second():
    got = steering_vector(0, 0.25, unit_config(4))
    np.testing.assert_allclose(got, [-1, 1j, 1, -1j], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(d=st.floats(0, 1e-6))
def test_steering_vector_norm(d):
    cfg = default_config()
    assert np.linalg.norm(steering_vector(1, d, cfg)) == pytest.approx(np.sqrt(cfg.n[1]))


def test_timing_offset_identity_and_example():
    cfg = default_config()
    np.testing.assert_allclose(timing_offset_matrix(0, 0.0, cfg), np.eye(cfg.n[0]))
    np.testing.assert_allclose(np.diag(timing_offset_matrix(0, 0.5, unit_config(2))), [-1, 1], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(delta=st.floats(-5e-9, 5e-9))
def test_timing_offset_unitary(delta):
    cfg = MultibandConfig((1e9,), (60e3,), (16,))
    S = timing_offset_matrix(0, delta, cfg)
    np.testing.assert_allclose(S @ S.conj().T, np.eye(16), atol=1e-12)


def test_grid_for_config_spacing():
    cfg = default_config()
    g = DelayGrid.for_config(cfg)
    assert g.spacing == pytest.approx(1.0 / max(cfg.bandwidth_hz))
    assert g.d_bar[0] == 0.0 and g.d_bar[-1] >= 250e-9
    with pytest.raises(ValueError):
        DelayGrid.for_config(cfg, t_max=1.0)


def test_grid_validation_and_clamp():
    with pytest.raises(ValueError):
        DelayGrid(np.array([0.0, 2.0, 1.0]))
    with pytest.raises(ValueError):
        DelayGrid(np.arange(3.0), np.zeros(2))
    g = DelayGrid(np.arange(4) * 1e-9)
    np.testing.assert_allclose(g.clamp([-1e-9, 0.2e-9, 3e-9, 0.0]), [-0.5e-9, 0.2e-9, 0.5e-9, 0.0])


def test_basis_matrix_columns():
    cfg = default_config()
    g = DelayGrid.for_config(cfg)
    A = basis_matrix(0, g, cfg)
    for l in (0, 3, g.L - 1):
        np.testing.assert_allclose(A[:, l], steering_vector(0, g.d_bar[l], cfg))
    off = np.zeros(g.L)
    off[4] = 3e-9
    B = basis_matrix(0, g.with_offsets(off), cfg)
    changed = np.flatnonzero(np.any(np.abs(A - B) > 0, axis=0))
    assert changed.tolist() == [4]


def test_basis_matrix_reproduces_coarse_signal():
    cfg = default_config()
    g = DelayGrid.for_config(cfg)
    idx = [2, 6]
    ch = ChannelRealization([1.0 + 0.5j, -0.3j], g.d_bar[idx], [0.4, 2.0], [0.0, 0.0])
    ys = cfr(ch, cfg)
    for m in range(cfg.M):
        x = np.zeros(g.L, complex)
        x[idx] = ch.alpha * np.exp(-2j * np.pi * cfg.fc_hz[m] * ch.tau + 1j * ch.phi[m])
        np.testing.assert_allclose(basis_matrix(m, g, cfg) @ x, ys[m], atol=1e-10)


def test_measurement_matrix_properties():
    cfg = default_config()
    g = DelayGrid.for_config(cfg).with_offsets(np.linspace(-5e-9, 5e-9, 11))
    np.testing.assert_allclose(measurement_matrix(1, 0.0, g, cfg), basis_matrix(1, g, cfg))
    Phi = measurement_matrix(1, 2e-9, g, cfg)
    np.testing.assert_allclose(np.diag(Phi.conj().T @ Phi).real, cfg.n[1])
    n = cfg.indices(1)
    l = 7
    want = np.exp(-2j * np.pi * n * cfg.fs_hz[1] * (g.d_bar[l] + g.delta_tau[l] + 2e-9))
    np.testing.assert_allclose(Phi[:, l], want, atol=1e-10)
    np.testing.assert_allclose(timing_offset_diag(1, 2e-9, cfg), steering_vector(1, 2e-9, cfg))


def test_on_grid_columns_orthogonal():
    cfg = default_config()
    g = DelayGrid.for_config(cfg)
    A = basis_matrix(0, g, cfg)
    G = A.conj().T @ A
    np.testing.assert_allclose(G, cfg.n[0] * np.eye(g.L), atol=1e-8)
