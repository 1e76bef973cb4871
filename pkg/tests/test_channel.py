import numpy as np
import pytest
from hypothesis import given, strategies as st

from risvi.channel import (
    N_SUBINTERVALS,
    SystemConfig,
    ccm_from_d,
    ccm_ground_truth,
    complex_normal,
    draw_clusters,
    gen_channels,
    sample_h_from_d,
    spectrum_from_ccm,
    ula_response,
    upa_response,
)
from risvi.errors import ConfigError, ContractViolation, InvalidDimensionError
from risvi.numerics import dft_matrix

TWO_PI = 2 * np.pi


def test_config_validation():
    with pytest.raises(ConfigError):
        SystemConfig(N=15)
    with pytest.raises(ConfigError):
        SystemConfig(M=0)
    with pytest.raises(ConfigError):
        SystemConfig(rho=-1.0)
    with pytest.raises(ConfigError):
        SystemConfig(angle_mode="mode3")
    assert SystemConfig(rho=100.0).snr_db == pytest.approx(20.0)


def test_ula_examples():
    np.testing.assert_allclose(ula_response(5, np.pi / 2), np.full(5, 1 / np.sqrt(5)), atol=1e-15)
    np.testing.assert_allclose(ula_response(1, 0.3), [1.0])
    np.testing.assert_allclose(ula_response(4, 0.0), 0.5 * np.array([1, -1, 1, -1]), atol=1e-15)


def test_upa_examples():
    a = upa_response(16, 0.0, 0.7)
    u_block = a.reshape(4, 4)  # kron(u, w): rows indexed by u
    np.testing.assert_allclose(u_block / u_block[0], np.ones((4, 4)), atol=1e-14)
    b = upa_response(16, 1.1, np.pi / 2)
    np.testing.assert_allclose(b.reshape(4, 4)[:, 1:], b.reshape(4, 4)[:, :1].repeat(3, 1), atol=1e-14)
    c = upa_response(4, np.pi / 2, np.pi / 2)
    np.testing.assert_allclose(c, 0.5 * np.kron([1, -1], [1, 1]), atol=1e-15)
    with pytest.raises(InvalidDimensionError):
        upa_response(8, 0.1, 0.2)


@given(st.floats(0, TWO_PI), st.floats(0, TWO_PI), st.sampled_from([1, 4, 16, 64]))
def test_steering_unit_norm(phi, vphi, N):
    assert abs(np.linalg.norm(upa_response(N, phi, vphi)) - 1) < 1e-12
    assert abs(np.linalg.norm(ula_response(N, phi)) - 1) < 1e-12


def test_gen_channels_structure(rng):
    cfg = SystemConfig(M=4, N=16, P=1, Q=2)
    real = gen_channels(cfg, rng)
    assert real.h.shape == (16,) and real.G.shape == (4, 16)
    s = np.linalg.svd(real.G, compute_uv=False)
    assert s[1] < 1e-10 * s[0]
    for v in real.angles.values():
        assert np.all((v >= 0) & (v < TWO_PI))


def test_single_path_norm_tracks_gain(rng):
    cfg = SystemConfig(N=16, Q=1)
    real = gen_channels(cfg, rng)
    beta = real.gains["beta"][0]
    assert abs(np.linalg.norm(real.h) - 4.0 * abs(beta)) < 1e-12


def test_G_normalization_mc():
    cfg = SystemConfig(M=4, N=16, P=3)
    rng = np.random.default_rng(7)
    energy = np.mean([np.sum(np.abs(gen_channels(cfg, rng).G) ** 2) for _ in range(10_000)])
    assert abs(energy / (4 * 16) - 1) < 0.05


def test_mode2_angles_inside_clusters(rng):
    cfg = SystemConfig(N=16, Q=3, angle_mode="mode2", cluster_count=4)
    clusters = draw_clusters(cfg, rng)
    width = TWO_PI / N_SUBINTERVALS
    for _ in range(200):
        real = gen_channels(cfg, rng, clusters)
        az = np.floor(real.angles["phi_q"] / width).astype(int)
        el = np.floor(real.angles["vphi_q"] / width).astype(int)
        pairs = set(map(tuple, clusters.tolist()))
        assert all((a, e) in pairs for a, e in zip(az, el))
    with pytest.raises(ContractViolation):
        gen_channels(cfg, rng)


def test_ccm_ground_truth(rng):
    cfg = SystemConfig(N=16, Q=1)
    real = gen_channels(cfg, rng)
    R = ccm_ground_truth(real, cfg)
    assert np.linalg.matrix_rank(R, tol=1e-8 * np.abs(R).max()) == 1
    assert abs(np.trace(R).real - 16) < 1e-10


def test_ccm_ground_truth_mc(rng):
    cfg = SystemConfig(N=16, Q=2)
    real = gen_channels(cfg, rng)
    steer = np.stack([upa_response(16, a, b) for a, b in zip(real.angles["phi_q"], real.angles["vphi_q"])], 1)
    beta = complex_normal(rng, (10_000, 2))
    hs = np.sqrt(16 / 2) * beta @ steer.T
    S = hs.T @ hs.conj() / len(hs)
    R = ccm_ground_truth(real, cfg)
    assert np.linalg.norm(S - R) / np.linalg.norm(R) < 0.05


def test_ccm_all_dft_directions_is_white():
    # steering vectors on every DFT direction of an 8-element ULA-like layout
    N = 16
    F = dft_matrix(N)
    R = sum(np.outer(F[:, k], F[:, k].conj()) for k in range(N)) / N
    np.testing.assert_allclose(R, np.eye(N), atol=1e-12)


def test_ccm_from_d_examples():
    np.testing.assert_allclose(ccm_from_d(np.full(8, 1 / 8)), np.eye(8), atol=1e-14)
    with pytest.raises(ContractViolation):
        ccm_from_d(np.array([1.0, -0.1]))


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4))
def test_spectrum_roundtrip(d):
    d = np.array(d)
    R = ccm_from_d(d)
    assert np.allclose(R, R.conj().T, atol=1e-10)
    np.testing.assert_allclose(spectrum_from_ccm(R), d, atol=1e-10)


def test_sample_h_from_d(rng):
    assert np.all(sample_h_from_d(np.zeros(4), rng) == 0)
    hs = sample_h_from_d(np.full(8, 1 / 8), rng, size=10_000)
    S = hs.T @ hs.conj() / len(hs)
    assert np.linalg.norm(S - np.eye(8)) / np.sqrt(8) < 0.05
    d = np.zeros(8)
    d[3] = 2.0
    col = dft_matrix(8).conj().T[:, 3]
    for h in sample_h_from_d(d, rng, size=5):
        assert np.linalg.matrix_rank(np.stack([h, col]), tol=1e-10) == 1


def test_dft_grid_energy_concentration():
    N = 16
    # a UPA steering vector whose direction cosines sit on the DFT grid
    side = 4
    phi, vphi = np.pi / 2, np.arccos(2 * 1 / side)  # sin(phi) sin(vphi), cos(vphi) on the grid
    a = upa_response(N, phi, vphi)
    grid_u = np.sin(phi) * np.sin(vphi) * side / 2
    if abs(grid_u - round(grid_u)) > 1e-9:
        pytest.skip("direction not on grid")
    energy = np.abs(dft_matrix(N) @ a) ** 2
    assert energy.max() / energy.sum() > 0.99 or np.sort(energy)[-2:].sum() / energy.sum() > 0.99
