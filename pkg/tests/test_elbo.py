import numpy as np
import pytest

from risvi.channel import SystemConfig
from risvi.elbo import (
    AuxParamsJCCE,
    AuxParamsJCE,
    PriorParams,
    jcce_loglik,
    l1_icsi,
    l1_scsi,
    l2_icsi,
    l3_icsi_closed,
    l3_scsi,
    l3_scsi_samples,
    spatial_to_vir_G,
    total_loss,
    vir_to_spatial_G,
)
from risvi.encoder import Encoder
from risvi.errors import NumericalFailure
from risvi.inference import HeadConstants, Objective, build_encoders, features, forward_all, make_scenario
from risvi.numerics import dft_matrix
from risvi.signals import PilotPlan, rx_cov_model, rx_train_jcce
from risvi.vardist import gamma_quantile, implicit_dxdk, standard_cl

from conftest import crandn

EULER = 0.5772156649015329


def _plan(rng, N, L):
    return PilotPlan(Phi=np.exp(1j * rng.uniform(0, 2 * np.pi, (N, L))), x=np.exp(1j * rng.uniform(0, 2 * np.pi, L)))


def _jce_params(rng, M, N, scale=1.0):
    return AuxParamsJCE(
        m=scale * crandn(rng, N),
        b=rng.uniform(0.2, 1.0, N),
        Mm=scale * crandn(rng, M, N),
        B=rng.uniform(0.2, 1.0, (M, N)),
    )


# -- KL terms -------------------------------------------------------------------


def test_l1_matched_prior_is_zero():
    rng = np.random.default_rng(0)
    N, D, alpha = 4, 1_000_000, 1.5
    p = AuxParamsJCE(np.zeros((1, N), complex), np.full((1, N), alpha), None, None)
    value, _ = l1_icsi(p, PriorParams(alpha_h=alpha), D, rng)
    # |zeta| is Gamma(2, 1): variance 2 per element
    assert abs(value[0]) < 3 * np.sqrt(2 * N / D)


def test_l1_large_D_limit():
    rng = np.random.default_rng(1)
    b = np.array([[0.3, 1.0, 2.0]])
    p = AuxParamsJCE(np.zeros((1, 3), complex), b, None, None)
    value, _ = l1_icsi(p, PriorParams(alpha_h=1.0), 400_000, rng)
    limit = np.sum(2 * b - np.log(2 * np.pi * b**2)) + 3 * np.log(2 * np.pi) - 6
    assert value[0] == pytest.approx(limit, abs=0.02)


def test_l1_nonnegative_up_to_mc_noise():
    rng = np.random.default_rng(2)
    zeta = standard_cl(rng, (100_000, 1, 3))
    for _ in range(100):
        p = AuxParamsJCE(crandn(rng, 1, 3), rng.uniform(0.05, 3, (1, 3)), None, None)
        assert l1_icsi(p, PriorParams(), 0, zeta=zeta)[0][0] >= -1e-2


def test_l2_matched_prior_and_collapse():
    rng = np.random.default_rng(3)
    M, N, D = 2, 2, 1_000_000
    p = AuxParamsJCE(None, None, np.zeros((1, M, N), complex), np.full((1, M, N), 0.7))
    value, _ = l2_icsi(p, PriorParams(alpha_G=0.7), D, rng)
    assert abs(value[0]) < 3 * np.sqrt(2 * M * N / D)
    zeta = standard_cl(rng, (50, 1, 1, 1))
    m, b = crandn(rng, 1, 1, 1), np.full((1, 1, 1), 0.4)
    v2, g2 = l2_icsi(AuxParamsJCE(None, None, m, b), PriorParams(alpha_G=1.3), 50, zeta=zeta)
    v1, g1 = l1_icsi(AuxParamsJCE(m[:, 0], b[:, 0], None, None), PriorParams(alpha_h=1.3), 50, zeta=zeta[:, :, 0])
    assert v1[0] == pytest.approx(v2[0], rel=1e-14)
    assert g1["m"][0, 0] == pytest.approx(g2["Mm"][0, 0, 0], rel=1e-14)


def test_l2_gradient_common_random_numbers():
    rng = np.random.default_rng(4)
    zeta = standard_cl(rng, (200, 1, 2, 3))
    Mm, B = crandn(rng, 1, 2, 3), rng.uniform(0.3, 1, (1, 2, 3))
    prior = PriorParams(alpha_G=0.8)

    def f(Mm, B):
        return l2_icsi(AuxParamsJCE(None, None, Mm, B), prior, 0, zeta=zeta)[0][0]

    _, g = l2_icsi(AuxParamsJCE(None, None, Mm, B), prior, 0, zeta=zeta)
    h = 1e-6
    for idx in np.ndindex(Mm.shape):
        E = np.zeros_like(Mm)
        E[idx] = h
        d_re = (f(Mm + E, B) - f(Mm - E, B)) / (2 * h)
        d_im = (f(Mm + 1j * E, B) - f(Mm - 1j * E, B)) / (2 * h)
        assert g["Mm"][idx] == pytest.approx(d_re + 1j * d_im, rel=1e-5)
        d_b = (f(Mm, B + E.real) - f(Mm, B - E.real)) / (2 * h)
        assert g["B"][idx] == pytest.approx(d_b, rel=1e-5)


def test_l1_scsi_examples_and_gradient():
    assert l1_scsi(np.ones(4))[0] == pytest.approx(0, abs=1e-14)
    assert l1_scsi(np.full(4, 2.0))[0] == pytest.approx(4 * (1 - EULER), abs=1e-12)
    assert l1_scsi(np.full(4, 2.0))[0] == pytest.approx(1.6911, abs=1e-4)
    k = np.array([1.3, 2.5, 7.0])
    _, g = l1_scsi(k, 1.7)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        fd = (l1_scsi(k + e, 1.7)[0] - l1_scsi(k - e, 1.7)[0]) / 2e-6
        assert g["k"][i] == pytest.approx(fd, rel=1e-6)


# -- JCE reconstruction term ----------------------------------------------------


def _mc_reconstruction(p, Y, plan, rho, n, rng, chunk=20_000):
    M, N = p.Mm.shape
    acc, acc2, done = 0.0, 0.0, 0
    while done < n:
        c = min(chunk, n - done)
        hv = p.m + p.b * standard_cl(rng, (c, N))
        Gv = p.Mm + p.B * standard_cl(rng, (c, M, N))
        h = hv @ dft_matrix(N).conj() / N
        G = vir_to_spatial_G(Gv)
        pred = np.sqrt(rho) * np.einsum("cmn,cn,nl->cml", G, h, plan.Phi * plan.x)
        err = np.sum(np.abs(Y - pred) ** 2, axis=(1, 2))
        acc += err.sum()
        acc2 += np.sum(err**2)
        done += c
    mean = acc / n
    return mean, np.sqrt((acc2 / n - mean**2) / n)


@pytest.mark.parametrize("seed", range(10))
def test_l3_closed_matches_mc(seed):
    rng = np.random.default_rng(10 + seed)
    M, N, L, rho = 2, 4, 3, rng.uniform(1, 20)
    plan = _plan(rng, N, L)
    p = AuxParamsJCE(m=2 * crandn(rng, N), b=rng.uniform(0.1, 1, N),
                     Mm=4 * crandn(rng, M, N), B=rng.uniform(0.1, 1.5, (M, N)))
    Y = 3 * crandn(rng, M, L)
    value, _ = l3_icsi_closed(p, Y, plan, rho)
    mean, se = _mc_reconstruction(p, Y, plan, rho, 200_000, rng)
    assert abs(value - mean) < 3 * se


def test_l3_closed_limits(rng):
    M, N, L, rho = 2, 4, 3, 5.0
    plan = _plan(rng, N, L)
    Y = crandn(rng, M, L)
    tiny = AuxParamsJCE(np.zeros(N, complex), np.full(N, 1e-6), np.zeros((M, N), complex), np.full((M, N), 1e-6))
    assert l3_icsi_closed(tiny, Y, plan, rho)[0] == pytest.approx(np.sum(np.abs(Y) ** 2), rel=1e-10)
    h, G = crandn(rng, N), crandn(rng, M, N)
    Y0 = np.sqrt(rho) * G @ (plan.Phi * np.outer(h, plan.x))
    exact = AuxParamsJCE(dft_matrix(N) @ h, np.full(N, 1e-6), spatial_to_vir_G(G), np.full((M, N), 1e-6))
    assert l3_icsi_closed(exact, Y0, plan, rho)[0] < 1e-8


def test_l3_closed_gradients(rng):
    M, N, L, rho = 2, 4, 3, 3.0
    plan = _plan(rng, N, L)
    p = _jce_params(rng, M, N, scale=3.0)
    Y = crandn(rng, M, L)
    _, g = l3_icsi_closed(p, Y, plan, rho)
    h = 1e-6

    def f(**kw):
        q = AuxParamsJCE(**{**vars(p), **kw})
        return l3_icsi_closed(q, Y, plan, rho)[0]

    for name in ("m", "Mm"):
        base = getattr(p, name)
        for idx in np.ndindex(base.shape):
            E = np.zeros_like(base)
            E[idx] = h
            fd = (f(**{name: base + E}) - f(**{name: base - E})) / (2 * h) + 1j * (
                f(**{name: base + 1j * E}) - f(**{name: base - 1j * E})
            ) / (2 * h)
            assert g[name][idx] == pytest.approx(fd, rel=1e-6, abs=1e-6)
    for name in ("b", "B"):
        base = getattr(p, name)
        for idx in np.ndindex(base.shape):
            E = np.zeros_like(base)
            E[idx] = h
            fd = (f(**{name: base + E}) - f(**{name: base - E})) / (2 * h)
            assert g[name][idx] == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_l3_closed_batched_matches_single(rng):
    M, N, L = 2, 4, 3
    plan = _plan(rng, N, L)
    ps = [_jce_params(rng, M, N) for _ in range(3)]
    Ys = [crandn(rng, M, L) for _ in range(3)]
    batch = AuxParamsJCE(*(np.stack([getattr(p, f) for p in ps]) for f in ("m", "b", "Mm", "B")))
    values, grads = l3_icsi_closed(batch, np.stack(Ys), plan, 2.0)
    for i in range(3):
        v, g = l3_icsi_closed(ps[i], Ys[i], plan, 2.0)
        assert values[i] == pytest.approx(v, rel=1e-12)
        np.testing.assert_allclose(grads["Mm"][i], g["Mm"], rtol=1e-12)


def test_quadratic_term_grows_with_rho(rng):
    M, N, L = 2, 4, 3
    plan = _plan(rng, N, L)
    p = _jce_params(rng, M, N)
    zero = np.zeros((M, L))
    # with Y = 0 the loss is the quadratic term alone
    assert l3_icsi_closed(p, zero, plan, 8.0)[0] > l3_icsi_closed(p, zero, plan, 4.0)[0]


# -- JCCE log-likelihood --------------------------------------------------------


def _jcce_setup(rng, M=2, N=4, L=3, N_b=3, rho=4.0):
    cfg = SystemConfig(M=M, N=N, N_p=L, N_b=N_b, rho=rho)
    plan = _plan(rng, N, L)
    G = crandn(rng, M, N)
    Ytil = rx_train_jcce(G, rng.uniform(0, 0.5, N), plan, cfg, rng)
    p = AuxParamsJCCE(k=rng.uniform(1.2, 4, N), Mm=spatial_to_vir_G(G) + crandn(rng, M, N), B=rng.uniform(0.2, 1, (M, N)))
    return cfg, plan, Ytil, p


def test_l3_scsi_identity_covariance(rng):
    cfg, plan, Ytil, _ = _jcce_setup(rng)
    M, N = 2, 4
    p = AuxParamsJCCE(np.full((1, N), 2.0), np.zeros((1, M, N), complex), np.full((1, M, N), 1e-6))
    S_y = (Ytil @ Ytil.conj().T)[None]
    d = np.zeros((2, 1, N))
    value, _ = l3_scsi_samples(p, d, d, standard_cl(rng, (2, 1, M, N)), S_y, cfg.N_b, plan.Phi * plan.x, cfg.rho)
    assert value[0] == pytest.approx(np.sum(np.abs(Ytil) ** 2), rel=1e-9)


def test_l3_scsi_matches_straight_line_oracle():
    rng = np.random.default_rng(30)
    cfg, plan, Ytil, p = _jcce_setup(rng)
    value, _ = l3_scsi(p, Ytil, plan, cfg.rho, 1, np.random.default_rng(99))
    replay = np.random.default_rng(99)
    d = replay.standard_gamma(p.k[None, None])[0, 0]
    Gv = p.Mm + p.B * standard_cl(replay, (1, 1) + p.Mm.shape)[0, 0]
    R = rx_cov_model(vir_to_spatial_G(Gv), plan.Phi * plan.x, d, cfg.rho)
    ref = np.real(np.trace(Ytil.conj().T @ np.linalg.inv(R) @ Ytil)) + cfg.N_b * np.linalg.slogdet(R)[1]
    assert value == pytest.approx(ref, abs=1e-10 * max(1.0, abs(ref)))
    assert np.linalg.slogdet(R)[1] >= 0


def test_l3_scsi_gradients_with_quantile_replay():
    rng = np.random.default_rng(31)
    cfg, plan, Ytil, p = _jcce_setup(rng)
    S = 3
    u = rng.uniform(0.05, 0.95, (S, 1, 4))
    zeta = standard_cl(rng, (S, 1, 2, 4))
    S_y = (Ytil @ Ytil.conj().T)[None]
    Phi = plan.Phi * plan.x

    def f(k, Mm, B):
        q = AuxParamsJCCE(k[None], Mm[None], B[None])
        d = gamma_quantile(u, k[None, None])
        return l3_scsi_samples(q, d, implicit_dxdk(d, k[None, None]), zeta, S_y, cfg.N_b, Phi, cfg.rho)

    _, g = f(p.k, p.Mm, p.B)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (f(p.k + e, p.Mm, p.B)[0][0] - f(p.k - e, p.Mm, p.B)[0][0]) / (2 * h)
        assert g["k"][0, i] == pytest.approx(fd, rel=1e-4)
    for idx in np.ndindex(p.Mm.shape):
        E = np.zeros(p.Mm.shape)
        E[idx] = h
        fd = (f(p.k, p.Mm + E, p.B)[0][0] - f(p.k, p.Mm - E, p.B)[0][0]) / (2 * h) + 1j * (
            f(p.k, p.Mm + 1j * E, p.B)[0][0] - f(p.k, p.Mm - 1j * E, p.B)[0][0]
        ) / (2 * h)
        assert g["Mm"][(0,) + idx] == pytest.approx(fd, rel=1e-5, abs=1e-6)
        fd = (f(p.k, p.Mm, p.B + E)[0][0] - f(p.k, p.Mm, p.B - E)[0][0]) / (2 * h)
        assert g["B"][(0,) + idx] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_jcce_loglik_batched(rng):
    _, plan, Ytil, p = _jcce_setup(rng)
    S_y = Ytil @ Ytil.conj().T
    d = rng.uniform(0, 1, (2, 4))
    Gv = crandn(rng, 2, 2, 4)
    v, gd, gG = jcce_loglik(d, Gv, S_y, 3, plan.Phi, 2.0)
    for i in range(2):
        vi, gdi, gGi = jcce_loglik(d[i], Gv[i], S_y, 3, plan.Phi, 2.0)
        assert v[i] == pytest.approx(vi, rel=1e-12)
        np.testing.assert_allclose(gG[i], gGi, rtol=1e-10, atol=1e-14)


def test_l3_scsi_reports_failing_sample(rng):
    cfg, plan, Ytil, p = _jcce_setup(rng)
    S_y = (Ytil @ Ytil.conj().T)[None]
    q = AuxParamsJCCE(p.k[None], p.Mm[None], p.B[None])
    d = np.ones((3, 1, 4))
    d[2] = -1e6  # an indefinite covariance only for the last sample
    with pytest.raises(NumericalFailure, match="MC sample 2"):
        l3_scsi_samples(q, d, d, np.zeros((3, 1, 2, 4)), S_y, cfg.N_b, plan.Phi, cfg.rho)


def test_total_loss_additivity():
    assert total_loss((0.0, {}), (0.0, {}))[0] == 0
    a = (1.5, {"m": np.array([1.0, 2.0])})
    b = (2.0, {"m": np.array([0.5, 0.5]), "b": np.ones(2)})
    value, g = total_loss(a, b)
    assert value == 3.5
    np.testing.assert_array_equal(g["m"], [1.5, 2.5])
    np.testing.assert_array_equal(g["b"], [1, 1])


# -- end-to-end gradient through the encoders ---------------------------------


@pytest.mark.parametrize("kind", ["JCE", "JCCE"])
def test_end_to_end_encoder_gradient(kind):
    cfg = SystemConfig(M=2, N=4, N_p=3, N_b=2, rho=4.0)
    scn = make_scenario(cfg, 5)
    rng = np.random.default_rng(6)
    encs = build_encoders(kind, cfg, HeadConstants(), rng, hidden=(6, 5))
    for enc in encs.values():
        for k, v in enc.params.items():
            if k.startswith("fc"):
                enc.params[k] = v * (30.0 if k == f"fc{enc.n_layers - 1}.W" else 1.0)
    batch = 3
    if kind == "JCE":
        signal = crandn(rng, batch, 2, 3)
    else:
        signal = crandn(rng, batch, 6, 2)
    x = features(kind, signal)
    obj = Objective(kind, scn, PriorParams(), mc_samples=20, mc_scsi=2)
    outs, caches = forward_all(encs, x)
    noise = obj.draw_noise(batch, rng, outs)
    if kind == "JCCE":
        noise = {"u": rng.uniform(0.05, 0.95, (2, batch, 4)), "zeta_G": noise["zeta_G"], "zeta_kl": noise["zeta_kl"]}
    _, _, head_grads = obj.loss(outs, signal, noise)
    grads = {name: encs[name].backward(caches[name], head_grads[name]) for name in encs}

    def value():
        return obj.loss(forward_all(encs, x)[0], signal, noise)[0]

    picks = [(n, k, idx) for n, e in encs.items() for k, p in e.params.items() for idx in np.ndindex(p.shape)]
    for i in rng.choice(len(picks), 40, replace=False):
        n, k, idx = picks[i]
        p = encs[n].params[k]
        old, h = p[idx], 1e-6
        p[idx] = old + h
        up = value()
        p[idx] = old - h
        down = value()
        p[idx] = old
        fd = (up - down) / (2 * h)
        assert grads[n][k][idx] == pytest.approx(fd, rel=1e-4, abs=1e-5), (n, k, idx)
