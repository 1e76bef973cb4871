"""Loss terms of the two variational objectives and their gradients.

All functions work on a leading batch axis and return per-sample values.
Gradients with respect to complex quantities use ``dL/dRe + 1j * dL/dIm``;
gradients with respect to real quantities are ordinary partial derivatives.

Angular-domain conventions: ``h_vir = F_N h`` and ``G_vir = F_M G F_N`` with
unnormalized DFT matrices, so ``h = F_N^H h_vir / N`` and
``G = F_M^H G_vir F_N^H / (M N)``.
"""

from dataclasses import dataclass

import numpy as np

from risvi.errors import NumericalFailure
from risvi.numerics import chol_logdet_solve, dft_matrix
from risvi.vardist import gamma_sample_implicit, kl_gamma_exp, kl_gamma_exp_grad, standard_cl

SCALE_FLOOR = 1e-6
TRAIN_MC_SCSI = 8
EVAL_MC_SCSI = 64


@dataclass
class PriorParams:
    alpha_h: float = 1.0
    alpha_G: float = 1.0
    alpha_d: float = 1.0


@dataclass
class AuxParamsJCE:
    """Laplace posteriors over ``h_vir`` (``m``, ``b``) and ``G_vir`` (``Mm``, ``B``)."""

    m: np.ndarray
    b: np.ndarray
    Mm: np.ndarray
    B: np.ndarray


@dataclass
class AuxParamsJCCE:
    """Gamma shapes ``k`` over the angular spectrum and Laplace posterior over ``G_vir``."""

    k: np.ndarray
    Mm: np.ndarray
    B: np.ndarray


def _flat(a):
    a = np.asarray(a)
    return a.reshape(a.shape[0], -1)


def kl_laplace_mc(mean, scale, alpha, zeta):
    """Monte-Carlo KL of independent ``CL(mean, scale)`` from ``CL(0, alpha)``.

    ``E|z|/alpha`` is averaged over the reparameterized draws
    ``mean + scale * zeta``; the entropy part is exact.

    Parameters
    ----------
    mean, scale : ndarray, shape (batch, ...)
    zeta : ndarray, shape (D, batch, ...)
        Standard complex Laplace draws.

    Returns
    -------
    value : ndarray, shape (batch,)
    g_mean : ndarray, like ``mean`` (complex convention)
    g_scale : ndarray, like ``scale``
    """
    D = zeta.shape[0]
    z = mean[None] + scale[None] * zeta
    mag = np.abs(z)
    n = _flat(mean).shape[1]
    value = (
        _flat(mag.sum(axis=0)).sum(axis=1) / (D * alpha)
        - _flat(np.log(2.0 * np.pi * scale**2)).sum(axis=1)
        + n * np.log(2.0 * np.pi * alpha**2)
        - 2.0 * n
    )
    unit = np.divide(z, mag, out=np.zeros_like(z), where=mag > 0)
    g_mean = unit.sum(axis=0) / (D * alpha)
    g_scale = np.real(np.conj(unit) * zeta).sum(axis=0) / (D * alpha) - 2.0 / scale
    return value, g_mean, g_scale


def l1_icsi(p, prior, D, rng=None, zeta=None):
    """KL term of ``h_vir``; returns ``(value, {"m": .., "b": ..})``."""
    if zeta is None:
        zeta = standard_cl(rng, (D,) + p.m.shape)
    value, gm, gb = kl_laplace_mc(p.m, p.b, prior.alpha_h, zeta)
    return value, {"m": gm, "b": gb}


def l2_icsi(p, prior, D, rng=None, zeta=None):
    """KL term of ``G_vir``; returns ``(value, {"Mm": .., "B": ..})``."""
    if zeta is None:
        zeta = standard_cl(rng, (D,) + p.Mm.shape)
    value, gM, gB = kl_laplace_mc(p.Mm, p.B, prior.alpha_G, zeta)
    return value, {"Mm": gM, "B": gB}


class JceLikelihood:
    """Closed-form expected reconstruction error of the JCE objective.

    For pilot ``l`` let ``C_l = sqrt(rho) x_l / (M N^2) F_N^H diag(v_l) F_N^H``
    so that the noiseless observation is ``F_M^H G_vir C_l h_vir``.  With
    ``Lambda = 6 diag(b^2)`` and ``Q = 6 diag(sum_m B[m, :]^2)`` the
    expectation of ``sum_l ||y_l - F_M^H G_vir C_l h_vir||^2`` under the
    mean-field Laplace posterior is::

        sum_l ||y_l - F_M^H Mm C_l m||^2
            + M Tr(C_l^H Q C_l Lambda) + M Tr(C_l^H Mm^H Mm C_l Lambda)
            + M m^H C_l^H Q C_l m

    The constant from the Gaussian normalizer is dropped.
    """

    def __init__(self, plan, M, rho):
        N, L = plan.Phi.shape
        self.M, self.N, self.L, self.rho = M, N, L, rho
        FN = dft_matrix(N)
        self.FM = dft_matrix(M)
        FNH = FN.conj().T
        coef = np.sqrt(rho) / (M * N**2) * plan.x
        self.C = coef[:, None, None] * (FNH[None] * plan.Phi.T[:, None, :]) @ FNH
        C = self.C
        self.K = np.sum(np.abs(C) ** 2, axis=0)
        # Tp[i] = sum_l C_l[:, i] C_l[:, i]^H ; Tq[j] = sum_l C_l[j, :]^H C_l[j, :]
        self.Tp = np.einsum("lji,lki->ijk", C, C.conj())
        self.Tq = np.einsum("lja,ljc->jac", C.conj(), C)

    def __call__(self, p, Y):
        """Value and gradients for a batch.

        Parameters
        ----------
        p : AuxParamsJCE
            Arrays with a leading batch axis.
        Y : ndarray, shape (batch, M, N_p)

        Returns
        -------
        value : ndarray, shape (batch,)
        grads : dict with keys ``m``, ``b``, ``Mm``, ``B``
        """
        M = self.M
        m, Mm = p.m, p.Mm
        lam = 6.0 * p.b**2
        q = 6.0 * np.sum(p.B**2, axis=1)
        u = np.einsum("lji,bi->blj", self.C, m)
        W = self.FM.conj().T @ Mm
        pred = np.einsum("bmn,bln->blm", W, u)
        r = np.swapaxes(Y, 1, 2) - pred
        t1 = np.sum(np.abs(r) ** 2, axis=(1, 2))
        t2 = M * np.einsum("bj,ji,bi->b", q, self.K, lam)
        Pt = np.einsum("bi,ijk->bjk", lam, self.Tp)
        MmPt = Mm @ Pt
        t3 = M * np.real(np.sum(Mm.conj() * MmPt, axis=(1, 2)))
        Sq = np.einsum("bj,jac->bac", q, self.Tq)
        Sqm = np.einsum("bac,bc->ba", Sq, m)
        t4 = M * np.real(np.sum(m.conj() * Sqm, axis=1))
        value = t1 + t2 + t3 + t4

        s = r @ self.FM.T
        tt = np.einsum("bmn,blm->bln", Mm.conj(), s)
        g_m = -2.0 * np.einsum("lji,blj->bi", self.C.conj(), tt) + 2.0 * M * Sqm
        g_Mm = -2.0 * np.einsum("blm,bln->bmn", s, u.conj()) + 2.0 * M * MmPt
        K2 = np.swapaxes(Mm.conj(), 1, 2) @ Mm
        g_lam = M * (q @ self.K) + M * np.real(np.einsum("ijk,bkj->bi", self.Tp, K2))
        g_q = M * (lam @ self.K.T) + M * np.sum(np.abs(u) ** 2, axis=1)
        grads = {
            "m": g_m,
            "b": 12.0 * p.b * g_lam,
            "Mm": g_Mm,
            "B": 12.0 * p.B * g_q[:, None, :],
        }
        return value, grads


def l3_icsi_closed(p, Y, plan, rho):
    """Closed-form JCE reconstruction loss; single instances or batches."""
    single = np.ndim(p.m) == 1
    if single:
        p = AuxParamsJCE(p.m[None], np.asarray(p.b)[None], p.Mm[None], np.asarray(p.B)[None])
        Y = np.asarray(Y)[None]
    lik = JceLikelihood(plan, p.Mm.shape[-2], rho)
    value, grads = lik(p, Y)
    if single:
        return value[0], {k: v[0] for k, v in grads.items()}
    return value, grads


def l1_scsi(k, alpha_d=1.0, mode="analytic"):
    """Sum of Gamma-vs-Exponential KL terms over the last axis."""
    k = np.asarray(k, dtype=float)
    return (
        np.sum(kl_gamma_exp(k, alpha_d, mode), axis=-1),
        {"k": kl_gamma_exp_grad(k, alpha_d, mode)},
    )


def vir_to_spatial_G(Gv):
    M, N = Gv.shape[-2:]
    return dft_matrix(M).conj().T @ Gv @ dft_matrix(N).conj().T / (M * N)


def spatial_to_vir_G(G):
    M, N = G.shape[-2:]
    return dft_matrix(M) @ G @ dft_matrix(N)


def jcce_loglik(d, Gv, S_y, N_b, Phi, rho):
    """``Tr(R^-1 S_y) + N_b log|R|`` with ``R = rho A R_h A^H + I``.

    ``S_y = Ytil Ytil^H``.  Arrays carry arbitrary leading batch axes
    (``d``: ``(..., N)``, ``Gv``: ``(..., M, N)``, ``S_y``: broadcastable to
    ``(..., M N_p, M N_p)``).

    Returns
    -------
    value : ndarray
    g_d : ndarray
        Partial derivatives with respect to ``d``.
    g_Gv : ndarray
        Complex-convention gradient with respect to ``G_vir``.
    """
    M, N = Gv.shape[-2:]
    L = Phi.shape[1]
    FN = dft_matrix(N)
    FM = dft_matrix(M)
    G = vir_to_spatial_G(Gv)
    A = (Phi.T[:, None, :] * G[..., None, :, :]).reshape(G.shape[:-2] + (L * M, N))
    Bop = A @ FN.conj().T
    R = rho * (Bop * d[..., None, :]) @ np.swapaxes(Bop.conj(), -1, -2) + np.eye(L * M)
    eye = np.broadcast_to(np.eye(L * M), R.shape)
    Rinv, logdet = chol_logdet_solve(R, eye)
    Rinv = 0.5 * (Rinv + np.swapaxes(Rinv.conj(), -1, -2))
    RiS = Rinv @ S_y
    value = np.real(np.trace(RiS, axis1=-2, axis2=-1)) + N_b * logdet
    Gam = N_b * Rinv - RiS @ Rinv
    GB = Gam @ Bop
    g_d = rho * np.real(np.sum(Bop.conj() * GB, axis=-2))
    gA = 2.0 * rho * (GB * d[..., None, :]) @ FN
    gG = np.sum(gA.reshape(gA.shape[:-2] + (L, M, N)) * Phi.T.conj()[:, None, :], axis=-3)
    g_Gv = FM @ gG @ FN / (M * N)
    return value, g_d, g_Gv


def l3_scsi_samples(p, d, dd_dk, zeta, S_y, N_b, Phi, rho):
    """Monte-Carlo JCCE log-likelihood loss from prepared draws.

    Parameters
    ----------
    p : AuxParamsJCCE
        Batched parameters (``k``: ``(batch, N)``, ``Mm``/``B``: ``(batch, M, N)``).
    d, dd_dk : ndarray, shape (S, batch, N)
        Gamma draws at shapes ``p.k`` and their implicit derivatives.
    zeta : ndarray, shape (S, batch, M, N)
        Standard complex Laplace draws for ``G_vir``.
    S_y : ndarray, shape (batch, M N_p, M N_p)

    Returns
    -------
    value : ndarray, shape (batch,)
    grads : dict with keys ``k``, ``Mm``, ``B``
    """
    S = d.shape[0]
    Gv = p.Mm[None] + p.B[None] * zeta
    try:
        value, g_d, g_Gv = jcce_loglik(d, Gv, S_y[None], N_b, Phi, rho)
    except NumericalFailure as exc:
        s, b = exc.index if exc.index is not None else (None, None)
        raise NumericalFailure(
            f"covariance factorization failed at MC sample {s} of batch item {b}", index=exc.index
        ) from exc
    grads = {
        "k": np.sum(g_d * dd_dk, axis=0) / S,
        "Mm": g_Gv.sum(axis=0) / S,
        "B": np.real(np.conj(g_Gv) * zeta).sum(axis=0) / S,
    }
    return value.mean(axis=0), grads


def l3_scsi(p, Ytil, plan, rho, S, rng):
    """JCCE log-likelihood loss with ``S`` fresh joint draws."""
    single = np.ndim(p.k) == 1
    if single:
        p = AuxParamsJCCE(p.k[None], p.Mm[None], np.asarray(p.B)[None])
        Ytil = np.asarray(Ytil)[None]
    N_b = Ytil.shape[-1]
    S_y = Ytil @ np.swapaxes(Ytil.conj(), -1, -2)
    d, dd_dk = gamma_sample_implicit(np.broadcast_to(p.k, (S,) + p.k.shape), rng)
    zeta = standard_cl(rng, (S,) + p.Mm.shape)
    value, grads = l3_scsi_samples(p, d, dd_dk, zeta, S_y, N_b, plan.Phi * plan.x[None, :], rho)
    if single:
        return value[0], {k: v[0] for k, v in grads.items()}
    return value, grads


def total_loss(*parts):
    """Add ``(value, grads)`` pairs; gradients with the same key are summed."""
    value = 0.0
    grads = {}
    for v, g in parts:
        value = value + v
        for key, arr in g.items():
            grads[key] = grads[key] + arr if key in grads else arr
    return value, grads
