"""Uplink training observations for both estimators.

JCE observes one coherence block, ``Y = sqrt(rho) G (Phi o h x^T) + W``.
JCCE stacks ``N_b`` blocks that share ``G`` while ``h`` is redrawn from its
covariance; block ``s`` contributes ``vec(Y_s) = sqrt(rho) (Phi^T kr G) h_s + w``.
"""

from dataclasses import dataclass

import numpy as np

from risvi.channel import ccm_from_d, complex_normal, sample_h_from_d
from risvi.errors import InvalidDimensionError
from risvi.numerics import dft_matrix, khatri_rao


@dataclass
class PilotPlan:
    """RIS training configurations (``N x N_p``, unit modulus) and pilot symbols."""

    Phi: np.ndarray
    x: np.ndarray

    @property
    def n_pilots(self):
        return self.Phi.shape[1]


def make_pilot_plan(cfg, rng):
    """Random-phase RIS configurations with unit pilot symbols."""
    theta = rng.uniform(0.0, 2.0 * np.pi, (cfg.N, cfg.N_p))
    return PilotPlan(Phi=np.exp(1j * theta), x=np.ones(cfg.N_p, dtype=complex))


def dft_pilot_plan(cfg):
    """Orthogonal plan: the first ``N_p`` columns of the ``N``-point DFT matrix."""
    if cfg.N_p > cfg.N:
        raise InvalidDimensionError("DFT pilots need N_p <= N")
    return PilotPlan(Phi=dft_matrix(cfg.N)[:, : cfg.N_p].copy(), x=np.ones(cfg.N_p, dtype=complex))


def cascade_operator(G, Phi):
    """``Phi^T kr G``, mapping ``h`` to ``vec(G diag(h) Phi)`` (column-major vec)."""
    return khatri_rao(Phi.T, G)


def rx_train_jce(real, plan, rho, rng=None):
    """JCE training matrix ``Y`` (``M x N_p``); noiseless when ``rng`` is None."""
    Y = np.sqrt(rho) * real.G @ (plan.Phi * np.outer(real.h, plan.x))
    if rng is not None:
        Y = Y + complex_normal(rng, Y.shape)
    return Y


def rx_train_jcce(G, d, plan, cfg, rng, noiseless=False):
    """Stacked JCCE observation ``Ytil`` of shape ``(M*N_p, N_b)``.

    Each column is one coherence block with a fresh ``h_s`` drawn from the
    angular spectrum ``d``.  With ``noiseless=True`` the noise draw is skipped
    (the ``h_s`` draws are still consumed from ``rng``).
    """
    A = cascade_operator(G, plan.Phi * plan.x[None, :])
    hs = sample_h_from_d(d, rng, size=cfg.N_b)
    Ytil = np.sqrt(cfg.rho) * A @ hs.T
    if not noiseless:
        Ytil = Ytil + complex_normal(rng, Ytil.shape)
    return Ytil


def rx_cov_model(G, Phi, d, rho):
    """Model covariance ``rho A R_h A^H + I`` of one stacked block."""
    A = cascade_operator(G, Phi)
    return rho * A @ ccm_from_d(d) @ A.conj().T + np.eye(A.shape[0])


def preprocess_jcce(Ytil, N_b=None):
    """Encoder input ``Ytil Ytil^H / N_b - I``."""
    Ytil = np.asarray(Ytil)
    if N_b is None:
        N_b = Ytil.shape[-1]
    if N_b < 1:
        raise InvalidDimensionError("N_b must be >= 1")
    S = Ytil @ np.swapaxes(Ytil, -1, -2).conj()
    return S / N_b - np.eye(Ytil.shape[-2])


def split_complex(z, batched=False):
    """Flatten complex arrays to real feature rows ``[Re, Im]`` (row-major).

    With ``batched=True`` the first axis indexes samples.
    """
    z = np.asarray(z)
    if not batched:
        flat = z.reshape(-1)
        return np.concatenate([flat.real, flat.imag])
    flat = z.reshape(z.shape[0], -1)
    return np.concatenate([flat.real, flat.imag], axis=1)
