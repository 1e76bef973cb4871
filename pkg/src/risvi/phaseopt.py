"""Closed-form RIS phase configuration and capacity evaluation."""

from dataclasses import dataclass

import numpy as np

from risvi.errors import ContractViolation
from risvi.numerics import eigh, svd

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PhaseConfig:
    theta: np.ndarray

    @property
    def v(self):
        return np.exp(1j * self.theta)

    @classmethod
    def from_angles(cls, theta):
        theta = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        # tiny negative angles round up to exactly 2*pi
        return cls(theta=np.where(theta >= TWO_PI, 0.0, theta))

    @classmethod
    def random(cls, N, rng):
        return cls(theta=rng.uniform(0.0, TWO_PI, N))


def _nonzero(a, name):
    a = np.asarray(a, dtype=complex)
    if not np.any(a != 0):
        raise ContractViolation(f"{name} must be nonzero")
    return a


def top_right_singular(G):
    return svd(_nonzero(G, "G"))[2][:, 0]


def phases_icsi(G, h):
    """Align each element with the dominant right singular vector of ``G``."""
    h = _nonzero(h, "h")
    vartheta = top_right_singular(G)
    return PhaseConfig.from_angles(-(np.angle(h) - np.angle(vartheta)))


def phases_scsi(G, R_h):
    """Align each element with the dominant eigenvector of the UE-RIS covariance."""
    R_h = _nonzero(R_h, "R_h")
    vartheta = top_right_singular(G)
    p_max = eigh(R_h)[1][:, 0]
    return PhaseConfig.from_angles(-(np.angle(p_max) - np.angle(vartheta)))


def _unit(v):
    v = np.asarray(v.v if isinstance(v, PhaseConfig) else v, dtype=complex)
    if not np.allclose(np.abs(v), 1.0, atol=1e-12):
        raise ContractViolation("phase vector must be unit modulus")
    return v


def beam_gain(G, v, h):
    """``||G diag(v) h||^2``; ``h`` may carry leading sample dimensions."""
    v = _unit(v)
    return np.sum(np.abs((np.asarray(h) * v) @ np.asarray(G).T) ** 2, axis=-1)


def capacity(G, v, h, rho):
    """Uplink capacity ``log2(1 + rho ||G diag(v) h||^2)`` in bits/s/Hz."""
    return np.log2(1.0 + rho * beam_gain(G, v, h))


def expected_gain(G, v, R_h):
    """``E_h ||G diag(v) h||^2 = Tr(G diag(v) R_h diag(v)^H G^H)``."""
    v = _unit(v)
    Gv = np.asarray(G) * v[None, :]
    return float(np.real(np.trace(Gv @ np.asarray(R_h) @ Gv.conj().T)))


def capacity_upper_bound(G, v, R_h, rho):
    """Jensen bound ``log2(1 + rho E||G diag(v) h||^2)`` on the ergodic capacity."""
    return float(np.log2(1.0 + rho * expected_gain(G, v, R_h)))
