"""Geometric mmWave channels for the UE-RIS and RIS-BS links.

The RIS-BS channel is ``G = sqrt(MN/P) * sum_p alpha_p a_BS(xi_p) a_RIS(phi_p, vphi_p)^H``
and the UE-RIS channel is ``h = sqrt(N/Q) * sum_q beta_q a_RIS(phi_q, vphi_q)``,
with complex Gaussian gains.  Angle mode ``mode1`` draws every angle uniformly
on ``[0, 2pi)``; ``mode2`` confines the UE-RIS angles to a handful of clusters
taken from a fixed partition of ``[0, 2pi)`` into 100 sub-intervals.
"""

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from risvi.errors import ConfigError, ContractViolation, InvalidDimensionError
from risvi.numerics import dft_matrix

TWO_PI = 2.0 * np.pi
N_SUBINTERVALS = 100
ANGLE_MODES = ("mode1", "mode2")


@dataclass(frozen=True)
class SystemConfig:
    """Scenario dimensions and link parameters.

    Attributes
    ----------
    M : int
        BS antennas.
    N : int
        RIS elements; must be a perfect square (square planar array).
    N_p : int
        Pilots per UE-RIS coherence block.
    N_b : int
        Coherence blocks in the covariance training window.
    rho : float
        Linear SNR.
    P, Q : int
        Path counts of the RIS-BS and UE-RIS links.
    angle_mode : str
        ``"mode1"`` or ``"mode2"``.
    cluster_count : int
        Active angle clusters in ``mode2``.
    """

    M: int = 4
    N: int = 16
    N_p: int = 32
    N_b: int = 1
    rho: float = 100.0
    P: int = 1
    Q: int = 1
    angle_mode: str = "mode1"
    cluster_count: int = 4

    def __post_init__(self):
        for name in ("M", "N", "N_p", "N_b", "P", "Q", "cluster_count"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if math.isqrt(self.N) ** 2 != self.N:
            raise ConfigError(f"N must be a perfect square, got {self.N}")
        if not np.isfinite(self.rho) or self.rho < 0:
            raise ConfigError(f"rho must be finite and >= 0, got {self.rho!r}")
        if self.angle_mode not in ANGLE_MODES:
            raise ConfigError(f"angle_mode must be one of {ANGLE_MODES}, got {self.angle_mode!r}")
        if self.cluster_count > N_SUBINTERVALS:
            raise ConfigError("cluster_count cannot exceed the 100 angle sub-intervals")

    @property
    def snr_db(self):
        return 10.0 * np.log10(self.rho) if self.rho > 0 else -np.inf

    def with_rho(self, rho):
        return SystemConfig(**{**asdict(self), "rho": float(rho)})

    def to_dict(self):
        return asdict(self)


@dataclass
class ChannelRealization:
    h: np.ndarray
    G: np.ndarray
    angles: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)


def ula_response(M, xi):
    """Half-wavelength ULA steering vector, unit norm."""
    m = np.arange(int(M))
    return np.exp(1j * np.pi * m * np.cos(xi)) / np.sqrt(M)


def upa_response(N, phi, vphi):
    """Square half-wavelength UPA steering vector ``kron(u, w) / sqrt(N)``."""
    side = math.isqrt(int(N))
    if side * side != N:
        raise InvalidDimensionError(f"N must be a perfect square, got {N}")
    m = np.arange(side)
    u = np.exp(1j * np.pi * m * np.sin(phi) * np.sin(vphi))
    w = np.exp(1j * np.pi * m * np.cos(vphi))
    return np.kron(u, w) / np.sqrt(N)


def complex_normal(rng, size):
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def draw_clusters(cfg, rng):
    """Pick the active ``(azimuth, elevation)`` sub-interval pairs for ``mode2``.

    Returns an ``(cluster_count, 2)`` integer array of sub-interval indices.
    """
    az = rng.choice(N_SUBINTERVALS, size=cfg.cluster_count, replace=False)
    el = rng.choice(N_SUBINTERVALS, size=cfg.cluster_count, replace=False)
    return np.stack([az, el], axis=1)


def _ue_angles(cfg, rng, clusters):
    if cfg.angle_mode == "mode1":
        return rng.uniform(0.0, TWO_PI, cfg.Q), rng.uniform(0.0, TWO_PI, cfg.Q)
    if clusters is None:
        raise ContractViolation("mode2 channels need the scenario clusters")
    pick = clusters[rng.integers(0, len(clusters), cfg.Q)]
    width = TWO_PI / N_SUBINTERVALS
    phi = (pick[:, 0] + rng.uniform(0.0, 1.0, cfg.Q)) * width
    vphi = (pick[:, 1] + rng.uniform(0.0, 1.0, cfg.Q)) * width
    # guard against rounding up to exactly 2*pi
    return np.minimum(phi, np.nextafter(TWO_PI, 0)), np.minimum(vphi, np.nextafter(TWO_PI, 0))


def gen_channels(cfg, rng, clusters=None):
    """Draw one ``(h, G)`` realization.

    Parameters
    ----------
    cfg : SystemConfig
    rng : numpy.random.Generator
    clusters : ndarray, optional
        Output of :func:`draw_clusters`; required in ``mode2``.
    """
    M, N, P, Q = cfg.M, cfg.N, cfg.P, cfg.Q
    xi = rng.uniform(0.0, TWO_PI, P)
    phi_p = rng.uniform(0.0, TWO_PI, P)
    vphi_p = rng.uniform(0.0, TWO_PI, P)
    alpha = complex_normal(rng, P)
    phi_q, vphi_q = _ue_angles(cfg, rng, clusters)
    beta = complex_normal(rng, Q)

    G = np.zeros((M, N), dtype=complex)
    for p in range(P):
        G += alpha[p] * np.outer(ula_response(M, xi[p]), upa_response(N, phi_p[p], vphi_p[p]).conj())
    G *= np.sqrt(M * N / P)
    h = np.zeros(N, dtype=complex)
    for q in range(Q):
        h += beta[q] * upa_response(N, phi_q[q], vphi_q[q])
    h *= np.sqrt(N / Q)
    angles = {"xi": xi, "phi_p": phi_p, "vphi_p": vphi_p, "phi_q": phi_q, "vphi_q": vphi_q}
    return ChannelRealization(h=h, G=G, angles=angles, gains={"alpha": alpha, "beta": beta})


def ccm_ground_truth(real, cfg):
    """Covariance of ``h`` over gain redraws with the realization's angles fixed."""
    steer = np.stack(
        [upa_response(cfg.N, a, b) for a, b in zip(real.angles["phi_q"], real.angles["vphi_q"])],
        axis=1,
    )
    return (cfg.N / cfg.Q) * steer @ steer.conj().T


def ccm_from_d(d):
    """Low-rank covariance ``F^H diag(d) F`` from an angular spectrum ``d``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ContractViolation("angular spectrum entries must be nonnegative")
    F = dft_matrix(d.shape[-1])
    return (F.conj().T * d[..., None, :]) @ F


def spectrum_from_ccm(R):
    """Angular spectrum of ``R``: ``diag(F R F^H) / N^2``, clipped at zero.

    Exact inverse of :func:`ccm_from_d` on DFT-diagonal covariances and the
    best DFT-diagonal approximation of any other Hermitian matrix.
    """
    R = np.asarray(R, dtype=complex)
    N = R.shape[-1]
    F = dft_matrix(N)
    diag = np.real(np.einsum("ij,jk,ik->i", F, R, F.conj()))
    return np.maximum(diag / N**2, 0.0)


def sample_h_from_d(d, rng, size=None):
    """Draw ``h = F^H diag(sqrt(d)) z`` with ``z ~ CN(0, I)``.

    ``size`` adds leading sample dimensions.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ContractViolation("angular spectrum entries must be nonnegative")
    N = d.shape[-1]
    shape = (N,) if size is None else tuple(np.atleast_1d(size)) + (N,)
    z = complex_normal(rng, shape)
    return (np.sqrt(d) * z) @ dft_matrix(N).conj()
