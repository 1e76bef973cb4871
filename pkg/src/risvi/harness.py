"""Metrics, protocol overhead, complexity formulas and Monte-Carlo sweeps."""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields

import numpy as np

from risvi.channel import ccm_from_d, gen_channels, sample_h_from_d
from risvi.errors import ConfigError, ContractViolation, MissingArtifactError
from risvi.inference import derived_rng, estimate_jce, estimate_jcce, make_scenario, true_spectrum
from risvi.numerics import eigh, svd
from risvi.phaseopt import PhaseConfig, capacity, phases_icsi, phases_scsi
from risvi.signals import rx_train_jce, rx_train_jcce

METHODS = ("JCE", "JCCE", "perfect_csi", "pc_pcov", "random_phase")
LEARNED = ("JCE", "JCCE")
CSV_HEADER = (
    "scenario", "snr_db", "trial", "method", "capacity", "effective_capacity",
    "nmse_h", "nmse_G", "nmse_d", "eig_alignment",
)
TAG_SWEEP = 71


@dataclass(frozen=True)
class MetricRecord:
    scenario: str
    snr_db: float
    trial: int
    method: str
    capacity: float
    effective_capacity: float
    nmse_h: float = None
    nmse_G: float = None
    nmse_d: float = None
    eig_alignment: float = None


@dataclass(frozen=True)
class ProtocolSpec:
    """Two-timescale pilot protocol.

    ``T_G_ms`` and ``T_h_ms`` are the RIS-BS and UE-RIS coherence times;
    a UE-RIS coherence block holds ``slots_per_block`` transmissions.
    """

    T_G_ms: float = 100.0
    T_h_ms: float = 0.1
    slots_per_block: int = 40
    scheme: str = "JCE"

    def __post_init__(self):
        if not self.T_G_ms >= self.T_h_ms > 0:
            raise ContractViolation("need T_G >= T_h > 0")
        if self.slots_per_block < 1:
            raise ContractViolation("slots_per_block must be >= 1")
        if self.scheme not in LEARNED:
            raise ContractViolation(f"scheme must be one of {LEARNED}")

    def with_scheme(self, scheme):
        return ProtocolSpec(self.T_G_ms, self.T_h_ms, self.slots_per_block, scheme)


def nmse(est, truth):
    """``||est - truth||^2 / ||truth||^2``."""
    est, truth = np.asarray(est), np.asarray(truth)
    if est.shape != truth.shape:
        raise ContractViolation(f"shape mismatch {est.shape} vs {truth.shape}")
    den = np.sum(np.abs(truth) ** 2)
    if den == 0:
        raise ContractViolation("NMSE is undefined for a zero reference")
    return float(np.sum(np.abs(est - truth) ** 2) / den)


def effective_capacity(C, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"overhead fraction must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * C


def overhead_fraction(p, cfg):
    """Fraction of transmissions spent on pilots under protocol ``p``.

    JCE trains in every UE-RIS coherence block.  JCCE trains on ``N_b``
    blocks at the start of each RIS-BS coherence window of
    ``floor(T_G / T_h)`` blocks.
    """
    if p.scheme == "JCE":
        return cfg.N_p / p.slots_per_block
    blocks = math.floor(p.T_G_ms / p.T_h_ms + 1e-9)
    return cfg.N_p * cfg.N_b / (p.slots_per_block * blocks)


def _top_vector(A):
    A = np.asarray(A, dtype=complex)
    if A.shape[0] == A.shape[1] and np.allclose(A, A.conj().T, rtol=1e-10, atol=1e-12):
        return eigh(0.5 * (A + A.conj().T))[1][:, 0]
    return svd(A)[2][:, 0]


def eig_alignment(A_hat, A_ref):
    """``|<v_hat, v_ref>|`` between unit top eigenvectors (top right singular
    vectors for non-Hermitian inputs)."""
    v1, v2 = _top_vector(A_hat), _top_vector(A_ref)
    return float(abs(np.vdot(v1, v2)) / (np.linalg.norm(v1) * np.linalg.norm(v2)))


def flop_count(model, encoder, M, N, N_p):
    """Per-inference FLOPs of one encoder, as tabulated for the two estimators."""
    if min(M, N, N_p) < 1:
        raise ContractViolation("dimensions must be positive")
    MNp = M * N_p
    if model == "JCE":
        tail = 3600 * N if encoder == "F" else 3600 * M * N
        if encoder not in ("F", "G"):
            raise ContractViolation(f"unknown encoder {encoder!r}")
        return 1087 * MNp + tail + 163740
    if model == "JCCE":
        if encoder not in ("F", "G"):
            raise ContractViolation(f"unknown encoder {encoder!r}")
        tail = 600 * N if encoder == "F" else 3600 * M * N
        return 4 * MNp * N * (MNp + 1) + 2 * MNp + 1087 * MNp**2 + tail + 163740
    raise ContractViolation(f"unknown model {model!r}")


# -- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepScenario:
    """A named system configuration; ``seed`` fixes its pilot plan and clusters."""

    name: str
    cfg: object
    seed: int


def snr_to_rho(snr_db):
    return 10.0 ** (snr_db / 10.0)


def _trial(sc, scn, snr_db, trial, methods, models, protocol):
    cfg = scn.cfg
    rho = cfg.rho
    streams = [derived_rng(sc.seed, TAG_SWEEP, trial, k) for k in range(5)]
    real = gen_channels(cfg, streams[0], scn.clusters)
    d_true = true_spectrum(real, cfg)
    R_true = ccm_from_d(d_true)
    # S-CSI methods are scored on a fresh draw from the covariance
    h_fresh = sample_h_from_d(d_true, streams[4])
    alpha_jce = min(overhead_fraction(protocol.with_scheme("JCE"), cfg), 1.0)
    alpha_jcce = min(overhead_fraction(protocol.with_scheme("JCCE"), cfg), 1.0)
    out = []

    def record(method, C, alpha, **metrics):
        out.append(MetricRecord(sc.name, snr_db, trial, method, float(C),
                                effective_capacity(float(C), alpha), **metrics))

    for method in methods:
        if method == "perfect_csi":
            C = capacity(real.G, phases_icsi(real.G, real.h), real.h, rho)
            record(method, C, alpha_jce)
        elif method == "random_phase":
            C = capacity(real.G, PhaseConfig.random(cfg.N, streams[3]), real.h, rho)
            record(method, C, 0.0)
        elif method == "pc_pcov":
            C = capacity(real.G, phases_scsi(real.G, R_true), h_fresh, rho)
            record(method, C, alpha_jcce, eig_alignment=1.0)
        elif method == "JCE":
            Y = rx_train_jce(real, scn.plan, rho, streams[1])
            est = estimate_jce(models[(sc.name, snr_db, "JCE")], Y)
            C = capacity(real.G, phases_icsi(est.G_hat, est.h_hat), real.h, rho)
            record(method, C, alpha_jce, nmse_h=nmse(est.h_hat, real.h), nmse_G=nmse(est.G_hat, real.G))
        elif method == "JCCE":
            Ytil = rx_train_jcce(real.G, d_true, scn.plan, cfg, streams[2])
            est = estimate_jcce(models[(sc.name, snr_db, "JCCE")], Ytil)
            if np.any(est.d_hat > 0):
                v = phases_scsi(est.G_hat, est.R_h_hat)
                align = eig_alignment(est.R_h_hat, R_true)
            else:
                # an all-zero spectrum carries no direction information
                v, align = PhaseConfig.random(cfg.N, streams[3]), 0.0
            C = capacity(real.G, v, h_fresh, rho)
            record(method, C, alpha_jcce, nmse_G=nmse(est.G_hat, real.G),
                   nmse_d=nmse(est.d_hat, d_true), eig_alignment=align)
        else:
            raise ConfigError(f"unknown method {method!r}")
    return out


def run_sweep(scenarios, snrs_db, trials, methods, models=None, protocol=None, threads=1):
    """Evaluate every method on ``trials`` channel draws per (scenario, SNR).

    Channel and noise draws depend only on the scenario seed and the trial
    index, so all SNR points and methods share the same realizations.

    Parameters
    ----------
    scenarios : sequence of SweepScenario
    snrs_db : sequence of float
    methods : sequence of str
        Subset of :data:`METHODS`.
    models : dict, optional
        ``(scenario name, snr_db, "JCE" | "JCCE")`` to encoder pair.

    Returns
    -------
    list of MetricRecord
        Ordered by scenario, SNR, trial and method, independent of ``threads``.
    """
    models = models or {}
    protocol = protocol or ProtocolSpec()
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
    for sc in scenarios:
        for snr in snrs_db:
            for m in methods:
                if m in LEARNED and (sc.name, snr, m) not in models:
                    raise MissingArtifactError(
                        f"no trained {m} model for scenario {sc.name!r} at {snr} dB"
                    )
    jobs = []
    for si, sc in enumerate(scenarios):
        for pi, snr in enumerate(snrs_db):
            scn = make_scenario(sc.cfg.with_rho(snr_to_rho(snr)), sc.seed)
            for t in range(trials):
                jobs.append(((si, pi, t), sc, scn, snr, t))

    def run(job):
        key, sc, scn, snr, t = job
        return key, _trial(sc, scn, snr, t, methods, models, protocol)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    results.sort(key=lambda kv: kv[0])
    return [rec for _, recs in results for rec in recs]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerow([_fmt(v) for v in astuple(rec)])


def read_records(path):
    types = {f.name: f.type for f in fields(MetricRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for name, raw in row.items():
                if raw == "":
                    kw[name] = None
                elif name in ("scenario", "method"):
                    kw[name] = raw
                elif name == "trial":
                    kw[name] = int(raw)
                else:
                    kw[name] = float(raw)
            out.append(MetricRecord(**kw))
    return out


def summarize(records):
    """Mean of every metric per ``(scenario, snr_db, method)``, in first-seen order."""
    groups = {}
    for rec in records:
        groups.setdefault((rec.scenario, rec.snr_db, rec.method), []).append(rec)
    rows = []
    for (scenario, snr, method), recs in groups.items():
        row = {"scenario": scenario, "snr_db": snr, "method": method, "trials": len(recs)}
        for name in CSV_HEADER[4:]:
            vals = [getattr(r, name) for r in recs if getattr(r, name) is not None]
            row[name] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows
