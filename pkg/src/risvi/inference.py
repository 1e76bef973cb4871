"""Amortized training of the encoders and MAP extraction of the estimates.

Every random quantity is drawn from a stream derived from the scenario seed
and a fixed tag, so datasets, initial weights and training noise are
reproducible regardless of how many worker threads are used.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from risvi.channel import ccm_from_d, ccm_ground_truth, draw_clusters, gen_channels, spectrum_from_ccm
from risvi.elbo import (
    SCALE_FLOOR,
    TRAIN_MC_SCSI,
    AuxParamsJCCE,
    AuxParamsJCE,
    JceLikelihood,
    PriorParams,
    kl_laplace_mc,
    l1_scsi,
    l3_scsi_samples,
    spatial_to_vir_G,
    total_loss,
    vir_to_spatial_G,
)
from risvi.encoder import Encoder, HeadSpec, adam_step, AdamState
from risvi.errors import ConfigError, ContractViolation, TrainingFailure
from risvi.numerics import dft_matrix
from risvi.signals import make_pilot_plan, preprocess_jcce, rx_train_jce, rx_train_jcce, split_complex
from risvi.vardist import gamma_quantile, implicit_dxdk, standard_cl

KINDS = ("JCE", "JCCE")

# stream tags: one independent generator per purpose
TAG_SCENARIO = 11
TAG_DATA = 23
TAG_INIT = 37
TAG_TRAIN = 41
TAG_HOLDOUT = 53


def derived_rng(seed, *tags):
    """Generator keyed by ``seed`` and a tuple of integer tags."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass
class TrainConfig:
    dataset_size: int = 10_000
    mc_samples: int = 1000
    initial_lr: float = 0.1
    max_steps: int = 2000
    plateau_patience: int = 20
    batch_size: int = 128
    holdout_fraction: float = 0.1
    eval_every: int = 10
    max_lr_halvings: int = 6
    mc_scsi: int = TRAIN_MC_SCSI
    kl_mode: str = "analytic"

    def __post_init__(self):
        for f in ("dataset_size", "mc_samples", "plateau_patience", "batch_size", "eval_every", "mc_scsi"):
            if getattr(self, f) < 1:
                raise ConfigError(f"TrainConfig.{f} must be positive")
        if self.max_steps < 0 or self.max_lr_halvings < 0:
            raise ConfigError("TrainConfig.max_steps and max_lr_halvings must be >= 0")
        if not self.initial_lr > 0:
            raise ConfigError("TrainConfig.initial_lr must be positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("TrainConfig.holdout_fraction must lie in (0, 1)")
        if self.kl_mode not in ("analytic", "paper_literal"):
            raise ConfigError(f"unknown kl_mode {self.kl_mode!r}")


@dataclass
class HeadConstants:
    """Output scaling of the encoder heads.

    ``c_mean`` multiplies the natural angular amplitude (``N`` for ``h_vir``,
    ``M N`` for ``G_vir``).  ``c_b_F``/``c_b_G`` are the softmax budgets and
    default to ``N`` and ``M N``.  ``kappa`` is the span of the Gamma shape head.
    """

    c_mean: float = 1.0
    c_b_F: float = None
    c_b_G: float = None
    kappa: float = 10.0

    def resolved(self, cfg):
        return HeadConstants(
            c_mean=self.c_mean,
            c_b_F=float(cfg.N) if self.c_b_F is None else self.c_b_F,
            c_b_G=float(cfg.M * cfg.N) if self.c_b_G is None else self.c_b_G,
            kappa=self.kappa,
        )


@dataclass
class Scenario:
    """Quantities fixed for a scenario: the pilot plan and the ``mode2`` clusters."""

    cfg: object
    seed: int
    plan: object
    clusters: np.ndarray


def make_scenario(cfg, seed):
    rng = derived_rng(seed, TAG_SCENARIO)
    plan = make_pilot_plan(cfg, rng)
    clusters = draw_clusters(cfg, rng)
    return Scenario(cfg=cfg, seed=int(seed), plan=plan, clusters=clusters)


def true_spectrum(real, cfg):
    """Angular spectrum of the ground-truth UE-RIS covariance."""
    return spectrum_from_ccm(ccm_ground_truth(real, cfg))


# -- datasets -----------------------------------------------------------------


def _jce_sample(scn, rng):
    real = gen_channels(scn.cfg, rng, scn.clusters)
    Y = rx_train_jce(real, scn.plan, scn.cfg.rho, rng)
    return real.h, real.G, Y


def _jcce_sample(scn, rng):
    real = gen_channels(scn.cfg, rng, scn.clusters)
    d = true_spectrum(real, scn.cfg)
    Ytil = rx_train_jcce(real.G, d, scn.plan, scn.cfg, rng)
    return d, real.G, Ytil


def generate_dataset(kind, scn, size, seed, threads=1, tag=TAG_DATA):
    """Draw ``size`` independent training signals with their ground truth.

    Sample ``i`` uses its own stream, so the result does not depend on
    ``threads``.

    Returns
    -------
    dict
        JCE: ``h`` (size, N), ``G`` (size, M, N), ``Y`` (size, M, N_p).
        JCCE: ``d`` (size, N), ``G`` (size, M, N), ``Ytil`` (size, M N_p, N_b).
    """
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}")
    draw = _jce_sample if kind == "JCE" else _jcce_sample
    keys = ("h", "G", "Y") if kind == "JCE" else ("d", "G", "Ytil")

    def one(i):
        return draw(scn, derived_rng(seed, tag, i))

    if threads > 1 and size > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(size)))
    else:
        rows = [one(i) for i in range(size)]
    cfg = scn.cfg
    if not rows:
        shapes = {"h": (cfg.N,), "d": (cfg.N,), "G": (cfg.M, cfg.N), "Y": (cfg.M, cfg.N_p),
                  "Ytil": (cfg.M * cfg.N_p, cfg.N_b)}
        return {k: np.zeros((0,) + shapes[k], dtype=float if k == "d" else complex) for k in keys}
    return {k: np.stack([r[j] for r in rows]) for j, k in enumerate(keys)}


def features(kind, signal):
    """Encoder input rows for a batch of JCE ``Y`` or JCCE ``Ytil``."""
    if kind == "JCE":
        return split_complex(signal, batched=True)
    return split_complex(preprocess_jcce(signal), batched=True)


# -- models -------------------------------------------------------------------


def build_encoders(kind, cfg, heads, rng, hidden=(300, 300), keep=0.9):
    """Encoder F (UE-RIS quantity) and Encoder G (RIS-BS channel)."""
    hc = heads.resolved(cfg)
    M, N, L = cfg.M, cfg.N, cfg.N_p
    if kind == "JCE":
        n_in = 2 * M * L
        f_heads = [
            HeadSpec("m", "mean_tanh", N, hc.c_mean * N),
            HeadSpec("b", "scale_softmax", N, hc.c_b_F),
        ]
    else:
        n_in = 2 * (M * L) ** 2
        f_heads = [HeadSpec("k", "shape_sigmoid", N, hc.kappa)]
    g_heads = [
        HeadSpec("Mm", "mean_tanh", M * N, hc.c_mean * M * N),
        HeadSpec("B", "scale_softmax", M * N, hc.c_b_G),
    ]
    return {
        "F": Encoder(n_in, f_heads, hidden=hidden, keep=keep, rng=rng),
        "G": Encoder(n_in, g_heads, hidden=hidden, keep=keep, rng=rng),
    }


def _floor(x):
    return np.maximum(x, SCALE_FLOOR), (x >= SCALE_FLOOR).astype(float)


class Objective:
    """Batched ELBO of one estimator, from encoder outputs to head gradients.

    ``loss`` returns the batch-mean loss, the per-sample loss, and the
    gradients of the batch-mean loss with respect to every head output.
    """

    def __init__(self, kind, scn, prior, mc_samples, mc_scsi=TRAIN_MC_SCSI, kl_mode="analytic"):
        self.kind = kind
        self.cfg = scn.cfg
        self.plan = scn.plan
        self.prior = prior
        self.D = mc_samples
        self.S = mc_scsi
        self.kl_mode = kl_mode
        if kind == "JCE":
            self.lik = JceLikelihood(scn.plan, scn.cfg.M, scn.cfg.rho)
        self.Phi = scn.plan.Phi * scn.plan.x[None, :]

    def draw_noise(self, batch, rng, outputs=None):
        """Common random numbers for one loss evaluation.

        JCCE Gamma draws depend on the current shapes, so ``outputs`` is
        required for that estimator.
        """
        M, N = self.cfg.M, self.cfg.N
        if self.kind == "JCE":
            # one set of draws is shared by the whole batch
            return {
                "zeta_h": standard_cl(rng, (self.D, 1, N)),
                "zeta_G": standard_cl(rng, (self.D, 1, M, N)),
            }
        k = np.broadcast_to(outputs["F"]["k"], (self.S, batch, N))
        return {
            "d": np.maximum(rng.standard_gamma(k), np.finfo(float).tiny),
            "zeta_G": standard_cl(rng, (self.S, batch, M, N)),
            "zeta_kl": standard_cl(rng, (self.D, 1, M, N)),
        }

    def loss(self, outputs, signal, noise):
        M, N = self.cfg.M, self.cfg.N
        batch = signal.shape[0]
        fo, go = outputs["F"], outputs["G"]
        Mm = go["Mm"].reshape(batch, M, N)
        B, B_mask = _floor(go["B"].reshape(batch, M, N))
        if self.kind == "JCE":
            b, b_mask = _floor(fo["b"])
            p = AuxParamsJCE(fo["m"], b, Mm, B)
            l1 = kl_laplace_mc(p.m, p.b, self.prior.alpha_h, noise["zeta_h"])
            l2 = kl_laplace_mc(p.Mm, p.B, self.prior.alpha_G, noise["zeta_G"])
            l3 = self.lik(p, signal)
            value, g = total_loss(
                (l1[0], {"m": l1[1], "b": l1[2]}), (l2[0], {"Mm": l2[1], "B": l2[2]}), l3
            )
            f_grads = {"m": g["m"] / batch, "b": g["b"] * b_mask / batch}
        else:
            k = fo["k"]
            p = AuxParamsJCCE(k, Mm, B)
            # "d" holds rejection-sampler draws; "u" replays draws through the quantile
            d = noise["d"] if "d" in noise else gamma_quantile(noise["u"], k[None])
            dd_dk = implicit_dxdk(d, k[None])
            N_b = signal.shape[-1]
            S_y = signal @ np.swapaxes(signal.conj(), -1, -2)
            l1 = l1_scsi(k, self.prior.alpha_d, self.kl_mode)
            l2 = kl_laplace_mc(p.Mm, p.B, self.prior.alpha_G, noise["zeta_kl"])
            l3 = l3_scsi_samples(p, d, dd_dk, noise["zeta_G"], S_y, N_b, self.Phi, self.cfg.rho)
            value, g = total_loss(l1, (l2[0], {"Mm": l2[1], "B": l2[2]}), l3)
            f_grads = {"k": g["k"] / batch}
        g_grads = {
            "Mm": g["Mm"].reshape(batch, M * N) / batch,
            "B": (g["B"] * B_mask).reshape(batch, M * N) / batch,
        }
        return float(np.mean(value)), value, {"F": f_grads, "G": g_grads}


def forward_all(encoders, x, train=False, rng=None, freeze_bn=False, keep=None):
    outs, caches = {}, {}
    for name in ("F", "G"):
        outs[name], caches[name] = encoders[name].forward(
            x, train=train, rng=rng, freeze_bn=freeze_bn, keep=keep
        )
    return outs, caches


@dataclass
class TrainResult:
    encoders: dict
    curve: list = field(default_factory=list)
    best_step: int = 0
    steps: int = 0


def _signal_key(kind):
    return "Y" if kind == "JCE" else "Ytil"


def holdout_loss(obj, encoders, x, signal, seed, batch_size):
    """Eval-mode loss over ``signal`` with a fixed noise stream."""
    rng = derived_rng(seed, TAG_HOLDOUT)
    total = 0.0
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        outs, _ = forward_all(encoders, x[sl])
        noise = obj.draw_noise(len(x[sl]), rng, outs)
        total += float(np.sum(obj.loss(outs, signal[sl], noise)[1]))
    return total / len(x)


def train_amortized(kind, scn, tc, seed, prior=None, heads=None, dataset=None, threads=1,
                    hidden=(300, 300), keep=0.9, callback=None):
    """Fit Encoder F and Encoder G for one scenario by stochastic ELBO ascent.

    Adam starts at ``tc.initial_lr``; the rate halves whenever the held-out
    loss has not improved for ``tc.plateau_patience`` evaluations, and
    training stops after ``tc.max_lr_halvings`` halvings or ``tc.max_steps``
    steps.  The returned encoders are the ones with the lowest held-out loss.

    Raises
    ------
    TrainingFailure
        If the training loss becomes non-finite.
    """
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}")
    prior = prior or PriorParams()
    heads = heads or HeadConstants()
    encoders = build_encoders(kind, scn.cfg, heads, derived_rng(seed, TAG_INIT), hidden, keep)
    if dataset is None:
        dataset = generate_dataset(kind, scn, tc.dataset_size, seed, threads)
    signal = dataset[_signal_key(kind)]
    n = len(signal)
    x = features(kind, signal)
    n_hold = max(1, int(round(tc.holdout_fraction * n))) if n > 1 else 0
    x_tr, s_tr = x[: n - n_hold], signal[: n - n_hold]
    x_ho, s_ho = x[n - n_hold :], signal[n - n_hold :]
    if n_hold == 0:
        x_ho, s_ho = x_tr, s_tr
    obj = Objective(kind, scn, prior, tc.mc_samples, tc.mc_scsi, tc.kl_mode)
    result = TrainResult(encoders=encoders)
    if tc.max_steps == 0:
        return result

    rng = derived_rng(seed, TAG_TRAIN)
    states = {name: AdamState() for name in encoders}
    lr = tc.initial_lr
    best = holdout_loss(obj, encoders, x_ho, s_ho, seed, tc.batch_size)
    best_enc = {k: e.copy() for k, e in encoders.items()}
    result.curve.append((0, float("nan"), best))
    stale, halvings = 0, 0
    order = rng.permutation(len(x_tr))
    cursor = 0
    batch = min(tc.batch_size, len(x_tr))
    running = []
    for step in range(1, tc.max_steps + 1):
        if cursor + batch > len(order):
            order, cursor = rng.permutation(len(x_tr)), 0
        idx = order[cursor : cursor + batch]
        cursor += batch
        outs, caches = forward_all(encoders, x_tr[idx], train=True, rng=rng)
        noise = obj.draw_noise(batch, rng, outs)
        value, _, head_grads = obj.loss(outs, s_tr[idx], noise)
        if not np.isfinite(value):
            raise TrainingFailure("training loss is not finite", step=step)
        for name, enc in encoders.items():
            grads = enc.backward(caches[name], head_grads[name])
            adam_step(enc.params, grads, states[name], lr)
        running.append(value)
        result.steps = step
        if step % tc.eval_every == 0 or step == tc.max_steps:
            ho = holdout_loss(obj, encoders, x_ho, s_ho, seed, tc.batch_size)
            if not np.isfinite(ho):
                raise TrainingFailure("held-out loss is not finite", step=step)
            result.curve.append((step, float(np.mean(running)), ho))
            running = []
            if callback is not None:
                callback(step, result.curve[-1], lr)
            if ho < best:
                best, stale = ho, 0
                best_enc = {k: e.copy() for k, e in encoders.items()}
                result.best_step = step
            else:
                stale += 1
                if stale >= tc.plateau_patience:
                    halvings += 1
                    if halvings > tc.max_lr_halvings:
                        break
                    lr *= 0.5
                    stale = 0
    result.encoders = best_enc
    return result


# -- MAP extraction -----------------------------------------------------------


@dataclass
class EstimateJCE:
    h_vir_hat: np.ndarray
    G_vir_hat: np.ndarray
    h_hat: np.ndarray
    G_hat: np.ndarray


@dataclass
class EstimateJCCE:
    d_hat: np.ndarray
    G_vir_hat: np.ndarray
    G_hat: np.ndarray
    R_h_hat: np.ndarray


def vir_to_spatial_h(h_vir):
    N = np.shape(h_vir)[-1]
    return h_vir @ dft_matrix(N).conj() / N


def spatial_to_vir_h(h):
    return h @ dft_matrix(np.shape(h)[-1])


def _infer(encoders, x):
    try:
        outs, _ = forward_all(encoders, x)
    except ContractViolation as exc:
        raise ContractViolation(f"signal does not match the trained scenario: {exc}") from exc
    return outs


def _g_shape(encoders, n):
    return encoders["G"].heads[0].out // n, n


def estimate_from_means(h_vir, G_vir):
    """JCE estimate from Laplace means (the posterior modes)."""
    return EstimateJCE(h_vir, G_vir, vir_to_spatial_h(h_vir), vir_to_spatial_G(G_vir))


def estimate_jce(encoders, Y):
    """MAP channels from a JCE training signal ``Y`` (``M x N_p`` or batched)."""
    Y = np.asarray(Y)
    single = Y.ndim == 2
    Yb = Y[None] if single else Y
    outs = _infer(encoders, features("JCE", Yb))
    m = outs["F"]["m"]
    Gv = outs["G"]["Mm"].reshape((len(Yb),) + _g_shape(encoders, m.shape[1]))
    est = estimate_from_means(m, Gv)
    if single:
        return EstimateJCE(*(getattr(est, f.name)[0] for f in fields(EstimateJCE)))
    return est


def estimate_from_shapes(k, G_vir):
    d = np.maximum(np.asarray(k, dtype=float) - 1.0, 0.0)
    return EstimateJCCE(d, G_vir, vir_to_spatial_G(G_vir), ccm_from_d(d))


def estimate_jcce(encoders, Ytil):
    """MAP spectrum and RIS-BS channel from a stacked JCCE signal."""
    Ytil = np.asarray(Ytil)
    single = Ytil.ndim == 2
    Yb = Ytil[None] if single else Ytil
    outs = _infer(encoders, features("JCCE", Yb))
    k = outs["F"]["k"]
    Gv = outs["G"]["Mm"].reshape((len(Yb),) + _g_shape(encoders, k.shape[1]))
    est = estimate_from_shapes(k, Gv)
    if single:
        return EstimateJCCE(*(getattr(est, f.name)[0] for f in fields(EstimateJCCE)))
    return est


def train_config_dict(tc):
    return asdict(tc)


__all__ = [
    "EstimateJCCE",
    "EstimateJCE",
    "HeadConstants",
    "Objective",
    "Scenario",
    "TrainConfig",
    "TrainResult",
    "build_encoders",
    "derived_rng",
    "estimate_jcce",
    "estimate_jce",
    "features",
    "generate_dataset",
    "make_scenario",
    "spatial_to_vir_G",
    "spatial_to_vir_h",
    "train_amortized",
    "vir_to_spatial_G",
    "vir_to_spatial_h",
]
