"""Amortized encoder networks with hand-written reverse-mode gradients.

Each encoder is ``input -> 300 -> 300 -> heads``.  Every fully connected
layer is fed by batch normalization followed by inverted dropout (dropout is
skipped before the output layer); hidden layers apply ReLU.  The output
vector is cut into heads:

``mean_tanh``      ``c * tanh(z)`` on ``2*out`` units, reassembled as ``out``
                   complex values (real parts first, then imaginary parts).
``scale_softmax``  ``c_b * softmax(z)``, strictly positive, summing to ``c_b``.
``shape_sigmoid``  ``1 + kappa * sigmoid(z)``, in ``(1, 1 + kappa)``.

Gradients for complex head outputs use the convention
``dL/dRe + 1j * dL/dIm``.
"""

from dataclasses import asdict, dataclass
import json
import struct

import numpy as np

from risvi.errors import ContractViolation, MissingArtifactError

HEAD_KINDS = ("mean_tanh", "scale_softmax", "shape_sigmoid")
BN_EPS = 1e-5
CHECKPOINT_MAGIC = b"RISVICKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HeadSpec:
    name: str
    kind: str
    out: int
    const: float

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ContractViolation(f"unknown head kind {self.kind!r}")
        if self.out < 1 or not self.const > 0:
            raise ContractViolation(f"bad head spec {self}")

    @property
    def width(self):
        return 2 * self.out if self.kind == "mean_tanh" else self.out


class Encoder:
    """Two-hidden-layer perceptron with batch norm, dropout and multiple heads.

    Parameters
    ----------
    n_in : int
        Input width.
    heads : sequence of HeadSpec
    hidden : tuple of int
    keep : float
        Dropout keep probability (train mode only).
    momentum : float
        Running-statistics momentum, ``running = momentum * running + (1 - momentum) * batch``.
    rng : numpy.random.Generator, optional
        Initializer stream; all-zero weights when omitted.
    out_scale : float
        Extra factor on the output layer's initial weights, so that the heads
        start near their neutral point (zero means, uniform scales).
    """

    def __init__(self, n_in, heads, hidden=(300, 300), keep=0.9, momentum=0.9, rng=None,
                 out_scale=0.01):
        self.n_in = int(n_in)
        self.heads = tuple(heads)
        self.hidden = tuple(int(h) for h in hidden)
        self.keep = float(keep)
        self.momentum = float(momentum)
        self.out_scale = float(out_scale)
        widths = (self.n_in,) + self.hidden + (sum(h.width for h in self.heads),)
        self.widths = widths
        self.params = {}
        self.buffers = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"bn{i}.gamma"] = np.ones(fan_in)
            self.params[f"bn{i}.beta"] = np.zeros(fan_in)
            bound = 1.0 / np.sqrt(fan_in)
            if i == len(widths) - 2:
                bound *= out_scale
            if rng is None:
                self.params[f"fc{i}.W"] = np.zeros((fan_in, fan_out))
                self.params[f"fc{i}.b"] = np.zeros(fan_out)
            else:
                self.params[f"fc{i}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
                self.params[f"fc{i}.b"] = rng.uniform(-bound, bound, fan_out)
            self.buffers[f"bn{i}.mean"] = np.zeros(fan_in)
            self.buffers[f"bn{i}.var"] = np.ones(fan_in)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def copy(self):
        other = Encoder.__new__(Encoder)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def architecture(self):
        return {
            "n_in": self.n_in,
            "hidden": list(self.hidden),
            "keep": self.keep,
            "momentum": self.momentum,
            "out_scale": self.out_scale,
            "heads": [asdict(h) for h in self.heads],
        }

    # -- forward / backward -------------------------------------------------

    def forward(self, x, train=False, rng=None, freeze_bn=False, keep=None):
        """Evaluate the heads.

        Parameters
        ----------
        x : ndarray, shape (batch, n_in)
        train : bool
            Use batch statistics (unless ``freeze_bn``), update running
            statistics, and apply dropout.
        rng : numpy.random.Generator
            Dropout stream; required when training with ``keep < 1``.
        keep : float, optional
            Overrides the keep probability for this call.

        Returns
        -------
        outputs : dict
            Head name to array, complex for mean heads.
        cache : dict
            Intermediates for :meth:`backward`.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ContractViolation(f"encoder expects (batch, {self.n_in}) input, got {x.shape}")
        keep = self.keep if keep is None else keep
        use_batch = train and not freeze_bn
        layers = []
        a = x
        for i in range(self.n_layers):
            gamma, beta = self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"]
            if use_batch:
                mu = a.mean(axis=0)
                var = a.var(axis=0)
                rm, rv = self.buffers[f"bn{i}.mean"], self.buffers[f"bn{i}.var"]
                rm *= self.momentum
                rm += (1.0 - self.momentum) * mu
                rv *= self.momentum
                rv += (1.0 - self.momentum) * var
            else:
                mu, var = self.buffers[f"bn{i}.mean"], self.buffers[f"bn{i}.var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv_std
            bn_out = gamma * xhat + beta
            mask = None
            if train and keep < 1.0 and i < self.n_layers - 1:
                if rng is None:
                    raise ContractViolation("dropout needs a random stream")
                mask = (rng.uniform(size=bn_out.shape) < keep) / keep
                fc_in = bn_out * mask
            else:
                fc_in = bn_out
            z = fc_in @ self.params[f"fc{i}.W"] + self.params[f"fc{i}.b"]
            layers.append({"xhat": xhat, "inv_std": inv_std, "mask": mask, "fc_in": fc_in, "z": z})
            a = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        outputs, head_cache = self._heads(a)
        return outputs, {"layers": layers, "heads": head_cache, "batch_stats": use_batch}

    def _heads(self, z):
        outputs, cache = {}, {}
        start = 0
        for head in self.heads:
            seg = z[:, start : start + head.width]
            start += head.width
            if head.kind == "mean_tanh":
                t = np.tanh(seg)
                out = head.const * (t[:, : head.out] + 1j * t[:, head.out :])
                cache[head.name] = t
            elif head.kind == "scale_softmax":
                e = np.exp(seg - seg.max(axis=1, keepdims=True))
                s = e / e.sum(axis=1, keepdims=True)
                out = head.const * s
                cache[head.name] = s
            else:
                s = 0.5 * (1.0 + np.tanh(0.5 * seg))
                out = 1.0 + head.const * s
                cache[head.name] = s
            outputs[head.name] = out
        return outputs, cache

    def backward(self, cache, grads):
        """Parameter gradients of a scalar loss given head-output gradients.

        ``grads`` maps head names to ``dL/d(output)``; missing heads count as
        zero.  Returns a dict keyed like :attr:`params`.
        """
        layers = cache["layers"]
        batch = layers[0]["xhat"].shape[0]
        dz_parts = []
        for head in self.heads:
            g = grads.get(head.name)
            c = cache["heads"][head.name]
            if g is None:
                dz_parts.append(np.zeros((batch, head.width)))
                continue
            if head.kind == "mean_tanh":
                g = np.asarray(g, dtype=complex)
                dz_parts.append(head.const * np.concatenate([g.real, g.imag], axis=1) * (1.0 - c**2))
            elif head.kind == "scale_softmax":
                b = head.const * c
                inner = np.sum(g * c, axis=1, keepdims=True)
                dz_parts.append(b * (g - inner))
            else:
                dz_parts.append(g * head.const * c * (1.0 - c))
        dz = np.concatenate(dz_parts, axis=1)

        out = {}
        for i in reversed(range(self.n_layers)):
            layer = layers[i]
            if i < self.n_layers - 1:
                dz = dz * (layer["z"] > 0)
            out[f"fc{i}.W"] = layer["fc_in"].T @ dz
            out[f"fc{i}.b"] = dz.sum(axis=0)
            d_fc_in = dz @ self.params[f"fc{i}.W"].T
            d_bn = d_fc_in if layer["mask"] is None else d_fc_in * layer["mask"]
            xhat = layer["xhat"]
            out[f"bn{i}.gamma"] = np.sum(d_bn * xhat, axis=0)
            out[f"bn{i}.beta"] = d_bn.sum(axis=0)
            dxhat = d_bn * self.params[f"bn{i}.gamma"]
            if cache["batch_stats"]:
                dz = layer["inv_std"] / batch * (
                    batch * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
                )
            else:
                dz = dxhat * layer["inv_std"]
        return out


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = None
    v: dict = None


def adam_step(params, grads, state, lr):
    """In-place bias-corrected Adam update; returns ``params``."""
    if state.m is None:
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- checkpoints -------------------------------------------------------------


def _tensor_order(enc):
    return [("params", k) for k in enc.params] + [("buffers", k) for k in enc.buffers]


def save_checkpoint(path, encoders, meta=None):
    """Write named encoders to a versioned binary file.

    Layout: magic ``RISVICKP``, ``uint32`` version, ``uint64`` header length,
    a JSON header with architectures, tensor shapes and ``meta``, then every
    tensor as little-endian float64 in header order.
    """
    header = {"meta": meta or {}, "encoders": {}}
    payload = []
    for name, enc in encoders.items():
        tensors = []
        for group, key in _tensor_order(enc):
            arr = getattr(enc, group)[key]
            tensors.append({"group": group, "key": key, "shape": list(arr.shape)})
            payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        header["encoders"][name] = {"architecture": enc.architecture(), "tensors": tensors}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def read_checkpoint_header(path):
    try:
        with open(path, "rb") as fh:
            if fh.read(8) != CHECKPOINT_MAGIC:
                raise ContractViolation(f"{path} is not a checkpoint file")
            version, length = struct.unpack("<IQ", fh.read(12))
            if version != CHECKPOINT_VERSION:
                raise ContractViolation(f"unsupported checkpoint version {version}")
            return json.loads(fh.read(length)), fh.tell()
    except FileNotFoundError as exc:
        raise MissingArtifactError(f"checkpoint not found: {path}") from exc


def load_checkpoint(path):
    """Return ``(encoders, meta)`` from :func:`save_checkpoint` output."""
    header, offset = read_checkpoint_header(path)
    with open(path, "rb") as fh:
        fh.seek(offset)
        data = fh.read()
    pos = 0
    encoders = {}
    for name, spec in header["encoders"].items():
        arch = spec["architecture"]
        enc = Encoder(
            arch["n_in"],
            [HeadSpec(**h) for h in arch["heads"]],
            hidden=arch["hidden"],
            keep=arch["keep"],
            momentum=arch["momentum"],
            out_scale=arch["out_scale"],
        )
        for t in spec["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(t["shape"])
            getattr(enc, t["group"])[t["key"]] = arr.astype(float)
            pos += 8 * n
        encoders[name] = enc
    return encoders, header["meta"]
