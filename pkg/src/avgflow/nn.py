"""Multilayer perceptrons, affine coupling flows and their checkpoints.

Parameters are always flat float64 vectors. A leading batch of parameter
vectors (shape ``(..., P)``) is accepted everywhere, which lets one call push
latent draws through many different flows at once.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

ACTIVATIONS = {
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "relu": ad.relu,
}

SCALE_CLAMP = 5.0


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least input and output widths")
        if any(w < 0 for w in widths) or any(w < 1 for w in widths[1:-1]):
            raise ConfigError(f"invalid MLP widths {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def n_params(self):
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layout(self):
        """Yield ``(w_offset, b_offset, w_in, w_out)`` for each layer."""
        off = 0
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            yield off, off + w_in * w_out, w_in, w_out
            off += w_in * w_out + w_out

    def init_params(self, rng, zero_last=False):
        params = np.zeros(self.n_params)
        for i, (wo, bo, w_in, w_out) in enumerate(self.layout()):
            if zero_last and i == self.n_layers - 1:
                continue
            limit = np.sqrt(6.0 / max(w_in + w_out, 1))
            params[wo:bo] = rng.uniform(-limit, limit, size=w_in * w_out)
        return params

    def to_dict(self):
        return {"widths": list(self.widths), "activation": self.activation}


def _is_tensor(*xs):
    return any(isinstance(x, ad.Tensor) for x in xs)


def _slice_last(params, start, stop):
    if isinstance(params, ad.Tensor):
        return ad.getitem(params, (Ellipsis, slice(start, stop)))
    return params[..., start:stop]


def mlp_apply(spec, params, x):
    """Evaluate the network; hidden layers use ``spec.activation``, the last is linear."""
    if x.shape[-1] != spec.widths[0]:
        raise ConfigError(f"MLP input width {x.shape[-1]} does not match spec {spec.widths[0]}")
    if params.shape[-1] != spec.n_params:
        raise ConfigError(f"MLP expects {spec.n_params} parameters, got {params.shape[-1]}")
    act = ACTIVATIONS[spec.activation]
    lead = tuple(params.shape[:-1])
    h = x
    for i, (wo, bo, w_in, w_out) in enumerate(spec.layout()):
        w = ad.reshape(_slice_last(params, wo, bo), lead + (w_in, w_out))
        b = _slice_last(params, bo, bo + w_out)
        h = ad.linear(h, w, b)
        if i < spec.n_layers - 1:
            h = act(h)
    if not _is_tensor(params, x) and isinstance(h, ad.Tensor):
        return h.value
    return h


@dataclass(frozen=True)
class FlowSpec:
    """Stack of affine coupling layers on R^dim.

    Layer ``k`` conditions on the index set ``a_k`` and transforms ``b_k``.
    Even layers condition on the first ``dim // 2`` coordinates, odd layers on
    the rest, so with two or more layers every coordinate gets transformed.
    Each of the scale and shift nets has one hidden layer of width ``hidden``.
    """

    dim: int
    n_layers: int = 2
    hidden: int = 5
    activation: str = "tanh"

    def __post_init__(self):
        if self.dim < 1 or self.n_layers < 0 or self.hidden < 1:
            raise ConfigError(f"invalid flow shape dim={self.dim} layers={self.n_layers} hidden={self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    def mask(self, k):
        half = self.dim // 2
        first, second = np.arange(half), np.arange(half, self.dim)
        return (first, second) if k % 2 == 0 else (second, first)

    def net_spec(self, k):
        a, b = self.mask(k)
        return MlpSpec((len(a), self.hidden, len(b)), self.activation)

    def layer_layout(self):
        """Yield ``(k, a, b, net_spec, s_offset, t_offset)`` per layer."""
        off = 0
        for k in range(self.n_layers):
            a, b = self.mask(k)
            net = self.net_spec(k)
            yield k, a, b, net, off, off + net.n_params
            off += 2 * net.n_params

    @property
    def n_params(self):
        return sum(2 * self.net_spec(k).n_params for k in range(self.n_layers))

    def init_params(self, rng):
        """Glorot-uniform hidden weights, zero biases, zero output layers (identity map)."""
        parts = []
        for k in range(self.n_layers):
            net = self.net_spec(k)
            parts.append(net.init_params(rng, zero_last=True))
            parts.append(net.init_params(rng, zero_last=True))
        return np.concatenate(parts) if parts else np.zeros(0)

    def affine_init(self, params, shift, log_scale):
        """Set output biases so the flow starts as ``z -> shift + exp(log_scale) * z``.

        Only valid when the output-layer weights are zero (as after
        :meth:`init_params`). Each coordinate's bias is placed in the last layer
        that transforms it, so earlier layers stay the identity.
        """
        params = np.array(params, dtype=np.float64)
        shift = np.broadcast_to(np.asarray(shift, float), (self.dim,))
        log_scale = np.broadcast_to(np.asarray(log_scale, float), (self.dim,))
        if np.any(np.abs(log_scale) > SCALE_CLAMP):
            raise ConfigError(f"initial log-scale must lie within +-{SCALE_CLAMP}")
        done = np.zeros(self.dim, dtype=bool)
        for k, a, b, net, s_off, t_off in reversed(list(self.layer_layout())):
            last_bias = net.n_params - len(b)
            todo = [(j, i) for j, i in enumerate(b) if not done[i]]
            for j, i in todo:
                params[s_off + last_bias + j] = log_scale[i]
                params[t_off + last_bias + j] = shift[i]
                done[i] = True
        if not np.all(done):
            raise ConfigError("flow has coordinates that no layer transforms")
        return params

    def to_dict(self):
        return {"dim": self.dim, "n_layers": self.n_layers, "hidden": self.hidden,
                "activation": self.activation}


def _check_finite(value, k, what):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what} in coupling layer {k}")


def _coupling_nets(spec, params, k, net, s_off, t_off, y_a):
    s = mlp_apply(net, _slice_last(params, s_off, s_off + net.n_params), y_a)
    t = mlp_apply(net, _slice_last(params, t_off, t_off + net.n_params), y_a)
    s = ad.clip(s, -SCALE_CLAMP, SCALE_CLAMP)
    return s, t


def _run(spec, params, z, inverse):
    if params.shape[-1] != spec.n_params:
        raise ConfigError(f"flow expects {spec.n_params} parameters, got {params.shape[-1]}")
    if z.shape[-1] != spec.dim:
        raise ConfigError(f"flow input width {z.shape[-1]} does not match dim {spec.dim}")
    tensor_mode = _is_tensor(params, z)
    params_t = params if isinstance(params, ad.Tensor) else ad.Tensor(params)
    y = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    batch = np.broadcast_shapes(tuple(z.shape[:-1]), tuple(params.shape[:-1]))
    logdet = ad.Tensor(np.zeros(batch))
    layers = list(spec.layer_layout())
    if inverse:
        layers = layers[::-1]
    for k, a, b, net, s_off, t_off in layers:
        if len(b) == 0:
            continue
        y_a = ad.take(y, a)
        y_b = ad.take(y, b)
        s, t = _coupling_nets(spec, params_t, k, net, s_off, t_off, y_a)
        if inverse:
            y_b = (y_b - t) * ad.exp(-s)
            logdet = logdet - ad.sum_(s, axis=-1)
        else:
            y_b = y_b * ad.exp(s) + t
            logdet = logdet + ad.sum_(s, axis=-1)
        _check_finite(y_b.value, k, "output")
        y_a = ad.broadcast_to(y_a, batch + (len(a),))
        order = np.argsort(np.concatenate([a, b]))
        y = ad.take(ad.concat([y_a, y_b], axis=-1), order)
    if y.shape[:-1] != batch:
        y = ad.broadcast_to(y, batch + (spec.dim,))
    if tensor_mode:
        return y, logdet
    return y.value, logdet.value


def flow_forward(spec, params, z):
    """Push ``z`` through the flow. Returns ``(y, logdet)`` with ``logdet`` of shape ``z.shape[:-1]``.

    Works on ndarrays or on :class:`~avgflow.autodiff.Tensor` inputs, in which
    case the result is recorded for differentiation.
    """
    if not _is_tensor(params, z):
        with ad.no_grad():
            return _run(spec, np.asarray(params, float), np.asarray(z, float), inverse=False)
    return _run(spec, params, z, inverse=False)


def flow_inverse(spec, params, y):
    """Exact inverse. Returns ``(z, logdet_inv)`` where ``logdet_inv = -logdet(z)``."""
    if not _is_tensor(params, y):
        with ad.no_grad():
            return _run(spec, np.asarray(params, float), np.asarray(y, float), inverse=True)
    return _run(spec, params, y, inverse=True)


def standard_normal_logpdf(z):
    z = np.asarray(z, float)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * np.log(2.0 * np.pi)


@dataclass
class CouplingFlow:
    """A flow spec bundled with one parameter vector."""

    spec: FlowSpec
    params: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.params is None:
            self.params = np.zeros(self.spec.n_params)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ConfigError(f"flow expects {self.spec.n_params} parameters, got {self.params.shape}")

    def forward(self, z):
        return flow_forward(self.spec, self.params, z)

    def inverse(self, y):
        return flow_inverse(self.spec, self.params, y)

    def log_density(self, y):
        z, logdet_inv = self.inverse(y)
        return standard_normal_logpdf(z) + logdet_inv


# checkpoints ----------------------------------------------------------------

MAGIC = b"AVGFLOW\x00"
FORMAT_VERSION = 1


def spec_descriptor(spec):
    if isinstance(spec, FlowSpec):
        masks = [[spec.mask(k)[0].tolist(), spec.mask(k)[1].tolist()] for k in range(spec.n_layers)]
        return {"kind": "coupling_flow", **spec.to_dict(), "masks": masks}
    if isinstance(spec, MlpSpec):
        return {"kind": "mlp", **spec.to_dict()}
    raise TypeError(f"cannot describe {type(spec).__name__}")


def spec_from_descriptor(desc):
    kind = desc.get("kind")
    if kind == "coupling_flow":
        return FlowSpec(desc["dim"], desc["n_layers"], desc["hidden"], desc["activation"])
    if kind == "mlp":
        return MlpSpec(tuple(desc["widths"]), desc["activation"])
    raise ConfigError(f"unknown checkpoint kind {kind!r}")


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ConfigError(f"checkpoint expects {spec.n_params} parameters, got {params.shape}")
    desc = json.dumps(spec_descriptor(spec), sort_keys=True, separators=(",", ":")).encode()
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(desc)) + desc
    return header + params.astype("<f8").tobytes()


def decode_checkpoint(data):
    if data[:len(MAGIC)] != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, n_desc = struct.unpack_from("<II", data, pos)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    pos += 8
    spec = spec_from_descriptor(json.loads(data[pos:pos + n_desc].decode()))
    params = np.frombuffer(data, dtype="<f8", offset=pos + n_desc).astype(np.float64)
    if params.shape != (spec.n_params,):
        raise ConfigError("checkpoint parameter count does not match its descriptor")
    return spec, params


def save_checkpoint(path, spec, params, text_export=True):
    """Write the binary checkpoint atomically, plus ``<path>.txt`` with one value per line."""
    _atomic_write(path, encode_checkpoint(spec, params))
    if text_export:
        lines = "".join(f"{v:.17g}\n" for v in np.asarray(params, float))
        _atomic_write(str(path) + ".txt", lines.encode())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_text_export(path):
    with open(path) as fh:
        return np.array([float(line) for line in fh if line.strip()])
