"""Linear layers with optional spectral normalisation, MLPs, and checkpoints."""

import json
import logging
from pathlib import Path

import numpy as np

from gemkit import autodiff as ad

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gemkit-checkpoint"
CHECKPOINT_VERSION = 1


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class LinearLayer:
    """y = x W^T + b, with W stored as (out, in).

    With ``sn_enabled`` the forward pass divides by sigma = u^T W v, where
    (u, v) track the top singular pair by power iteration. Gradients flow
    through sigma; u and v are constants on the tape.
    """

    def __init__(self, n_in, n_out, rng, sn_enabled=False, init_power_iters=10):
        bound = 1.0 / np.sqrt(n_in)
        self.W = ad.Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)), requires_grad=True)
        self.b = ad.Tensor(rng.uniform(-bound, bound, size=(1, n_out)), requires_grad=True)
        self.sn_enabled = sn_enabled
        self.sn_u = _unit(rng.standard_normal(n_out))
        self.sn_v = _unit(rng.standard_normal(n_in))
        self.degenerate = False
        if sn_enabled:
            for _ in range(init_power_iters):
                self.power_iteration()

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def power_iteration(self):
        W = self.W.data
        v = W.T @ self.sn_u
        if np.linalg.norm(v) == 0:
            self.degenerate = True
            return
        self.sn_v = _unit(v)
        self.sn_u = _unit(W @ self.sn_v)
        self.degenerate = False

    def sigma(self):
        return float(self.sn_u @ self.W.data @ self.sn_v)

    def forward(self, x, update_sn=False):
        if x.shape[1] != self.n_in:
            raise ad.ShapeError(f"linear layer expects {self.n_in} inputs, got {x.shape[1]}")
        y = ad.matmul(x, ad.transpose(self.W))
        if self.sn_enabled:
            if update_sn:
                self.power_iteration()
            if not self.degenerate:
                sigma = ad.matmul(ad.matmul(self.sn_u[None, :], self.W), self.sn_v[:, None])
                y = ad.div(y, sigma)
        return ad.add(y, self.b)

    def parameters(self):
        return {"W": self.W, "b": self.b}


def spectral_normalize(layer):
    """One power-iteration update, then W / sigma_hat (numpy, off-tape).

    Returns (effective_weight, degenerate_flag); a zero matrix comes back
    unchanged with the flag set.
    """
    layer.power_iteration()
    if layer.degenerate or layer.sigma() == 0:
        log.warning("spectral_normalize: zero weight matrix left unnormalised")
        return layer.W.data.copy(), True
    return layer.W.data / layer.sigma(), False


_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}
_ACT_LIPSCHITZ = {"relu": 1.0, "tanh": 1.0}


class Mlp:
    """Stack of linear layers with an activation between them (not after the last)."""

    def __init__(self, dims, rng, activation="tanh", dropout=0.0, sn=False):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        self.activation = activation
        self.dropout_rate = float(dropout)
        self.layers = [LinearLayer(a, b, rng, sn_enabled=sn) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def forward(self, x, train=False, rng=None, update_sn=None):
        x = ad.as_tensor(x)
        act = _ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        if update_sn is None:
            update_sn = train
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, update_sn=update_sn)
            if i < last:
                x = act(x)
                if train and self.dropout_rate > 0:
                    keep = 1.0 - self.dropout_rate
                    mask = (rng.random(x.shape) < keep) / keep
                    x = ad.mul(x, mask)
        return x

    __call__ = forward

    def lipschitz_bound(self, slack=1.0):
        """Product of per-layer bounds (activation Lipschitz times layer norm)."""
        bound = 1.0
        for i, layer in enumerate(self.layers):
            norm = slack if layer.sn_enabled else np.linalg.norm(layer.W.data, 2)
            act = _ACT_LIPSCHITZ[self.activation] if i < len(self.layers) - 1 else 1.0
            bound *= norm * act
        return bound

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, t in layer.parameters().items():
                out[f"{i}.{k}"] = t
        return out

    def sn_state(self):
        return {f"{i}": (layer.sn_u, layer.sn_v) for i, layer in enumerate(self.layers) if layer.sn_enabled}


class HeadSet:
    """K evidential heads with identical (d -> C) shapes."""

    def __init__(self, k, dims, rngs, activation="tanh", dropout=0.0):
        if k < 1:
            raise ValueError("HeadSet needs K >= 1")
        if len(rngs) != k:
            raise ValueError("one rng per head")
        self.heads = [Mlp(dims, r, activation=activation, dropout=dropout) for r in rngs]

    def __len__(self):
        return len(self.heads)

    def __iter__(self):
        return iter(self.heads)

    def __getitem__(self, k):
        return self.heads[k]

    def logits(self, z, k, temperature=1.0, train=False, rng=None):
        u = self.heads[k].forward(z, train=train, rng=rng)
        if temperature != 1.0:
            u = ad.mul(u, 1.0 / temperature)
        return u

    def parameters(self):
        out = {}
        for k, head in enumerate(self.heads):
            for name, t in head.parameters().items():
                out[f"{k}.{name}"] = t
        return out


def backbone_forward(backbone, x, train=False, rng=None):
    """Features z = f(x)."""
    return backbone.forward(x, train=train, rng=rng)


def energy_forward(energy_net, z, use_tanh=False, desaturation=0.5, train=False, rng=None):
    """Scalar energy per row, (N, 1); higher means less support.

    With ``use_tanh`` the output is tanh(a) in training and tanh(desaturation * a)
    in evaluation.
    """
    a = energy_net.forward(z, train=train, rng=rng)
    if use_tanh:
        if not train:
            a = ad.mul(a, desaturation)
        a = ad.tanh(a)
    return a


def gate_forward(gate_net, z, s_hat, s_min=0.1, s_max=0.9, train=False, rng=None):
    """Per-class gates squashed into [s_min, s_max]."""
    h = gate_net.forward(ad.concat_cols(z, s_hat), train=train, rng=rng)
    return ad.add(ad.mul(ad.sigmoid(h), s_max - s_min), s_min)


def router_forward(router_net, z, s_hat, train=False, rng=None):
    """Raw mixture weights softmax(h([z, s_hat])), rows on the simplex."""
    return ad.softmax_rows(router_net.forward(ad.concat_cols(z, s_hat), train=train, rng=rng))


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, modules, extra=None):
    """Write named modules to a JSON checkpoint.

    ``modules`` maps a module name to {param name: Tensor or ndarray}.
    Values are stored row-major with their shape; floats round-trip exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "modules": {},
        "extra": extra or {},
    }
    for mod_name, params in modules.items():
        entry = {}
        for pname, value in params.items():
            arr = value.data if isinstance(value, ad.Tensor) else np.asarray(value, dtype=np.float64)
            entry[pname] = {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
        doc["modules"][mod_name] = entry
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Return (modules, extra) where modules maps name -> {param: ndarray}."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    modules = {}
    for mod_name, entry in doc["modules"].items():
        modules[mod_name] = {
            pname: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
            for pname, v in entry.items()
        }
    return modules, doc.get("extra", {})
