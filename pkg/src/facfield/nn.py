"""Dense layers, MLPs, the Adam optimizer and the checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tape as T

CHECKPOINT_VERSION = "facfield-ckpt-v1"


class AbortStep(Exception):
    """Raised when a gradient contains NaN; the training loop decides recovery."""


@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"

    def forward_np(self, x):
        return T.ACTIVATIONS_NP[self.activation](x @ self.W.T + self.b)

    def forward(self, x, Wv, bv):
        return T.activate((x @ _transpose(Wv)) + bv, self.activation)


class MLP:
    """Stack of dense layers; weights are plain numpy, bound to a tape per batch."""

    def __init__(self, prefix, dims, hidden_activation, rng, out_dim=None):
        self.prefix = prefix
        self.layers = []
        sizes = list(dims)
        if out_dim is not None:
            sizes = sizes + [out_dim]
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            act = hidden_activation if i < len(sizes) - 2 else "identity"
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            self.layers.append(DenseLayer(W, b, act))

    @property
    def in_dim(self):
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].W.shape[0]

    def named_params(self):
        for i, layer in enumerate(self.layers):
            yield f"{self.prefix}.{i}.W", layer.W
            yield f"{self.prefix}.{i}.b", layer.b

    def set_param(self, name, arr):
        _, idx, which = name.rsplit(".", 2)
        layer = self.layers[int(idx)]
        cur = getattr(layer, which)
        if cur.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{cur.shape} vs {arr.shape}")
        setattr(layer, which, arr.astype(np.float64))

    def forward_np(self, x):
        for layer in self.layers:
            x = layer.forward_np(x)
        return x

    def forward(self, x, bound):
        """x: Value (N, in). bound: dict name -> tape Value."""
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, bound[f"{self.prefix}.{i}.W"],
                              bound[f"{self.prefix}.{i}.b"])
        return x


def _transpose(v: T.Value) -> T.Value:
    data = v.data
    return v.tape._make(data.T, [v], [lambda g: g.T], "transpose")


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scales: dict = field(default_factory=dict)  # per-parameter multiplier


def adam_step(params: dict, grads: dict, state: AdamState):
    """In-place Adam update with bias correction. `grads` may omit names
    (treated as zero gradient)."""
    for name, g in grads.items():
        if g is not None and np.isnan(g).any():
            raise AbortStep(f"NaN gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        lr = state.lr * state.lr_scales.get(name, 1.0)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- checkpoint format ------------------------------------------------------
# [u64 little-endian header length][UTF-8 JSON header][flat little-endian f64]
# header: {"version": ..., "tensors": [{"name","shape","offset"}], "meta": {}}

def save_checkpoint(path, params: dict, meta=None):
    tensors = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        # ascontiguousarray promotes 0-d to 1-d; record the true shape first
        shape = list(arr.shape)
        arr = np.ascontiguousarray(arr)
        tensors.append({"name": name, "shape": shape,
                        "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = json.dumps({"version": CHECKPOINT_VERSION, "tensors": tensors,
                         "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_checkpoint(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version "
                             f"{header.get('version')!r}")
        data = np.frombuffer(f.read(), dtype="<f8")
    params = {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = data[t["offset"]:t["offset"] + size].reshape(t["shape"])
        params[t["name"]] = arr.astype(np.float64).copy()
    return params, header["meta"]
