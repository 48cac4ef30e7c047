"""Small feed-forward maps with exact reverse-mode gradients and Adam.

Hidden layers are ReLU, the final layer is affine, and an optional residual
connection adds the raw input to the output (requires equal input/output
widths). ReLU' at exactly 0 is taken as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ForwardCache:
    layer_inputs: list[np.ndarray]
    preactivations: list[np.ndarray]
    batch: np.ndarray
    param_version: int


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray


@dataclass
class MlpMap:
    """MLP parameters plus the forward cache backward() consumes."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    residual: bool = False
    seed: int | None = None
    step_count: int = 0
    _cache: ForwardCache | None = field(default=None, repr=False)
    _param_version: int = field(default=0, repr=False)

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpMap":
        return MlpMap(list(self.layer_dims), [w.copy() for w in self.weights],
                      [b.copy() for b in self.biases], self.residual,
                      self.seed, self.step_count)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights]
                              + [b.ravel() for b in self.biases])

    def set_flat_params(self, flat: np.ndarray) -> None:
        k = 0
        for w in self.weights:
            w[...] = flat[k:k + w.size].reshape(w.shape)
            k += w.size
        for b in self.biases:
            b[...] = flat[k:k + b.size]
            k += b.size
        self._param_version += 1
        self._cache = None


def _orthonormal(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    # QR of a Gaussian with the R-diagonal sign fixed gives a Haar-distributed
    # orthonormal frame along the larger dimension.
    if d_in >= d_out:
        q, r = np.linalg.qr(rng.normal(size=(d_in, d_out)))
        return q * np.sign(np.diag(r))
    q, r = np.linalg.qr(rng.normal(size=(d_out, d_in)))
    return (q * np.sign(np.diag(r))).T


def init_orthogonal(layer_dims: list[int], residual: bool = False, seed: int = 0,
                    zero_final_layer: bool = False) -> MlpMap:
    """Seeded MLP with orthonormal weight matrices and zero biases.

    With `residual` and `zero_final_layer` the initial map is exactly the
    identity, which suits maps expected to stay near an affine isometry.
    """
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise ValueError(f"layer_dims must be >=2 positive entries, got {layer_dims}")
    if residual and layer_dims[0] != layer_dims[-1]:
        raise ValueError(f"residual connection requires input dim == output dim, "
                         f"got {layer_dims[0]} and {layer_dims[-1]}")
    rng = np.random.default_rng(seed)
    weights = [_orthonormal(rng, din, dout)
               for din, dout in zip(layer_dims[:-1], layer_dims[1:])]
    biases = [np.zeros(dout) for dout in layer_dims[1:]]
    if zero_final_layer:
        weights[-1] = np.zeros_like(weights[-1])
    return MlpMap(list(layer_dims), weights, biases, residual, seed)


def forward(net: MlpMap, batch: np.ndarray) -> np.ndarray:
    """MLP forward pass; caches activations for the matching backward()."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.layer_dims[0]:
        raise ValueError(f"batch width {batch.shape} does not match input dim "
                         f"{net.layer_dims[0]}")
    h = batch
    layer_inputs = []
    preacts = []
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        layer_inputs.append(h)
        z = h @ w + b
        if l < last:
            preacts.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    if net.residual:
        h = h + batch
    net._cache = ForwardCache(layer_inputs, preacts, batch, net._param_version)
    return h


def backward(net: MlpMap, upstream: np.ndarray) -> Grads:
    """Exact reverse-mode gradients for the cached forward pass.

    `upstream` is dLoss/dOutput for the whole batch (any averaging already
    included by the caller).
    """
    cache = net._cache
    if cache is None:
        raise RuntimeError("backward() requires a forward() cache for this batch")
    if cache.param_version != net._param_version:
        raise RuntimeError("forward cache is stale: parameters changed since forward()")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cache.batch.shape[0], net.layer_dims[-1]):
        raise ValueError(f"upstream gradient shape {upstream.shape} does not match "
                         f"output shape ({cache.batch.shape[0]}, {net.layer_dims[-1]})")
    n_layers = len(net.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dz = upstream
    input_grad = None
    for l in range(n_layers - 1, -1, -1):
        gw[l] = cache.layer_inputs[l].T @ dz
        gb[l] = dz.sum(axis=0)
        dh = dz @ net.weights[l].T
        if l > 0:
            dz = dh * (cache.preactivations[l - 1] > 0.0)
        else:
            input_grad = dh
    if net.residual:
        input_grad = input_grad + upstream
    return Grads(gw, gb, input_grad)


@dataclass
class AdamState:
    """Bias-corrected Adam moments, shaped like the network parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, net: MlpMap, lr: float) -> "AdamState":
        return cls(lr=lr,
                   m_w=[np.zeros_like(w) for w in net.weights],
                   v_w=[np.zeros_like(w) for w in net.weights],
                   m_b=[np.zeros_like(b) for b in net.biases],
                   v_b=[np.zeros_like(b) for b in net.biases])


def adam_step(net: MlpMap, grads: Grads, state: AdamState) -> None:
    """One in-place Adam update; invalidates the forward cache."""
    if len(grads.weights) != len(net.weights):
        raise ValueError("gradient list length does not match network layers")
    for g, w in zip(grads.weights, net.weights):
        if g.shape != w.shape:
            raise ValueError(f"weight gradient shape {g.shape} != parameter shape {w.shape}")
    for g, b in zip(grads.biases, net.biases):
        if g.shape != b.shape:
            raise ValueError(f"bias gradient shape {g.shape} != parameter shape {b.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for params, gs, ms, vs in ((net.weights, grads.weights, state.m_w, state.v_w),
                               (net.biases, grads.biases, state.m_b, state.v_b)):
        for p, g, m, v in zip(params, gs, ms, vs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite parameters after Adam update")
    net.step_count = t
    net._param_version += 1
    net._cache = None


def save_checkpoint(net: MlpMap, path) -> None:
    """JSON checkpoint: header (dims, residual flag, seed, step) + parameters."""
    payload = {
        "layer_dims": list(net.layer_dims),
        "residual": net.residual,
        "seed": net.seed,
        "step_count": net.step_count,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> MlpMap:
    with open(path) as fh:
        payload = json.load(fh)
    net = MlpMap(list(payload["layer_dims"]),
                 [np.asarray(w, dtype=np.float64) for w in payload["weights"]],
                 [np.asarray(b, dtype=np.float64) for b in payload["biases"]],
                 bool(payload["residual"]), payload["seed"],
                 int(payload["step_count"]))
    for w, (din, dout) in zip(net.weights, zip(net.layer_dims[:-1], net.layer_dims[1:])):
        if w.shape != (din, dout):
            raise ValueError(f"checkpoint weight shape {w.shape} does not match dims "
                             f"({din}, {dout})")
    return net
