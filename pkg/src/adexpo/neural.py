"""Minimal dense-network engine: forward, exact backward, Adam, targets.

Just enough machinery for a deterministic actor, a Q critic, and a
dueling Q network: fully-connected layers with relu/tanh/identity
activations, an optional dueling head, adaptive-moment updates, and
target-network synchronization.  Everything is plain numpy and
deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NetSpec",
    "Net",
    "AdamState",
    "init_params",
    "forward",
    "backward",
    "opt_step",
    "sync_target",
    "dueling_combine",
    "finite_difference_grads",
    "save_net",
    "load_net",
]

_ACTS = {"relu", "tanh", "identity"}


class TrainingError(RuntimeError):
    """Non-finite values encountered during optimization."""


@dataclass(frozen=True)
class NetSpec:
    """Layer widths and activations.

    sizes = (in, h1, ..., out); activations has one entry per layer.
    With dueling=True the final layer is replaced by a scalar value head
    and an advantage head of width sizes[-1], combined as
    Q = V + (A - mean(A)); the final activation must be identity.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    dueling: bool = False

    def __post_init__(self):
        if len(self.sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("one activation per layer required")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("layer widths must be positive")
        for a in self.activations:
            if a not in _ACTS:
                raise ValueError(f"unknown activation {a!r}")
        if self.dueling and self.activations[-1] != "identity":
            raise ValueError("dueling head requires identity output")


def init_params(spec: NetSpec, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Uniform +-1/sqrt(fan_in) init; dueling specs get two head layers."""
    rng = np.random.default_rng(seed)
    params = []
    n_body = len(spec.sizes) - (2 if spec.dueling else 1)
    for i in range(n_body):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        params.append((rng.uniform(-bound, bound, (fan_in, fan_out)),
                       rng.uniform(-bound, bound, fan_out)))
    if spec.dueling:
        fan_in = spec.sizes[-2]
        bound = 1.0 / np.sqrt(fan_in)
        params.append((rng.uniform(-bound, bound, (fan_in, 1)),
                       rng.uniform(-bound, bound, 1)))  # value head
        params.append((rng.uniform(-bound, bound, (fan_in, spec.sizes[-1])),
                       rng.uniform(-bound, bound, spec.sizes[-1])))  # advantage
    return params


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(z)


def dueling_combine(v: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """Q = V + (A - mean(A)); mean over the action axis."""
    adv = np.asarray(adv, dtype=float)
    if adv.size == 0:
        raise ValueError("empty advantage vector")
    return v + adv - adv.mean(axis=-1, keepdims=True)


def forward(spec: NetSpec, params, x: np.ndarray):
    """Returns (output, cache). Accepts a single vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != spec.sizes[0]:
        raise ValueError(
            f"input width {h.shape[1]} != spec input {spec.sizes[0]}")
    cache = {"inputs": [], "preacts": [], "outputs": [], "single": single}
    n_body = len(spec.sizes) - (2 if spec.dueling else 1)
    for i in range(n_body):
        W, b = params[i]
        cache["inputs"].append(h)
        z = h @ W + b
        a = _act(spec.activations[i], z)
        cache["preacts"].append(z)
        cache["outputs"].append(a)
        h = a
    if spec.dueling:
        Wv, bv = params[n_body]
        Wa, ba = params[n_body + 1]
        cache["head_input"] = h
        v = h @ Wv + bv
        adv = h @ Wa + ba
        cache["v"], cache["adv"] = v, adv
        out = dueling_combine(v, adv)
    else:
        out = h
    return (out[0] if single else out), cache


def backward(spec: NetSpec, params, cache, grad_out: np.ndarray):
    """Exact parameter gradients (summed over the batch) and d/d(input).

    grad_out is dL/d(output), shaped like the forward output.
    """
    g = np.asarray(grad_out, dtype=float)
    if cache["single"]:
        g = g[None, :]
    grads = [None] * len(params)
    n_body = len(spec.sizes) - (2 if spec.dueling else 1)
    if spec.dueling:
        h = cache["head_input"]
        Wv, _ = params[n_body]
        Wa, _ = params[n_body + 1]
        gv = g.sum(axis=1, keepdims=True)
        ga = g - g.mean(axis=1, keepdims=True)
        grads[n_body] = (h.T @ gv, gv.sum(axis=0))
        grads[n_body + 1] = (h.T @ ga, ga.sum(axis=0))
        g = gv @ Wv.T + ga @ Wa.T
    for i in reversed(range(n_body)):
        z = cache["preacts"][i]
        out = cache["outputs"][i]
        g = g * _act_grad(spec.activations[i], z, out)
        W, _ = params[i]
        grads[i] = (cache["inputs"][i].T @ g, g.sum(axis=0))
        g = g @ W.T
    grad_input = g[0] if cache["single"] else g
    return grads, grad_input


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float) -> "AdamState":
        st = cls(lr=lr)
        st.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
        st.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
        return st


def opt_step(params, grads, state: AdamState):
    """One Adam update, in place; raises on non-finite gradients."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, ((W, b), (gW, gb)) in enumerate(zip(params, grads)):
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise TrainingError(f"non-finite gradient in layer {i}")
        mW, mb = state.m[i]
        vW, vb = state.v[i]
        mW *= b1; mW += (1 - b1) * gW
        mb *= b1; mb += (1 - b1) * gb
        vW *= b2; vW += (1 - b2) * gW * gW
        vb *= b2; vb += (1 - b2) * gb * gb
        W -= state.lr * (mW / bc1) / (np.sqrt(vW / bc2) + eps)
        b -= state.lr * (mb / bc1) / (np.sqrt(vb / bc2) + eps)
    return params


def sync_target(target, online, mix: float):
    """target <- mix*online + (1-mix)*target, in place."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must be in [0, 1]")
    for (tW, tb), (oW, ob) in zip(target, online):
        tW *= 1.0 - mix; tW += mix * oW
        tb *= 1.0 - mix; tb += mix * ob
    return target


def finite_difference_grads(spec: NetSpec, params, x, loss_fn, h: float = 1e-4):
    """Central-difference gradients of loss_fn(output) w.r.t. params.

    Independent of backward(); used to verify it.
    """
    grads = []
    for W, b in params:
        gW = np.zeros_like(W)
        gb = np.zeros_like(b)
        for arr, garr in ((W, gW), (b, gb)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up, _ = forward(spec, params, x)
                arr[idx] = orig - h
                dn, _ = forward(spec, params, x)
                arr[idx] = orig
                garr[idx] = (loss_fn(up) - loss_fn(dn)) / (2 * h)
        grads.append((gW, gb))
    return grads


class Net:
    """A NetSpec with its parameters; value-like, copyable."""

    def __init__(self, spec: NetSpec, seed: int | None = None, params=None):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)

    def forward(self, x):
        return forward(self.spec, self.params, x)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        return backward(self.spec, self.params, cache, grad_out)

    def copy(self) -> "Net":
        return Net(self.spec, params=[(W.copy(), b.copy())
                                      for W, b in self.params])


def save_net(net: Net, path) -> None:
    """JSON checkpoint; float repr round-trips exactly."""
    doc = {
        "version": 1,
        "sizes": list(net.spec.sizes),
        "activations": list(net.spec.activations),
        "dueling": net.spec.dueling,
        "params": [[W.tolist(), b.tolist()] for W, b in net.params],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_net(path) -> Net:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    spec = NetSpec(sizes=tuple(doc["sizes"]),
                   activations=tuple(doc["activations"]),
                   dueling=doc["dueling"])
    params = [(np.array(W, dtype=float), np.array(b, dtype=float))
              for W, b in doc["params"]]
    return Net(spec, params=params)
