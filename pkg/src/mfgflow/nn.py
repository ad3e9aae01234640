"""Fully-connected ReLU networks with hand-written backpropagation.

A depth-``L`` network maps ``x`` through ``L`` hidden layers,
``h_{j+1} = relu(A_j h_j + b_j)``, and ends with a bias-free linear layer
``A_L h_L``. All parameters live in one flat float64 buffer; ``weights`` and
``biases`` are views into it, so optimizers update a single array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOSS_KINDS = ("l2", "smooth_l1")
OPTIMIZER_KINDS = ("sgd", "adam", "adamw")


class MlpParams:
    """Weights ``A_0..A_L`` (shape ``N_{j+1} x N_j``) and biases ``b_0..b_{L-1}``."""

    def __init__(self, sizes, flat=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 3 or min(sizes) < 1:
            raise ValueError("need at least input, one hidden and output layer sizes")
        self.sizes = sizes
        count = sum(o * i for i, o in zip(sizes[:-1], sizes[1:])) + sum(sizes[1:-1])
        if flat is None:
            flat = np.zeros(count)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (count,):
            raise ValueError(f"expected {count} parameters, got {flat.shape}")
        self.flat = flat
        self.weights, self.biases = _views(flat, sizes)

    @property
    def depth(self) -> int:
        return len(self.sizes) - 2

    @property
    def width(self) -> int:
        return max(self.sizes[1:-1])

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.sizes, self.flat.copy())

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.sizes)

    def __repr__(self):
        return f"MlpParams(sizes={self.sizes})"


def _views(flat, sizes):
    weights, biases = [], []
    pos = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + n_out * n_in].reshape(n_out, n_in))
        pos += n_out * n_in
    for n in sizes[1:-1]:
        biases.append(flat[pos:pos + n])
        pos += n
    return weights, biases


def init_params(rng: np.random.Generator, sizes) -> MlpParams:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    params = MlpParams(sizes)
    for A in params.weights:
        A[...] = rng.normal(0.0, np.sqrt(2.0 / A.shape[1]), size=A.shape)
    return params


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_in:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {params.n_in}")
    h = x
    for A, b in zip(params.weights[:-1], params.biases):
        h = np.maximum(h @ A.T + b, 0.0)
    return h @ params.weights[-1].T


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_kind(kind):
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}")


def loss_value(kind: str, pred, target, beta: float = 1.0) -> float:
    """``l2``: squared Euclidean distance; ``smooth_l1``: coordinate mean of the Huber-type loss.

    Batches (2-D input) are averaged over rows.
    """
    _check_kind(kind)
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    z = pred - target
    if kind == "l2":
        per_row = np.sum(z * z, axis=-1)
        return float(np.mean(per_row))
    az = np.abs(z)
    return float(np.mean(np.where(az < beta, 0.5 * z * z / beta, az - 0.5 * beta)))


def _loss_and_output_grad(kind, out, y, beta=1.0):
    z = out - y
    n = z.shape[0]
    if kind == "l2":
        return float(np.sum(z * z)) / n, (2.0 / n) * z
    az = np.abs(z)
    small = az < beta
    loss = float(np.mean(np.where(small, 0.5 * z * z / beta, az - 0.5 * beta)))
    return loss, np.where(small, z / beta, np.sign(z)) / z.size


def loss_and_grad(params: MlpParams, X, Y, kind: str = "l2"):
    """Mean batch loss and its exact gradient as a flat array aligned with ``params.flat``.

    The ReLU derivative at exactly zero is taken as zero.
    """
    _check_kind(kind)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != params.n_in or Y.shape != (X.shape[0], params.n_out):
        raise ValueError("batch shapes do not match the network")

    acts = [X]
    h = X
    for A, b in zip(params.weights[:-1], params.biases):
        h = np.maximum(h @ A.T + b, 0.0)
        acts.append(h)
    out = h @ params.weights[-1].T
    loss, g = _loss_and_output_grad(kind, out, Y)

    grad = np.empty_like(params.flat)
    gW, gb = _views(grad, params.sizes)
    L = params.depth
    np.dot(g.T, acts[L], out=gW[L])
    g = g @ params.weights[L]
    for j in range(L - 1, -1, -1):
        g = g * (acts[j + 1] > 0)
        np.dot(g.T, acts[j], out=gW[j])
        np.sum(g, axis=0, out=gb[j])
        if j:
            g = g @ params.weights[j]
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizers and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    kind: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer must be one of {OPTIMIZER_KINDS}")

    @classmethod
    def for_kind(cls, kind: str, n_params: int | None = None, **overrides) -> "OptimState":
        if kind == "adam":
            overrides.setdefault("weight_decay", 0.0)
        state = cls(kind=kind, **overrides)
        if n_params is not None:
            state.m = np.zeros(n_params)
            state.v = np.zeros(n_params)
        return state

    def hyperparams(self) -> dict:
        return {
            "kind": self.kind,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }


def optimizer_step(state: OptimState, params: MlpParams, grad, lr: float):
    """One in-place update of ``params.flat``; returns ``(params, state)``.

    AdamW applies decoupled decay ``theta -= lr * wd * theta`` before the
    bias-corrected Adam step. ``adam`` is the same update with no decay.
    """
    theta = params.flat
    state.step += 1
    if state.kind == "sgd":
        theta -= lr * grad
        return params, state
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    if state.weight_decay:
        theta *= 1.0 - lr * state.weight_decay
    m, v = state.m, state.v
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * (grad * grad)
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    theta -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


def cosine_lr(epoch: int, total_epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if total_epochs == 0:
        return lr0
    return float(lr_min + (lr0 - lr_min) * (1.0 + np.cos(np.pi * epoch / total_epochs)) / 2.0)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _norm(M, kind):
    if kind == "fro":
        return float(np.linalg.norm(M))
    if kind == "spectral":
        return float(np.linalg.norm(M, 2))
    raise ValueError("norm must be 'fro' or 'spectral'")


def weight_bound(params: MlpParams, norm: str = "fro") -> float:
    """``|A_L| * prod_j max(|[A_j | b_j]|, 1)``, Frobenius norm by default."""
    value = _norm(params.weights[-1], norm)
    for A, b in zip(params.weights[:-1], params.biases):
        value *= max(_norm(np.column_stack([A, b]), norm), 1.0)
    return value


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"MFGCKPT1"


@dataclass
class Checkpoint:
    params: MlpParams | None
    optimizer: OptimState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a self-describing binary checkpoint.

    Layout: 8-byte magic, little-endian uint64 header length, a JSON header,
    then every array as raw little-endian float64 in header order.
    """
    arrays = {}
    if ckpt.params is not None:
        arrays["params"] = ckpt.params.flat
    opt = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer.hyperparams()
        if ckpt.optimizer.m is not None:
            arrays["adam_m"] = ckpt.optimizer.m
            arrays["adam_v"] = ckpt.optimizer.v
    header = {
        "format": 1,
        "sizes": ckpt.params.sizes if ckpt.params is not None else None,
        "epoch": int(ckpt.epoch),
        "optimizer": opt,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": [{"name": k, "length": int(v.size)} for k, v in arrays.items()],
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    pos = 16 + n
    arrays = {}
    for spec in header["arrays"]:
        size = spec["length"] * 8
        arrays[spec["name"]] = np.frombuffer(raw[pos:pos + size], dtype="<f8").astype(np.float64)
        pos += size
    if pos != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    params = MlpParams(header["sizes"], arrays["params"]) if header["sizes"] else None
    opt = None
    if header["optimizer"] is not None:
        opt = OptimState(**header["optimizer"])
        opt.m = arrays.get("adam_m")
        opt.v = arrays.get("adam_v")
    return Checkpoint(params, opt, header["epoch"], header["rng_state"], header["meta"])
