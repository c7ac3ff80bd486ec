"""Dense numerical kernels with hand-written reverse-mode gradients.

All arithmetic is float64. Parameters live in plain ``Dict[str, np.ndarray]``
registries so the optimizer and checkpoint code can walk them by name.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from workflow_predictor.errors import DataIoError, FormatError, NumericError, ShapeMismatch

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"WFPRCKPT"
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.2


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class LinearLayer:
    """``y = x W^T + b`` with gradient buffers shaped like the parameters."""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.W = np.zeros((out_features, in_features))
        else:
            self.W = xavier_uniform(rng, out_features, in_features)
        self.b = np.zeros(out_features)
        self.gradW = np.zeros_like(self.W)
        self.gradb = np.zeros_like(self.b)

    def zero_grad(self) -> None:
        self.gradW.fill(0.0)
        self.gradb.fill(0.0)


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """Apply the layer to a batch of row vectors.

    Raises:
        ShapeMismatch: If ``x`` does not have ``layer.in_features`` columns
    """
    if x.ndim != 2 or x.shape[1] != layer.W.shape[1]:
        raise ShapeMismatch(f"linear input {x.shape} incompatible with weight {layer.W.shape}")
    return x @ layer.W.T + layer.b


def linear_backward(layer: LinearLayer, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients and return the gradient w.r.t. ``x``.

    Args:
        layer: The layer whose ``gradW``/``gradb`` receive the contribution
        x: The input the forward pass saw
        upstream: Gradient of the loss w.r.t. the layer output

    Returns:
        Gradient of the loss w.r.t. ``x``
    """
    if upstream.shape != (x.shape[0], layer.W.shape[0]) or x.shape[1] != layer.W.shape[1]:
        raise ShapeMismatch(f"linear backward got x {x.shape}, upstream {upstream.shape}, weight {layer.W.shape}")
    layer.gradW += upstream.T @ x
    layer.gradb += upstream.sum(axis=0)
    return upstream @ layer.W


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (pre > 0)


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(pre: np.ndarray, upstream: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return upstream * np.where(pre > 0, 1.0, slope)


def sigmoid(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Logistic function evaluated without overflow for any finite input."""
    arr = np.asarray(x, dtype=np.float64)
    flat = np.atleast_1d(arr)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(arr.shape) if arr.ndim else float(out[0])


def softplus(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """``log(1 + exp(x))`` in the form ``max(x, 0) + log1p(exp(-|x|))``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def bce_loss(logit: float, label: int) -> Tuple[float, float]:
    """Binary cross-entropy on a single logit.

    Returns:
        ``(loss, dloss/dlogit)``
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    loss = softplus(logit) - label * logit
    return float(loss), float(sigmoid(logit) - label)


def bce_loss_batch(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean BCE over a batch and its gradient w.r.t. each logit."""
    if logits.shape != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    losses = softplus(logits) - labels * logits
    return float(np.sum(losses) / n), (sigmoid(logits) - labels) / n


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over entries where ``mask`` is true; every row needs one."""
    shifted = np.where(mask, scores, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    weights = np.where(mask, np.exp(shifted), 0.0)
    return weights / weights.sum(axis=1, keepdims=True)


def masked_softmax_backward(alpha: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return alpha * (upstream - np.sum(upstream * alpha, axis=1, keepdims=True))


class AdamState(BaseModel):
    """Adam hyper-parameters plus per-parameter moment buffers."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lr: float = Field(default=1e-4, ge=0.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    coupled_weight_decay: bool = False
    step: int = 0
    m: Dict[str, Any] = Field(default_factory=dict)
    v: Dict[str, Any] = Field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Params) -> Params:
    """Apply one Adam update in place.

    Weight decay is decoupled by default (``p <- p - lr * wd * p`` before the
    moment update); ``coupled_weight_decay`` adds ``wd * p`` to the gradient
    instead.

    Raises:
        ShapeMismatch: If a gradient is missing or shaped unlike its parameter
    """
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None or grad.shape != param.shape:
            raise ShapeMismatch(f"gradient for {name!r} does not match parameter shape {param.shape}")
        if state.coupled_weight_decay:
            grad = grad + state.weight_decay * param
        else:
            param -= state.lr * state.weight_decay * param
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params


def check_finite(params: Params, where: str) -> None:
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite values in {name!r} after {where}")


def save_checkpoint(path: Union[str, Path], params: Params, meta: Dict[str, Any]) -> None:
    """Write a checkpoint: magic, version, JSON header, then little-endian f64 tensors.

    The header records ``meta`` and the name and shape of every tensor in
    write order.
    """
    names = sorted(params)
    header = {
        "meta": meta,
        "tensors": [{"name": name, "shape": list(params[name].shape)} for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as handle:
            handle.write(CHECKPOINT_MAGIC)
            handle.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)))
            handle.write(header_bytes)
            for name in names:
                handle.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    except OSError as e:
        raise DataIoError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(names)} tensors to {path}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Params, Dict[str, Any]]:
    """Read a checkpoint written by ``save_checkpoint``.

    Returns:
        ``(params, meta)``

    Raises:
        DataIoError: If the file cannot be read
        FormatError: If the file is truncated, corrupt or of another version
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataIoError(f"cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(1, f"{path} is not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    prefix = struct.calcsize("<HI")
    if len(blob) < offset + prefix:
        raise FormatError(1, f"checkpoint {path} is truncated inside its header")
    version, header_len = struct.unpack_from("<HI", blob, offset)
    if version != CHECKPOINT_VERSION:
        raise FormatError(1, f"unsupported checkpoint version {version}")
    offset += prefix
    if len(blob) < offset + header_len:
        raise FormatError(1, f"checkpoint {path} is truncated inside its header")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
        entries = [(str(entry["name"]), tuple(int(d) for d in entry["shape"])) for entry in header["tensors"]]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(1, f"checkpoint {path} has a corrupt header: {e}") from e
    offset += header_len
    params: Params = {}
    for name, shape in entries:
        if any(d < 0 for d in shape):
            raise FormatError(1, f"tensor {name!r} has a negative dimension {shape}")
        count = int(np.prod(shape)) if shape else 1
        if len(blob) < offset + count * 8:
            raise FormatError(1, f"checkpoint {path} is truncated inside tensor {name!r}")
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[name] = data.astype(np.float64).reshape(shape)
        offset += count * 8
    if offset != len(blob):
        raise FormatError(1, f"checkpoint {path} has {len(blob) - offset} trailing bytes")
    return params, meta
