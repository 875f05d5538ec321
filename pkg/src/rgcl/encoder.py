"""Small two-layer encoders producing unit-norm embeddings, with exact
manual backpropagation (no autodiff framework).

The forward map per row x is:

    z1 = W1 x + b1
    a1 = tanh(z1)        (or a1 = z1 with the identity activation)
    z2 = W2 a1 + b2
    y  = z2 / ||z2||

The backward pass applies the normalization Jacobian (I - y y^T)/||z2||
per row, then standard affine/activation backprop.  Gradients are reduced
in fixed index order so results are deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream

__all__ = [
    "EncoderParams",
    "EmbeddingBatch",
    "init_encoder_params",
    "encode",
    "encode_backward",
    "cosine_sim",
    "save_params",
    "load_params",
    "params_to_json",
]

_ACTIVATIONS = ("identity", "tanh")
_MAGIC = b"RGCLENC1"


@dataclass
class EncoderParams:
    """Weights of the two-layer encoder plus the activation choice.

    The flattened view concatenates W1, b1, W2, b2 in row-major order and
    round-trips losslessly through from_flat.
    """

    w1: np.ndarray  # (hidden, d_in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (d_embed, hidden)
    b2: np.ndarray  # (d_embed,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError("unknown activation %r" % self.activation)
        if self.w1.shape[0] != self.b1.shape[0] or self.w2.shape[0] != self.b2.shape[0]:
            raise ValueError("bias shape inconsistent with weight shape")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ValueError("layer shapes do not compose")

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def d_embed(self) -> int:
        return self.w2.shape[0]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1.ravel(), self.w2.ravel(), self.b2.ravel()]
        )

    def from_flat(self, flat: np.ndarray) -> "EncoderParams":
        """New params with the same shapes, values taken from flat."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError("flat vector has wrong length")
        h, di, de = self.d_hidden, self.d_in, self.d_embed
        o = 0
        w1 = flat[o : o + h * di].reshape(h, di).copy()
        o += h * di
        b1 = flat[o : o + h].copy()
        o += h
        w2 = flat[o : o + de * h].reshape(de, h).copy()
        o += de * h
        b2 = flat[o : o + de].copy()
        return EncoderParams(w1, b1, w2, b2, self.activation)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.activation
        )


@dataclass
class EmbeddingBatch:
    """Row embeddings, each unit l2 norm, with the dataset indices they
    came from."""

    embeddings: np.ndarray  # (n, d_embed)
    indices: np.ndarray  # (n,) dataset indices

    def __post_init__(self):
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValueError("embedding rows must be unit norm")


def init_encoder_params(
    d_in: int, d_hidden: int, d_embed: int, activation: str, stream: RandomStream
) -> EncoderParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    s1 = stream.split("layer1")
    s2 = stream.split("layer2")
    lim1 = 1.0 / np.sqrt(d_in)
    lim2 = 1.0 / np.sqrt(d_hidden)
    w1 = (2.0 * s1.uniform(d_hidden, d_in) - 1.0) * lim1
    b1 = (2.0 * s1.uniform(d_hidden) - 1.0) * lim1
    w2 = (2.0 * s2.uniform(d_embed, d_hidden) - 1.0) * lim2
    b2 = (2.0 * s2.uniform(d_embed) - 1.0) * lim2
    return EncoderParams(w1, b1, w2, b2, activation)


def _forward(params: EncoderParams, inputs: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ValueError("input shape does not match encoder")
    z1 = x @ params.w1.T + params.b1
    a1 = np.tanh(z1) if params.activation == "tanh" else z1
    z2 = a1 @ params.w2.T + params.b2
    norms = np.linalg.norm(z2, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate embedding")
    y = z2 / norms[:, None]
    return y, (x, a1, z2, norms)


def encode(params: EncoderParams, inputs: np.ndarray, indices=None) -> EmbeddingBatch:
    y, _ = _forward(params, inputs)
    if indices is None:
        indices = np.arange(y.shape[0])
    return EmbeddingBatch(y, np.asarray(indices))


def encode_backward(
    params: EncoderParams, inputs: np.ndarray, grad_embeddings: np.ndarray
) -> EncoderParams:
    """Exact parameter gradient of sum(grad_embeddings * encode(inputs)).

    Returns an EncoderParams holding the gradients (same shapes as params).
    """
    y, (x, a1, z2, norms) = _forward(params, inputs)
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != y.shape:
        raise ValueError("grad_embeddings shape mismatch")
    # normalization Jacobian per row: (g - (g.y) y) / ||z2||
    dz2 = (g - np.sum(g * y, axis=1, keepdims=True) * y) / norms[:, None]
    dw2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ params.w2
    dz1 = da1 * (1.0 - a1 * a1) if params.activation == "tanh" else da1
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return EncoderParams(dw1, db1, dw2, db2, params.activation)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of unit vectors."""
    return float(np.dot(a, b))


def save_params(params: EncoderParams, path: str) -> None:
    """Binary layout: magic 'RGCLENC1', four little-endian int64
    (d_in, d_hidden, d_embed, activation flag 0=identity 1=tanh),
    then the flattened float64 parameters."""
    act = _ACTIVATIONS.index(params.activation)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqq", params.d_in, params.d_hidden, params.d_embed, act))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_params(path: str) -> EncoderParams:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError("not an encoder checkpoint")
        d_in, d_hidden, d_embed, act = struct.unpack("<qqqq", fh.read(32))
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    template = EncoderParams(
        np.zeros((d_hidden, d_in)),
        np.zeros(d_hidden),
        np.zeros((d_embed, d_hidden)),
        np.zeros(d_embed),
        _ACTIVATIONS[act],
    )
    return template.from_flat(flat)


def params_to_json(params: EncoderParams) -> str:
    """JSON export for inspection; full float precision."""
    return json.dumps(
        {
            "activation": params.activation,
            "w1": params.w1.tolist(),
            "b1": params.b1.tolist(),
            "w2": params.w2.tolist(),
            "b2": params.b2.tolist(),
        }
    )
