"""Feedforward embedding extractor and the speaker-basis classifier head.

The encoder is a plain MLP with leaky-ReLU activations after every layer.
The head's weight matrix has one column per speaker; those columns are the
trainable speaker bases that the basis losses operate on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVector, ShapeMismatch
from .numeric import EPS_NORM, as_float_matrix, matmul

CHECKPOINT_MAGIC = b"SPKBASIS"
CHECKPOINT_VERSION = 1


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0.0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0.0, 1.0, slope)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MlpEncoder:
    """MLP mapping feature rows to embedding rows.

    layer_dims[0] is the input feature dim, layer_dims[-1] the embedding dim.
    weights[l] has shape (layer_dims[l], layer_dims[l+1]); the leaky-ReLU
    activation is applied after every layer, including the last.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    leaky_slope: float = 0.01

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ShapeMismatch("encoder needs at least one layer")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeMismatch("weights/biases count does not match layer_dims")
        for l in range(n_layers):
            expect = (self.layer_dims[l], self.layer_dims[l + 1])
            if self.weights[l].shape != expect:
                raise ShapeMismatch(f"layer {l} weight shape {self.weights[l].shape} != {expect}")
            if self.biases[l].shape != (self.layer_dims[l + 1],):
                raise ShapeMismatch(f"layer {l} bias shape {self.biases[l].shape}")

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def initialize(
        cls, layer_dims: list[int], rng: np.random.Generator, leaky_slope: float = 0.01
    ) -> "MlpEncoder":
        """Glorot-uniform weights, zero biases."""
        weights = []
        biases = []
        for l in range(len(layer_dims) - 1):
            weights.append(glorot_uniform(rng, layer_dims[l], layer_dims[l + 1]))
            biases.append(np.zeros(layer_dims[l + 1]))
        return cls(list(layer_dims), weights, biases, leaky_slope)

    def copy(self) -> "MlpEncoder":
        return MlpEncoder(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.leaky_slope,
        )


@dataclass
class ForwardTrace:
    """Per-layer pre-activations and activations kept for the backward pass."""

    features: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)


@dataclass
class ParameterGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def encoder_forward(enc: MlpEncoder, features) -> tuple[np.ndarray, ForwardTrace]:
    """Forward pass over a batch of feature rows.

    Returns the embedding matrix (one row per input row) and the trace needed
    by encoder_backward.
    """
    x = as_float_matrix(features, "features")
    if x.shape[1] != enc.layer_dims[0]:
        raise ShapeMismatch(
            f"features have dim {x.shape[1]}, encoder expects {enc.layer_dims[0]}"
        )
    trace = ForwardTrace(features=x)
    a = x
    for w, b in zip(enc.weights, enc.biases):
        z = matmul(a, w) + b
        a = leaky_relu(z, enc.leaky_slope)
        trace.pre_activations.append(z)
        trace.activations.append(a)
    return a, trace


def encoder_backward(
    enc: MlpEncoder, trace: ForwardTrace, grad_embeddings
) -> ParameterGradients:
    """Chain rule from embedding gradients back to every weight and bias."""
    g = as_float_matrix(grad_embeddings, "grad_embeddings")
    if g.shape != trace.activations[-1].shape:
        raise ShapeMismatch(
            f"grad shape {g.shape} != forward output {trace.activations[-1].shape}"
        )
    n_layers = len(enc.weights)
    w_grads: list[np.ndarray | None] = [None] * n_layers
    b_grads: list[np.ndarray | None] = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        dz = g * leaky_relu_grad(trace.pre_activations[l], enc.leaky_slope)
        below = trace.features if l == 0 else trace.activations[l - 1]
        w_grads[l] = matmul(below.T, dz)
        b_grads[l] = dz.sum(axis=0)
        if l > 0:
            g = matmul(dz, enc.weights[l].T)
    return ParameterGradients(weights=w_grads, biases=b_grads)


@dataclass
class ClassifierHead:
    """Output layer whose columns are per-speaker basis vectors.

    basis has shape (embedding_dim, n_speakers); column j represents speaker
    j. The bias participates only in inner-product logits; cosine-based
    losses ignore it (use_bias=False).
    """

    basis: np.ndarray
    bias: np.ndarray
    use_bias: bool = True

    def __post_init__(self):
        self.basis = as_float_matrix(self.basis, "basis")
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.basis.shape[1] < 2:
            raise ShapeMismatch("classifier head needs at least 2 speakers")
        if self.bias.shape != (self.basis.shape[1],):
            raise ShapeMismatch(
                f"bias shape {self.bias.shape} != ({self.basis.shape[1]},)"
            )

    @property
    def embedding_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def n_speakers(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def initialize(
        cls, embedding_dim: int, n_speakers: int, rng: np.random.Generator, use_bias: bool = True
    ) -> "ClassifierHead":
        return cls(
            basis=glorot_uniform(rng, embedding_dim, n_speakers),
            bias=np.zeros(n_speakers),
            use_bias=use_bias,
        )

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.basis.copy(), self.bias.copy(), self.use_bias)


def head_logits(head: ClassifierHead, embeddings) -> np.ndarray:
    """logits[i, j] = basis_j . e_i (+ bias_j when use_bias)."""
    e = as_float_matrix(embeddings, "embeddings")
    if e.shape[1] != head.embedding_dim:
        raise ShapeMismatch(
            f"embedding dim {e.shape[1]} != head dim {head.embedding_dim}"
        )
    logits = matmul(e, head.basis)
    if head.use_bias:
        logits = logits + head.bias
    return logits


def cosine_matrix(rows_a: np.ndarray, rows_b: np.ndarray):
    """All-pairs cosines between two sets of row vectors.

    Returns (C, cache) where C[i, j] = cos(rows_a[i], rows_b[j]) clamped to
    [-1, 1] and cache holds the normalized rows and norms needed by
    cosine_matrix_backward.
    """
    a = as_float_matrix(rows_a, "rows_a")
    b = as_float_matrix(rows_b, "rows_b")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"dims differ: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na <= EPS_NORM) or np.any(nb <= EPS_NORM):
        raise DegenerateVector("near-zero vector in cosine matrix")
    ah = a / na[:, None]
    bh = b / nb[:, None]
    c = np.clip(matmul(ah, bh.T), -1.0, 1.0)
    return c, (ah, bh, na, nb)


def cosine_matrix_backward(upstream: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(upstream * C) w.r.t. both row sets.

    The clamp in cosine_matrix is ignored here; it only binds within rounding
    error of exactly (anti)parallel vectors.
    """
    ah, bh, na, nb = cache
    g = np.asarray(upstream, dtype=np.float64)
    da_h = matmul(g, bh)
    proj_a = np.sum(da_h * ah, axis=1, keepdims=True)
    grad_a = (da_h - proj_a * ah) / na[:, None]
    db_h = matmul(g.T, ah)
    proj_b = np.sum(db_h * bh, axis=1, keepdims=True)
    grad_b = (db_h - proj_b * bh) / nb[:, None]
    return grad_a, grad_b


def head_cosines(head: ClassifierHead, embeddings) -> np.ndarray:
    """entry [i, j] = cos(basis_j, e_i); bias plays no part."""
    e = as_float_matrix(embeddings, "embeddings")
    if e.shape[1] != head.embedding_dim:
        raise ShapeMismatch(
            f"embedding dim {e.shape[1]} != head dim {head.embedding_dim}"
        )
    c, _ = cosine_matrix(e, head.basis.T)
    return c


@dataclass
class Checkpoint:
    encoder: MlpEncoder
    head: ClassifierHead
    seed: int
    step: int
    config_text: str
    extras: dict[str, np.ndarray]


def save_checkpoint(
    path,
    encoder: MlpEncoder,
    head: ClassifierHead,
    seed: int,
    step: int,
    config_text: str = "",
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a versioned binary checkpoint.

    Layout: magic, uint64 header length, JSON header (dims, flags, seed,
    step, array manifest, embedded config text), then the arrays as raw
    little-endian float64 in manifest order. The byte stream is a pure
    function of its contents, so identical states produce identical files.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for l, (w, b) in enumerate(zip(encoder.weights, encoder.biases)):
        arrays.append((f"encoder.weight.{l}", w))
        arrays.append((f"encoder.bias.{l}", b))
    arrays.append(("head.basis", head.basis))
    arrays.append(("head.bias", head.bias))
    for name in sorted(extras or {}):
        arrays.append((f"extra.{name}", np.asarray(extras[name], dtype=np.float64)))

    header = {
        "format": CHECKPOINT_MAGIC.decode(),
        "version": CHECKPOINT_VERSION,
        "layer_dims": [int(d) for d in encoder.layer_dims],
        "leaky_slope": float(encoder.leaky_slope),
        "use_bias": bool(head.use_bias),
        "seed": int(seed),
        "step": int(step),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "config": config_text,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    dims = header["layer_dims"]
    n_layers = len(dims) - 1
    encoder = MlpEncoder(
        layer_dims=dims,
        weights=[arrays[f"encoder.weight.{l}"] for l in range(n_layers)],
        biases=[arrays[f"encoder.bias.{l}"] for l in range(n_layers)],
        leaky_slope=header["leaky_slope"],
    )
    head = ClassifierHead(
        basis=arrays["head.basis"], bias=arrays["head.bias"], use_bias=header["use_bias"]
    )
    extras = {
        name[len("extra."):]: arr for name, arr in arrays.items() if name.startswith("extra.")
    }
    return Checkpoint(
        encoder=encoder,
        head=head,
        seed=header["seed"],
        step=header["step"],
        config_text=header["config"],
        extras=extras,
    )
