"""Verification losses as pure value-plus-gradient computations.

Six losses live here: plain softmax cross-entropy, center loss with its
non-gradient center update rule, additive-margin softmax, the centroid-based
end-to-end loss, and the two speaker-basis losses (between-class separation
and all-class hard negative mining). Each returns a LossOutput carrying the
scalar value and analytic gradients for every parameter it touches; the
gradients are validated against central finite differences by the gradcheck
suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigInconsistency,
    EmptySpeaker,
    InsufficientSpeakers,
    ShapeMismatch,
)
from .model import (
    ClassifierHead,
    cosine_matrix,
    cosine_matrix_backward,
    head_logits,
)
from .numeric import as_float_matrix, matmul, row_log_sum_exp, sigmoid

LOSS_NAMES = (
    "softmax",
    "center",
    "amsoftmax",
    "ge2e",
    "between_class",
    "hard_negative",
)

# Losses that read the classifier head through cosines only (no bias term).
COSINE_LOSSES = frozenset({"amsoftmax", "between_class", "hard_negative"})


@dataclass
class EmbeddingBatch:
    """A batch of per-utterance embeddings with integer speaker labels."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = as_float_matrix(self.embeddings, "embeddings")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.embeddings.shape[0]:
            raise ShapeMismatch(
                f"labels shape {self.labels.shape} does not match "
                f"{self.embeddings.shape[0]} embeddings"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ShapeMismatch("labels must be non-negative")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class CenterStore:
    """Per-speaker center embeddings with the update scalar alpha and loss weight."""

    centers: np.ndarray
    alpha: float = 0.5
    lam: float = 0.001

    def __post_init__(self):
        self.centers = as_float_matrix(self.centers, "centers")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not np.isfinite(self.centers).all():
            raise ValueError("centers must be finite")

    @classmethod
    def initialize(cls, n_speakers: int, dim: int, alpha: float = 0.5, lam: float = 0.001):
        return cls(np.zeros((n_speakers, dim)), alpha=alpha, lam=lam)


@dataclass(frozen=True)
class AmSoftmaxParams:
    scale: float = 5.0
    margin: float = 0.35

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if not (0.0 <= self.margin < 1.0):
            raise ValueError(f"margin must be in [0, 1), got {self.margin}")


@dataclass
class Ge2eParams:
    """Trainable score scale/shift; the scale is clamped positive after each step."""

    w_score: float = 10.0
    b_score: float = -5.0

    def __post_init__(self):
        if self.w_score <= 0.0:
            raise ValueError(f"w_score must be > 0, got {self.w_score}")


@dataclass
class LossOutput:
    """Scalar loss plus gradients for every parameter the loss touches."""

    value: float
    grad_embeddings: np.ndarray | None = None
    grad_basis: np.ndarray | None = None
    grad_bias: np.ndarray | None = None
    grad_scalars: dict[str, float] | None = None


@dataclass
class LossComposite:
    """Weighted list of loss identifiers, e.g. [("softmax", 1.0), ("center", 1.0)]."""

    items: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.items:
            raise ValueError("composite needs at least one loss")
        for name, weight in self.items:
            if name not in LOSS_NAMES:
                raise ValueError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
            if weight < 0.0:
                raise ValueError(f"loss weight must be >= 0, got {name}:{weight}")
        if not any(w > 0.0 for _, w in self.items):
            raise ValueError("composite needs at least one positive weight")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.items]

    def uses(self, name: str) -> bool:
        return any(n == name and w > 0.0 for n, w in self.items)


def _check_labels(batch: EmbeddingBatch, n_speakers: int) -> None:
    if batch.labels.size and int(batch.labels.max()) >= n_speakers:
        raise ShapeMismatch(
            f"label {int(batch.labels.max())} out of range for {n_speakers} speakers"
        )


def softmax_loss(batch: EmbeddingBatch, head: ClassifierHead) -> LossOutput:
    """Cross-entropy over speaker logits: -sum_i log softmax(W^T e_i + b)[y_i].

    Gradients: with p = softmax(logits) and Y one-hot labels,
    d/dlogits = p - Y, which chains to embeddings, basis and bias.
    """
    _check_labels(batch, head.n_speakers)
    logits = head_logits(head, batch.embeddings)
    lse = row_log_sum_exp(logits)
    rows = np.arange(batch.size)
    value = float(np.sum(lse - logits[rows, batch.labels]))
    p = np.exp(logits - lse[:, None])
    d = p
    d[rows, batch.labels] -= 1.0
    grad_emb = matmul(d, head.basis.T)
    grad_basis = matmul(batch.embeddings.T, d)
    grad_bias = d.sum(axis=0) if head.use_bias else None
    return LossOutput(value, grad_embeddings=grad_emb, grad_basis=grad_basis, grad_bias=grad_bias)


def center_loss(batch: EmbeddingBatch, store: CenterStore) -> LossOutput:
    """(lambda/2) * sum_i |e_i - c_{y_i}|^2.

    Only embeddings receive a gradient; the centers move through
    center_update, never through the optimizer.
    """
    _check_labels(batch, store.centers.shape[0])
    if store.centers.shape[1] != batch.dim:
        raise ShapeMismatch(
            f"center dim {store.centers.shape[1]} != embedding dim {batch.dim}"
        )
    diff = batch.embeddings - store.centers[batch.labels]
    value = 0.5 * store.lam * float(np.sum(diff * diff))
    return LossOutput(value, grad_embeddings=store.lam * diff)


def center_update(store: CenterStore, batch: EmbeddingBatch) -> CenterStore:
    """Move each observed speaker's center toward its batch embeddings.

    delta_k = sum_{i: y_i=k} (c_k - e_i) / (1 + count_k); c_k <- c_k - alpha*delta_k.
    Speakers absent from the batch keep their centers (delta is zero).
    """
    n, dim = store.centers.shape
    _check_labels(batch, n)
    if dim != batch.dim:
        raise ShapeMismatch(f"center dim {dim} != embedding dim {batch.dim}")
    counts = np.bincount(batch.labels, minlength=n).astype(np.float64)
    sums = np.zeros_like(store.centers)
    np.add.at(sums, batch.labels, batch.embeddings)
    delta = (counts[:, None] * store.centers - sums) / (1.0 + counts)[:, None]
    return CenterStore(store.centers - store.alpha * delta, alpha=store.alpha, lam=store.lam)


def am_softmax_loss(
    batch: EmbeddingBatch, head: ClassifierHead, params: AmSoftmaxParams
) -> LossOutput:
    """Margin softmax on basis/embedding cosines.

    The target logit is s*(cos(W_y, e) - m), every other logit s*cos(W_j, e);
    the loss is the cross-entropy of that row. The bias never participates.
    """
    _check_labels(batch, head.n_speakers)
    c, cache = cosine_matrix(batch.embeddings, head.basis.T)
    rows = np.arange(batch.size)
    z = params.scale * c
    z[rows, batch.labels] = params.scale * (c[rows, batch.labels] - params.margin)
    lse = row_log_sum_exp(z)
    value = float(np.sum(lse - z[rows, batch.labels]))
    p = np.exp(z - lse[:, None])
    p[rows, batch.labels] -= 1.0
    upstream = params.scale * p
    grad_emb, grad_basis_rows = cosine_matrix_backward(upstream, cache)
    return LossOutput(value, grad_embeddings=grad_emb, grad_basis=grad_basis_rows.T)


def ge2e_centroids(batch: EmbeddingBatch, n_speakers: int | None = None) -> np.ndarray:
    """Per-speaker mean embeddings, including the query utterance (no exclusion).

    With n_speakers=None the rows follow sorted unique batch labels; pass
    n_speakers to demand every speaker 0..n-1 be present.
    """
    if n_speakers is None:
        uniq = np.unique(batch.labels)
    else:
        uniq = np.arange(n_speakers)
        present = np.unique(batch.labels)
        missing = np.setdiff1d(uniq, present)
        if missing.size:
            raise EmptySpeaker(f"speaker {int(missing[0])} has no utterances in the batch")
    counts = np.array([(batch.labels == k).sum() for k in uniq], dtype=np.float64)
    cent = np.zeros((uniq.size, batch.dim))
    for slot, k in enumerate(uniq):
        cent[slot] = batch.embeddings[batch.labels == k].mean(axis=0)
    return cent


def ge2e_loss(batch: EmbeddingBatch, params: Ge2eParams) -> LossOutput:
    """Centroid-score loss: sum over utterances of 1 - sig(S_pos) + max_neg sig(S_neg).

    S[u, k] = w * cos(e_u, centroid_k) + b over the speakers present in the
    batch. The max over negatives routes gradient to the argmax speaker only
    (ties to the lowest index). Gradients reach the embeddings both directly
    and through the centroids, plus the two score scalars.
    """
    uniq, inv = np.unique(batch.labels, return_inverse=True)
    n_present = uniq.size
    if n_present < 2:
        raise InsufficientSpeakers(
            f"centroid loss needs >= 2 speakers in the batch, got {n_present}"
        )
    counts = np.bincount(inv).astype(np.float64)
    cent = np.zeros((n_present, batch.dim))
    np.add.at(cent, inv, batch.embeddings)
    cent /= counts[:, None]

    c, cache = cosine_matrix(batch.embeddings, cent)
    s = params.w_score * c + params.b_score
    sig = sigmoid(s)
    rows = np.arange(batch.size)
    pos = sig[rows, inv]
    neg = sig.copy()
    neg[rows, inv] = -np.inf
    kstar = np.argmax(neg, axis=1)
    value = float(np.sum(1.0 - pos + neg[rows, kstar]))

    ds = np.zeros_like(s)
    ds[rows, inv] -= pos * (1.0 - pos)
    top = sig[rows, kstar]
    ds[rows, kstar] += top * (1.0 - top)
    grad_w = float(np.sum(ds * c))
    grad_b = float(np.sum(ds))
    grad_emb, grad_cent = cosine_matrix_backward(params.w_score * ds, cache)
    grad_emb = grad_emb + grad_cent[inv] / counts[inv][:, None]
    return LossOutput(
        value,
        grad_embeddings=grad_emb,
        grad_scalars={"w_score": grad_w, "b_score": grad_b},
    )


def between_class_loss(head: ClassifierHead) -> LossOutput:
    """Sum of cos(W_i, W_j) over all ordered basis pairs i != j.

    Written as a double sum over ordered pairs, so each unordered pair counts
    twice and the value lies in [-N(N-1), N(N-1)]. Minimizing it spreads the
    speaker bases apart. Only the basis receives a gradient.
    """
    rows = head.basis.T
    c, cache = cosine_matrix(rows, rows)
    n = head.n_speakers
    value = float(c.sum() - np.trace(c))
    upstream = np.ones((n, n)) - np.eye(n)
    grad_a, grad_b = cosine_matrix_backward(upstream, cache)
    return LossOutput(value, grad_basis=(grad_a + grad_b).T)


def top_h_bases(head: ClassifierHead, e: np.ndarray, y: int, h: int) -> np.ndarray:
    """Indices of the min(h, N-1) non-target bases most aligned with e.

    Descending cosine order; ties broken toward the lower index.
    """
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    if not (0 <= y < head.n_speakers):
        raise ShapeMismatch(f"target speaker {y} out of range")
    c, _ = cosine_matrix(np.asarray(e, dtype=np.float64)[None, :], head.basis.T)
    order = np.argsort(-c[0], kind="stable")
    keep = order[order != y]
    return keep[: min(h, head.n_speakers - 1)]


def hard_negative_loss(batch: EmbeddingBatch, head: ClassifierHead, h: int) -> LossOutput:
    """All-class hard negative mining against the speaker bases.

    For each utterance, select the top-h non-target bases by cosine (fresh
    selection on every call, i.e. every mini-batch) and accumulate
    log(1 + exp(cos(W_neg, e) - cos(W_y, e))). The selection is held constant
    during differentiation; gradients reach the embeddings and every touched
    basis column.
    """
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    _check_labels(batch, head.n_speakers)
    n = head.n_speakers
    h_eff = min(h, n - 1)
    c, cache = cosine_matrix(batch.embeddings, head.basis.T)
    rows = np.arange(batch.size)
    order = np.argsort(-c, kind="stable", axis=1)
    keep = order[order != batch.labels[:, None]].reshape(batch.size, n - 1)
    sel = keep[:, :h_eff]
    z = c[rows[:, None], sel] - c[rows, batch.labels][:, None]
    value = float(np.sum(np.log1p(np.exp(z))))
    sz = sigmoid(z)
    upstream = np.zeros_like(c)
    upstream[rows[:, None], sel] += sz
    upstream[rows, batch.labels] -= sz.sum(axis=1)
    grad_emb, grad_basis_rows = cosine_matrix_backward(upstream, cache)
    return LossOutput(value, grad_embeddings=grad_emb, grad_basis=grad_basis_rows.T)


def composite_terms(
    composite: LossComposite,
    batch: EmbeddingBatch | None = None,
    head: ClassifierHead | None = None,
    centers: CenterStore | None = None,
    am: AmSoftmaxParams | None = None,
    ge2e: Ge2eParams | None = None,
    top_h: int | None = None,
) -> list[tuple[str, float, LossOutput]]:
    """Evaluate every component of a composite, returning (name, weight, output)."""

    def need(value, what: str, name: str):
        if value is None:
            raise ConfigInconsistency(f"loss {name!r} requires {what}")
        return value

    terms = []
    for name, weight in composite.items:
        if name == "softmax":
            out = softmax_loss(need(batch, "an embedding batch", name), need(head, "a classifier head", name))
        elif name == "center":
            out = center_loss(need(batch, "an embedding batch", name), need(centers, "a center store", name))
        elif name == "amsoftmax":
            out = am_softmax_loss(
                need(batch, "an embedding batch", name),
                need(head, "a classifier head", name),
                need(am, "am-softmax parameters", name),
            )
        elif name == "ge2e":
            out = ge2e_loss(need(batch, "an embedding batch", name), need(ge2e, "score scale/shift parameters", name))
        elif name == "between_class":
            out = between_class_loss(need(head, "a classifier head", name))
        elif name == "hard_negative":
            out = hard_negative_loss(
                need(batch, "an embedding batch", name),
                need(head, "a classifier head", name),
                need(top_h, "a top_h count", name),
            )
        else:  # pragma: no cover - guarded by LossComposite validation
            raise ConfigInconsistency(f"unknown loss {name!r}")
        terms.append((name, weight, out))
    return terms


def compose(
    composite: LossComposite,
    batch: EmbeddingBatch | None = None,
    head: ClassifierHead | None = None,
    centers: CenterStore | None = None,
    am: AmSoftmaxParams | None = None,
    ge2e: Ge2eParams | None = None,
    top_h: int | None = None,
) -> LossOutput:
    """Weighted sum of component values and gradients."""
    terms = composite_terms(
        composite, batch=batch, head=head, centers=centers, am=am, ge2e=ge2e, top_h=top_h
    )
    value = 0.0
    grad_emb = None
    grad_basis = None
    grad_bias = None
    grad_scalars: dict[str, float] | None = None

    def acc(total, grad, weight):
        if grad is None:
            return total
        if total is None:
            return weight * grad
        return total + weight * grad

    for _, weight, out in terms:
        value += weight * out.value
        grad_emb = acc(grad_emb, out.grad_embeddings, weight)
        grad_basis = acc(grad_basis, out.grad_basis, weight)
        grad_bias = acc(grad_bias, out.grad_bias, weight)
        if out.grad_scalars:
            if grad_scalars is None:
                grad_scalars = {k: 0.0 for k in out.grad_scalars}
            for k, v in out.grad_scalars.items():
                grad_scalars[k] = grad_scalars.get(k, 0.0) + weight * v
    return LossOutput(
        value,
        grad_embeddings=grad_emb,
        grad_basis=grad_basis,
        grad_bias=grad_bias,
        grad_scalars=grad_scalars,
    )
