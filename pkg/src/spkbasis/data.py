"""Synthetic speaker clusters and deterministic mini-batch sampling.

Speakers are Gaussian clusters: a per-speaker mean drawn once, then
utterances scattered around it. Two samplers are provided: plain random
batches, and speaker-grouped batches (a few utterances per speaker) as the
centroid-based loss requires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidPlan, InvalidSpec
from .numeric import derive_rng, make_rng

TRAIN = "train"
HELDOUT = "heldout"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_speakers: int
    utterances_per_speaker: int
    feature_dim: int
    speaker_spread: float = 1.0
    utterance_noise: float = 0.3
    seed: int = 0
    disjoint_eval_speakers: bool = False

    def __post_init__(self):
        if self.n_speakers < 2:
            raise InvalidSpec(f"n_speakers must be >= 2, got {self.n_speakers}")
        if self.utterances_per_speaker < 1:
            raise InvalidSpec(
                f"utterances_per_speaker must be >= 1, got {self.utterances_per_speaker}"
            )
        if self.feature_dim < 1:
            raise InvalidSpec(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.speaker_spread <= 0.0 or self.utterance_noise <= 0.0:
            raise InvalidSpec("spreads must be > 0")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # per-row "train" / "heldout"
    spec: SyntheticDatasetSpec | None = None

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_speakers(self) -> int:
        return int(self.labels.max()) + 1

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """Draw the dataset deterministically from the spec's seed.

    Speaker means are iid N(0, spread^2 I); each utterance is its speaker
    mean plus N(0, noise^2 I). The split tags 80/20 train/heldout per
    speaker (at least one heldout utterance when a speaker has >= 2), or
    whole heldout speakers when disjoint_eval_speakers is set.
    """
    rng = make_rng(spec.seed)
    n, u, d = spec.n_speakers, spec.utterances_per_speaker, spec.feature_dim
    means = rng.normal(0.0, spec.speaker_spread, size=(n, d))
    features = np.repeat(means, u, axis=0) + rng.normal(
        0.0, spec.utterance_noise, size=(n * u, d)
    )
    labels = np.repeat(np.arange(n, dtype=np.int64), u)

    split = np.full(n * u, TRAIN, dtype="<U8")
    if spec.disjoint_eval_speakers:
        n_held = max(1, int(0.2 * n))
        split[labels >= n - n_held] = HELDOUT
    elif u >= 2:
        held_per_speaker = max(1, int(0.2 * u))
        for k in range(n):
            start = k * u
            split[start + u - held_per_speaker : start + u] = HELDOUT
    return Dataset(features=features, labels=labels, split=split, spec=spec)


@dataclass(frozen=True)
class BatchPlan:
    """How mini-batches are drawn: 'random' rows, or 'grouped' by speaker."""

    mode: str
    batch_size: int
    utterances_per_speaker_in_batch: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "grouped"):
            raise InvalidPlan(f"mode must be 'random' or 'grouped', got {self.mode!r}")
        if self.batch_size < 1:
            raise InvalidPlan(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode == "grouped":
            u = self.utterances_per_speaker_in_batch
            if u < 1:
                raise InvalidPlan(f"utterances per speaker must be >= 1, got {u}")
            if self.batch_size % u != 0:
                raise InvalidPlan(
                    f"batch_size {self.batch_size} not divisible by "
                    f"utterances_per_speaker_in_batch {u}"
                )

    @property
    def speakers_per_batch(self) -> int:
        if self.mode != "grouped":
            raise InvalidPlan("speakers_per_batch is defined for grouped plans only")
        return self.batch_size // self.utterances_per_speaker_in_batch


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray


def next_batch(plan: BatchPlan, ds: Dataset, step: int) -> Batch:
    """The mini-batch for a given step; a pure function of (plan, dataset, step).

    Random mode samples batch_size train rows without replacement. Grouped
    mode samples batch_size/U speakers, then U train utterances of each.
    """
    rng = derive_rng(plan.seed, step)
    train_idx = ds.indices(TRAIN)
    if plan.mode == "random":
        if train_idx.size < plan.batch_size:
            raise InvalidPlan(
                f"dataset has {train_idx.size} train rows, batch needs {plan.batch_size}"
            )
        chosen = rng.choice(train_idx, size=plan.batch_size, replace=False)
    else:
        u = plan.utterances_per_speaker_in_batch
        train_labels = ds.labels[train_idx]
        speakers, counts = np.unique(train_labels, return_counts=True)
        eligible = speakers[counts >= u]
        k = plan.speakers_per_batch
        if eligible.size < k:
            raise InvalidPlan(
                f"only {eligible.size} speakers have >= {u} train utterances; "
                f"batch needs {k}"
            )
        chosen_speakers = rng.choice(eligible, size=k, replace=False)
        parts = []
        for spk in chosen_speakers:
            pool = train_idx[train_labels == spk]
            parts.append(rng.choice(pool, size=u, replace=False))
        chosen = np.concatenate(parts)
    return Batch(features=ds.features[chosen], labels=ds.labels[chosen])


def save_dataset(ds: Dataset, path) -> None:
    """Text export: '# key value' header lines, then 'label, split, f_1, ..., f_d' rows.

    Floats are written with shortest round-trip repr, so load_dataset
    restores them exactly.
    """
    lines = []
    lines.append(f"# rows {ds.n_rows}")
    lines.append(f"# feature_dim {ds.feature_dim}")
    lines.append(f"# n_speakers {ds.n_speakers}")
    if ds.spec is not None:
        s = ds.spec
        lines.append(f"# utterances_per_speaker {s.utterances_per_speaker}")
        lines.append(f"# speaker_spread {float(s.speaker_spread)!r}")
        lines.append(f"# utterance_noise {float(s.utterance_noise)!r}")
        lines.append(f"# seed {s.seed}")
        lines.append(f"# disjoint_eval_speakers {s.disjoint_eval_speakers}")
    for i in range(ds.n_rows):
        values = ", ".join(repr(float(x)) for x in ds.features[i])
        lines.append(f"{int(ds.labels[i])}, {ds.split[i]}, {values}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    header: dict[str, str] = {}
    labels = []
    splits = []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                header[key] = value
                continue
            parts = [p.strip() for p in line.split(",")]
            labels.append(int(parts[0]))
            splits.append(parts[1])
            rows.append([float(p) for p in parts[2:]])
    spec = None
    if "seed" in header:
        spec = SyntheticDatasetSpec(
            n_speakers=int(header["n_speakers"]),
            utterances_per_speaker=int(header["utterances_per_speaker"]),
            feature_dim=int(header["feature_dim"]),
            speaker_spread=float(header["speaker_spread"]),
            utterance_noise=float(header["utterance_noise"]),
            seed=int(header["seed"]),
            disjoint_eval_speakers=header.get("disjoint_eval_speakers") == "True",
        )
    return Dataset(
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        split=np.array(splits, dtype="<U8"),
        spec=spec,
    )
