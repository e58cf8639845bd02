"""Working with trained embeddings: latent interpolation, CSV export for
external visualization tools, and a linear-SVM transfer probe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .rng import substream


def interpolate(z1, z2, steps: int, decoder) -> list[np.ndarray]:
    """Decode the straight line between two embeddings.

    Frame i uses alpha = i/(steps-1); the first and last frames decode z1 and
    z2 themselves, so endpoints are bit-identical to direct decodes.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 1:
        raise ContractError(f"embeddings must be equal-length vectors, "
                            f"got {z1.shape} and {z2.shape}")
    steps = int(steps)
    if steps < 2:
        raise ContractError(f"need at least 2 interpolation steps, got {steps}")
    frames = []
    for i in range(steps):
        if i == 0:
            z = z1
        elif i == steps - 1:
            z = z2
        else:
            alpha = i / (steps - 1)
            z = (1.0 - alpha) * z1 + alpha * z2
        frames.append(decoder(z))
    return frames


@dataclass
class EmbeddingRecord:
    id: str
    label: str | None
    vector: np.ndarray


def export_embeddings(dataset, encoder, path) -> int:
    """Write `id,label,v0..v{psi-1}` rows, one per (id, cloud) dataset item,
    in dataset order with 12 significant digits. Returns the row count."""
    rows = []
    width = None
    for item_id, cloud in dataset:
        vector = np.asarray(encoder(cloud.points), dtype=np.float64)
        if width is None:
            width = vector.size
        elif vector.size != width:
            raise ContractError("encoder returned vectors of differing lengths")
        label = cloud.label if cloud.label is not None else ""
        rows.append((str(item_id), label, vector))

    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "label"] + [f"v{i}" for i in range(width or 0)])
        for item_id, label, vector in rows:
            writer.writerow([item_id, label] + [f"{v:.12g}" for v in vector])
    return len(rows)


def read_embeddings(path) -> list[EmbeddingRecord]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty embedding file") from None
        if header[:2] != ["id", "label"]:
            raise FormatError(f"{path}: expected header id,label,v0.., got {header[:2]}")
        width = len(header) - 2
        records = []
        for number, row in enumerate(reader, start=2):
            if len(row) != width + 2:
                raise FormatError(f"{path}:{number}: expected {width + 2} fields, got {len(row)}")
            try:
                vector = np.array([float(v) for v in row[2:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{number}: non-numeric embedding value") from exc
            records.append(EmbeddingRecord(id=row[0], label=row[1] or None, vector=vector))
    return records


# ---------------------------------------------------------------- linear svm


@dataclass
class LinearSvmModel:
    """One-vs-rest linear classifier: one weight row and bias per class."""

    classes: list
    weights: np.ndarray  # (n_classes, n_features)
    biases: np.ndarray   # (n_classes,)
    c: float

    def margins(self, vector: np.ndarray) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.weights.shape[1],):
            raise ContractError(f"expected a {self.weights.shape[1]}-dim vector, "
                                f"got shape {vector.shape}")
        return self.weights @ vector + self.biases


def train_linear_svm(records, c: float = 1.0, seed: int = 0, epochs: int = 200,
                     learning_rate: float = 1e-2) -> LinearSvmModel:
    """One-vs-rest hinge loss with L2 regularization, by per-sample subgradient
    descent over a seeded shuffle with 1/t learning-rate decay. Deterministic
    for a fixed seed.
    """
    records = list(records)
    labels = sorted({r.label for r in records})
    if len(labels) < 2:
        raise ContractError(f"need at least 2 classes, got {labels}")
    counts = {label: sum(1 for r in records if r.label == label) for label in labels}
    thin = [label for label, count in counts.items() if count < 2]
    if thin:
        raise ContractError(f"need at least 2 samples per class, too few for {thin}")

    features = np.stack([np.asarray(r.vector, dtype=np.float64) for r in records])
    n_samples, n_features = features.shape
    targets = np.array([[1.0 if r.label == label else -1.0 for label in labels]
                        for r in records])  # (n_samples, n_classes)

    weights = np.zeros((len(labels), n_features))
    biases = np.zeros(len(labels))
    for epoch in range(epochs):
        lr = learning_rate / (1.0 + epoch)
        order = substream(seed, f"svm-shuffle/{epoch}").permutation(n_samples)
        for idx in order:
            x = features[idx]
            y = targets[idx]
            margins = y * (weights @ x + biases)
            active = margins < 1.0
            # regularizer spread across samples; hinge subgradient where active
            weights -= lr * weights / n_samples
            if active.any():
                push = lr * c * y * active
                weights += push[:, None] * x[None, :]
                biases += push
    return LinearSvmModel(classes=labels, weights=weights, biases=biases, c=c)


def classify(model: LinearSvmModel, vector) -> object:
    """Label with the largest margin; ties go to the lowest class index."""
    return model.classes[int(np.argmax(model.margins(np.asarray(vector, dtype=np.float64))))]


def classification_accuracy(model: LinearSvmModel, records) -> float:
    records = list(records)
    if not records:
        raise ContractError("accuracy needs a non-empty record list")
    hits = sum(1 for r in records if classify(model, r.vector) == r.label)
    return hits / len(records)
