"""Pseudo-class labels from k-means over frozen-extractor features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import DatasetIndex, images_to_tensor


@dataclass(frozen=True)
class ClusterModel:
    centers: np.ndarray  # K_C x D
    seed: int
    inertia: float
    n_iter: int = 0
    inertia_history: tuple = field(default=(), repr=False)

    @property
    def n_clusters(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def predict(self, features) -> np.ndarray:
        """Nearest center per row; ties resolve to the lowest center index."""
        return _assign(np.asarray(features, dtype=np.float64), self.centers)[0]


def _sq_dists(x: np.ndarray, centers: np.ndarray, chunk: int = 1024) -> np.ndarray:
    # explicit differences (not the expanded form) keep exact ties exact
    out = np.empty((len(x), len(centers)))
    for s in range(0, len(x), chunk):
        diff = x[s:s + chunk, None, :] - centers[None, :, :]
        out[s:s + chunk] = (diff**2).sum(-1)
    return out


def _assign(x, centers):
    d = _sq_dists(x, centers)
    labels = d.argmin(axis=1)  # argmin returns the first minimum
    return labels, d[np.arange(len(x)), labels]


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    centers = _kmeans_pp(x, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d = _assign(x, centers)
        history.append(float(d.sum()))
        counts = np.bincount(labels, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            far = int(d.argmax())
            centers[empty] = x[far]
            labels[far] = empty
            d[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        new = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        if shift < tol:
            break
    _, d = _assign(x, centers)
    history.append(float(d.sum()))
    return centers, history, n_iter


def fit_kmeans(features, n_clusters: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
               n_init: int = 10) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Empty clusters are re-seeded from the point farthest from its center.
    Each restart stops when the largest center shift drops below ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an n x D matrix")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if len(x) < n_clusters:
        raise ValueError(f"need at least K_C={n_clusters} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, history, n_iter = _lloyd(x, n_clusters, rng, max_iter, tol)
        if best is None or history[-1] < best[1][-1]:
            best = (centers, history, n_iter)
    centers, history, n_iter = best
    return ClusterModel(centers=centers, seed=seed, inertia=history[-1], n_iter=n_iter,
                        inertia_history=tuple(history))


@torch.no_grad()
def extract_clustering_features(samples: Sequence, extractor: Callable, batch_size: int = 32,
                                center: bool = True) -> np.ndarray:
    """Final-stage feature map of a frozen extractor, average-pooled and L2-normalised.

    ``extractor`` maps an N x 3 x H x W tensor to a list of stage maps (the
    backbone encoder fits) or to a single N x D x h x w / N x D tensor.

    With ``center`` the mean pooled vector of the set is subtracted before
    normalising. Pooled random-conv features share one dominant direction
    (cosine ~0.85 to the mean for every image), which otherwise swamps the
    between-class differences.
    """
    if len(samples) == 0:
        raise ValueError("no samples to extract features from")
    rows = []
    for start in range(0, len(samples), batch_size):
        x = images_to_tensor(samples[start:start + batch_size])
        out = extractor(x)
        if isinstance(out, (list, tuple)):
            out = out[-1]
        if out.ndim == 4:
            out = out.mean(dim=(2, 3))
        rows.append(out.double().cpu().numpy())
    feats = np.concatenate(rows)
    if center:
        feats = feats - feats.mean(axis=0)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.where(norms > 0, norms, 1.0)


def assign_pseudo_labels(index: DatasetIndex, model: ClusterModel, features) -> DatasetIndex:
    """Attach nearest-center pseudo labels to the train samples of ``index``."""
    train = index.train_samples
    features = np.asarray(features)
    if len(features) != len(train):
        raise ValueError(f"{len(features)} feature rows for {len(train)} train samples")
    labels = model.predict(features)
    it = iter(labels)
    samples = [s.replace(pseudo_class_id=int(next(it))) if s.split == "train" else s for s in index.samples]
    return index.replace_samples(samples)


def pseudo_label_index(index: DatasetIndex, n_clusters: int, seed: int = 0,
                       extractor: Optional[Callable] = None):
    """Extract features, cluster and label in one go; returns (index, model)."""
    if extractor is None:
        from .backbone import Encoder

        extractor = Encoder().eval()
    feats = extract_clustering_features(index.train_samples, extractor)
    model = fit_kmeans(feats, n_clusters, seed=seed)
    return assign_pseudo_labels(index, model, feats), model
