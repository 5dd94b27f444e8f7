"""GradCAM saliency and last-layer feature retrieval."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AugmentSpec, LabeledImageSet, augment_and_batch
from .models import forward_with_taps
from .tensor import Tensor, no_grad

__all__ = [
    "SaliencyMap",
    "gradcam",
    "bilinear_resize",
    "write_pgm",
    "write_ppm",
    "colorize",
    "overlay",
    "RetrievalIndex",
    "extract_features",
    "average_precision",
    "mean_average_precision",
    "rank_gallery",
    "write_retrieval_table",
]


@dataclass
class SaliencyMap:
    values: np.ndarray
    source_layer: str
    class_index: int

    @property
    def is_empty(self) -> bool:
        return not np.any(self.values > 0)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of a 2-D array."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def gradcam(model, image, class_index: int, tap: str = "stem.conv") -> SaliencyMap:
    """Grad-CAM of ``class_index`` at the activation recorded by ``tap``.

    ``image`` is one normalized image ``[C,H,W]`` (or ``[1,C,H,W]``).  An
    all-zero map is returned as is; check :attr:`SaliencyMap.is_empty`.
    """
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim == 3:
        x = x[None]
    logits, acts = forward_with_taps(model, Tensor(x, dtype=x.dtype), [tap], mode="eval")
    act = acts[tap]
    if act is None:
        raise RuntimeError(f"tap {tap!r} produced no activation")
    onehot = np.zeros_like(logits.data)
    onehot[0, class_index] = 1.0
    score = (logits * Tensor(onehot, dtype=logits.dtype)).sum()
    act.grad = None
    score.backward()
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    weights = grad[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, act.data[0], axes=(0, 0)), 0.0)
    cam = bilinear_resize(cam.astype(np.float64), x.shape[2], x.shape[3])
    cam = np.maximum(cam, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    if hasattr(model, "zero_grad"):
        model.zero_grad()
    return SaliencyMap(cam, tap, int(class_index))


# -- portable pixmaps ------------------------------------------------------------------

def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """Binary greyscale PGM from a 2-D array in [0,1]."""
    u8 = _to_u8(values)
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary colour PPM from an ``[H,W,3]`` array in [0,1]."""
    u8 = _to_u8(rgb)
    h, w, _ = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def colorize(values: np.ndarray) -> np.ndarray:
    """Blue (low) to red (high) colour ramp, ``[H,W] -> [H,W,3]``."""
    v = np.clip(values, 0, 1)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def overlay(image_chw: np.ndarray, values: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    img = np.clip(np.asarray(image_chw, dtype=np.float64), 0, 1)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return (1 - alpha) * img.transpose(1, 2, 0) + alpha * colorize(values)


# -- retrieval ---------------------------------------------------------------------------

@dataclass
class RetrievalIndex:
    features: np.ndarray  # [N,D], rows L2-normalized
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.ids = np.asarray(self.ids)
        if not (len(self.features) == len(self.labels) == len(self.ids)):
            raise ValueError("features, labels and ids must have equal length")

    @classmethod
    def from_raw(cls, features, labels, ids=None) -> "RetrievalIndex":
        f = np.asarray(features, dtype=np.float64)
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        f = f / np.where(norms > 0, norms, 1.0)
        ids = np.arange(len(f)) if ids is None else ids
        return cls(f, labels, ids)


def extract_features(model, data: LabeledImageSet, spec: AugmentSpec | None = None,
                     batch_size: int = 256) -> RetrievalIndex:
    """Global-average-pooled pre-classifier features, L2-normalized per row."""
    spec = spec or AugmentSpec(0.0, (0.0,) * data.images.shape[1], (1.0,) * data.images.shape[1])
    model.eval()
    feats = []
    with no_grad():
        for x, _ in augment_and_batch(data, spec, batch_size, train=False):
            feats.append(model.features(Tensor(x, dtype=x.dtype)).data)
    return RetrievalIndex.from_raw(np.concatenate(feats), data.labels, np.arange(len(data)))


def rank_gallery(index: RetrievalIndex, q: int, metric: str = "cosine"):
    """Gallery order for query row ``q`` (query excluded), best first, ties by id."""
    f = index.features
    if metric == "cosine":
        score = f @ f[q]
    elif metric == "euclidean":
        score = -np.linalg.norm(f - f[q], axis=1)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    mask = np.ones(len(f), dtype=bool)
    mask[q] = False
    cand = np.flatnonzero(mask)
    order = np.lexsort((index.ids[cand], -score[cand]))
    return cand[order], score[cand[order]]


def average_precision(relevant_sorted: np.ndarray) -> float:
    """AP of a ranked relevance vector: mean over hits of (hits so far / rank)."""
    rel = np.asarray(relevant_sorted, dtype=bool)
    if not rel.any():
        raise ValueError("ranking contains no relevant item")
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(index: RetrievalIndex, query_indices=None, metric: str = "cosine") -> float:
    """Mean AP over queries, each ranked against the rest of the index."""
    n = len(index.labels)
    if n == 0:
        raise ValueError("empty retrieval index")
    queries = np.arange(n) if query_indices is None else np.asarray(query_indices)
    aps = []
    for q in queries:
        order, _ = rank_gallery(index, int(q), metric)
        rel = index.labels[order] == index.labels[q]
        if not rel.any():
            raise ValueError(f"query {index.ids[q]} has no same-class item in the gallery")
        aps.append(average_precision(rel))
    return float(np.mean(aps))


def write_retrieval_table(path, index: RetrievalIndex, top_k: int = 10, metric: str = "cosine",
                          query_indices=None) -> None:
    queries = np.arange(len(index.labels)) if query_indices is None else np.asarray(query_indices)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "rank", "gallery_id", "similarity", "relevant"])
        for q in queries:
            order, score = rank_gallery(index, int(q), metric)
            for r, (g, s) in enumerate(zip(order[:top_k], score[:top_k]), start=1):
                w.writerow([index.ids[q], r, index.ids[g], f"{s:.8f}",
                            int(index.labels[g] == index.labels[q])])
