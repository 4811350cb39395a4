"""Slide-level scoring: sliding-window heat maps, object features, random forest.

A heat map keeps two grids.  ``patch_probs`` has one tumour probability per
window (windows start every ``stride`` pixels).  ``values`` has one entry per
``stride x stride`` cell, the mean of every window covering that cell; it is
the map that gets thresholded.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BoundaryError, ConfigError, DataError
from .evalkit import auc_roc, average_precision

THRESHOLDS = (0.25, 0.5, 0.9)
OBJECT_FEATURES = (
    "area", "perimeter", "eccentricity", "solidity", "extent",
    "major_axis_length", "minor_axis_length", "equivalent_diameter",
    "mean_probability", "max_probability",
)
STATISTICS = ("mean", "std", "min", "max")
N_FEATURES = len(THRESHOLDS) * len(OBJECT_FEATURES) * len(STATISTICS)


def feature_names() -> list:
    """Column order: threshold, then object feature, then statistic."""
    return [f"t{t:g}_{f}_{s}" for t in THRESHOLDS for f in OBJECT_FEATURES for s in STATISTICS]


@dataclass
class HeatMap:
    patch_probs: np.ndarray
    patch_size: int = 128
    stride: int = 64
    magnification: int = 10
    slide_id: str = ""

    @property
    def values(self) -> np.ndarray:
        """Per-cell mean of all covering window probabilities."""
        k = self.patch_size // self.stride
        gy, gx = self.patch_probs.shape
        acc = np.zeros((gy + k - 1, gx + k - 1))
        cnt = np.zeros_like(acc)
        # fixed accumulation order keeps the result independent of inference order
        for dy in range(k):
            for dx in range(k):
                acc[dy:dy + gy, dx:dx + gx] += self.patch_probs
                cnt[dy:dy + gy, dx:dx + gx] += 1
        return acc / cnt

    def save(self, path) -> tuple:
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.patch_probs.astype(np.float32))
        meta = {"slide_id": self.slide_id, "patch_size": self.patch_size, "stride": self.stride,
                "magnification": self.magnification, "grid": list(self.patch_probs.shape)}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return path.with_suffix(".npy"), path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "HeatMap":
        path = Path(path)
        npy, side = path.with_suffix(".npy"), path.with_suffix(".json")
        if not npy.exists() or not side.exists():
            raise DataError(f"heat map files missing for {path}")
        meta = json.loads(side.read_text())
        return cls(np.load(npy).astype(np.float64), meta["patch_size"], meta["stride"],
                   meta["magnification"], meta["slide_id"])


def window_grid(height: int, width: int, patch: int = 128, stride: int = 64) -> tuple:
    if height < patch or width < patch:
        raise BoundaryError(f"slide {width}x{height} is smaller than one {patch}px window")
    return (height - patch) // stride + 1, (width - patch) // stride + 1


def build_heatmap(predict: Callable[[np.ndarray], np.ndarray], slide, patch_size: int = 128,
                  stride: int = 64, magnification: int = 10, batch: int = 64,
                  order: Optional[Sequence[int]] = None) -> HeatMap:
    """Run ``predict`` over every window of the slide at ``magnification``.

    ``predict`` maps an (N, S, S, 3) image batch to N tumour probabilities.
    ``order`` optionally permutes the window visiting order.
    """
    image = slide.level_image(magnification) if hasattr(slide, "level_image") else np.asarray(slide)
    h, w = image.shape[:2]
    gy, gx = window_grid(h, w, patch_size, stride)
    cells = [(i, j) for i in range(gy) for j in range(gx)]
    if order is not None:
        cells = [cells[k] for k in order]
    probs = np.zeros((gy, gx))
    for start in range(0, len(cells), batch):
        chunk = cells[start:start + batch]
        x = np.stack([image[i * stride:i * stride + patch_size, j * stride:j * stride + patch_size]
                      for i, j in chunk])
        p = np.asarray(predict(x), dtype=np.float64).reshape(-1)
        for (i, j), v in zip(chunk, p):
            probs[i, j] = v
    return HeatMap(probs, patch_size, stride, magnification, getattr(slide, "slide_id", ""))


def model_predictor(model, positive_class: int = 1) -> Callable:
    from .trainer import predict

    return lambda images: predict(model, images)[:, positive_class]


def binarize(values: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels at or above ``threshold`` are foreground."""
    return np.asarray(values) >= threshold


def object_features(values: np.ndarray, threshold: float) -> np.ndarray:
    """(n_objects, 10) features of the 8-connected components above ``threshold``."""
    from skimage.measure import label, regionprops

    lab = label(binarize(values, threshold), connectivity=2)
    rows = []
    for r in regionprops(lab, intensity_image=np.asarray(values, dtype=np.float64)):
        rows.append([r.area, r.perimeter, r.eccentricity, r.solidity, r.extent,
                     r.axis_major_length, r.axis_minor_length, r.equivalent_diameter_area,
                     r.intensity_mean, r.intensity_max])
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(OBJECT_FEATURES))


def extract_features(heatmap) -> np.ndarray:
    """120-long vector ordered as :func:`feature_names`; thresholds with no objects give zeros."""
    values = heatmap.values if isinstance(heatmap, HeatMap) else np.asarray(heatmap, dtype=np.float64)
    if values.size == 0:
        raise BoundaryError("empty heat map")
    out = []
    for t in THRESHOLDS:
        f = object_features(values, t)
        if len(f) == 0:
            out.append(np.zeros(len(OBJECT_FEATURES) * len(STATISTICS)))
            continue
        stats = np.stack([f.mean(0), f.std(0), f.min(0), f.max(0)], axis=1)
        out.append(stats.ravel())
    return np.concatenate(out)


def write_feature_csv(path, slide_ids: Sequence[str], vectors, labels=None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id"] + (["label"] if labels is not None else []) + feature_names())
        for i, (sid, v) in enumerate(zip(slide_ids, vectors)):
            w.writerow([sid] + ([labels[i]] if labels is not None else []) + [repr(float(x)) for x in v])
    return path


FOREST_PARAMS = {"n_estimators": 100, "criterion": "gini"}


def classify_slides(train_features, train_labels, test_features, seed: int = 0) -> np.ndarray:
    """Random-forest probability of the positive slide class."""
    from sklearn.ensemble import RandomForestClassifier

    y = np.asarray(train_labels)
    if len(np.unique(y)) < 2:
        raise ConfigError("slide classifier needs both classes in the training set")
    rf = RandomForestClassifier(random_state=seed, **FOREST_PARAMS)
    rf.fit(np.asarray(train_features), y)
    return rf.predict_proba(np.asarray(test_features))[:, list(rf.classes_).index(1)]


def evaluate_slides(scores, labels) -> tuple:
    return auc_roc(scores, labels), average_precision(scores, labels)


def render_overlay(slide_image: np.ndarray, heatmap: HeatMap, path, alpha: float = 0.45) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h, w = slide_image.shape[:2]
    vals = heatmap.values
    extent = (0, vals.shape[1] * heatmap.stride, vals.shape[0] * heatmap.stride, 0)
    fig, ax = plt.subplots(figsize=(5, 5 * h / w))
    ax.imshow(np.clip(slide_image, 0, 1))
    im = ax.imshow(vals, cmap="jet", alpha=alpha, vmin=0, vmax=1, extent=extent, interpolation="nearest")
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return Path(path)
