"""Self-supervised pretext tasks: the transform g(x, r), its label space and loss.

Images are (H, W, 3) float arrays.  Every transform is pure; randomness only
enters through the ``rng`` handed to :func:`make_batch`.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import stainsep
from .datagen import MAGNIFICATIONS, Sample, resize_bilinear
from .errors import ConfigError, ParameterError

CLASSIFICATION = "classification"
PIXELWISE = "pixelwise"
ADVERSARIAL = "adversarial"

# magnification task labels follow MAGNIFICATIONS order: 40x -> 0 ... 5x -> 3
MAGNIFICATION_LABEL = {m: i for i, m in enumerate(MAGNIFICATIONS)}
# jigmag ranks run the other way: 5x -> 0 ... 40x -> 3
JIGMAG_RANK = {5: 0, 10: 1, 20: 2, 40: 3}

# Twelve orderings of the four jigmag ranks over a 2x2 grid, listed as
# (top-left, top-right, bottom-left, bottom-right).  The lexicographically
# first 12-subset of S4 with the largest minimum pairwise Hamming distance
# (3); see find_codebook().
JIGMAG_CODEBOOK = (
    (0, 1, 2, 3), (0, 2, 3, 1), (0, 3, 1, 2), (1, 0, 3, 2),
    (1, 2, 0, 3), (1, 3, 2, 0), (2, 0, 1, 3), (2, 1, 3, 0),
    (2, 3, 0, 1), (3, 0, 2, 1), (3, 1, 0, 2), (3, 2, 1, 0),
)


def hamming(a, b) -> int:
    return sum(x != y for x, y in zip(a, b))


def find_codebook(size: int = 12, n: int = 4) -> tuple:
    """Exhaustive search for a max-min-Hamming permutation codebook.

    Tries distances from ``n`` downwards; depth-first search over
    permutations in lexicographic order, so the first complete set found is
    the lexicographically smallest for that distance.
    """
    perms = list(itertools.permutations(range(n)))

    def dfs(start, chosen, d):
        if len(chosen) == size:
            return tuple(chosen)
        for i in range(start, len(perms)):
            if len(perms) - i < size - len(chosen):
                return None
            if all(hamming(perms[i], c) >= d for c in chosen):
                found = dfs(i + 1, chosen + [perms[i]], d)
                if found:
                    return found
        return None

    for d in range(n, 0, -1):
        found = dfs(0, [], d)
        if found:
            return found
    raise ParameterError(f"no codebook of size {size} over S{n}")


def codebook_hash(codebook=JIGMAG_CODEBOOK) -> str:
    return hashlib.sha256(repr(tuple(map(tuple, codebook))).encode()).hexdigest()


# ---------------------------------------------------------------------------
# task registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    loss: str
    num_classes: Optional[int] = None
    target_shape: Optional[tuple] = None
    weight: float = 1.0
    uses_labeled: bool = True
    uses_unlabeled: bool = True

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigError(f"task {self.name}: weight must be >= 0")
        if self.kind == CLASSIFICATION and (self.num_classes is None or self.num_classes < 2):
            raise ConfigError(f"task {self.name}: classification needs num_classes >= 2")


TASKS = {
    "rotation": TaskSpec("rotation", CLASSIFICATION, "cross-entropy", num_classes=4),
    "flipping": TaskSpec("flipping", CLASSIFICATION, "cross-entropy", num_classes=2),
    "magnification": TaskSpec("magnification", CLASSIFICATION, "cross-entropy", num_classes=4),
    "jigmag": TaskSpec("jigmag", CLASSIFICATION, "cross-entropy", num_classes=len(JIGMAG_CODEBOOK)),
    "autoencoder": TaskSpec("autoencoder", PIXELWISE, "L1", target_shape=(3, 128, 128)),
    "hematoxylin": TaskSpec("hematoxylin", PIXELWISE, "L1", target_shape=(1, 128, 128)),
    "generative": TaskSpec("generative", ADVERSARIAL, "adversarial", uses_labeled=False),
    "domain": TaskSpec("domain", ADVERSARIAL, "cross-entropy", num_classes=2),
}

NEEDS_PYRAMID = ("magnification", "jigmag")


def make_task(name: str, weight: float = 1.0, **overrides) -> TaskSpec:
    try:
        base = TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; known tasks: {', '.join(TASKS)}") from None
    return replace(base, weight=float(weight), **overrides)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def _image(x) -> np.ndarray:
    return x.image if isinstance(x, Sample) else np.asarray(x)


def rotate(sample, r: int):
    """Rotate counter-clockwise by ``r * 90`` degrees; label is ``r``."""
    img = _image(sample)
    if img.shape[0] != img.shape[1]:
        raise ParameterError(f"rotation needs a square image, got {img.shape[:2]}")
    if r not in (0, 1, 2, 3):
        raise ParameterError(f"rotation label must be in 0..3, got {r}")
    return np.rot90(img, k=r, axes=(0, 1)).copy(), r


def flip(sample, r: int):
    """Mirror columns when ``r == 1``."""
    img = _image(sample)
    if r not in (0, 1):
        raise ParameterError(f"flip label must be 0 or 1, got {r}")
    return (img[:, ::-1].copy() if r else img.copy()), r


def magnification_label(magnification: int) -> int:
    try:
        return MAGNIFICATION_LABEL[magnification]
    except KeyError:
        raise ParameterError(f"unknown magnification {magnification!r}") from None


@dataclass
class PretextBatch:
    task: str
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ParameterError("inputs and targets differ in length")


def magnification_task(pyramid_samples: Sequence[Sample]) -> PretextBatch:
    images = np.stack([s.image for s in pyramid_samples])
    labels = np.array([magnification_label(s.magnification) for s in pyramid_samples], dtype=np.int64)
    return PretextBatch("magnification", images, labels)


def jigmag_assemble(tiles, v) -> np.ndarray:
    """Place ``tiles[rank]`` at grid position k where ``v[k] == rank``."""
    tiles = np.asarray(tiles)
    t = tiles.shape[1]
    out = np.empty((2 * t, 2 * t) + tiles.shape[3:], dtype=tiles.dtype)
    for k, rank in enumerate(v):
        r, c = divmod(k, 2)
        out[r * t:(r + 1) * t, c * t:(c + 1) * t] = tiles[rank]
    return out


def jigmag_disassemble(image, v) -> np.ndarray:
    image = np.asarray(image)
    t = image.shape[0] // 2
    tiles = np.empty((4, t, t) + image.shape[2:], dtype=image.dtype)
    for k, rank in enumerate(v):
        r, c = divmod(k, 2)
        tiles[rank] = image[r * t:(r + 1) * t, c * t:(c + 1) * t]
    return tiles


def jigmag_tiles(pyramid_samples: Sequence[Sample], tile: int = 64) -> np.ndarray:
    """Resize the four same-centre samples to ``tile`` px, ordered by jigmag rank."""
    by_mag = {s.magnification: s for s in pyramid_samples}
    missing = [m for m in JIGMAG_RANK if m not in by_mag]
    if missing or len(pyramid_samples) != 4:
        raise ParameterError(f"jigmag needs one sample per level {sorted(JIGMAG_RANK)}; missing {missing}")
    ordered = sorted(by_mag.values(), key=lambda s: JIGMAG_RANK[s.magnification])
    return np.stack([resize_bilinear(s.image, tile, tile) for s in ordered])


def jigmag(pyramid_samples: Sequence[Sample], perm_index: int, tile: int = 64):
    if not 0 <= perm_index < len(JIGMAG_CODEBOOK):
        raise ParameterError(f"jigmag index must be in [0, {len(JIGMAG_CODEBOOK)})")
    tiles = jigmag_tiles(pyramid_samples, tile)
    return jigmag_assemble(tiles, JIGMAG_CODEBOOK[perm_index]), perm_index


def autoencoder_target(sample):
    img = _image(sample)
    return img, img.copy()


def hematoxylin_task(sample, stain=stainsep.DEFAULT_STAIN):
    img = _image(sample)
    return img, stainsep.hematoxylin_target(img, stain)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def _pyramid_to_jigmag_tiles(pyramid: np.ndarray) -> np.ndarray:
    """(N, 4, S, S, 3) in MAGNIFICATIONS order -> (N, 4, S/2, S/2, 3) in jigmag rank order.

    A 2x bilinear reduction with half-pixel centres is a 2x2 box mean.
    """
    p = np.asarray(pyramid, dtype=np.float32)
    n, _, s, _, ch = p.shape
    small = p.reshape(n, 4, s // 2, 2, s // 2, 2, ch).mean(axis=(3, 5))
    order = [MAGNIFICATIONS.index(m) for m in sorted(JIGMAG_RANK, key=JIGMAG_RANK.get)]
    return small[:, order]


def make_batch(task: TaskSpec, images: np.ndarray, rng: np.random.Generator,
               pyramid: Optional[np.ndarray] = None, stain=stainsep.DEFAULT_STAIN) -> PretextBatch:
    """Draw one fresh r per image, uniformly over the task's label space."""
    n = len(images)
    name = task.name
    if name == "rotation":
        r = rng.integers(0, 4, n)
        x = np.stack([np.rot90(img, k=int(k), axes=(0, 1)) for img, k in zip(images, r)])
    elif name == "flipping":
        r = rng.integers(0, 2, n)
        x = np.stack([img[:, ::-1] if k else img for img, k in zip(images, r)])
    elif name == "magnification":
        if pyramid is None:
            raise ConfigError("magnification task needs pyramid samples")
        r = rng.integers(0, 4, n)
        x = np.asarray(pyramid[np.arange(n), r], dtype=np.float32)
    elif name == "jigmag":
        if pyramid is None:
            raise ConfigError("jigmag task needs pyramid samples")
        r = rng.integers(0, len(JIGMAG_CODEBOOK), n)
        tiles = _pyramid_to_jigmag_tiles(pyramid)
        x = np.stack([jigmag_assemble(t, JIGMAG_CODEBOOK[k]) for t, k in zip(tiles, r)])
    elif name == "autoencoder":
        x = np.asarray(images)
        return PretextBatch(name, x, x.copy())
    elif name == "hematoxylin":
        x = np.asarray(images)
        y = np.stack([stainsep.hematoxylin_target(img, stain) for img in x]).astype(np.float32)
        return PretextBatch(name, x, y)
    else:
        raise ConfigError(f"task {name!r} has no per-image transform")
    return PretextBatch(name, np.ascontiguousarray(x, dtype=np.float32), r.astype(np.int64))
