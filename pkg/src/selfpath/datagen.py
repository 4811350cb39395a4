"""Synthetic H&E-like slides, multi-resolution sampling and patch manifests.

Slides are rendered in optical-density space: a textured eosin background plus
Gaussian-blob nuclei stained with hematoxylin.  Tumour regions carry denser,
larger and darker nuclei.  Every slide is a small pyramid whose lower levels
are successive 2x bilinear reductions of the base level, mirroring how whole
slide images are stored.

Coordinates are (x, y) in base-level pixels; arrays are indexed [row, col].
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import BoundaryError, DataError, ParameterError
from .stainsep import EOSIN_OD, HEMATOXYLIN_OD, StainMatrix

log = logging.getLogger(__name__)

MAGNIFICATIONS = (40, 20, 10, 5)
PATCH_SIZE = 128
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and clamped borders.

    Computed in float64; the result is cast back to the input's float dtype.
    """
    img = np.asarray(image)
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    x = img.astype(np.float64, copy=False)
    in_h, in_w = x.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return x.astype(dtype, copy=True)
    r0, r1, wr = _axis_weights(in_h, out_h)
    c0, c1, wc = _axis_weights(in_w, out_w)
    wr = wr.reshape((-1,) + (1,) * (x.ndim - 1))
    rows = x[r0] * (1.0 - wr) + x[r1] * wr
    wc = wc.reshape((1, -1) + (1,) * (x.ndim - 2))
    out = rows[:, c0] * (1.0 - wc) + rows[:, c1] * wc
    return out.astype(dtype, copy=False)


def halve(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    return resize_bilinear(image, h // 2, w // 2)


# ---------------------------------------------------------------------------
# slides
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlideParams:
    width: int = 512
    height: int = 512
    base_magnification: int = 10
    num_classes: int = 2
    # nuclei per base-level pixel in class-0 tissue
    nucleus_density: float = 0.004
    # density of the highest class relative to class 0
    tumor_density_ratio: float = 2.0
    nucleus_radius: tuple = (1.8, 3.0)
    tumor_radius_scale: float = 1.3
    hematoxylin_intensity: tuple = (0.5, 0.9)
    tumor_darkening: float = 1.3
    eosin_intensity: float = 0.30
    texture_amplitude: float = 0.15
    texture_scale: float = 3.0
    # fraction of the slide covered by tumour (binary slides only)
    tumor_fraction: float = 0.35
    region_scale: float = 0.12
    # per-slide multiplicative jitter of densities and stain intensities, U(1-j, 1+j)
    slide_jitter: float = 0.0
    hematoxylin_od: tuple = HEMATOXYLIN_OD
    eosin_od: tuple = EOSIN_OD

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ParameterError(f"slide dimensions must be positive, got {self.width}x{self.height}")
        if self.base_magnification not in MAGNIFICATIONS:
            raise ParameterError(f"base magnification must be one of {MAGNIFICATIONS}")
        step = max(1, self.base_magnification // min(MAGNIFICATIONS))
        if self.width % step or self.height % step:
            raise ParameterError(f"slide dimensions must be multiples of {step} to build the pyramid")
        if self.nucleus_density < 0:
            raise ParameterError("nucleus density must be >= 0")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if not 0.0 <= self.tumor_fraction <= 1.0:
            raise ParameterError("tumor_fraction must lie in [0, 1]")
        if not 0.0 <= self.slide_jitter < 1.0:
            raise ParameterError("slide_jitter must lie in [0, 1)")
        if self.tumor_density_ratio <= 0:
            raise ParameterError("tumor_density_ratio must be > 0")

    @property
    def stain(self) -> StainMatrix:
        return StainMatrix.from_vectors(self.hematoxylin_od, self.eosin_od)

    @classmethod
    def from_dict(cls, d: dict) -> "SlideParams":
        d = dict(d)
        for key in ("nucleus_radius", "hematoxylin_intensity", "hematoxylin_od", "eosin_od"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SyntheticSlide:
    slide_id: str
    params: SlideParams
    seed: int
    domain: str
    levels: dict  # magnification -> (H, W, 3) float32
    class_field: np.ndarray  # (H, W) int8 at base level
    # placement log, columns: x, y, radius, intensity, class
    nuclei: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.params.width

    @property
    def height(self) -> int:
        return self.params.height

    @property
    def base_magnification(self) -> int:
        return self.params.base_magnification

    @property
    def image(self) -> np.ndarray:
        return self.levels[self.base_magnification]

    def level_image(self, magnification: int) -> np.ndarray:
        if magnification in self.levels:
            return self.levels[magnification]
        scale = magnification / self.base_magnification
        return resize_bilinear(self.image, round(self.height * scale), round(self.width * scale))

    def nucleus_mask(self) -> np.ndarray:
        """Boolean base-level mask of the disks given by the placement log."""
        mask = np.zeros((self.height, self.width), dtype=bool)
        for x, y, r, _, _ in self.nuclei:
            x0, x1 = max(int(x - r), 0), min(int(x + r) + 2, self.width)
            y0, y1 = max(int(y - r), 0), min(int(y + r) + 2, self.height)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            mask[y0:y1, x0:x1] |= (xx - x) ** 2 + (yy - y) ** 2 <= r * r
        return mask


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def _class_field(params: SlideParams, rng) -> np.ndarray:
    shape = (params.height, params.width)
    sigma = params.region_scale * min(shape)
    if params.num_classes == 2:
        if params.tumor_fraction == 0.0:
            return np.zeros(shape, dtype=np.int8)
        f = _smooth_noise(rng, shape, sigma)
        cut = np.quantile(f, 1.0 - params.tumor_fraction)
        return (f >= cut).astype(np.int8)
    fields = np.stack([_smooth_noise(rng, shape, sigma) for _ in range(params.num_classes)])
    return np.argmax(fields, axis=0).astype(np.int8)


def _class_densities(params: SlideParams) -> np.ndarray:
    k = np.arange(params.num_classes) / (params.num_classes - 1)
    return params.nucleus_density * (1.0 + (params.tumor_density_ratio - 1.0) * k)


def _place_nuclei(params: SlideParams, cls_field: np.ndarray, rng) -> np.ndarray:
    dens = _class_densities(params)
    peak = dens.max()
    area = params.width * params.height
    n_candidates = rng.poisson(peak * area) if peak > 0 else 0
    xs = rng.uniform(0, params.width, n_candidates)
    ys = rng.uniform(0, params.height, n_candidates)
    u = rng.uniform(0, 1, n_candidates)
    cls = cls_field[ys.astype(np.int64), xs.astype(np.int64)].astype(np.int64)
    # thinning gives each class its own Poisson rate
    keep = u < dens[cls] / peak if peak > 0 else np.zeros(0, bool)
    xs, ys, cls = xs[keep], ys[keep], cls[keep]
    k = cls / (params.num_classes - 1)
    r_lo, r_hi = params.nucleus_radius
    radius = rng.uniform(r_lo, r_hi, len(xs)) * (1.0 + (params.tumor_radius_scale - 1.0) * k)
    h_lo, h_hi = params.hematoxylin_intensity
    inten = rng.uniform(h_lo, h_hi, len(xs)) * (1.0 + (params.tumor_darkening - 1.0) * k)
    return np.column_stack([xs, ys, radius, inten, cls]).astype(np.float64)


def _render_hematoxylin(params: SlideParams, nuclei: np.ndarray) -> np.ndarray:
    conc = np.zeros((params.height, params.width), dtype=np.float64)
    for x, y, r, a, _ in nuclei:
        sigma = 0.6 * r
        h = int(math.ceil(3 * sigma))
        x0, x1 = max(int(x) - h, 0), min(int(x) + h + 2, params.width)
        y0, y1 = max(int(y) - h, 0), min(int(y) + h + 2, params.height)
        if x0 >= x1 or y0 >= y1:
            continue
        gx = np.exp(-0.5 * ((np.arange(x0, x1) + 0.5 - x) / sigma) ** 2)
        gy = np.exp(-0.5 * ((np.arange(y0, y1) + 0.5 - y) / sigma) ** 2)
        conc[y0:y1, x0:x1] += a * np.outer(gy, gx)
    return conc


def render_background(params: SlideParams, rng) -> np.ndarray:
    """Eosin concentration of the tissue background."""
    shape = (params.height, params.width)
    if params.texture_amplitude == 0:
        return np.full(shape, params.eosin_intensity)
    tex = _smooth_noise(rng, shape, params.texture_scale)
    return params.eosin_intensity * np.clip(1.0 + params.texture_amplitude * tex, 0.0, None)


def compose_rgb(params: SlideParams, eosin: np.ndarray, hema: np.ndarray) -> np.ndarray:
    stain = params.stain
    od = hema[..., None] * stain.hematoxylin + eosin[..., None] * stain.eosin
    return np.clip(np.power(10.0, -od), 0.0, 1.0)


def generate_slide(params: SlideParams = SlideParams(), seed: int = 0,
                   slide_id: Optional[str] = None, domain: str = "A") -> SyntheticSlide:
    """Render a deterministic synthetic slide from ``(params, seed)``."""
    params.validate()
    rng = np.random.default_rng(seed)
    if params.slide_jitter:
        j = params.slide_jitter
        d, e, h = rng.uniform(1 - j, 1 + j, 3)
        lo, hi = params.hematoxylin_intensity
        params = replace(params, nucleus_density=params.nucleus_density * d,
                         eosin_intensity=params.eosin_intensity * e,
                         hematoxylin_intensity=(lo * h, hi * h))
    cls_field = _class_field(params, rng)
    eosin = render_background(params, rng)
    nuclei = _place_nuclei(params, cls_field, rng)
    hema = _render_hematoxylin(params, nuclei)
    base = compose_rgb(params, eosin, hema).astype(np.float32)

    levels = {params.base_magnification: base}
    mag, img = params.base_magnification, base
    while mag > min(MAGNIFICATIONS):
        mag //= 2
        img = halve(img)
        levels[mag] = img
    return SyntheticSlide(
        slide_id=slide_id if slide_id is not None else f"s{seed}",
        params=params, seed=seed, domain=domain, levels=levels,
        class_field=cls_field, nuclei=nuclei,
    )


# ---------------------------------------------------------------------------
# pyramid sampling
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    label: Optional[int] = None
    domain: str = "A"
    magnification: int = 10
    origin: tuple = ("", 0, 0)


def _source_level(slide: SyntheticSlide, magnification: int) -> int:
    if magnification in slide.levels:
        return magnification
    # nearest in log2 distance, ties towards the more detailed level
    return min(slide.levels, key=lambda a: (abs(math.log2(magnification / a)), -a))


def window_at_base(slide: SyntheticSlide, size: int, magnification: int) -> float:
    """Side length in base pixels of a ``size`` window at ``magnification``."""
    return size * slide.base_magnification / magnification


def sample_pyramid(slide: SyntheticSlide, center, size: int = PATCH_SIZE,
                   levels: Sequence[int] = MAGNIFICATIONS, label: Optional[int] = None) -> list:
    """One ``size x size`` sample per magnification, all sharing ``center``.

    Levels missing from the slide are cut from the nearest stored level and
    bilinearly resized.  Windows crossing the slide border raise BoundaryError.
    """
    cx, cy = center
    if not (0 <= cx < slide.width and 0 <= cy < slide.height):
        raise BoundaryError(f"center {center} outside slide {slide.width}x{slide.height}")
    out = []
    for mag in levels:
        if mag not in MAGNIFICATIONS:
            raise ParameterError(f"unknown magnification {mag}; expected one of {MAGNIFICATIONS}")
        src = _source_level(slide, mag)
        crop = size * src / mag
        if crop != int(crop) or crop < 1:
            raise ParameterError(f"window of {size} at {mag}x is not a whole number of pixels at {src}x")
        crop = int(crop)
        level = slide.levels[src]
        f = src / slide.base_magnification
        x0 = math.floor(cx * f - crop / 2)
        y0 = math.floor(cy * f - crop / 2)
        if x0 < 0 or y0 < 0 or x0 + crop > level.shape[1] or y0 + crop > level.shape[0]:
            raise BoundaryError(f"{mag}x window of {crop}px at {src}x around {center} leaves the slide")
        region = level[y0:y0 + crop, x0:x0 + crop]
        img = region.copy() if crop == size else resize_bilinear(region, size, size)
        out.append(Sample(image=img, label=label, domain=slide.domain, magnification=mag,
                          origin=(slide.slide_id, int(cx), int(cy))))
    return out


def patch_label(slide: SyntheticSlide, center, size: int = PATCH_SIZE, magnification: int = 10) -> int:
    """Majority class of the base-level region under a patch."""
    half = window_at_base(slide, size, magnification) / 2
    cx, cy = center
    x0, y0 = max(int(cx - half), 0), max(int(cy - half), 0)
    region = slide.class_field[y0:int(cy + half), x0:int(cx + half)]
    counts = np.bincount(region.ravel().astype(np.int64), minlength=slide.params.num_classes)
    return int(np.argmax(counts))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    x: int
    y: int
    magnification: int
    label: Optional[int]
    domain: str
    split: str

    @property
    def origin(self):
        return (self.slide_id, self.x, self.y)

    def to_line(self) -> str:
        lab = "" if self.label is None else str(self.label)
        return f"{self.slide_id},{self.x},{self.y},{self.magnification},{lab},{self.domain},{self.split}"

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split(",")
        if len(parts) != 7:
            raise DataError(f"malformed manifest record: {line!r}")
        sid, x, y, mag, lab, dom, split = parts
        return cls(sid, int(x), int(y), int(mag), None if lab in ("", "∅") else int(lab), dom, split)


@dataclass
class Manifest:
    entries: list
    num_classes: int = 2
    format_version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def labeled(self, split: str = "train") -> list:
        return [e for e in self.entries if e.split == split and e.label is not None]

    def unlabeled(self, split: str = "train") -> list:
        return [e for e in self.entries if e.split == split and e.label is None]

    def class_balance(self, split: str = "train") -> dict:
        return dict(sorted(Counter(e.label for e in self.labeled(split)).items()))

    def validate(self) -> None:
        by_origin = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r}")
            if e.label is not None and not 0 <= e.label < self.num_classes:
                raise DataError(f"label {e.label} outside {self.num_classes} classes")
            key = (e.origin, e.magnification)
            if by_origin.setdefault(key, e.split) != e.split:
                raise DataError(f"entry {key} appears in more than one split")

    def save(self, path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(f"# format_version={self.format_version} num_classes={self.num_classes}\n")
            for e in self.entries:
                fh.write(e.to_line() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        meta, entries = {}, []
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#"):
                    for tok in line[1:].split():
                        k, _, v = tok.partition("=")
                        meta[k] = int(v)
                elif line.strip():
                    entries.append(ManifestEntry.from_line(line))
        version = meta.get("format_version", MANIFEST_VERSION)
        if version != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {version}")
        m = cls(entries, num_classes=meta.get("num_classes", 2), format_version=version)
        m.validate()
        return m


def _assign_splits(slides, split_fractions, rng) -> dict:
    ids = [s.slide_id for s in slides]
    if split_fractions is None:
        return {sid: "train" for sid in ids}
    if isinstance(split_fractions, dict):
        return {sid: split_fractions.get(sid, "train") for sid in ids}
    fr = np.asarray(split_fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or fr.sum() <= 0:
        raise ParameterError("split_fractions must be three non-negative numbers (train, val, test)")
    order = rng.permutation(len(ids))
    bounds = np.round(np.cumsum(fr / fr.sum()) * len(ids)).astype(int)
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = SPLITS[int(np.searchsorted(bounds, rank, side="right"))]
    return out


def budget_count(budget: float, n: int) -> int:
    # rounding guards against products like 0.07 * 100 = 7.000000000000001
    return min(n, math.ceil(round(budget * n, 9)))


def build_manifest(slides: Sequence[SyntheticSlide], patches_per_slide: int, label_budget: float,
                   seed: int = 0, magnification: int = 10, size: int = PATCH_SIZE,
                   split_fractions=None, granularity: str = "patch",
                   placement_seed: Optional[int] = None) -> Manifest:
    """Sample patch centres on every slide and keep labels for a budgeted subset.

    The budget applies to the ``train`` split: exactly ``ceil(budget * N)``
    train entries keep their label (``granularity="patch"``), or every entry
    of ``ceil(budget * n_train_slides)`` slides (``granularity="slide"``).
    ``val``/``test`` entries are evaluation pools and always keep labels.
    Patch placement and splits depend on ``placement_seed`` (default ``seed``)
    so the labeled pool can be resampled over a fixed set of patches.
    """
    if not slides:
        raise ParameterError("build_manifest needs at least one slide")
    if not 0.0 <= label_budget <= 1.0:
        raise ParameterError(f"label budget must lie in [0, 1], got {label_budget}")
    if granularity not in ("patch", "slide"):
        raise ParameterError(f"granularity must be 'patch' or 'slide', got {granularity!r}")
    num_classes = slides[0].params.num_classes
    place_rng = np.random.default_rng(placement_seed if placement_seed is not None else seed)
    splits = _assign_splits(slides, split_fractions, place_rng)

    raw = []
    for slide in slides:
        # the 5x window is the largest one the pretext tasks request
        margin = math.ceil(window_at_base(slide, size, min(MAGNIFICATIONS)) / 2)
        align = max(1, slide.base_magnification // min(MAGNIFICATIONS))
        xs = np.arange(margin, slide.width - margin + 1)
        ys = np.arange(margin, slide.height - margin + 1)
        xs, ys = xs[xs % align == 0], ys[ys % align == 0]
        if len(xs) == 0 or len(ys) == 0:
            raise ParameterError(f"slide {slide.slide_id} is too small for {size}px patches at 5x")
        for _ in range(patches_per_slide):
            x, y = int(place_rng.choice(xs)), int(place_rng.choice(ys))
            raw.append((slide, x, y, patch_label(slide, (x, y), size, magnification)))

    rng = np.random.default_rng(seed)
    train_idx = [i for i, r in enumerate(raw) if splits[r[0].slide_id] == "train"]
    if granularity == "patch":
        n_lab = budget_count(label_budget, len(train_idx))
        chosen = set(np.asarray(train_idx)[rng.permutation(len(train_idx))[:n_lab]].tolist())
    else:
        train_slides = [s.slide_id for s in slides if splits[s.slide_id] == "train"]
        n_lab = budget_count(label_budget, len(train_slides))
        keep = {train_slides[i] for i in rng.permutation(len(train_slides))[:n_lab]}
        chosen = {i for i in train_idx if raw[i][0].slide_id in keep}

    entries = []
    for i, (slide, x, y, lab) in enumerate(raw):
        split = splits[slide.slide_id]
        keep_label = split != "train" or i in chosen
        entries.append(ManifestEntry(slide.slide_id, x, y, magnification,
                                     lab if keep_label else None, slide.domain, split))
    m = Manifest(entries, num_classes=num_classes)
    log.info("manifest: %d entries, %d labeled train, balance %s",
             len(m), len(m.labeled()), m.class_balance())
    return m


# ---------------------------------------------------------------------------
# materialisation
# ---------------------------------------------------------------------------

@dataclass
class PatchSet:
    """In-memory arrays for a list of manifest entries.

    ``pyramid`` (N, 4, S, S, 3) holds the same-centre samples ordered as
    MAGNIFICATIONS; it is only filled when requested, in float16.
    """

    images: np.ndarray
    labels: np.ndarray  # -1 where unlabeled
    domains: list
    origins: list
    pyramid: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(self.images[idx], self.labels[idx],
                        [self.domains[i] for i in idx], [self.origins[i] for i in idx],
                        None if self.pyramid is None else self.pyramid[idx])


def materialize(entries: Sequence[ManifestEntry], slides, size: int = PATCH_SIZE,
                with_pyramid: bool = False, ground_truth: bool = False) -> PatchSet:
    """Cut the patches of ``entries`` out of ``slides``.

    ``ground_truth`` fills labels from the class field even where the
    manifest withholds them; only evaluation code should ask for that.
    """
    by_id = {s.slide_id: s for s in slides}
    n = len(entries)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.full(n, -1, dtype=np.int64)
    pyramid = np.empty((n, len(MAGNIFICATIONS), size, size, 3), dtype=np.float16) if with_pyramid else None
    for i, e in enumerate(entries):
        try:
            slide = by_id[e.slide_id]
        except KeyError:
            raise DataError(f"manifest refers to unknown slide {e.slide_id!r}") from None
        images[i] = sample_pyramid(slide, (e.x, e.y), size, (e.magnification,))[0].image
        if e.label is not None:
            labels[i] = e.label
        elif ground_truth:
            labels[i] = patch_label(slide, (e.x, e.y), size, e.magnification)
        if with_pyramid:
            for k, s in enumerate(sample_pyramid(slide, (e.x, e.y), size, MAGNIFICATIONS)):
                pyramid[i, k] = s.image
    return PatchSet(images, labels, [e.domain for e in entries], [e.origin for e in entries], pyramid)


def save_patch(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_patch(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def patch_filename(entry: ManifestEntry) -> str:
    return f"{entry.slide_id}_{entry.x}_{entry.y}_{entry.magnification}.png"


def export_patches(manifest: Manifest, slides, out_dir, size: int = PATCH_SIZE) -> list:
    """Write every manifest patch as a lossless 8-bit PNG; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {s.slide_id: s for s in slides}
    paths = []
    for e in manifest.entries:
        img = sample_pyramid(by_id[e.slide_id], (e.x, e.y), size, (e.magnification,))[0].image
        p = out_dir / patch_filename(e)
        save_patch(img, p)
        paths.append(p)
    return paths


def params_dict(params: SlideParams) -> dict:
    d = asdict(params)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
