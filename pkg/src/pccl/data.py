"""Dataset I/O, labelled/unlabelled splitting, preprocessing and augmentation.

On-disk layout::

    <root>/images/{train,val,test}/<stem>.png   8-bit grey or RGB
    <root>/masks/{train,val,test}/<stem>.png    8-bit, {0, 255}
    <root>/cases.csv                            optional: stem,case

In memory an image is a float32 (C, H, W) array in [0, 1] and a mask an
int64 (H, W) array of class indices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ValidationError

SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 127


class DatasetError(ValidationError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    case: str | None = None

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValidationError(f"{self.id}: image must be (C, H, W), got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise ValidationError(
                f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape[1:]}")

    @property
    def labelled(self):
        return self.mask is not None

    def unlabelled(self):
        return replace(self, mask=None)


# ---------------------------------------------------------------------------
# reading

def _read_png(path):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            return np.asarray(im)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e


def read_cases(root):
    path = Path(root) / "cases.csv"
    if not path.exists():
        return {}
    with path.open(newline="") as fh:
        return {row["stem"]: row["case"] for row in csv.DictReader(fh)}


def load_dataset(root, split="train"):
    """Samples of one split, sorted by id. Masks are binarised at 127."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    img_dir = root / "images" / split
    mask_dir = root / "masks" / split
    if not img_dir.is_dir():
        return []
    cases = read_cases(root)

    stems = sorted(p.stem for p in img_dir.glob("*.png"))
    missing = [s for s in stems if not (mask_dir / f"{s}.png").exists()]
    if missing:
        raise DatasetError(f"missing masks in {mask_dir} for: {', '.join(missing)}")

    samples = []
    for stem in stems:
        img = _read_png(img_dir / f"{stem}.png").astype(np.float32) / 255.0
        img = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
        m = _read_png(mask_dir / f"{stem}.png")
        if m.ndim == 3:
            m = m.max(axis=2)
        mask = (m > MASK_THRESHOLD).astype(np.int64)
        samples.append(Sample(stem, np.ascontiguousarray(img), mask, cases.get(stem)))
    return samples


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class SplitSpec:
    labelled_fraction: float = 0.05
    seed: int = 0
    group_by_case: bool = False


def split_labelled(samples, spec):
    """Partition into (labelled, unlabelled); unlabelled samples lose their masks.

    The number of labelled units (images, or cases when grouping) is
    ``round(fraction * n_units)``.
    """
    if not 0.0 < spec.labelled_fraction <= 1.0:
        raise ValidationError(f"labelled_fraction must lie in (0, 1], got {spec.labelled_fraction}")
    samples = sorted(samples, key=lambda s: s.id)
    if spec.group_by_case:
        units = sorted({s.case if s.case is not None else s.id for s in samples})
        unit_of = lambda s: s.case if s.case is not None else s.id  # noqa: E731
    else:
        units = [s.id for s in samples]
        unit_of = lambda s: s.id  # noqa: E731

    n = math.floor(spec.labelled_fraction * len(units) + 0.5)
    if n < 1:
        raise ValidationError(
            f"labelled fraction {spec.labelled_fraction} of {len(units)} units selects nothing")
    order = np.random.default_rng(spec.seed).permutation(len(units))
    chosen = {units[i] for i in order[:n]}
    labelled = [s for s in samples if unit_of(s) in chosen]
    unlabelled = [s.unlabelled() for s in samples if unit_of(s) not in chosen]
    return labelled, unlabelled


# ---------------------------------------------------------------------------
# preprocessing

def _resize_plane(plane, size, resample):
    return np.asarray(Image.fromarray(plane).resize((size, size), resample))


def preprocess(sample, input_size=448):
    """Resize to ``input_size`` square (bilinear image, nearest mask) and make RGB."""
    C, H, W = sample.image.shape
    if H == 0 or W == 0:
        raise ValidationError(f"{sample.id}: zero-area image")
    img = sample.image.astype(np.float32)
    if img.max(initial=0.0) > 1.0:
        img = img / 255.0
    if (H, W) != (input_size, input_size):
        img = np.stack([_resize_plane(p, input_size, Image.BILINEAR) for p in img])
    if C == 1:
        img = np.repeat(img, 3, axis=0)
    elif C != 3:
        raise ValidationError(f"{sample.id}: expected 1 or 3 channels, got {C}")
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    mask = sample.mask
    if mask is not None and mask.shape != (input_size, input_size):
        mask = _resize_plane(mask.astype(np.int32), input_size, Image.NEAREST).astype(np.int64)
    return replace(sample, image=np.ascontiguousarray(img), mask=mask)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: float = 20.0
    rotation_p: float = 0.5
    brightness_contrast_p: float = 0.5
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    blur_p: float = 0.3
    blur_kernels: tuple = (3, 5, 7)
    noise_p: float = 0.3
    noise_sigma: tuple = (0.01, 0.05)

    def __post_init__(self):
        for name in ("rotation_p", "brightness_contrast_p", "blur_p", "noise_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")

    @classmethod
    def identity(cls):
        return cls(rotation_p=0.0, brightness_contrast_p=0.0, blur_p=0.0, noise_p=0.0)


def rotate(sample, angle):
    """Rotate image (bilinear) and mask (nearest) about the centre, keeping size."""
    if angle == 0:
        return sample
    img = ndimage.rotate(sample.image, angle, axes=(2, 1), reshape=False, order=1, mode="constant")
    mask = sample.mask
    if mask is not None:
        mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="constant")
    return replace(sample, image=np.clip(img, 0, 1).astype(np.float32), mask=mask)


def augment(sample, config, rng):
    """Random rotation (image and mask), then photometric jitter on the image only.

    Every random draw is taken from ``rng`` in a fixed order, so a seeded
    generator gives byte-identical output.
    """
    u = rng.random(4)
    if u[0] < config.rotation_p:
        sample = rotate(sample, rng.uniform(-config.rotation_degrees, config.rotation_degrees))
    img = sample.image
    if u[1] < config.brightness_contrast_p:
        alpha = 1.0 + rng.uniform(-config.contrast_limit, config.contrast_limit)
        beta = rng.uniform(-config.brightness_limit, config.brightness_limit)
        img = img * alpha + beta
    if u[2] < config.blur_p:
        k = int(rng.choice(config.blur_kernels))
        img = ndimage.uniform_filter(img, size=(1, k, k), mode="reflect")
    if u[3] < config.noise_p:
        sigma = rng.uniform(*config.noise_sigma)
        img = img + rng.normal(0.0, sigma, size=img.shape)
    if img is sample.image:
        return sample
    return replace(sample, image=np.clip(img, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic phantoms

def synth_counts(n):
    """(train, val, test) sizes in the ratio 200:40:100."""
    n_val = n * 2 // 17
    n_test = n * 5 // 17
    return n - n_val - n_test, n_val, n_test


def ellipse_mask(size, cx, cy, a, b, theta):
    """Pixels whose centre satisfies the ellipse-interior inequality."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _smooth_noise(rng, size, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    return field / (field.std() + 1e-12)


def synth_phantom(rng, size):
    """One ultrasound-like head phantom: (uint8 image, bool mask, parameters).

    The target is the filled ellipse. Its interior is textured like the
    background; the discriminative cue is a bright, partly broken rim,
    with clutter arcs and multiplicative speckle on top.
    """
    a = rng.uniform(0.25, 0.40) * size
    b = a * rng.uniform(0.7, 0.95)
    theta = rng.uniform(0, math.pi)
    margin = a + 2
    cx = rng.uniform(margin, size - margin) if size > 2 * margin else size / 2
    cy = rng.uniform(margin, size - margin) if size > 2 * margin else size / 2
    a, b = max(a, 1.0), max(b, 1.0)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u, v = dx * c + dy * s, -dx * s + dy * c
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    mask = r <= 1.0
    if not mask.any():
        mask[int(round(cy)) % size, int(round(cx)) % size] = True

    bg_level = rng.uniform(0.2, 0.4)
    img = bg_level + 0.08 * _smooth_noise(rng, size, size / 16)
    inner = rng.uniform(-0.06, 0.06)
    img = img + inner * mask

    # rim: gaussian profile around r = 1, with angular gaps
    thickness = rng.uniform(1.0, 2.2) / min(a, b)
    angle = np.arctan2(v / b, u / a)
    n_gaps = rng.integers(0, 3)
    visible = np.ones_like(r)
    for _ in range(n_gaps):
        centre = rng.uniform(-math.pi, math.pi)
        width = rng.uniform(0.3, 0.9)
        d = np.abs((angle - centre + math.pi) % (2 * math.pi) - math.pi)
        visible *= 1.0 - np.exp(-(d / width) ** 4)
    rim = np.exp(-((r - 1.0) / thickness) ** 2) * visible
    img = img + rng.uniform(0.35, 0.6) * rim

    # clutter: fragments of other ellipses
    for _ in range(rng.integers(1, 4)):
        ca, cb = rng.uniform(0.1, 0.5) * size, rng.uniform(0.05, 0.3) * size
        ccx, ccy = rng.uniform(0, size), rng.uniform(0, size)
        ct = rng.uniform(0, math.pi)
        cdx, cdy = xx - ccx, yy - ccy
        cu = cdx * math.cos(ct) + cdy * math.sin(ct)
        cv = -cdx * math.sin(ct) + cdy * math.cos(ct)
        cr = np.sqrt((cu / ca) ** 2 + (cv / cb) ** 2)
        cang = np.arctan2(cv / cb, cu / ca)
        arc = np.abs((cang - rng.uniform(-math.pi, math.pi) + math.pi) % (2 * math.pi) - math.pi) < rng.uniform(0.3, 1.2)
        img = img + rng.uniform(0.15, 0.4) * np.exp(-((cr - 1.0) * min(ca, cb) / 1.2) ** 2) * arc

    speckle = rng.gamma(4.0, 1.0 / 4.0, size=(size, size))
    img = img * speckle
    img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    params = dict(cx=cx, cy=cy, a=a, b=b, theta=theta)
    return img8, mask, params


def synth_generate(n, size, seed, root):
    """Write ``n`` phantom image/mask pairs under ``root`` in the reader's layout.

    Returns a dict of split -> list of (stem, params).
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    root = Path(root)
    try:
        for kind in ("images", "masks"):
            for split in SPLITS:
                (root / kind / split).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {root}: {e}") from e

    rng = np.random.default_rng(seed)
    n_train, n_val, n_test = synth_counts(n)
    split_of = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    written = {s: [] for s in SPLITS}
    for i, split in enumerate(split_of):
        img, mask, params = synth_phantom(rng, size)
        stem = f"phantom_{i:05d}"
        Image.fromarray(img).save(root / "images" / split / f"{stem}.png")
        Image.fromarray((mask * 255).astype(np.uint8)).save(root / "masks" / split / f"{stem}.png")
        written[split].append((stem, params))
    return written
