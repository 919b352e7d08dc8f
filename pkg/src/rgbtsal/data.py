"""Dataset plumbing: VT-style directory loading, synthetic data, misalignment.

A dataset is a directory with RGB/, T/, and GT/ subdirectories holding
one file per sample with matching stems. The synthetic generator writes
that same layout: one hot salient shape per image, always visible in
thermal, visible in RGB unless the sample was drawn as a darkened
nighttime image. Two knobs make the modalities genuinely complementary
rather than redundant: some samples carry a distractor shape that is
prominent in RGB but stays near background temperature, so picking the
right object requires thermal; and the thermal channel is slightly
blurred, so recovering a crisp boundary requires RGB.
"""

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigurationError, DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
SUBDIRS = ("RGB", "T", "GT")
SHAPE_KINDS = ("ellipse", "rectangle", "blob")


@dataclass
class ImagePair:
    """One sample, resized and normalized to [0, 1] float arrays."""

    name: str
    rgb: np.ndarray        # H x W x 3
    thermal: np.ndarray    # H x W
    gt: np.ndarray         # H x W, values in {0, 1}
    orig_size: tuple       # (height, width) before resizing


@dataclass
class SynthConfig:
    n_samples: int = 100
    size: int = 64
    noise_rgb: float = 0.02
    darkness: float = 0.5
    distractors: float = 0.5
    thermal_blur: float = 1.2
    seed: int = 0
    shapes: tuple = SHAPE_KINDS

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.size < 16:
            raise ConfigurationError(f"size must be >= 16, got {self.size}")
        if not 0.0 <= self.noise_rgb <= 1.0:
            raise ConfigurationError(f"noise_rgb must lie in [0, 1], got {self.noise_rgb}")
        for name in ("darkness", "distractors"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(
                    f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.thermal_blur < 0.0:
            raise ConfigurationError(f"thermal_blur must be >= 0, got {self.thermal_blur}")
        bad = [s for s in self.shapes if s not in SHAPE_KINDS]
        if bad or not self.shapes:
            raise ConfigurationError(f"shapes must be a nonempty subset of {SHAPE_KINDS}")


@dataclass
class MisalignConfig:
    """Affine perturbation ranges for the unaligned-thermal protocol."""

    rotation_deg: float = 10.0
    translate_frac: float = 0.05
    scale_low: float = 0.9
    scale_high: float = 1.1


def _index_images(directory: Path):
    found = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_EXTENSIONS:
            found[path.stem] = path
    return found


def _load_resized(path, mode, size, resample):
    img = Image.open(path).convert(mode)
    orig = (img.height, img.width)
    if size is not None and (img.height, img.width) != (size, size):
        img = img.resize((size, size), resample)
    return np.asarray(img, dtype=np.float32) / 255.0, orig


def load_pair(rgb_path, t_path, gt_path, name, size=None) -> ImagePair:
    rgb, orig = _load_resized(rgb_path, "RGB", size, Image.BILINEAR)
    thermal, _ = _load_resized(t_path, "L", size, Image.BILINEAR)
    gt_gray, _ = _load_resized(gt_path, "L", size, Image.NEAREST)
    gt255 = np.rint(gt_gray * 255.0)
    if not np.isin(gt255, (0.0, 255.0)).all():
        warnings.warn(f"non-binary ground truth in {gt_path}, binarizing at 0.5", stacklevel=2)
    gt = (gt_gray >= 0.5).astype(np.float32)
    return ImagePair(name=name, rgb=rgb, thermal=thermal, gt=gt, orig_size=orig)


def load_vt_dataset(root, split=None, size=None):
    """Load every RGB/thermal/GT triple under root (or root/split).

    Images are resized to size x size with bilinear interpolation, masks
    with nearest neighbor then binarized at 0.5. Returns ImagePairs in
    stem order. Missing subdirectories or unmatched stems raise DataError.
    """
    base = Path(root) / split if split else Path(root)
    if not base.is_dir():
        raise DataError(f"dataset directory not found: {base}")
    missing_dirs = [d for d in SUBDIRS if not (base / d).is_dir()]
    if missing_dirs:
        raise DataError(f"missing subdirectories under {base}: {', '.join(missing_dirs)}")
    indexes = {d: _index_images(base / d) for d in SUBDIRS}
    stem_sets = {d: set(idx) for d, idx in indexes.items()}
    common = stem_sets["RGB"] & stem_sets["T"] & stem_sets["GT"]
    complaints = []
    for d in SUBDIRS:
        extra = sorted(stem_sets[d] - common)
        if extra:
            complaints.append(f"{d} stems without full triples: {', '.join(extra[:10])}")
    if complaints:
        raise DataError("; ".join(complaints))
    if not common:
        raise DataError(f"no image pairs found under {base}")
    return [load_pair(indexes["RGB"][s], indexes["T"][s], indexes["GT"][s], s, size)
            for s in sorted(common)]


def to_tensors(pairs):
    """Stack pairs into float32 batches; thermal is replicated to 3 channels.

    Returns (rgb Bx3xHxW, thermal Bx3xHxW, gt Bx1xHxW).
    """
    rgb = torch.from_numpy(np.stack([p.rgb for p in pairs])).permute(0, 3, 1, 2).contiguous()
    th = torch.from_numpy(np.stack([p.thermal for p in pairs]))[:, None, :, :]
    th = th.expand(-1, 3, -1, -1).contiguous()
    gt = torch.from_numpy(np.stack([p.gt for p in pairs]))[:, None, :, :]
    return rgb, th, gt


def _shape_mask(kind, size, rng, center_range=(0.3, 0.7)):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = rng.uniform(*center_range) * size
    cx = rng.uniform(*center_range) * size
    phi = rng.uniform(0.0, math.pi)
    dy, dx = rows - cy, cols - cx
    u = math.cos(phi) * dx + math.sin(phi) * dy
    v = -math.sin(phi) * dx + math.cos(phi) * dy
    if kind == "ellipse":
        a = rng.uniform(0.12, 0.30) * size
        b = rng.uniform(0.10, 0.25) * size
        return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float32)
    if kind == "rectangle":
        a = rng.uniform(0.12, 0.30) * size
        b = rng.uniform(0.10, 0.25) * size
        return ((np.abs(u) <= a) & (np.abs(v) <= b)).astype(np.float32)
    # blob: ellipse-like base radius modulated by a radial sinusoid
    r0 = rng.uniform(0.12, 0.26) * size
    lobes = int(rng.integers(3, 6))
    phase = rng.uniform(0.0, 2.0 * math.pi)
    angle = np.arctan2(v, u)
    radius = np.hypot(u, v)
    boundary = r0 * (1.0 + 0.3 * np.sin(lobes * angle + phase))
    return (radius <= boundary).astype(np.float32)


def _save_gray(array, path):
    Image.fromarray(np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)).save(path)


def _draw_mask(config, rng, min_area, avoid=None):
    """Sample a shape mask with enough area, mostly clear of `avoid`.

    The salient object (no avoid constraint) keeps the last attempt even
    if small. A distractor may roam closer to the border, tolerates up to
    20% overlap with the object (the overlap is clipped away so the GT
    stays exact), and is dropped (None) if no placement fits.
    """
    kind = mask = None
    for _ in range(20):
        kind = config.shapes[int(rng.integers(len(config.shapes)))]
        if avoid is None:
            mask = _shape_mask(kind, config.size, rng)
            if mask.sum() >= min_area:
                return kind, mask
        else:
            mask = _shape_mask(kind, config.size, rng, center_range=(0.15, 0.85))
            area = mask.sum()
            if area >= min_area and (mask * avoid).sum() <= 0.2 * area:
                clipped = mask * (1.0 - avoid)
                if clipped.sum() >= min_area:
                    return kind, clipped
    return (kind, mask) if avoid is None else (None, None)


def _contrasting_color(background, rng):
    shift = rng.choice((-1.0, 1.0)) * rng.uniform(0.30, 0.50)
    return np.clip(background + shift + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)


def generate_synthetic(config: SynthConfig, out_dir):
    """Write a synthetic RGB-T dataset plus manifest.json; returns the manifest.

    The numbers of darkened RGB images and of distractor-carrying images
    are exactly round(darkness * n) and round(distractors * n); the
    affected samples are chosen by seeded permutations and flagged in the
    manifest, so reruns with one seed are bitwise identical. The salient
    object runs hot in thermal; a distractor gets a contrasting RGB color
    but stays near background temperature, and the whole thermal channel
    is blurred by thermal_blur pixels.
    """
    out = Path(out_dir)
    try:
        for d in SUBDIRS:
            (out / d).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directories under {out}: {exc}") from exc
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    n_dark = int(round(config.darkness * n))
    dark_flags = np.zeros(n, dtype=bool)
    dark_flags[rng.permutation(n)[:n_dark]] = True
    n_distract = int(round(config.distractors * n))
    distract_flags = np.zeros(n, dtype=bool)
    distract_flags[rng.permutation(n)[:n_distract]] = True
    size = config.size
    min_area = 0.02 * size * size
    records = []
    for i in range(n):
        name = f"synth_{i:04d}"
        kind, mask = _draw_mask(config, rng, min_area)
        d_mask = None
        if distract_flags[i]:
            _, d_mask = _draw_mask(config, rng, min_area, avoid=mask)
        has_distractor = d_mask is not None

        hot = rng.uniform(0.65, 0.95)
        cold = rng.uniform(0.10, 0.35)
        t_object = mask
        if config.thermal_blur > 0:
            t_object = ndimage.gaussian_filter(mask, sigma=config.thermal_blur)
        thermal = cold + (hot - cold) * t_object
        if has_distractor:
            warm = rng.uniform(0.0, 0.12)
            t_distract = d_mask
            if config.thermal_blur > 0:
                t_distract = ndimage.gaussian_filter(d_mask, sigma=config.thermal_blur)
            thermal = thermal + warm * t_distract
        thermal = thermal + rng.normal(0.0, 0.02, (size, size))

        background = rng.uniform(0.25, 0.75, 3)
        object_color = _contrasting_color(background, rng)
        rgb = background[None, None, :] + (object_color - background) * mask[:, :, None]
        if has_distractor:
            d_color = _contrasting_color(background, rng)
            rgb = rgb + (d_color - background) * d_mask[:, :, None]
        if dark_flags[i]:
            rgb = rgb * rng.uniform(0.02, 0.08)
        rgb = rgb + rng.normal(0.0, config.noise_rgb, (size, size, 3))
        try:
            _save_gray(np.clip(rgb, 0.0, 1.0), out / "RGB" / f"{name}.png")
            _save_gray(np.clip(thermal, 0.0, 1.0), out / "T" / f"{name}.png")
            _save_gray(mask, out / "GT" / f"{name}.png")
        except OSError as exc:
            raise DataError(f"cannot write sample {name} under {out}: {exc}") from exc
        records.append({"name": name, "shape": kind, "dark": bool(dark_flags[i]),
                        "distractor": has_distractor})
    manifest = {
        "seed": config.seed,
        "n_samples": n,
        "size": size,
        "noise_rgb": config.noise_rgb,
        "darkness": config.darkness,
        "distractors": config.distractors,
        "thermal_blur": config.thermal_blur,
        "shapes": list(config.shapes),
        "n_dark": n_dark,
        "n_distractors": int(sum(r["distractor"] for r in records)),
        "images": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def apply_affine(image, rotation_deg, shift, scale):
    """Warp a 2-D image by rotate/scale about its center plus a translation.

    A point p maps to scale*R(p - c) + c + shift, with edge-replicated
    bilinear resampling; shift is (rows, cols).
    """
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    inverse = np.array([[cos_t, sin_t], [-sin_t, cos_t]], dtype=np.float64) / scale
    center = (np.array(image.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - inverse @ (center + np.asarray(shift, dtype=np.float64))
    return ndimage.affine_transform(
        image.astype(np.float64), inverse, offset=offset, order=1, mode="nearest",
    ).astype(image.dtype)


def draw_affine_params(rng, config: MisalignConfig, side):
    """Sample one perturbation; translation is whole pixels within 5% of side."""
    rotation = rng.uniform(-config.rotation_deg, config.rotation_deg)
    max_shift = int(math.floor(config.translate_frac * side))
    shift = rng.integers(-max_shift, max_shift + 1, size=2) if max_shift > 0 else np.zeros(2)
    scale = rng.uniform(config.scale_low, config.scale_high)
    return rotation, tuple(int(s) for s in shift), scale


def misalign_thermal(pair: ImagePair, seed, config: MisalignConfig = None) -> ImagePair:
    """Random affine on the thermal image only; RGB and GT stay put."""
    config = config or MisalignConfig()
    rng = np.random.default_rng(seed)
    side = min(pair.thermal.shape)
    rotation, shift, scale = draw_affine_params(rng, config, side)
    warped = apply_affine(pair.thermal, rotation, shift, scale)
    return replace(pair, thermal=warped)
