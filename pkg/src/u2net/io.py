"""Image and mask files, directory pairing and config loading."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, DataError
from .network import NetworkConfig, preset_config

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
GT_THRESHOLD = 128

PathLike = Union[str, os.PathLike]


@dataclass
class ImageRecord:
    stem: str
    pixels: np.ndarray  # 3 x H x W or 1 x H x W, values in [0, 1]
    path: Path | None = None

    def __post_init__(self):
        if not self.stem:
            raise DataError("image record needs a non-empty stem")
        if self.pixels.ndim != 3 or self.pixels.shape[0] not in (1, 3):
            raise DataError(f"{self.stem}: expected 1 or 3 channels, got shape {self.pixels.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


def _open(path: Path) -> Image.Image:
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise DataError(f"{path}: unsupported format (use PNG or PGM/PPM)")
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return img


def _to_unit(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16 or arr.dtype.kind in "iu":
        return arr.astype(np.float32) / (65535.0 if arr.max(initial=0) > 255 else 255.0)
    if arr.dtype == bool:
        return arr.astype(np.float32)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def load_image(path: PathLike, rgb: bool | None = None) -> ImageRecord:
    """Read PNG/PGM into a C x H x W float array in [0, 1].

    ``rgb=None`` keeps grayscale files single-channel; ``True`` forces three
    channels and ``False`` forces one.
    """
    path = Path(path)
    img = _open(path)
    gray = img.mode in ("1", "L", "I", "I;16", "F")
    if rgb is True or (rgb is None and not gray):
        arr = np.asarray(img.convert("RGB"))
        pixels = _to_unit(arr).transpose(2, 0, 1)
    else:
        arr = np.asarray(img if gray else img.convert("L"))
        pixels = _to_unit(arr)[None]
    return ImageRecord(path.stem, np.ascontiguousarray(pixels), path)


def load_mask(path: PathLike) -> np.ndarray:
    """Ground-truth mask as an H x W {0, 1} array (8-bit value >= 128 is foreground)."""
    path = Path(path)
    img = _open(path)
    arr = np.asarray(img.convert("L"))
    return (arr >= GT_THRESHOLD).astype(np.uint8)


def load_map(path: PathLike) -> np.ndarray:
    """Probability map as an H x W float64 array in [0, 1]."""
    path = Path(path)
    arr = np.asarray(_open(path).convert("L"))
    return arr.astype(np.float64) / 255.0


def map_to_uint8(prob: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_map(prob: np.ndarray, path: PathLike) -> Path:
    """Write an H x W probability map as 8-bit grayscale, ``round(P * 255)``."""
    path = Path(path)
    prob = np.asarray(prob)
    if prob.ndim == 3 and prob.shape[0] == 1:
        prob = prob[0]
    if prob.ndim != 2:
        raise DataError(f"save_map expects an H x W map, got {prob.shape}")
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise DataError(f"{path}: unsupported output format")
    Image.fromarray(map_to_uint8(prob), mode="L").save(path)
    return path


def save_image(pixels: np.ndarray, path: PathLike) -> Path:
    """Write a 3 x H x W or 1 x H x W array in [0, 1] as an 8-bit image."""
    arr = map_to_uint8(pixels)
    img = Image.fromarray(arr[0], mode="L") if arr.shape[0] == 1 else Image.fromarray(arr.transpose(1, 2, 0), "RGB")
    img.save(Path(path))
    return Path(path)


def list_images(directory: PathLike) -> dict:
    """stem -> path for every supported image in ``directory`` (sorted by stem)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    found = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                log.warning("duplicate stem %s: keeping %s, ignoring %s", p.stem, found[p.stem].name, p.name)
                continue
            found[p.stem] = p
    return dict(sorted(found.items()))


@dataclass
class PairReport:
    pairs: list  # (stem, image path, mask path)
    unmatched_images: list = field(default_factory=list)
    unmatched_masks: list = field(default_factory=list)

    @property
    def warnings(self) -> list:
        return ([f"image {s} has no mask" for s in self.unmatched_images]
                + [f"mask {s} has no image" for s in self.unmatched_masks])


def pair_dataset(image_dir: PathLike, mask_dir: PathLike) -> PairReport:
    """Match files by stem in lexicographic order; unmatched stems become warnings."""
    images = list_images(image_dir)
    masks = list_images(mask_dir)
    common = sorted(set(images) & set(masks))
    report = PairReport([(s, images[s], masks[s]) for s in common],
                        sorted(set(images) - set(masks)), sorted(set(masks) - set(images)))
    for w in report.warnings:
        log.warning(w)
    if not common:
        raise DataError(f"no matching stems between {image_dir} and {mask_dir}")
    return report


def load_training_pairs(image_dir: PathLike, mask_dir: PathLike) -> list:
    """[(3 x H x W float32 image, 1 x H x W float32 {0,1} mask)] for every matched stem."""
    out = []
    for stem, ip, mp in pair_dataset(image_dir, mask_dir).pairs:
        img = load_image(ip, rgb=True).pixels
        mask = load_mask(mp)
        if mask.shape != img.shape[1:]:
            raise DataError(f"{stem}: image {img.shape[1:]} and mask {mask.shape} differ in size")
        out.append((img.astype(np.float32), mask[None].astype(np.float32)))
    return out


def _source(src) -> dict:
    if isinstance(src, Mapping):
        return dict(sorted(src.items()))
    return list_images(src)


def load_prediction_and_masks(pred_source, gt_source) -> list:
    """EvalPairs for the stems present in both sources, ordered by stem.

    Each source is a directory or a mapping of stem to array (or path).
    """
    from .metrics import EvalPair

    preds, gts = _source(pred_source), _source(gt_source)
    common = sorted(set(preds) & set(gts))
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing:
        log.warning("no prediction for: %s", ", ".join(missing))
    if extra:
        log.warning("no ground truth for: %s", ", ".join(extra))
    if not common:
        raise DataError("no prediction/ground-truth stems in common")
    pairs = []
    for stem in common:
        p, g = preds[stem], gts[stem]
        p = load_map(p) if isinstance(p, (str, Path)) else np.asarray(p, dtype=np.float64)
        g = load_mask(g) if isinstance(g, (str, Path)) else np.asarray(g)
        pairs.append(EvalPair(p, g, stem))
    return pairs


def load_config(spec: str) -> NetworkConfig:
    """A preset name (``full``/``small``) or the path of a config JSON file."""
    if spec in ("full", "small"):
        return preset_config(spec)
    path = Path(spec)
    if not path.is_file():
        raise ConfigurationError(f"{spec}: not a preset name or readable config file")
    text = path.read_text()
    try:
        raw = json.loads(text)
    except ValueError as exc:
        raise ConfigurationError(f"{spec}: invalid JSON ({exc})") from exc
    if isinstance(raw, dict) and "preset" in raw and "encoder" not in raw:
        return preset_config(raw["preset"], int(raw.get("input_size", 320)), bool(raw.get("batchnorm", True)))
    return NetworkConfig.from_json(text)
