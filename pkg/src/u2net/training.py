"""Deep-supervision loss, augmentation and the minibatch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigurationError, DataError, NumericalError
from .imaging import flip_horizontal, flip_vertical, resize_bilinear, resize_nearest
from .network import SaliencyOutputs, U2Net, forward
from .nn import make_rng
from .optim import AdamState, adam_step
from .tensor import Tensor, bce_loss, scale, stack_sum

log = logging.getLogger(__name__)

TERM_NAMES = ("side1", "side2", "side3", "side4", "side5", "side6", "fuse")


@dataclass
class LossWeights:
    side: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    fuse: float = 1.0

    def __post_init__(self):
        self.side = tuple(float(w) for w in self.side)
        if len(self.side) != 6:
            raise ConfigurationError(f"need 6 side weights, got {len(self.side)}")
        if min(self.side) < 0 or self.fuse < 0:
            raise ConfigurationError("loss weights must be non-negative")

    def as_list(self) -> list:
        return list(self.side) + [float(self.fuse)]


def loss_terms(outputs: SaliencyOutputs, gt, reduction: str = "mean") -> list:
    """BCE of s1..s6 and the fused map against ``gt`` (N x 1 x H x W)."""
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if g.shape != outputs.fused.shape:
        raise ConfigurationError(f"ground truth {g.shape} does not match outputs {outputs.fused.shape}")
    return [bce_loss(m, g, reduction) for m in outputs.maps()]


def total_loss(outputs: SaliencyOutputs, gt, weights: Optional[LossWeights] = None,
               reduction: str = "mean") -> Tensor:
    """Weighted sum of the six side-output losses and the fusion loss."""
    weights = weights or LossWeights()
    terms = loss_terms(outputs, gt, reduction)
    return stack_sum([scale(t, w) for t, w in zip(terms, weights.as_list())])


@dataclass
class SamplePair:
    image: np.ndarray  # N x 3 x H x W in [0, 1]
    mask: np.ndarray   # N x 1 x H x W in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 4 or self.mask.ndim != 4:
            raise ConfigurationError("SamplePair arrays must be 4-D")
        if self.image.shape[0] != self.mask.shape[0] or self.image.shape[2:] != self.mask.shape[2:]:
            raise ConfigurationError(f"image {self.image.shape} and mask {self.mask.shape} disagree")


def augment(image: np.ndarray, mask: np.ndarray, rng, resize: int = 320, crop: int = 288,
            vflip: bool = True, hflip: bool = False) -> SamplePair:
    """Resize to ``resize`` (mask: nearest), random flips, random ``crop`` window.

    Random draws, in order: vertical-flip coin (if enabled), horizontal-flip
    coin (if enabled), crop top, crop left.  A coin below 0.5 flips.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if image.ndim != 3 or mask.ndim != 3:
        raise ConfigurationError(f"expected C x H x W arrays, got {image.shape} and {mask.shape}")
    if image.shape[1] < 1 or image.shape[2] < 1:
        raise DataError(f"image is empty: {image.shape}")
    if image.shape[1:] != mask.shape[1:]:
        raise ConfigurationError(f"image {image.shape} and mask {mask.shape} are not aligned")
    if crop > resize:
        raise ConfigurationError(f"crop {crop} exceeds resize {resize}")
    img = resize_bilinear(image, resize, resize)
    msk = resize_nearest(mask, resize, resize)
    if vflip and rng.random() < 0.5:
        img, msk = flip_vertical(img), flip_vertical(msk)
    if hflip and rng.random() < 0.5:
        img, msk = flip_horizontal(img), flip_horizontal(msk)
    top = int(rng.integers(0, resize - crop + 1))
    left = int(rng.integers(0, resize - crop + 1))
    img = img[:, top:top + crop, left:left + crop]
    msk = msk[:, top:top + crop, left:left + crop]
    return SamplePair(np.ascontiguousarray(img)[None], np.ascontiguousarray(msk)[None])


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 12
    seed: int = 0
    resize: int = 320
    crop: int = 288
    augment: bool = True
    vflip: bool = True
    hflip: bool = False
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    loss_mode: str = "mean"
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None  # may contain "{iteration}"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.crop > self.resize:
            raise ConfigurationError(f"crop {self.crop} exceeds resize {self.resize}")
        if self.loss_mode not in ("sum", "mean"):
            raise ConfigurationError(f"loss_mode must be 'sum' or 'mean', got {self.loss_mode!r}")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")


@dataclass
class TrainResult:
    history: list  # (iteration, loss)
    optimizer: AdamState
    loss_mode: str

    def losses(self) -> np.ndarray:
        return np.array([loss for _, loss in self.history])


class _BatchSampler:
    """Reshuffled passes over the dataset, ``batch`` indices at a time."""

    def __init__(self, size: int, batch: int, rng: np.random.Generator):
        self.size, self.batch, self.rng = size, batch, rng
        self.queue: list = []

    def next(self) -> list:
        out = []
        while len(out) < self.batch:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.size))
            out.append(self.queue.pop(0))
        return out


def _prepare(dataset: Sequence, idx: list, config: TrainConfig, rng, dtype) -> SamplePair:
    images, masks = [], []
    for i in idx:
        image, mask = dataset[i]
        if config.augment:
            pair = augment(image, mask, rng, config.resize, config.crop, config.vflip, config.hflip)
        else:
            m = np.asarray(mask)
            m = m[None] if m.ndim == 2 else m
            img = np.asarray(image)
            if img.shape[1:] != (config.crop, config.crop):
                img = resize_bilinear(img, config.crop, config.crop)
                m = resize_nearest(m, config.crop, config.crop)
            pair = SamplePair(img[None], m[None])
        images.append(pair.image)
        masks.append(pair.mask)
    return SamplePair(np.concatenate(images).astype(dtype), np.concatenate(masks).astype(dtype))


def train(net: U2Net, dataset: Sequence, config: TrainConfig,
          callback: Optional[Callable[[int, float], Optional[bool]]] = None) -> TrainResult:
    """Minibatch Adam on the deep-supervision loss; records the loss every iteration.

    ``dataset`` is a sequence of ``(image 3xHxW, mask 1xHxW or HxW)`` pairs.
    ``callback(iteration, loss)`` runs after every step; a truthy return value
    ends training early.  Raises :class:`NumericalError` naming the first non-finite loss term.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    rng = make_rng(config.seed)
    sampler = _BatchSampler(len(dataset), config.batch_size, rng)
    params = net.parameters()
    state = AdamState(lr=config.lr, beta1=config.betas[0], beta2=config.betas[1],
                      eps=config.eps, weight_decay=config.weight_decay)
    history = []
    net.train()
    for it in range(1, config.iterations + 1):
        batch = _prepare(dataset, sampler.next(), config, rng, net.dtype)
        out = forward(net, batch.image)
        terms = loss_terms(out, batch.mask, config.loss_mode)
        for name, t in zip(TERM_NAMES, terms):
            if not np.isfinite(t.data):
                raise NumericalError(f"iteration {it}: non-finite loss in term {name} ({float(t.data)})")
        loss = stack_sum([scale(t, w) for t, w in zip(terms, config.weights.as_list())])
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"iteration {it}: non-finite total loss")
        net.zero_grad()
        loss.backward()
        adam_step(params, state)
        history.append((it, value))
        if config.checkpoint_every and config.checkpoint_path and it % config.checkpoint_every == 0:
            save_checkpoint(net, config.checkpoint_path.format(iteration=it))
        if callback is not None and callback(it, value):
            log.info("stopping early at iteration %d", it)
            break
    net.zero_grad()
    return TrainResult(history, state, config.loss_mode)


def write_loss_csv(history: Sequence, path) -> None:
    lines = ["iteration,loss"] + [f"{it},{loss:.9g}" for it, loss in history]
    Path(path).write_text("\n".join(lines) + "\n")
