"""U-Net segmenter (output stride 16), composite CE + Dice loss, and training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import layers as L
from .params import Bound, Initializer, ModelParams
from .tensor import Graph, Tensor, adam_step, AdamState, backward, concat, forward_op, log, tsum

logger = logging.getLogger(__name__)

NUM_CLASSES = 4
CLASS_NAMES = ("background", "LV", "MYO", "RV")
DEPTH = 4  # number of 2x downsamplings -> output stride 16
CE_FLOOR = 1e-7
DICE_SMOOTH = 1e-5


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class SegConfig:
    input_size: Tuple[int, int] = (64, 64)
    base_channels: int = 16
    convs_per_stage: int = 2
    num_classes: int = NUM_CLASSES
    lambda_dice: float = 0.5
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    lr_drop_at: float = 0.8
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    upsample_mode: str = "nearest"
    style_unified: bool = False  # disables contrast/brightness augmentation
    augment: bool = True

    def validate(self) -> None:
        h, w = self.input_size
        if h % 16 or w % 16 or h <= 0 or w <= 0:
            raise ValueError(f"input size {h}x{w} must be a positive multiple of 16")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}")
        if self.lambda_dice < 0:
            raise ValueError("lambda_dice must be non-negative")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------------------
# network


def _widths(base: int) -> List[int]:
    return [base * 2**i for i in range(DEPTH + 1)]


def build_unet(cfg: SegConfig) -> ModelParams:
    """He-normal initialised U-Net parameters for ``cfg``."""
    cfg.validate()
    init = Initializer(cfg.seed)
    widths = _widths(cfg.base_channels)
    cin = 1
    for s, w in enumerate(widths):
        for k in range(cfg.convs_per_stage):
            init.conv(f"enc{s}.conv{k}", cin, w)
            init.norm(f"enc{s}.bn{k}", w, "batch")
            cin = w
    for s in range(DEPTH - 1, -1, -1):
        cin = widths[s + 1] + widths[s]
        for k in range(cfg.convs_per_stage):
            init.conv(f"dec{s}.conv{k}", cin, widths[s])
            init.norm(f"dec{s}.bn{k}", widths[s], "batch")
            cin = widths[s]
    init.conv("head", widths[0], NUM_CLASSES, k=1)
    return ModelParams("seg", init.tensors)


def _convs_per_stage(params: ModelParams) -> int:
    k = 0
    while f"enc0.conv{k}.weight" in params:
        k += 1
    return k


def _block(x: Tensor, P: Bound, prefix: str, n: int, mode: str) -> Tensor:
    for k in range(n):
        x = L.conv2d(x, P.conv(f"{prefix}.conv{k}"))
        x = L.batch_norm(x, P.norm(f"{prefix}.bn{k}", "batch"), mode)
        x = L.relu(x)
    return x


def unet_forward(
    P: Bound, x: Tensor, mode: str = "eval", upsample_mode: str = "nearest"
) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (probabilities, logits, deepest feature map)."""
    h, w = x.shape[2], x.shape[3]
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} is not divisible by 16")
    n = _convs_per_stage(P.params)
    skips = []
    for s in range(DEPTH):
        x = _block(x, P, f"enc{s}", n, mode)
        skips.append(x)
        x = L.max_pool2x2(x)
    x = _block(x, P, f"enc{DEPTH}", n, mode)
    deepest = x
    for s in range(DEPTH - 1, -1, -1):
        x = L.upsample(x, 2, upsample_mode)
        x = concat([x, skips[s]], axis=1)
        x = _block(x, P, f"dec{s}", n, mode)
    logits = L.conv2d(x, P.conv("head", padding=0))
    return L.softmax(logits, axis=1), logits, deepest


def _as_batch(image) -> np.ndarray:
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return arr


def predict_proba(params: ModelParams, images, batch: int = 16, upsample_mode: str = "nearest") -> np.ndarray:
    """Eval-mode class probabilities, shape (N, 4, H, W)."""
    x = _as_batch(images)
    out = []
    for i in range(0, len(x), batch):
        probs, _, _ = unet_forward(Bound(params), Tensor(x[i : i + batch]), "eval", upsample_mode)
        out.append(probs.data)
    return np.concatenate(out, axis=0)


def segment(params: ModelParams, image, input_size: Optional[Tuple[int, int]] = None,
            upsample_mode: str = "nearest") -> Tuple[np.ndarray, np.ndarray]:
    """Probabilities and argmax labels (ties resolve to the lowest class index)."""
    x = _as_batch(image)
    if input_size is not None and tuple(x.shape[2:]) != tuple(input_size):
        raise ValueError(f"image size {x.shape[2:]} does not match configured {tuple(input_size)}")
    probs = predict_proba(params, x, upsample_mode=upsample_mode)
    return probs, labels_from_probs(probs)


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# losses


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def _check(p: Tensor, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if len(p.shape) != 4 or y.shape != (p.shape[0],) + tuple(p.shape[2:]):
        raise ValueError(f"probability map {p.shape} and labels {y.shape} do not agree")
    return one_hot(y, p.shape[1], p.dtype)


def loss_ce(p, y) -> Tensor:
    """Mean per-pixel categorical cross entropy; probabilities floored at 1e-7."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    yh = _check(p, y)
    n_pix = yh.shape[0] * yh.shape[2] * yh.shape[3]
    return tsum(log(p, CE_FLOOR) * Tensor(yh)) * (-1.0 / n_pix)


def loss_dice(p, y) -> Tensor:
    """Soft Dice loss summed over classes, batch-global sums, smoothing 1e-5."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    yh = _check(p, y)
    inter = tsum(p * Tensor(yh), axis=(0, 2, 3))
    psum = tsum(p, axis=(0, 2, 3))
    ysum = Tensor(yh.sum(axis=(0, 2, 3)))
    ratio = (inter * 2.0 + DICE_SMOOTH) / (psum + ysum + DICE_SMOOTH)
    return tsum(1.0 - ratio)


def loss_seg(p, y, lam: float = 0.5) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    ce = loss_ce(p, y)
    if lam == 0:
        return ce
    return ce + loss_dice(p, y) * lam


# ---------------------------------------------------------------------------
# training-time augmentation


@dataclass
class AugmentRanges:
    expand: Tuple[float, float] = (0.8, 1.0)  # zoom-out scale
    rotation_deg: float = 180.0
    contrast: Tuple[float, float] = (0.8, 1.2)
    brightness: float = 0.1
    prob: float = 0.5


def augment_pair(
    image: np.ndarray, label: np.ndarray, rng: np.random.Generator, photometric: bool = True,
    ranges: AugmentRanges = AugmentRanges(),
) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Random expand, flip, rotation, mirror and (optionally) contrast/brightness."""
    applied: List[str] = []
    img, lab = image.astype(np.float32), label.astype(np.uint8)
    h, w = img.shape
    # one draw per transform regardless of outcome keeps the RNG stream stable
    draws = rng.random(6)
    params = rng.random(6)
    if draws[0] < ranges.prob:
        scale = ranges.expand[0] + (ranges.expand[1] - ranges.expand[0]) * params[0]
        img, lab = _expand(img, lab, scale)
        applied.append("expand")
    if draws[1] < ranges.prob:
        img, lab = img[::-1], lab[::-1]
        applied.append("flip")
    if draws[2] < ranges.prob:
        angle = (2 * params[2] - 1) * ranges.rotation_deg
        fill = float(np.median(np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])))
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=fill)
        lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant", cval=0)
        applied.append("rotation")
    if draws[3] < ranges.prob:
        img, lab = img[:, ::-1], lab[:, ::-1]
        applied.append("mirror")
    if photometric:
        if draws[4] < ranges.prob:
            c = ranges.contrast[0] + (ranges.contrast[1] - ranges.contrast[0]) * params[4]
            m = img.mean()
            img = (img - m) * c + m
            applied.append("contrast")
        if draws[5] < ranges.prob:
            img = img + (2 * params[5] - 1) * ranges.brightness
            applied.append("brightness")
    img = np.clip(img, 0.0, 1.0)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab), applied


def _expand(img: np.ndarray, lab: np.ndarray, scale: float):
    h, w = img.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    small = ndimage.zoom(img, (nh / h, nw / w), order=1)
    small_lab = ndimage.zoom(lab, (nh / h, nw / w), order=0)
    fill = float(np.median(np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])))
    out = np.full_like(img, fill)
    out_lab = np.zeros_like(lab)
    top, left = (h - small.shape[0]) // 2, (w - small.shape[1]) // 2
    out[top : top + small.shape[0], left : left + small.shape[1]] = small
    out_lab[top : top + small.shape[0], left : left + small.shape[1]] = small_lab
    return out, out_lab


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    augmentations: List[List[str]] = field(default_factory=list)

    def augmentation_kinds(self) -> set:
        return {a for batch in self.augmentations for a in batch}


def lr_at(it: int, cfg: SegConfig) -> float:
    return cfg.lr_initial if it < int(cfg.lr_drop_at * cfg.iterations) else cfg.lr_final


def train_step(params: ModelParams, x: np.ndarray, y: np.ndarray, lam: float,
               upsample_mode: str = "nearest") -> Tuple[float, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """One forward/backward pass. Returns (loss, grads, updated BN buffers)."""
    with Graph() as g:
        P = Bound(params, g)
        probs, _, _ = unet_forward(P, g.leaf(x), "train", upsample_mode)
        loss = loss_seg(probs, y, lam)
    grads = backward(g, loss)
    return float(loss.data), P.grads(grads), P.updated_buffers()


def train_seg(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: SegConfig,
    params: Optional[ModelParams] = None,
    progress: bool = False,
) -> Tuple[ModelParams, TrainLog]:
    """Adam training on (N, H, W) images / labels; deterministic given ``cfg.seed``."""
    cfg.validate()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty training set")
    if images.shape[1:] != tuple(cfg.input_size):
        raise ValueError(f"training images {images.shape[1:]} do not match input size {cfg.input_size}")
    params = build_unet(cfg) if params is None else params.copy()
    rng = np.random.default_rng(cfg.seed + 7919)
    state = AdamState()
    log = TrainLog()
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        xb = np.empty((cfg.batch_size, 1) + images.shape[1:], np.float32)
        yb = np.empty((cfg.batch_size,) + images.shape[1:], np.uint8)
        applied = []
        for j, i in enumerate(idx):
            if cfg.augment:
                img, lab, a = augment_pair(images[i], labels[i], rng, photometric=not cfg.style_unified)
                applied.extend(a)
            else:
                img, lab = images[i], labels[i]
            xb[j, 0], yb[j] = img, lab
        loss, grads, buffers = train_step(params, xb, yb, cfg.lambda_dice, cfg.upsample_mode)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at iteration {it}")
        lr = lr_at(it, cfg)
        new, state = adam_step(params.trainable(), grads, state, lr)
        params.tensors.update(new)
        params.tensors.update(buffers)
        log.losses.append(loss)
        log.lrs.append(lr)
        log.augmentations.append(sorted(set(applied)))
        if progress and (it % 50 == 0 or it == cfg.iterations - 1):
            logger.info("seg iter %d loss %.4f lr %.1e", it, loss, lr)
    return params, log
