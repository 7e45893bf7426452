"""Zero-shot wavelet style transfer with AdaIN, style library and style selection.

Network layout for ``levels`` stages (widths ``base * 2**s``)::

    encoder stage s : conv3x3+ReLU, conv3x3+ReLU, AdaIN site, Haar pool
                      (LL continues, LH/HL/HH kept as skips)
    fusion          : every stage's LL averaged down to the deepest scale,
                      concatenated, 1x1 conv + ReLU, then AdaIN once more
    decoder stage s : conv3x3 + IN + ReLU, Haar unpool with the content skips
    head            : conv3x3 to one channel, image-level AdaIN to the style
                      image's global mean/std, clipped to [0, 1]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers as L
from .params import Bound, Initializer, ModelParams
from .tensor import AdamState, Graph, Tensor, adam_step, backward, clip, concat, square, tmean
from .wavelet import WaveletBands, haar_pool, haar_unpool

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class STConfig:
    levels: int = 2
    base_channels: int = 16
    iterations: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0


def build_st(cfg: STConfig) -> ModelParams:
    if cfg.levels < 1:
        raise ValueError("levels must be >= 1")
    init = Initializer(cfg.seed)
    widths = [cfg.base_channels * 2**s for s in range(cfg.levels)]
    cin = 1
    for s, w in enumerate(widths):
        init.conv(f"enc{s}.conv0", cin, w)
        init.conv(f"enc{s}.conv1", w, w)
        cin = w
    init.conv("fusion", sum(widths), widths[-1], k=1)
    for s in range(cfg.levels - 1, -1, -1):
        out = widths[s - 1] if s > 0 else widths[0]
        init.conv(f"dec{s}.conv0", widths[s], widths[s])
        init.norm(f"dec{s}.in0", widths[s], "instance")
        init.conv(f"dec{s}.conv1", widths[s], out)
        init.norm(f"dec{s}.in1", out, "instance")
    init.conv("head", widths[0], 1)
    return ModelParams("st", init.tensors)


def st_levels(params: ModelParams) -> int:
    n = 0
    while f"enc{n}.conv0.weight" in params:
        n += 1
    return n


@dataclass
class Encoding:
    deep: Tensor  # fused features at the deepest scale (before the post-fusion AdaIN)
    skips: List[WaveletBands]  # per stage, shallow first
    stage_features: List[Tensor]  # pre-pool features per stage (AdaIN inputs)
    lows: List[Tensor]  # LL output per stage


def _stage_convs(x: Tensor, P: Bound, s: int) -> Tensor:
    x = L.relu(L.conv2d(x, P.conv(f"enc{s}.conv0")))
    return L.relu(L.conv2d(x, P.conv(f"enc{s}.conv1")))


def fuse_multiscale(stage_features: Sequence[Tensor], P: Bound) -> Tensor:
    """Average-pool every stage to the deepest resolution, concat, 1x1 conv + ReLU."""
    deepest = stage_features[-1].shape[2]
    parts = []
    for f in stage_features:
        factor = f.shape[2] // deepest
        if factor * deepest != f.shape[2] or f.shape[3] != factor * stage_features[-1].shape[3]:
            raise ValueError(f"stage resolution {f.shape[2:]} not reducible to {stage_features[-1].shape[2:]}")
        parts.append(L.avg_pool(f, factor))
    x = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return L.relu(L.conv2d(x, P.conv("fusion", padding=0)))


def encode(x: Tensor, P: Bound, style: Optional[Encoding] = None) -> Encoding:
    """Run the encoder; with ``style`` given, AdaIN re-styles each stage first."""
    levels = st_levels(P.params)
    h, w = x.shape[2], x.shape[3]
    if h % 2**levels or w % 2**levels:
        raise ValueError(f"input {h}x{w} not divisible by 2^{levels}")
    skips, feats, lows = [], [], []
    cur = x
    for s in range(levels):
        f = _stage_convs(cur, P, s)
        if style is not None:
            f = L.adain(f, style.stage_features[s])
        feats.append(f)
        bands = haar_pool(f)
        skips.append(bands)
        lows.append(bands.ll)
        cur = bands.ll
    return Encoding(fuse_multiscale(lows, P), skips, feats, lows)


def decode(deep: Tensor, skips: Sequence[WaveletBands], P: Bound) -> Tensor:
    x = deep
    for s in range(len(skips) - 1, -1, -1):
        x = L.relu(L.instance_norm(L.conv2d(x, P.conv(f"dec{s}.conv0")), P.norm(f"dec{s}.in0", "instance")))
        b = skips[s]
        x = haar_unpool(WaveletBands(x, b.lh, b.hl, b.hh))
        x = L.relu(L.instance_norm(L.conv2d(x, P.conv(f"dec{s}.conv1")), P.norm(f"dec{s}.in1", "instance")))
    return L.conv2d(x, P.conv("head"))


def stylize_tensor(content: Tensor, style: Tensor, P: Bound) -> Tensor:
    if content.shape[1:] != style.shape[1:]:
        raise ValueError(f"content {content.shape} and style {style.shape} extents differ")
    if content is style:
        # self-styling: every AdaIN site sees identical statistics
        s_enc = encode(content, P)
        c_enc = Encoding(s_enc.deep, s_enc.skips, s_enc.stage_features, s_enc.lows)
        fused = L.adain(c_enc.deep, s_enc.deep)
    else:
        s_enc = encode(style, P)
        c_enc = encode(content, P, style=s_enc)
        fused = L.adain(c_enc.deep, s_enc.deep)
    out = decode(fused, c_enc.skips, P)
    out = L.adain(out, style)
    return clip(out, 0.0, 1.0)


def _as_nchw(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    while arr.ndim < 4:
        arr = arr[None]
    return arr


def stylize(content, style, params: ModelParams, batch: int = 16) -> np.ndarray:
    """Stylize (H, W) or (N, H, W) content with one style slice or a matching batch."""
    c = np.asarray(content, np.float32)
    squeeze = c.ndim == 2
    c = c.reshape((-1,) + c.shape[-2:])
    s = np.asarray(style, np.float32).reshape((-1,) + c.shape[-2:])
    if s.shape[0] not in (1, c.shape[0]):
        raise ValueError(f"{s.shape[0]} style slices for {c.shape[0]} content slices")
    out = np.empty_like(c)
    for i in range(0, len(c), batch):
        cb = c[i : i + batch, None]
        sb = s if s.shape[0] == 1 else s[i : i + batch]
        if sb.shape[0] == 1 and cb.shape[0] > 1:
            sb = np.repeat(sb, cb.shape[0], axis=0)
        res = stylize_tensor(Tensor(cb), Tensor(sb[:, None]), Bound(params))
        if not np.all(np.isfinite(res.data)):
            raise NumericalError("non-finite activations during stylization")
        out[i : i + batch] = res.data[:, 0]
    return out[0] if squeeze else out


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


def reconstruction_loss(params: ModelParams, x: np.ndarray, dtype=None) -> Tuple[float, Dict[str, np.ndarray]]:
    with Graph() as g:
        P = Bound(params, g, dtype)
        xt = g.leaf(x if dtype is None else x.astype(dtype))
        out = stylize_tensor(xt, xt, P)
        loss = tmean(square(out - xt))
    grads = backward(g, loss)
    return float(loss.data), P.grads(grads)


def finetune_reconstruction(
    images: np.ndarray, cfg: STConfig, params: Optional[ModelParams] = None, progress: bool = False
) -> Tuple[ModelParams, List[float]]:
    """Minimise ||stylize(x, x) - x||^2 over random batches; deterministic per seed."""
    images = np.asarray(images, np.float32)
    if len(images) == 0:
        raise ValueError("empty fine-tuning set")
    params = build_st(cfg) if params is None else params.copy()
    rng = np.random.default_rng(cfg.seed + 104729)
    state = AdamState()
    losses = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        xb = images[idx][:, None]
        # random flips double the effective variety at no cost
        if rng.random() < 0.5:
            xb = xb[..., ::-1]
        loss, grads = reconstruction_loss(params, np.ascontiguousarray(xb))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite reconstruction loss at iteration {it}")
        new, state = adam_step(params.trainable(), grads, state, cfg.lr)
        params.tensors.update(new)
        losses.append(loss)
        if progress and (it % 50 == 0 or it == cfg.iterations - 1):
            logger.info("st iter %d loss %.6f", it, loss)
    return params, losses


# ---------------------------------------------------------------------------
# style library and selection


@dataclass(frozen=True)
class StyleDescriptor:
    mean: float
    std: float
    source_id: int
    name: str = ""


def describe(image: np.ndarray, source_id: int = 0, name: str = "") -> StyleDescriptor:
    """Global intensity mean / population std over the whole slice (background included)."""
    arr = np.asarray(image, np.float64)
    return StyleDescriptor(float(arr.mean()), float(arr.std()), source_id, name)


@dataclass
class StyleLibrary:
    slices: List[np.ndarray] = field(default_factory=list)
    descriptors: List[StyleDescriptor] = field(default_factory=list)

    def add(self, image: np.ndarray, name: str = "") -> StyleDescriptor:
        d = describe(image, len(self.slices), name)
        self.slices.append(np.asarray(image, np.float32))
        self.descriptors.append(d)
        return d

    def __len__(self) -> int:
        return len(self.slices)


class EmptyLibraryError(ValueError):
    pass


def style_distance(a: StyleDescriptor, b: StyleDescriptor) -> float:
    return float(np.hypot(a.mean - b.mean, a.std - b.std))


def select_style(test_image: np.ndarray, lib: StyleLibrary) -> Tuple[np.ndarray, StyleDescriptor]:
    """Library slice nearest in (mean, std); ties go to the lowest source_id."""
    if len(lib) == 0:
        raise EmptyLibraryError("style library is empty")
    t = describe(test_image)
    mu = np.array([d.mean for d in lib.descriptors])
    sd = np.array([d.std for d in lib.descriptors])
    dist = np.hypot(mu - t.mean, sd - t.std)
    best = dist.min()
    cands = [d for d, v in zip(lib.descriptors, dist) if v == best]
    chosen = min(cands, key=lambda d: d.source_id)
    return lib.slices[chosen.source_id], chosen


def rank_cases(dice_scores: Sequence[float]) -> List[int]:
    """Case indices by descending Dice; equal scores keep their original order."""
    return sorted(range(len(dice_scores)), key=lambda i: -dice_scores[i])


def build_style_library(
    images: Sequence[np.ndarray],
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    top_k: int,
    names: Optional[Sequence[str]] = None,
) -> StyleLibrary:
    """Keep every slice of the ``top_k`` training cases best segmented by the baseline."""
    from .metrics import case_dice

    if not (len(images) == len(preds) == len(gts)):
        raise ValueError("images, predictions and ground truths must pair up")
    if top_k > len(images):
        raise ValueError(f"top_k={top_k} exceeds the {len(images)} available cases")
    scores = [case_dice(p, g) for p, g in zip(preds, gts)]
    lib = StyleLibrary()
    for ci in rank_cases(scores)[:top_k]:
        case_name = names[ci] if names is not None else f"case{ci:03d}"
        for k, sl in enumerate(np.asarray(images[ci]).reshape((-1,) + np.shape(images[ci])[-2:])):
            lib.add(sl, f"{case_name}_s{k:02d}")
    return lib


def stylize_dataset(images: np.ndarray, style_slice: np.ndarray, params: ModelParams) -> np.ndarray:
    """Render every slice with one fixed style slice; labels are untouched by design."""
    return stylize(np.asarray(images, np.float32), style_slice, params)
