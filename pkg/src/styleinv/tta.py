"""Test-time augmentation with flips / rotation and per-class majority voting."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .segnet import NUM_CLASSES

TRANSFORMS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")
INVERSE = {
    "identity": "identity",
    "hflip": "hflip",
    "vflip": "vflip",
    "rot90": "rot270",
    "rot180": "rot180",
    "rot270": "rot90",
}
DEFAULT_TRANSFORMS = ("identity", "hflip", "vflip", "rot90")
VOTE_THRESHOLD = 2


def apply_transform(x: np.ndarray, t: str) -> np.ndarray:
    """Exact index permutation over the last two axes."""
    if t == "identity":
        return x
    if t == "hflip":
        return x[..., :, ::-1]
    if t == "vflip":
        return x[..., ::-1, :]
    if t == "rot90":
        return np.rot90(x, 1, axes=(-2, -1))
    if t == "rot180":
        return np.rot90(x, 2, axes=(-2, -1))
    if t == "rot270":
        return np.rot90(x, 3, axes=(-2, -1))
    raise ValueError(f"unknown transform {t!r}")


def invert_transform(x: np.ndarray, t: str) -> np.ndarray:
    return apply_transform(x, INVERSE[t])


def majority_vote(stack: np.ndarray, probs: Optional[np.ndarray] = None) -> np.ndarray:
    """Merge (T, 4, H, W) binary per-class predictions into one label map.

    A foreground class is a candidate at a pixel when at least two runs
    predicted it.  Several candidates: most votes wins, then highest mean
    probability (if ``probs`` is given), then the lowest class index.  No
    candidate: background.
    """
    stack = np.asarray(stack)
    if stack.ndim < 2 or stack.shape[0] == 0:
        raise ValueError("empty vote stack")
    if stack.shape[0] < 2:
        raise ValueError(f"majority vote needs at least 2 runs, got {stack.shape[0]}")
    votes = stack.astype(np.int64).sum(axis=0)  # (C, ...)
    fg = votes[1:]
    cand = fg >= VOTE_THRESHOLD
    # lexicographic key: votes, then mean probability, then lower index wins
    key = np.where(cand, fg.astype(np.float64), -1.0)
    best = key.max(axis=0)
    tied = cand & (key == best)
    if probs is not None:
        mp = np.asarray(probs, np.float64).mean(axis=0)[1:]
        pk = np.where(tied, mp, -np.inf)
        tied = tied & (pk == pk.max(axis=0))
    first = np.argmax(tied, axis=0) + 1
    return np.where(cand.any(axis=0), first, 0).astype(np.uint8)


def tta_predict(
    image: np.ndarray,
    predict: Callable[[np.ndarray], np.ndarray],
    transforms: Sequence[str] = DEFAULT_TRANSFORMS,
) -> np.ndarray:
    """Augment, predict, invert and merge for a batch of (N, H, W) images.

    ``predict`` maps (N, H, W) images to (N, 4, H, W) probabilities.  With a
    single transform the result is that run's argmax.
    """
    if "identity" not in transforms:
        raise ValueError("transforms must include identity")
    image = np.asarray(image, np.float32)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    binaries, probs_all = [], []
    for t in transforms:
        probs = predict(np.ascontiguousarray(apply_transform(image, t)))
        probs = np.ascontiguousarray(invert_transform(probs, t))
        labels = np.argmax(probs, axis=1)
        binaries.append(labels[:, None] == np.arange(NUM_CLASSES)[None, :, None, None])
        probs_all.append(probs)
    if len(transforms) == 1:
        out = np.argmax(probs_all[0], axis=1).astype(np.uint8)
    else:
        stack = np.stack(binaries, axis=1)  # (N, T, 4, H, W)
        pstack = np.stack(probs_all, axis=1)
        out = np.stack([majority_vote(stack[i], pstack[i]) for i in range(len(image))])
    return out[0] if squeeze else out


def segmenter(params, upsample_mode: str = "nearest") -> Callable[[np.ndarray], np.ndarray]:
    """Bind a segmentation model as a TTA predictor."""
    from .segnet import predict_proba

    return lambda imgs: predict_proba(params, imgs, upsample_mode=upsample_mode)
