"""Orthonormal Haar wavelet pooling and unpooling (depthwise, stride 2).

Kernel convention on each 2x2 block ``[[a, b], [c, d]]``::

    LL = ( a + b + c + d) / 2
    LH = (-a - b + c + d) / 2     # vertical detail
    HL = (-a + b - c + d) / 2     # horizontal detail
    HH = ( a - b - c + d) / 2
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, forward_op, register_op, take


def _blocks(x: np.ndarray):
    return x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]


def _analysis(a, b, c, d):
    return (
        (a + b + c + d) * 0.5,
        (-a - b + c + d) * 0.5,
        (-a + b - c + d) * 0.5,
        (a - b - c + d) * 0.5,
    )


def _synthesis(ll, lh, hl, hh):
    # transpose of the analysis matrix (it is orthonormal)
    n, c, h, w = ll.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=ll.dtype)
    out[:, :, 0::2, 0::2] = (ll - lh - hl + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll + lh + hl + hh) * 0.5
    return out


@register_op("haar_pool")
class _HaarPool:
    @staticmethod
    def forward(x):
        if x.ndim != 4:
            raise ShapeError(f"haar_pool: expected NCHW input, got {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"haar_pool: odd extents {x.shape[2]}x{x.shape[3]}")
        return np.stack(_analysis(*_blocks(x))), None

    @staticmethod
    def backward(g, ctx, x):
        return (_synthesis(g[0], g[1], g[2], g[3]),)


@register_op("haar_unpool")
class _HaarUnpool:
    @staticmethod
    def forward(ll, lh, hl, hh):
        if not (ll.shape == lh.shape == hl.shape == hh.shape):
            raise ShapeError(
                f"haar_unpool: band extents differ {ll.shape}, {lh.shape}, {hl.shape}, {hh.shape}"
            )
        return _synthesis(ll, lh, hl, hh), None

    @staticmethod
    def backward(g, ctx, ll, lh, hl, hh):
        return _analysis(*_blocks(g))


@dataclass
class WaveletBands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.ll.shape

    def highs(self) -> Tuple[Tensor, Tensor, Tensor]:
        return self.lh, self.hl, self.hh


def haar_pool(x: Tensor) -> WaveletBands:
    stacked = forward_op("haar_pool", [x])
    return WaveletBands(*(take(stacked, i) for i in range(4)))


def haar_unpool(bands: WaveletBands) -> Tensor:
    return forward_op("haar_unpool", [bands.ll, bands.lh, bands.hl, bands.hh])


def haar_multilevel(x: Tensor, levels: int) -> List[WaveletBands]:
    """Pool ``levels`` times, each level decomposing the previous LL band."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    h, w = x.shape[2], x.shape[3]
    k = 2**levels
    if h % k or w % k:
        raise ShapeError(f"haar_multilevel: {h}x{w} not divisible by 2^{levels}")
    pyramid = []
    cur = x
    for _ in range(levels):
        bands = haar_pool(cur)
        pyramid.append(bands)
        cur = bands.ll
    return pyramid


def haar_multilevel_inverse(pyramid: List[WaveletBands]) -> Tensor:
    cur = pyramid[-1].ll
    for bands in reversed(pyramid):
        cur = haar_unpool(WaveletBands(cur, bands.lh, bands.hl, bands.hh))
    return cur
