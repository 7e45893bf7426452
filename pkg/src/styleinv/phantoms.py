"""Synthetic multi-vendor cardiac phantoms and PGM / manifest I/O.

Each case is a short stack of short-axis slices: an LV blood pool inside a
myocardial ring, an RV crescent hugging the septum, a body outline and a few
bright distractor blobs.  A ``VendorStyle`` then renders the canonical tissue
intensities with its own gain, bias, texture, blur and noise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

BACKGROUND, LV, MYO, RV = 0, 1, 2, 3

# canonical (vendor-free) intensities
_AIR, _BODY, _BLOOD, _MUSCLE, _FAT = 0.02, 0.38, 0.85, 0.22, 0.62


@dataclass(frozen=True)
class VendorStyle:
    id: str
    intensity_gain: float
    intensity_bias: float
    noise_sigma: float
    texture_scale: float
    blur_sigma: float


VENDORS: Dict[str, VendorStyle] = {
    "A": VendorStyle("A", 0.95, 0.02, 0.025, 0.05, 0.5),
    "B": VendorStyle("B", 0.80, 0.10, 0.020, 0.10, 0.8),
    "C": VendorStyle("C", 0.62, 0.20, 0.030, 0.12, 0.7),
    # most extreme shift: compressed, lifted, textured and blurred
    "D": VendorStyle("D", 0.36, 0.42, 0.070, 0.18, 0.8),
}


@dataclass
class PhantomCase:
    case_id: str
    vendor: str
    images: np.ndarray  # (S, H, W) float32 in [0, 1]
    labels: np.ndarray  # (S, H, W) uint8 in {0, 1, 2, 3}
    geometry_seed: int

    @property
    def n_slices(self) -> int:
        return len(self.images)


def _check_size(size: Tuple[int, int]) -> Tuple[int, int]:
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0 or h % 16 or w % 16:
        raise ValueError(f"phantom size {h}x{w} must be a positive multiple of 16")
    return h, w


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def phantom_geometry(rng: np.random.Generator, n_slices: int, size: Tuple[int, int]):
    """Label stacks plus canonical intensity stacks for one case."""
    h, w = size
    scale = min(h, w) / 64.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-4, 4) * scale
    cx = w / 2 + rng.uniform(-2, 6) * scale
    r_lv = rng.uniform(6.0, 8.5) * scale
    ecc = rng.uniform(0.85, 1.15)
    wall = rng.uniform(3.0, 4.5) * scale
    theta = rng.uniform(0, np.pi)
    rv_gap = rng.uniform(0.2, 1.0) * scale
    body_ry, body_rx = rng.uniform(25, 29) * scale, rng.uniform(27, 31) * scale
    blobs = [
        (rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w, rng.uniform(2, 4) * scale)
        for _ in range(rng.integers(1, 4))
    ]
    labels = np.zeros((n_slices, h, w), np.uint8)
    canon = np.zeros((n_slices, h, w), np.float32)
    for k in range(n_slices):
        # base-to-apex shrink plus a little per-slice wobble
        t = k / max(n_slices - 1, 1)
        shrink = 1.0 - 0.35 * t
        wob = rng.uniform(-0.6, 0.6, size=3) * scale
        ry, rx = r_lv * shrink * ecc, r_lv * shrink / ecc
        scy, scx = cy + wob[0], cx + wob[1]
        lv = _ellipse(yy, xx, scy, scx, ry, rx, theta)
        myo_outer = _ellipse(yy, xx, scy, scx, ry + wall, rx + wall, theta)
        rv_ry = (ry + wall) * rng.uniform(1.05, 1.25)
        rv_rx = (rx + wall) * rng.uniform(0.85, 1.05)
        rv_cx = scx - (rx + wall) * 0.9 - rv_gap + wob[2]
        rv_shape = _ellipse(yy, xx, scy, rv_cx, rv_ry, rv_rx, 0.0)
        rv = rv_shape & ~ndimage.binary_dilation(myo_outer, iterations=1)
        body = _ellipse(yy, xx, h / 2, w / 2, body_ry, body_rx)
        lab = np.zeros((h, w), np.uint8)
        lab[rv] = RV
        lab[myo_outer & ~lv] = MYO
        lab[lv] = LV
        img = np.full((h, w), _AIR, np.float32)
        img[body] = _BODY
        for by, bx, br in blobs:
            blob = _ellipse(yy, xx, by, bx, br, br * 1.3) & body & ~myo_outer & ~rv_shape
            img[blob] = _FAT
        img[lab == MYO] = _MUSCLE
        img[(lab == LV) | (lab == RV)] = _BLOOD
        # papillary-ish dark spots inside LV keep the cavity from being flat
        labels[k], canon[k] = lab, img
    return labels, canon


def render_vendor(canon: np.ndarray, vendor: VendorStyle, rng: np.random.Generator) -> np.ndarray:
    """Apply a vendor appearance to canonical intensities (one stack)."""
    out = np.empty_like(canon, dtype=np.float32)
    s, h, w = canon.shape
    for k in range(s):
        tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0)
        tex /= tex.std() + 1e-8
        img = canon[k] * (1.0 + vendor.texture_scale * tex)
        if vendor.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, vendor.blur_sigma)
        img = vendor.intensity_gain * img + vendor.intensity_bias
        img = img + vendor.noise_sigma * rng.standard_normal((h, w))
        out[k] = np.clip(img, 0.0, 1.0)
    return out


def generate_phantoms(
    n_cases: int,
    slices_per_case: int,
    size: Tuple[int, int],
    vendor,
    seed: int,
) -> List[PhantomCase]:
    """Deterministic phantom cases for one vendor.

    Geometry depends only on (seed, case index), so two vendors rendered with
    the same seed share identical label masks.
    """
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    if slices_per_case < 1:
        raise ValueError(f"slices_per_case must be >= 1, got {slices_per_case}")
    size = _check_size(size)
    vendor = VENDORS[vendor] if isinstance(vendor, str) else vendor
    cases = []
    for i in range(n_cases):
        geo_rng = np.random.default_rng([seed, i])
        labels, canon = phantom_geometry(geo_rng, slices_per_case, size)
        style_rng = np.random.default_rng([seed, i, ord(vendor.id[0])])
        images = render_vendor(canon, vendor, style_rng)
        cases.append(PhantomCase(f"{vendor.id}{seed:03d}_{i:03d}", vendor.id, images, labels, seed))
    return cases


def stack_cases(cases: Sequence[PhantomCase]) -> Tuple[np.ndarray, np.ndarray]:
    return (
        np.concatenate([c.images for c in cases]).astype(np.float32),
        np.concatenate([c.labels for c in cases]),
    )


# ---------------------------------------------------------------------------
# resizing


def resize_to(x: np.ndarray, size: Tuple[int, int], is_mask: bool = False) -> np.ndarray:
    """Bilinear resize for images, nearest-neighbour for label masks."""
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    x = np.asarray(x)
    if x.shape[-2:] == (h, w):
        return x.copy()
    sh, sw = x.shape[-2], x.shape[-1]
    if is_mask:
        rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
        cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
        return x[..., rows[:, None], cols[None, :]]
    from .layers import _bilinear_matrix

    ah = _bilinear_matrix(sh, h, np.float64)
    aw = _bilinear_matrix(sw, w, np.float64)
    return np.einsum("ih,...hw,jw->...ij", ah, x.astype(np.float64), aw).astype(np.float32)


# ---------------------------------------------------------------------------
# PGM I/O


class PGMError(ValueError):
    pass


def _write_pgm(path, arr: np.ndarray, maxval: int) -> None:
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr).astype(dtype).tobytes())


def _read_pgm(path) -> Tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        data = f.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"{path}: malformed header") from None
    if not 0 < maxval < 65536:
        raise PGMError(f"{path}: unexpected maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    raster = data[pos : pos + n]
    if len(raster) != n:
        raise PGMError(f"{path}: raster has {len(raster)} bytes, expected {n}")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w), maxval


def save_slice(path, image: np.ndarray) -> None:
    """16-bit PGM, [0, 1] mapped linearly to [0, 65535]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    _write_pgm(path, np.rint(arr * 65535).astype(np.uint16), 65535)


def load_slice(path, expect_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    raw, maxval = _read_pgm(path)
    if maxval != 65535:
        raise PGMError(f"{path}: image slices must have maxval 65535, got {maxval}")
    _check_extent(path, raw, expect_size)
    return (raw.astype(np.float64) / 65535.0).astype(np.float32)


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.min(initial=0) < 0 or m.max(initial=0) > 3:
        raise ValueError("mask values must lie in {0, 1, 2, 3}")
    _write_pgm(path, m.astype(np.uint8), 255)


def load_mask(path, expect_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    raw, maxval = _read_pgm(path)
    if maxval != 255:
        raise PGMError(f"{path}: masks must have maxval 255, got {maxval}")
    if raw.max(initial=0) > 3:
        raise PGMError(f"{path}: mask contains labels outside {{0,1,2,3}}")
    _check_extent(path, raw, expect_size)
    return raw.astype(np.uint8)


def _check_extent(path, raw: np.ndarray, expect_size) -> None:
    if expect_size is not None and raw.shape != tuple(expect_size):
        raise PGMError(f"{path}: extent {raw.shape} does not match manifest {tuple(expect_size)}")


# ---------------------------------------------------------------------------
# dataset manifest: case_id <tab> vendor <tab> slice_path <tab> mask_path


MANIFEST_NAME = "manifest.tsv"


@dataclass
class ManifestRow:
    case_id: str
    vendor: str
    slice_path: str
    mask_path: str


def write_dataset(cases: Iterable[PhantomCase], root, subdir_by_vendor: bool = True) -> List[ManifestRow]:
    """Write slices/masks as PGM and return the manifest rows (paths relative to ``root``)."""
    root = Path(root)
    rows = []
    for case in cases:
        sub = Path(case.vendor) if subdir_by_vendor else Path(".")
        (root / sub).mkdir(parents=True, exist_ok=True)
        for k in range(case.n_slices):
            img_rel = sub / f"{case.case_id}_s{k:02d}.pgm"
            mask_rel = sub / f"{case.case_id}_s{k:02d}_mask.pgm"
            save_slice(root / img_rel, case.images[k])
            save_mask(root / mask_rel, case.labels[k])
            rows.append(ManifestRow(case.case_id, case.vendor, img_rel.as_posix(), mask_rel.as_posix()))
    return rows


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="\n") as f:
        for r in rows:
            f.write(f"{r.case_id}\t{r.vendor}\t{r.slice_path}\t{r.mask_path}\n")


def read_manifest(path) -> List[ManifestRow]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            rows.append(ManifestRow(*parts))
    return rows


def load_dataset(root, vendors: Optional[Sequence[str]] = None) -> List[PhantomCase]:
    """Read cases back from ``root/manifest.tsv`` (optionally filtered by vendor)."""
    root = Path(root)
    rows = read_manifest(root / MANIFEST_NAME)
    grouped: Dict[str, List[ManifestRow]] = {}
    for r in rows:
        if vendors is None or r.vendor in vendors:
            grouped.setdefault(r.case_id, []).append(r)
    cases = []
    for case_id, rs in grouped.items():
        images = np.stack([load_slice(root / r.slice_path) for r in rs])
        masks = np.stack([load_mask(root / r.mask_path, images.shape[1:]) for r in rs])
        cases.append(PhantomCase(case_id, rs[0].vendor, images, masks, -1))
    return cases
