"""The two experiments end to end on phantom data.

Exp.1 trains the segmenter on raw source-vendor slices (SegO), then adds
style transfer at test time (STSegO) and TTA on top (STSegO-TTA).  Exp.2
trains on a style-unified copy of the training set (SegST) and evaluates
with and without TTA (SegST-TTA).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import MetricsReport, evaluate_cases
from .params import ModelParams
from .phantoms import PhantomCase, generate_phantoms, stack_cases
from .segnet import SegConfig, labels_from_probs, predict_proba, train_seg
from .style import (
    STConfig,
    StyleLibrary,
    build_style_library,
    finetune_reconstruction,
    select_style,
    stylize,
)
from .tta import DEFAULT_TRANSFORMS, segmenter, tta_predict

logger = logging.getLogger(__name__)

VENDOR_SEED_OFFSET = {"A": 1, "B": 2, "C": 3, "D": 4}


@dataclass
class ExperimentConfig:
    size: int = 64
    train_vendors: Tuple[str, ...] = ("A", "B")
    test_vendors: Tuple[str, ...] = ("A", "B", "C", "D")
    train_cases: int = 8  # per training vendor
    test_cases: int = 4  # per test vendor
    slices_per_case: int = 6
    top_k: int = 5
    transforms: Tuple[str, ...] = DEFAULT_TRANSFORMS
    seg: SegConfig = field(default_factory=lambda: SegConfig(base_channels=8, convs_per_stage=1, iterations=500))
    st: STConfig = field(default_factory=lambda: STConfig(base_channels=8, iterations=800, lr=2e-3))

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            seg=replace(self.seg, seed=seed, input_size=(self.size, self.size)),
            st=replace(self.st, seed=seed),
        )


@dataclass
class PhantomSplits:
    train: List[PhantomCase]
    test: Dict[str, List[PhantomCase]]


def make_splits(cfg: ExperimentConfig, seed: int) -> PhantomSplits:
    size = (cfg.size, cfg.size)
    train = []
    for v in cfg.train_vendors:
        train += generate_phantoms(cfg.train_cases, cfg.slices_per_case, size, v, 1000 * seed + VENDOR_SEED_OFFSET[v])
    test = {
        v: generate_phantoms(cfg.test_cases, cfg.slices_per_case, size, v, 1000 * seed + 500 + VENDOR_SEED_OFFSET[v])
        for v in cfg.test_vendors
    }
    return PhantomSplits(train, test)


def _split_by_case(arr: np.ndarray, cases: Sequence[PhantomCase]) -> List[np.ndarray]:
    out, i = [], 0
    for c in cases:
        out.append(arr[i : i + c.n_slices])
        i += c.n_slices
    return out


def _evaluate(preds: np.ndarray, cases: Sequence[PhantomCase], vendor: str) -> MetricsReport:
    return evaluate_cases(_split_by_case(preds, cases), [c.labels for c in cases], vendor)


def stylize_with_library(images: np.ndarray, lib: StyleLibrary, st_params: ModelParams) -> Tuple[np.ndarray, List[int]]:
    """Per-slice style selection from ``lib`` followed by stylization."""
    styles, ids = [], []
    for img in images:
        s, d = select_style(img, lib)
        styles.append(s)
        ids.append(d.source_id)
    return stylize(images, np.stack(styles), st_params), ids


@dataclass
class Exp1Result:
    seg_params: ModelParams
    st_params: ModelParams
    library: StyleLibrary
    reports: Dict[str, Dict[str, MetricsReport]]  # variant -> vendor -> report
    predictions: Dict[str, Dict[str, np.ndarray]]  # variant -> vendor -> (S, H, W)
    timings: Dict[str, float] = field(default_factory=dict)


def run_exp1(cfg: ExperimentConfig, seed: int, splits: Optional[PhantomSplits] = None,
             st_params: Optional[ModelParams] = None) -> Exp1Result:
    cfg = cfg.for_seed(seed)
    splits = splits or make_splits(cfg, seed)
    timings: Dict[str, float] = {}
    train_x, train_y = stack_cases(splits.train)

    t0 = time.perf_counter()
    seg_params, _ = train_seg(train_x, train_y, cfg.seg)
    timings["train_seg"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if st_params is None:
        st_params, _ = finetune_reconstruction(train_x, cfg.st)
    timings["train_st"] = time.perf_counter() - t0

    # style library: every slice of the top-k training cases under SegO
    train_pred = labels_from_probs(predict_proba(seg_params, train_x))
    library = build_style_library(
        [c.images for c in splits.train],
        _split_by_case(train_pred, splits.train),
        [c.labels for c in splits.train],
        cfg.top_k,
        [c.case_id for c in splits.train],
    )

    t0 = time.perf_counter()
    predict = segmenter(seg_params, cfg.seg.upsample_mode)
    reports: Dict[str, Dict[str, MetricsReport]] = {"SegO": {}, "STSegO": {}, "STSegO-TTA": {}}
    preds: Dict[str, Dict[str, np.ndarray]] = {k: {} for k in reports}
    for vendor, cases in splits.test.items():
        x, _ = stack_cases(cases)
        preds["SegO"][vendor] = labels_from_probs(predict(x))
        styled, _ = stylize_with_library(x, library, st_params)
        preds["STSegO"][vendor] = labels_from_probs(predict(styled))
        preds["STSegO-TTA"][vendor] = tta_predict(styled, predict, cfg.transforms)
        for variant in reports:
            reports[variant][vendor] = _evaluate(preds[variant][vendor], cases, vendor)
    timings["evaluate"] = time.perf_counter() - t0
    return Exp1Result(seg_params, st_params, library, reports, preds, timings)


@dataclass
class Exp2Result:
    seg_params: ModelParams
    st_params: ModelParams
    style_slice: np.ndarray
    style_slice_id: str
    reports: Dict[str, Dict[str, MetricsReport]]
    predictions: Dict[str, Dict[str, np.ndarray]]
    timings: Dict[str, float] = field(default_factory=dict)


def choose_style_slice(cases: Sequence[PhantomCase], seed: int, vendor: str = "A") -> Tuple[np.ndarray, str]:
    """Seeded pick of one vendor-``vendor`` training slice."""
    pool = [(c, k) for c in cases if c.vendor == vendor for k in range(c.n_slices)]
    if not pool:
        raise ValueError(f"no vendor {vendor} slices to draw a style slice from")
    c, k = pool[int(np.random.default_rng([seed, 77]).integers(len(pool)))]
    return c.images[k], f"{c.case_id}_s{k:02d}"


def run_exp2(cfg: ExperimentConfig, seed: int, splits: Optional[PhantomSplits] = None,
             st_params: Optional[ModelParams] = None) -> Exp2Result:
    cfg = cfg.for_seed(seed)
    splits = splits or make_splits(cfg, seed)
    timings: Dict[str, float] = {}
    train_x, train_y = stack_cases(splits.train)

    t0 = time.perf_counter()
    if st_params is None:
        st_params, _ = finetune_reconstruction(train_x, cfg.st)
    timings["train_st"] = time.perf_counter() - t0

    style_slice, style_id = choose_style_slice(splits.train, seed)
    unified = stylize(train_x, style_slice, st_params)

    t0 = time.perf_counter()
    seg_cfg = replace(cfg.seg, style_unified=True)
    seg_params, _ = train_seg(unified, train_y, seg_cfg)
    timings["train_seg"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    predict = segmenter(seg_params, cfg.seg.upsample_mode)
    reports: Dict[str, Dict[str, MetricsReport]] = {"SegST": {}, "SegST-TTA": {}}
    preds: Dict[str, Dict[str, np.ndarray]] = {k: {} for k in reports}
    for vendor, cases in splits.test.items():
        x, _ = stack_cases(cases)
        styled = stylize(x, style_slice, st_params)
        preds["SegST"][vendor] = labels_from_probs(predict(styled))
        preds["SegST-TTA"][vendor] = tta_predict(styled, predict, cfg.transforms)
        for variant in reports:
            reports[variant][vendor] = _evaluate(preds[variant][vendor], cases, vendor)
    timings["evaluate"] = time.perf_counter() - t0
    return Exp2Result(seg_params, st_params, style_slice, style_id, reports, preds, timings)


def summary_table(reports: Dict[str, Dict[str, MetricsReport]], metric: str = "Dice") -> str:
    vendors = sorted({v for r in reports.values() for v in r})
    lines = [f"{'variant':<12}" + "".join(f"{v:>9}" for v in vendors)]
    for variant, by_vendor in reports.items():
        lines.append(f"{variant:<12}" + "".join(f"{by_vendor[v].get(metric):9.2f}" for v in vendors))
    return "\n".join(lines)
