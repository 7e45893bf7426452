"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 checkpoint kind
mismatch, 5 missing input artifact.  ``STYLEINV_THREADS`` caps the number of
worker threads (numpy BLAS pools and metric workers); default 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .metrics import STRUCTURE_LABELS, MetricsReport, boundary, evaluate_cases, write_csv
from .phantoms import (
    MANIFEST_NAME,
    VENDORS,
    ManifestRow,
    PhantomCase,
    generate_phantoms,
    load_dataset,
    load_mask,
    read_manifest,
    save_mask,
    save_slice,
    stack_cases,
    write_dataset,
    write_manifest,
)

logger = logging.getLogger("styleinv")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_KIND, EXIT_MISSING = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("STYLEINV_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"STYLEINV_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"STYLEINV_THREADS must be a positive integer, got {raw!r}")
    return n


def _vendors(text: str) -> Tuple[str, ...]:
    vs = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [v for v in vs if v not in VENDORS]
    if not vs or bad:
        raise UsageError(f"unknown vendor(s) {bad or text!r}; choose from {','.join(VENDORS)}")
    return vs


def _size(text: str) -> Tuple[int, int]:
    try:
        h, w = (int(s) for s in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like 64x64, got {text!r}") from None
    return h, w


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} not found")
    return p


def _load_cases(data, vendors: Optional[Sequence[str]] = None) -> List[PhantomCase]:
    root = _require(data, "dataset")
    _require(root / MANIFEST_NAME, "dataset manifest")
    cases = load_dataset(root, vendors)
    if not cases:
        raise UsageError(f"no cases in {root} for vendors {vendors}")
    return cases


# ---------------------------------------------------------------------------
# commands


def cmd_gen_phantoms(args) -> None:
    from .pipeline import VENDOR_SEED_OFFSET

    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    if args.slices < 1:
        raise UsageError("--slices must be >= 1")
    size = _size(args.size)
    out = Path(args.out)
    rows: List[ManifestRow] = []
    for v in _vendors(args.vendors):
        try:
            cases = generate_phantoms(args.cases, args.slices, size, v, 1000 * args.seed + VENDOR_SEED_OFFSET[v])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows += write_dataset(cases, out)
    write_manifest(out / MANIFEST_NAME, rows)
    print(f"wrote {len(rows)} slices to {out}")


def _seg_config(args):
    from .segnet import SegConfig

    cfg = ckpt.load_config(_require(args.config, "config"), SegConfig) if args.config else SegConfig()
    if getattr(args, "style_unified", False):
        cfg = dataclasses.replace(cfg, style_unified=True)
    return cfg


def _st_config(args):
    from .style import STConfig

    return ckpt.load_config(_require(args.config, "config"), STConfig) if args.config else STConfig()


def cmd_train_seg(args) -> None:
    from .segnet import train_seg

    cfg = _seg_config(args)
    cases = _load_cases(args.data, _vendors(args.vendors) if args.vendors else None)
    x, y = stack_cases(cases)
    params, log = train_seg(x, y, cfg, progress=args.verbose)
    ckpt.save_checkpoint(args.out, params)
    loss_path = Path(str(args.out) + ".loss.csv")
    with open(loss_path, "w", newline="\n") as f:
        f.write("iteration,lr,loss\n")
        for i, (lr, loss) in enumerate(zip(log.lrs, log.losses)):
            f.write(f"{i},{lr:g},{loss:.6f}\n")
    print(f"checkpoint {args.out}; final loss {log.losses[-1] if log.losses else float('nan'):.4f}")


def cmd_train_st(args) -> None:
    from .style import finetune_reconstruction

    cfg = _st_config(args)
    cases = _load_cases(args.data, _vendors(args.vendors) if args.vendors else None)
    x, _ = stack_cases(cases)
    params, losses = finetune_reconstruction(x, cfg, progress=args.verbose)
    ckpt.save_checkpoint(args.out, params)
    print(f"checkpoint {args.out}; final loss {losses[-1] if losses else float('nan'):.6f}")


def cmd_build_style_lib(args) -> None:
    from .segnet import labels_from_probs, predict_proba
    from .style import build_style_library

    seg = ckpt.load_checkpoint(_require(args.seg, "segmentation checkpoint"), "seg")
    cases = _load_cases(args.data, _vendors(args.vendors) if args.vendors else None)
    if args.top_k < 1 or args.top_k > len(cases):
        raise UsageError(f"--top-k must lie in 1..{len(cases)}")
    preds = [labels_from_probs(predict_proba(seg, c.images)) for c in cases]
    lib = build_style_library([c.images for c in cases], preds, [c.labels for c in cases], args.top_k,
                              [c.case_id for c in cases])
    path = ckpt.write_library(args.out, lib)
    print(f"style library with {len(lib)} slices: {path}")


def _style_source(args):
    """Either a fixed style slice (--style) or a library (--library)."""
    from .phantoms import load_slice

    if args.style:
        return load_slice(_require(args.style, "style slice")), None
    if args.library:
        return None, ckpt.read_library(_require(args.library, "style library"))
    raise UsageError("give --library DIR or --style PGM")


def cmd_stylize(args) -> None:
    from .pipeline import stylize_with_library
    from .style import stylize

    st = ckpt.load_checkpoint(_require(args.st, "style-transfer checkpoint"), "st")
    style, lib = _style_source(args)
    cases = _load_cases(args.data, _vendors(args.vendors) if args.vendors else None)
    out = []
    for c in cases:
        if lib is not None:
            imgs, _ = stylize_with_library(c.images, lib, st)
        else:
            imgs = stylize(c.images, style, st)
        out.append(dataclasses.replace(c, images=imgs))
    rows = write_dataset(out, args.out)
    write_manifest(Path(args.out) / MANIFEST_NAME, rows)
    print(f"stylized {len(rows)} slices into {args.out}")


def _write_predictions(out, data, cases: Sequence[PhantomCase], preds: Sequence[np.ndarray]) -> None:
    src_rows = {}
    for r in read_manifest(Path(data) / MANIFEST_NAME):
        src_rows.setdefault(r.case_id, []).append(r)
    out = Path(out)
    rows = []
    for c, pred in zip(cases, preds):
        (out / c.vendor).mkdir(parents=True, exist_ok=True)
        for k, r in enumerate(src_rows[c.case_id]):
            rel = f"{c.vendor}/{c.case_id}_s{k:02d}_pred.pgm"
            save_mask(out / rel, pred[k])
            rows.append(ManifestRow(c.case_id, c.vendor, r.slice_path, rel))
    write_manifest(out / MANIFEST_NAME, rows)


def _predict_cases(args, transforms: Sequence[str]) -> None:
    from .segnet import SegConfig
    from .tta import segmenter, tta_predict

    seg = ckpt.load_checkpoint(_require(args.seg, "segmentation checkpoint"), "seg")
    cases = _load_cases(args.data, _vendors(args.vendors) if args.vendors else None)
    predict = segmenter(seg, args.upsample_mode)
    preds = [tta_predict(c.images, predict, transforms) for c in cases]
    _write_predictions(args.out, args.data, cases, preds)
    print(f"wrote {sum(len(p) for p in preds)} predicted masks to {args.out}")


def cmd_segment(args) -> None:
    _predict_cases(args, ("identity",))


def cmd_tta_segment(args) -> None:
    from .tta import TRANSFORMS

    ts = tuple(t.strip() for t in args.transforms.split(",") if t.strip())
    bad = [t for t in ts if t not in TRANSFORMS]
    if bad or "identity" not in ts:
        raise UsageError(f"--transforms must include identity and use only {','.join(TRANSFORMS)}")
    _predict_cases(args, ts)


def render_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """8-bit picture: image in [0, 200], ground-truth contour 255, prediction contour 0."""
    out = np.rint(np.clip(image, 0, 1) * 200).astype(np.uint8)
    out[boundary(gt)] = 255
    out[boundary(pred)] = 0
    return out


def _write_overlay_pgm(path, arr: np.ndarray) -> None:
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.astype(np.uint8).tobytes())


def cmd_evaluate(args) -> None:
    cases = _load_cases(args.data, _vendors(args.vendors) if args.vendors else None)
    pred_root = _require(args.pred, "prediction directory")
    pred_rows: Dict[str, List[ManifestRow]] = {}
    for r in read_manifest(_require(pred_root / MANIFEST_NAME, "prediction manifest")):
        pred_rows.setdefault(r.case_id, []).append(r)
    preds = []
    for c in cases:
        rows = pred_rows.get(c.case_id)
        if rows is None or len(rows) != c.n_slices:
            raise FileNotFoundError(f"predictions for case {c.case_id} missing or incomplete")
        preds.append(np.stack([load_mask(pred_root / r.mask_path, c.labels.shape[1:]) for r in rows]))
    by_vendor: Dict[str, List[int]] = {}
    for i, c in enumerate(cases):
        by_vendor.setdefault(c.vendor, []).append(i)
    vendors = sorted(by_vendor)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(
            lambda v: evaluate_cases([preds[i] for i in by_vendor[v]], [cases[i].labels for i in by_vendor[v]], v),
            vendors,
        ))
    write_csv(args.out, reports)
    if args.overlays:
        od = Path(args.overlays)
        od.mkdir(parents=True, exist_ok=True)
        for c, p in zip(cases, preds):
            for k in range(c.n_slices):
                for name, lab in STRUCTURE_LABELS.items():
                    ov = render_overlay(c.images[k], c.labels[k] == lab, p[k] == lab)
                    _write_overlay_pgm(od / f"{c.case_id}_s{k:02d}_{name}.pgm", ov)
    for r in reports:
        print(f"{r.vendor}: Dice AVG {r.get('Dice'):.2f}")


# ---------------------------------------------------------------------------
# full experiments


@dataclasses.dataclass
class RunManifest:
    experiment: str
    seeds: List[int]
    config: str  # flat key = value snapshot
    style_slice_ids: Dict[str, str] = dataclasses.field(default_factory=dict)  # exp2, per seed
    style_library: Dict[str, str] = dataclasses.field(default_factory=dict)  # exp1, per seed
    outputs: Dict[str, str] = dataclasses.field(default_factory=dict)  # relative path -> sha256

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


RUN_MANIFEST = "run_manifest.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _save_masks(root: Path, preds: Dict[str, np.ndarray], splits) -> None:
    for vendor, arr in preds.items():
        d = root / vendor
        d.mkdir(parents=True, exist_ok=True)
        i = 0
        for c in splits.test[vendor]:
            for k in range(c.n_slices):
                save_mask(d / f"{c.case_id}_s{k:02d}.pgm", arr[i])
                i += 1


def run_pipeline(exp: str, cfg, seeds: Sequence[int], out) -> RunManifest:
    """Run ``exp`` for every seed, write all artifacts and the run manifest."""
    from .pipeline import make_splits, run_exp1, run_exp2, summary_table

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(exp, list(seeds), ckpt.format_config(cfg))
    for seed in seeds:
        sd = out / f"seed{seed}"
        sd.mkdir(parents=True, exist_ok=True)
        splits = make_splits(cfg, seed)
        res = (run_exp1 if exp == "exp1" else run_exp2)(cfg, seed, splits)
        ckpt.save_checkpoint(sd / "seg.ckpt", res.seg_params)
        ckpt.save_checkpoint(sd / "st.ckpt", res.st_params)
        if exp == "exp1":
            ckpt.write_library(sd / "library", res.library)
            manifest.style_library[str(seed)] = f"seed{seed}/library"
        else:
            save_slice(sd / "style_slice.pgm", res.style_slice)
            manifest.style_slice_ids[str(seed)] = res.style_slice_id
        for variant, by_vendor in res.reports.items():
            write_csv(sd / f"{variant}.csv", [by_vendor[v] for v in cfg.test_vendors])
            _save_masks(sd / "masks" / variant, res.predictions[variant], splits)
        print(f"[{exp} seed {seed}]\n{summary_table(res.reports)}")
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != RUN_MANIFEST:
            manifest.outputs[p.relative_to(out).as_posix()] = _sha256(p)
    (out / RUN_MANIFEST).write_text(manifest.to_json())
    return manifest


def cmd_pipeline(args) -> None:
    from .pipeline import ExperimentConfig

    if args.manifest:
        m = RunManifest.from_json(_require(args.manifest, "run manifest").read_text())
        exp, seeds = m.experiment, m.seeds
        cfg = ckpt.parse_config(m.config, ExperimentConfig)
    else:
        if not args.exp:
            raise UsageError("give --exp exp1|exp2 or --manifest FILE")
        exp = args.exp
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        if not seeds:
            raise UsageError("--seeds must list at least one seed")
        cfg = ckpt.load_config(_require(args.config, "config"), ExperimentConfig) if args.config else ExperimentConfig()
    run_pipeline(exp, cfg, seeds, args.out)
    print(f"run manifest: {Path(args.out) / RUN_MANIFEST}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styleinv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantoms", help="write a synthetic multi-vendor dataset")
    g.add_argument("--vendors", default="A,B,C,D")
    g.add_argument("--cases", type=int, default=4)
    g.add_argument("--slices", type=int, default=6)
    g.add_argument("--size", default="64x64")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_phantoms)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
        sp.add_argument("--vendors", default=None, help="restrict to these vendors, e.g. A,B")

    t = sub.add_parser("train-seg", help="train the segmentation network")
    data_args(t)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--style-unified", action="store_true", help="disable contrast/brightness augmentation")
    t.set_defaults(func=cmd_train_seg)

    t = sub.add_parser("train-st", help="fine-tune the style-transfer network on reconstruction")
    data_args(t)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_st)

    b = sub.add_parser("build-style-lib", help="style library from the best-segmented training cases")
    data_args(b)
    b.add_argument("--seg", required=True)
    b.add_argument("--top-k", type=int, default=5)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_style_lib)

    s = sub.add_parser("stylize", help="restyle a dataset with a library or one style slice")
    data_args(s)
    s.add_argument("--st", required=True)
    s.add_argument("--library", default=None)
    s.add_argument("--style", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stylize)

    for name, func in (("segment", cmd_segment), ("tta-segment", cmd_tta_segment)):
        s = sub.add_parser(name, help="predict label masks" + (" with test-time augmentation" if func is cmd_tta_segment else ""))
        data_args(s)
        s.add_argument("--seg", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--upsample-mode", default="nearest", choices=("nearest", "bilinear"))
        if func is cmd_tta_segment:
            s.add_argument("--transforms", default="identity,hflip,vflip,rot90")
        s.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="Dice/Jaccard/HDB/ASSD report CSV plus contour overlays")
    data_args(e)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--overlays", default=None, help="directory for per-structure overlay PGMs")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("pipeline", help="run a full experiment on generated phantoms")
    x.add_argument("--exp", choices=("exp1", "exp2"))
    x.add_argument("--config", default=None)
    x.add_argument("--seeds", default="0")
    x.add_argument("--manifest", default=None, help="rerun from a previous run_manifest.json")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .segnet import NumericalError as SegNumericalError
    from .style import EmptyLibraryError
    from .style import NumericalError as STNumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=worker_count()):
            args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ckpt.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SegNumericalError, STNumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ckpt.KindMismatchError as exc:
        print(f"checkpoint kind mismatch: {exc}", file=sys.stderr)
        return EXIT_KIND
    except (FileNotFoundError, EmptyLibraryError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
