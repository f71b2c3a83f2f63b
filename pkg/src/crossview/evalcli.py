"""Evaluation (AEPE per cost source and tier), visualisation and the CLI."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .costvol import (SOURCE_KINDS, CostOptions, build_cost, extract, match_batch, resize_images, warp)
from .datagen import (FlowField, PhotometricJitter, generate_dataset, load_image, load_pair, read_manifest,
                      save_image, make_pair)
from .errors import ConfigurationError, CrossViewError, MetricError, RangeError
from .flo import write_flo
from .pretrain import (TrainConfig, Trainer, coerce_fields, load_checkpoint, parse_kv, save_checkpoint, to_tensor)
from .model import CrossViewModel, ModelConfig, init_params

logger = logging.getLogger(__name__)

OUT_DIR_ENV = "CROSSVIEW_OUT_DIR"
REPORT_HEADER = ["source_kind", "tier", "n_pairs", "aepe_mean", "epe_median", "wall_ms"]

# (label, normalize, reciprocity, dense zoom-in)
ABLATION_ROWS = [
    ("I", "none", False, False),
    ("II", "none", True, False),
    ("III", "l2", False, False),
    ("IV", "softmax", False, False),
    ("V", "l2", True, False),
    ("VI", "softmax", True, False),
    ("VII", "none", True, True),
]


# -- metrics ------------------------------------------------------------------

def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    if isinstance(x, FlowField):
        return x.stack()
    return np.asarray(x)


def _hw2(x) -> np.ndarray:
    """Flow as ``(H, W, 2)``."""
    a = _np(x)
    if a.ndim == 4:
        a = a[0]
    if a.shape[0] == 2 and a.shape[-1] != 2:
        a = a.transpose(1, 2, 0)
    return a.astype(np.float64)


def epe_map(pred, gt) -> np.ndarray:
    p, g = _hw2(pred), _hw2(gt)
    if p.shape != g.shape:
        raise MetricError(f"resolution mismatch {p.shape} vs {g.shape}")
    return np.sqrt(((p - g) ** 2).sum(axis=-1))


def aepe(pred, gt, valid=None) -> float:
    """Mean end-point error over valid pixels."""
    if valid is None:
        valid = gt.valid if isinstance(gt, FlowField) else np.ones(_hw2(gt).shape[:2], bool)
    valid = np.asarray(_np(valid), dtype=bool)
    if not valid.any():
        raise MetricError("no valid pixels")
    return float(epe_map(pred, gt)[valid].mean())


def random_uniform_flow(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Baseline: every target pixel matched to a uniformly random source pixel."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([rng.uniform(0, w - 1, (h, w)) - xs, rng.uniform(0, h - 1, (h, w)) - ys], axis=-1)


# -- reports ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6g}"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts keyed by REPORT_HEADER
    fingerprint: str = ""
    checkpoint_hash: str = ""
    wall_ms: float = 0.0

    def mean_aepe(self, source_kind: str) -> float:
        """Mean over tiers of per-tier mean AEPE."""
        vals = [r["aepe_mean"] for r in self.rows if r["source_kind"] == source_kind]
        if not vals:
            raise MetricError(f"no rows for {source_kind!r}")
        return float(np.mean(vals))

    def to_csv(self, path=None, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r["source_kind"], r["tier"], r["n_pairs"], _fmt(r["aepe_mean"]), _fmt(r["epe_median"]),
                        _fmt(r["wall_ms"] if timing else 0.0)])
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
            Path(str(path) + ".json").write_text(json.dumps(
                {"fingerprint": self.fingerprint, "checkpoint_hash": self.checkpoint_hash,
                 "wall_ms": round(self.wall_ms, 1) if timing else 0.0}, indent=1, sort_keys=True))
        return text


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _batched_pairs(pairs, size):
    src = to_tensor([p.source for p in pairs])
    tgt = to_tensor([p.target for p in pairs])
    return src, tgt


@torch.no_grad()
def evaluate_pairs(model: CrossViewModel, pairs: Sequence, variants: dict[str, CostOptions],
                   chunk: int = 20, include_random: bool = False, seed: int = 0) -> EvalReport:
    """AEPE of each named option set, per tier; the model runs once per chunk."""
    model.eval()
    per: dict[tuple[str, int], list[float]] = {}
    wall: dict[tuple[str, int], float] = {}
    rng = np.random.default_rng([seed, 5])
    t_all = time.perf_counter()
    size = model.config.image_size
    for i in range(0, len(pairs), chunk):
        batch = pairs[i:i + chunk]
        src, tgt = _batched_pairs(batch, size)
        t0 = time.perf_counter()
        ex = extract(model, resize_images(tgt, size), resize_images(src, size))
        t_ex = (time.perf_counter() - t0) * 1e3
        for name, opts in variants.items():
            t0 = time.perf_counter()
            flow = match_batch(model, src, tgt, opts, extraction=ex)
            dt = t_ex + (time.perf_counter() - t0) * 1e3
            for k, p in enumerate(batch):
                key = (name, p.tier)
                per.setdefault(key, []).append(aepe(flow[k], p.gt_flow))
                wall[key] = wall.get(key, 0.0) + dt / len(batch)
        if include_random:
            for p in batch:
                key = ("random_uniform", p.tier)
                per.setdefault(key, []).append(aepe(random_uniform_flow(p.gt_flow.shape, rng), p.gt_flow))
                wall[key] = 0.0
    rows = []
    for (name, tier) in sorted(per, key=lambda k: (list(variants).index(k[0]) if k[0] in variants else 99, k[1])):
        vals = np.array(per[(name, tier)])
        rows.append({"source_kind": name, "tier": tier, "n_pairs": len(vals), "aepe_mean": float(vals.mean()),
                     "epe_median": float(np.median(vals)), "wall_ms": wall[(name, tier)]})
    fp = ";".join(f"{k}={v.fingerprint()}" for k, v in variants.items())
    return EvalReport(rows, fp, "", (time.perf_counter() - t_all) * 1e3)


def _load_model(checkpoint) -> tuple[CrossViewModel, str]:
    if isinstance(checkpoint, CrossViewModel):
        return checkpoint, ""
    return load_checkpoint(checkpoint), file_hash(checkpoint)


def _load_pairs(manifest):
    if isinstance(manifest, (str, Path)):
        return [load_pair(r) for r in read_manifest(manifest)]
    return list(manifest)


def compare_sources(checkpoint, manifest, sources: Sequence[str] = SOURCE_KINDS,
                    base: CostOptions = CostOptions(), include_random: bool = False) -> EvalReport:
    """AEPE of each cost source per tier (same options otherwise; no zoom-in)."""
    model, digest = _load_model(checkpoint)
    pairs = _load_pairs(manifest)
    variants = {s: replace(base, source_kind=s, normalize=None, dense_zoom_in=False) for s in sources}
    report = evaluate_pairs(model, pairs, variants, include_random=include_random)
    report.checkpoint_hash = digest
    return report


def ablation(checkpoint, manifest, base: CostOptions = CostOptions()) -> EvalReport:
    """The seven normalisation / reciprocity / zoom-in configurations."""
    model, digest = _load_model(checkpoint)
    pairs = _load_pairs(manifest)
    variants = {label: replace(base, source_kind="cross_attention", normalize=norm, reciprocity=recip,
                               dense_zoom_in=zoom) for label, norm, recip, zoom in ABLATION_ROWS}
    report = evaluate_pairs(model, pairs, variants)
    report.checkpoint_hash = digest
    return report


# -- visualisation ------------------------------------------------------------

def flow_to_color(flow, max_mag: Optional[float] = None) -> np.ndarray:
    """Hue encodes direction, saturation magnitude; ``(H, W, 3)`` uint8."""
    f = _hw2(flow)
    mag = np.hypot(f[..., 0], f[..., 1])
    ang = np.arctan2(-f[..., 1], -f[..., 0])
    scale = max_mag if max_mag else max(float(mag.max()), 1e-6)
    hsv = np.stack([((ang + np.pi) / (2 * np.pi) * 255).astype(np.uint8),
                    (np.clip(mag / scale, 0, 1) * 255).astype(np.uint8),
                    np.full(mag.shape, 255, np.uint8)], axis=-1)
    return np.asarray(Image.fromarray(hsv, mode="HSV").convert("RGB"))


def _marker(draw: ImageDraw.ImageDraw, x: float, y: float, color, r: int = 2):
    draw.ellipse([x - r, y - r, x + r, y + r], outline=color, fill=color)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


@torch.no_grad()
def visualize(checkpoint, source, target, query: tuple[float, float], out_dir,
              sources: Sequence[str] = SOURCE_KINDS, options: CostOptions = CostOptions()) -> dict[str, Path]:
    """Write attended-region overlays, a flow colour image and the warped source.

    ``query`` is an (x, y) pixel of the target.  Heatmaps show the fused cost
    row of the query token rescaled to [0, 1]; the query is drawn in blue and
    the best-scoring source position in red.
    """
    model, _ = _load_model(checkpoint)
    model.eval()
    src_img = source if isinstance(source, np.ndarray) else load_image(source)
    tgt_img = target if isinstance(target, np.ndarray) else load_image(target)
    th, tw = tgt_img.shape[:2]
    qx, qy = query
    if not (0 <= qx < tw and 0 <= qy < th):
        raise RangeError(f"query {query} outside target frame {tw}x{th}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = model.config.image_size
    gh, gw = model.config.grid
    src_t, tgt_t = to_tensor(src_img), to_tensor(tgt_img)
    ex = extract(model, resize_images(tgt_t, size), resize_images(src_t, size))
    tok = int(qy * gh / th) * gw + int(qx * gw / tw)
    src_disp = np.asarray(Image.fromarray(_to_uint8(src_img)).resize((tw, th), Image.BILINEAR)) / 255.0
    files = {}
    for kind in sources:
        cost = build_cost(ex, replace(options, source_kind=kind, normalize=None, dense_zoom_in=False))
        row = cost.scores[0, tok].numpy().reshape(gh, gw).astype(np.float64)
        row = (row - row.min()) / max(row.max() - row.min(), 1e-12)
        j = int(np.argmax(row))
        heat = np.asarray(Image.fromarray(_to_uint8(row)).resize((tw, th), Image.NEAREST)) / 255.0
        overlay = 0.5 * src_disp + 0.5 * np.stack([heat, heat * 0.6, np.zeros_like(heat)], -1)
        im = Image.fromarray(_to_uint8(overlay))
        d = ImageDraw.Draw(im)
        _marker(d, qx, qy, (0, 0, 255))
        _marker(d, (j % gw + 0.5) * tw / gw - 0.5, (j // gw + 0.5) * th / gh - 0.5, (255, 0, 0))
        files[f"attn_{kind}"] = out_dir / f"attn_{kind}.png"
        im.save(files[f"attn_{kind}"])
    q = Image.fromarray(_to_uint8(tgt_img))
    _marker(ImageDraw.Draw(q), qx, qy, (0, 0, 255))
    files["query"] = out_dir / "query.png"
    q.save(files["query"])
    flow = match_batch(model, src_t, tgt_t, options)
    files["flow"] = out_dir / "flow.png"
    Image.fromarray(flow_to_color(flow[0])).save(files["flow"])
    if src_t.shape[-2:] == tgt_t.shape[-2:]:
        warped, valid = warp(src_t, flow)
        w_img = warped[0].permute(1, 2, 0).numpy()
    else:
        w_img = np.zeros_like(tgt_img)
    files["warped"] = out_dir / "warped.png"
    save_image(files["warped"], w_img)
    files["side_by_side"] = out_dir / "side_by_side.png"
    save_image(files["side_by_side"], np.concatenate([w_img, tgt_img], axis=1))
    return files


# -- CLI ----------------------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_path(p) -> Path:
    p = Path(p)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _options(args) -> CostOptions:
    layers = args.layers if args.layers == "all" else [int(x) for x in args.layers.split(",")]
    return CostOptions(source_kind=args.source_kind, layer_select=layers, pairing=args.pairing,
                       normalize=None if args.normalize == "auto" else args.normalize,
                       reciprocity=not args.no_reciprocity, suppress_register=not args.keep_register,
                       temperature=args.temperature, dense_zoom_in=args.zoom, zoom_margin=args.zoom_margin)


def _add_cost_flags(p):
    p.add_argument("--source-kind", default="cross_attention", choices=SOURCE_KINDS)
    p.add_argument("--layers", default="all")
    p.add_argument("--pairing", default="QK", choices=["QK", "QQ", "KK", "VV"])
    p.add_argument("--normalize", default="auto", choices=["auto", "none", "l2", "softmax"])
    p.add_argument("--no-reciprocity", action="store_true")
    p.add_argument("--keep-register", action="store_true")
    p.add_argument("--temperature", type=float, default=1e-4)
    p.add_argument("--zoom", action="store_true", help="dense zoom-in refinement")
    p.add_argument("--zoom-margin", type=float, default=CostOptions.zoom_margin)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="crossview", description="Zero-shot dense matching from cross-view completion.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value file; flags override it")
        return p

    p = cmd("gen-data", "write synthetic pairs and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pairs", type=int, default=200)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--tiers", default="1,2,3,4,5")
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--kind", default="procedural", choices=["procedural", "file"])
    p.add_argument("--image-dir")

    p = cmd("pretrain", "cross-view completion pretraining")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics", help="per-step CSV log")

    p = cmd("match", "zero-shot flow for one pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--head", help="flow-head checkpoint")
    p.add_argument("--out", required=True, help=".flo path")
    p.add_argument("--png", help="also write a flow colour image")
    _add_cost_flags(p)

    p = cmd("eval", "AEPE per cost source and tier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sources", default="all")
    p.add_argument("--ablation", action="store_true", help="run the seven-configuration ablation instead")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--no-timing", action="store_true", help="write wall_ms as 0 for byte-stable reports")
    _add_cost_flags(p)

    p = cmd("train-flow", "train the flow head on a frozen backbone")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--n-pairs", type=int, default=160)
    p.add_argument("--seed", type=int, default=2000)
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--stage2-epochs", type=int)

    p = cmd("finetune", "fine-tune the backbone through the zero-shot pipeline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--n-pairs", type=int, default=160)
    p.add_argument("--seed", type=int, default=2000)
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float)

    p = cmd("visualize", "attended-region overlays and flow images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--query", required=True, help="x,y pixel in the target")
    p.add_argument("--out", required=True, help="output directory")
    _add_cost_flags(p)
    return ap


def _merge_config(parser, args, argv):
    """Apply ``--config`` values for options not given on the command line."""
    args.extra = {}
    if not getattr(args, "config", None):
        return args
    values = parse_kv(Path(args.config).read_text())
    given = {a.split("=", 1)[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    passthrough = {"pretrain": TrainConfig, "train-flow": None}
    for k, v in values.items():
        key = k.replace("-", "_")
        if not hasattr(args, key):
            if args.command not in passthrough:
                raise UsageError(f"unknown config key {k!r}")
            args.extra[key] = v  # handed to the training config of the subcommand
            continue
        if key in given:
            continue
        cur = getattr(args, key)
        if isinstance(cur, bool):
            v = v.lower() in ("1", "true", "yes", "on")
        elif isinstance(cur, int):
            v = int(v)
        elif isinstance(cur, float):
            v = float(v)
        setattr(args, key, v)
    return args


def _training_pairs(args):
    if args.manifest:
        return [load_pair(r) for r in read_manifest(args.manifest)]
    return [make_pair(args.seed, i, tier=None) for i in range(args.n_pairs)]


def _run(args) -> int:
    from . import flowhead

    if args.command == "gen-data":
        tiers = [int(t) for t in str(args.tiers).split(",")]
        manifest = generate_dataset(_out_path(args.out), args.n_pairs, args.seed, args.size, tiers,
                                    PhotometricJitter(args.jitter, args.jitter, args.jitter),
                                    args.kind, args.image_dir)
        print(manifest)
    elif args.command == "pretrain":
        overrides = dict(args.extra)
        overrides.update({k: getattr(args, k) for k in ("steps", "batch_size", "learning_rate", "seed")
                          if getattr(args, k) is not None})
        if args.resume:
            trainer = Trainer.resume(args.resume)
            if overrides:
                base = {k: str(v) for k, v in asdict(trainer.cfg).items()}
                trainer.cfg = coerce_fields(TrainConfig, {**base, **overrides})
        else:
            cfg = coerce_fields(TrainConfig, overrides)
            trainer = Trainer(init_params(ModelConfig(seed=cfg.seed)), cfg)
        trainer.run(metrics_csv=_out_path(args.metrics) if args.metrics else None)
        trainer.save(_out_path(args.out))
        print(_out_path(args.out))
    elif args.command == "match":
        model = load_checkpoint(args.ckpt)
        src, tgt = load_image(args.source), load_image(args.target)
        if args.head:
            head = flowhead.load_head(args.head, model.config)
            flow = flowhead.predict_head(model, head, src, tgt)[0]
        else:
            flow = match_batch(model, src, tgt, _options(args))[0]
        out = _out_path(args.out)
        write_flo(out, flow[0].numpy(), flow[1].numpy())
        if args.png:
            Image.fromarray(flow_to_color(flow)).save(_out_path(args.png))
        print(out)
    elif args.command == "eval":
        if args.ablation:
            report = ablation(args.ckpt, args.manifest, _options(args))
        else:
            sources = SOURCE_KINDS if args.sources == "all" else tuple(args.sources.split(","))
            unknown = set(sources) - set(SOURCE_KINDS)
            if unknown:
                raise ConfigurationError(f"unknown sources {sorted(unknown)}")
            report = compare_sources(args.ckpt, args.manifest, sources, _options(args))
        out = _out_path(args.out)
        sys.stdout.write(report.to_csv(out, timing=not args.no_timing))
    elif args.command == "train-flow":
        model = load_checkpoint(args.ckpt)
        over = dict(args.extra)
        over.update({k: getattr(args, k) for k in ("stage1_epochs", "stage2_epochs") if getattr(args, k) is not None})
        cfg = coerce_fields(flowhead.HeadConfig, over)
        head = flowhead.FlowHead(model.config, cfg)
        hist = flowhead.train_head(model, head, _training_pairs(args), cfg)
        flowhead.save_head(head, _out_path(args.out))
        print(f"final loss {hist[-1]['loss']:.4f}")
    elif args.command == "finetune":
        model = load_checkpoint(args.ckpt)
        over = {k: getattr(args, k) for k in ("steps", "learning_rate") if getattr(args, k) is not None}
        cfg = flowhead.FinetuneConfig(**over)
        hist = flowhead.finetune_mode(model, _training_pairs(args), cfg)
        save_checkpoint(model, _out_path(args.out), extra_meta={"finetuned_steps": cfg.steps})
        print(f"final loss {hist[-1]['loss']:.4f}")
    elif args.command == "visualize":
        try:
            qx, qy = (float(v) for v in args.query.split(","))
        except ValueError:
            raise UsageError(f"--query must be x,y, got {args.query!r}")
        files = visualize(args.ckpt, args.source, args.target, (qx, qy), _out_path(args.out),
                          options=_options(args))
        for f in files.values():
            print(f)
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _merge_config(parser, args, argv)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage error", "message": str(exc)}) + "\n")
        return 2
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "usage error", "message": f"config: {exc}"}) + "\n")
        return 2
    except CrossViewError as exc:
        sys.stderr.write(json.dumps({"error": "usage error", "message": str(exc)}) + "\n")
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage error", "message": str(exc)}) + "\n")
        return 2
    except CrossViewError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc)}) + "\n")
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
