"""Command-line entry point: ``dynrsl <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import __version__
from . import tensor as T
from .alignment import DynRslModel, similarity_matrix
from .checkpoint import decode_checkpoint, load_checkpoint, save_checkpoint
from .config import KEYS, RunConfig, load_run_config
from .data import ablation_corpus, model_inputs, retrieval_corpus, scenes_from_manifest, write_dataset
from .encoders import tokenize
from .errors import DynRslError
from .geometry import DEFAULT_CLASSES, ingest_detections, plan_regions
from .gradcheck import run_gradcheck
from .patchify import build_dynrsl_input, read_ppm
from .train import collapse_stats, evaluate_retrieval, pooled_image_features, train


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def _read_detections(path: str):
    return ingest_detections(Path(path).read_text(encoding="utf-8"))


def _extent(dets) -> tuple[int, int]:
    w = max((d.box.x2 for d in dets), default=1.0)
    h = max((d.box.y2 for d in dets), default=1.0)
    return max(1, math.ceil(w)), max(1, math.ceil(h))


def _run_config(args) -> RunConfig:
    overrides = {}
    for key in KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return load_run_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    if args.corpus == "ablation":
        scenes = ablation_corpus(groups=max(1, args.n // 4), seed=args.seed, canvas=args.canvas)
    else:
        scenes = retrieval_corpus(args.n, seed=args.seed, canvas=args.canvas, n_view=args.n_view)
    manifest = write_dataset(scenes, args.out)
    _emit(
        args,
        {"manifest": str(manifest), "items": len(scenes), "captions": [s.caption for s in scenes]},
        f"wrote {len(scenes)} pairs to {manifest}",
    )
    return 0


def cmd_plan(args) -> int:
    classes = None if args.all_classes else DEFAULT_CLASSES
    reports = []
    for image_id, dets in _read_detections(args.detections):
        if args.image_id is not None and image_id != args.image_id:
            continue
        w, h = (args.width, args.height) if args.width and args.height else _extent(dets)
        plan = plan_regions(dets, w, h, classes, args.max_subset_size, args.max_regions)
        reports.append({"image_id": image_id, **plan.to_dict()})
    lines = []
    for r in reports:
        lines.append(f"{r['image_id']}: {len(r['rois'])} ROIs, {len(r['combined'])} combined regions")
        for c in r["combined"]:
            lines.append(f"  members {c['members']} -> box {c['box']}")
    _emit(args, {"images": reports}, "\n".join(lines) or "no detections")
    return 0


def cmd_patchify(args) -> int:
    cfg = _run_config(args)
    img = read_ppm(args.image)
    dets = [d for _, ds in _read_detections(args.detections) for d in ds] if args.detections else []
    plan = plan_regions(dets, img.width, img.height, None, cfg.train.max_subset_size, cfg.train.max_regions)
    inp = build_dynrsl_input(img, plan, cfg.patch)
    streams = [
        {"kind": s.stream_kind, "box": list(s.source_box.as_tuple()), "tokens": s.n_tokens} for s in inp.streams
    ]
    payload = {
        "global_tokens": inp.global_stream.n_tokens,
        "region_streams": len(inp.region_streams),
        "total_tokens": inp.total_tokens,
        "token_budget": cfg.patch.token_budget,
        "dropped_regions": inp.dropped_regions,
        "streams": streams,
    }
    text = (
        f"{inp.total_tokens}/{cfg.patch.token_budget} tokens: global {inp.global_stream.n_tokens}"
        f" + {len(inp.region_streams)} region streams, {inp.dropped_regions} dropped"
    )
    _emit(args, payload, text)
    return 0


def _scenes(args, cfg: RunConfig):
    if args.manifest:
        return scenes_from_manifest(args.manifest)
    return retrieval_corpus(cfg.n_pairs, seed=cfg.train.seed, canvas=cfg.canvas, n_view=cfg.train.n_view)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    scenes = _scenes(args, cfg)
    inputs = model_inputs(scenes, cfg.patch, cfg.train.max_subset_size, cfg.train.max_regions, not args.no_regions)
    captions = [tokenize(s.caption, cfg.encoder.vocab, max_len=cfg.encoder.max_text_len) for s in scenes]
    model = DynRslModel(cfg.encoder, cfg.patch)

    def log(step, report):
        if args.log_every and (step % args.log_every == 0 or step == cfg.train.steps - 1) and not args.json:
            print(f"step {step}: " + " ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()), flush=True)

    result = train(model, inputs, captions, cfg.train, log)
    metrics = evaluate_retrieval(model, inputs, captions)
    if args.out:
        save_checkpoint(
            model,
            args.out,
            {"max_subset_size": cfg.train.max_subset_size, "max_regions": cfg.train.max_regions, "regions": not args.no_regions},
        )
    payload = {
        "steps": cfg.train.steps,
        "final_loss": result.reports[-1].as_dict(),
        "metrics": metrics.to_dict(),
        "collapse": collapse_stats(pooled_image_features(model, inputs)),
        "checkpoint": args.out,
    }
    _emit(args, payload, f"recall@1 {metrics.recall_at_1:.3f}  recall@5 {metrics.recall_at_5:.3f}  mean rank {metrics.mean_rank:.2f}")
    return 0


def cmd_eval(args) -> int:
    config, _ = decode_checkpoint(Path(args.checkpoint).read_bytes())
    extra = config.get("extra", {})
    model = load_checkpoint(args.checkpoint)
    scenes = scenes_from_manifest(args.manifest)
    regions = extra.get("regions", True) and not args.no_regions
    inputs = model_inputs(scenes, model.patch_cfg, extra.get("max_subset_size", 3), extra.get("max_regions", 32), regions)
    captions = [tokenize(s.caption, model.cfg.vocab, max_len=model.cfg.max_text_len) for s in scenes]
    metrics = evaluate_retrieval(model, inputs, captions)
    _emit(
        args,
        metrics.to_dict(),
        f"recall@1 {metrics.recall_at_1:.3f}  recall@5 {metrics.recall_at_5:.3f}  mean rank {metrics.mean_rank:.2f}",
    )
    return 0


def cmd_gradcheck(args) -> int:
    result = run_gradcheck(seed=args.seed, samples_per_param=args.samples)
    ok = result.max_rel_error <= args.tolerance
    payload = {
        "max_rel_error": result.max_rel_error,
        "parameters_checked": result.n_checked,
        "groups": {k: float(v) for k, v in result.groups().items()},
        "passed": ok,
    }
    _emit(args, payload, f"max relative error {result.max_rel_error:.3e} over {result.n_checked} parameters: {'ok' if ok else 'FAILED'}")
    return 0 if ok else 1


def cmd_sim(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg = _run_config(args)
        model = DynRslModel(cfg.encoder, cfg.patch)
    img = read_ppm(args.image)
    dets = [d for _, ds in _read_detections(args.detections) for d in ds] if args.detections else []
    plan = plan_regions(dets, img.width, img.height, None)
    inp = build_dynrsl_input(img, plan, model.patch_cfg)
    caption = tokenize(args.caption, model.cfg.vocab, max_len=model.cfg.max_text_len)
    with T.no_grad():
        fused, valid = model.fused_features([inp])
        score = float(similarity_matrix(model.project_image(fused), valid, model.text_cls([caption])).data[0, 0])
    _emit(args, {"similarity": score, "streams": len(inp.streams)}, f"{score:.6f}")
    return 0


# ---------------------------------------------------------------- parser


def _bool_flag(text: str) -> bool:
    if text.lower() not in ("true", "false"):
        raise argparse.ArgumentTypeError("expected true or false")
    return text.lower() == "true"


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    for key in keys:
        kind = KEYS[key][2]
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=key, type=_bool_flag, metavar="{true,false}")
        else:
            p.add_argument(flag, dest=key, type=kind)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynrsl", description="Dynamic-resolution image-text alignment toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_text, fn):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--json", action="store_true", help="print machine-readable JSON")
        p.set_defaults(fn=fn)
        return p

    p = add("gen", "write a synthetic dataset (PPM images, JSON-lines detections, manifest)", cmd_gen)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", choices=["retrieval", "ablation"], default="retrieval")
    p.add_argument("--n", type=int, default=16, help="number of pairs (ablation: rounded down to groups of 4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--n-view", type=int, default=1)

    p = add("plan", "detections -> ROIs and combined regions", cmd_plan)
    p.add_argument("detections")
    p.add_argument("--image-id")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--max-subset-size", type=int, default=3)
    p.add_argument("--max-regions", type=int, default=32)
    p.add_argument("--all-classes", action="store_true", help="keep every detection class")

    p = add("patchify", "image + detections -> token budget report", cmd_patchify)
    p.add_argument("image")
    p.add_argument("detections", nargs="?")
    _add_config_flags(p, ["global_side", "region_side", "patch_px", "token_budget", "max_subset_size", "max_regions"])

    train_keys = [k for k in KEYS if k != "vocab_file"]
    p = add("train", "train on a manifest (or a generated retrieval corpus)", cmd_train)
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--no-regions", action="store_true", help="global stream only")
    p.add_argument("--log-every", type=int, default=100)
    _add_config_flags(p, train_keys + ["vocab_file"])

    p = add("eval", "retrieval metrics of a checkpoint on a manifest", cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-regions", action="store_true")

    p = add("gradcheck", "finite-difference check of the full loss on a tiny model", cmd_gradcheck)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=8, help="coordinates checked per parameter tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("sim", "similarity of one image and one caption", cmd_sim)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--detections")
    p.add_argument("--checkpoint")
    _add_config_flags(p, ["global_side", "region_side", "patch_px", "token_budget", "d_model", "model_seed"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "fn", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (DynRslError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
