"""Command-line entry point: ``propy <command> [flags]``.

Every command reads a JSON run config (``--config``), applies flag overrides
and writes under ``--out``. Failures print one JSON line on stderr and exit
nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

import torch

from . import pipeline
from .data import save_corpus
from .errors import ConfigError, PromptPyramidError
from .persistence import RunConfig, default_config, load_checkpoint, save_checkpoint
from .pyramid import build_masks, export_masks, validate_config
from .text import pad_batch
from .training import Batch, grad_check, sample_coordinates

COMMANDS = ("gen-data", "train", "eval", "vcmr-eval", "inspect-pyramid", "export-masks",
            "gradcheck")


def _levels(text: Optional[str]):
    if text is None or text.lower() == "all":
        return None
    return [int(x) for x in text.split(",") if x.strip()]


def _run_config(args) -> RunConfig:
    raw = default_config()
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
        raw.setdefault("data", {})["seed"] = args.seed
    if args.variant:
        raw["variant"] = args.variant
    if args.mechanism:
        raw["frame_mechanism"] = args.mechanism
    if args.levels is not None:
        raw["mil_levels"] = _levels(args.levels)
        raw["eval_levels"] = _levels(args.levels)
    return RunConfig.from_dict(raw)


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _model(args, cfg):
    if not args.checkpoint:
        raise FileNotFoundError("--checkpoint is required for this command")
    return load_checkpoint(args.checkpoint)


def cmd_gen_data(args, cfg):
    out = _out_dir(args, cfg)
    corpus = pipeline.corpus_for(cfg)
    save_corpus(corpus, out)
    print(json.dumps({"corpus": out, "videos": len(corpus.video_ids),
                      "queries": len(corpus.queries),
                      "train": len(corpus.split["train"]), "test": len(corpus.split["test"])}))


def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    corpus = pipeline.corpus_for(cfg)
    model, trainer = pipeline.train_model(cfg, corpus, log_path=os.path.join(out, "train_log.jsonl"))
    ckpt = save_checkpoint(model, os.path.join(out, "checkpoint"), step=trainer.step,
                           extra={"run_config": cfg.to_dict()})
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    print(json.dumps({"checkpoint": ckpt, "steps": trainer.step,
                      "final_loss": trainer.history[-1]["loss"] if trainer.history else None,
                      "parameters": model.parameter_report()}))


def cmd_eval(args, cfg):
    out = _out_dir(args, cfg)
    model = _model(args, cfg)
    corpus = pipeline.corpus_for(cfg)
    report = pipeline.evaluate(model, corpus, args.split, cfg.eval_levels,
                               config=cfg.to_dict(), seed=cfg.seed)
    report.to_json(os.path.join(out, f"retrieval_{args.split}.json"))
    print(json.dumps({"recall": report.recall, "sum_r": report.sum_r,
                      "num_queries": report.num_queries}))


def cmd_vcmr_eval(args, cfg):
    out = _out_dir(args, cfg)
    model = _model(args, cfg)
    corpus = pipeline.corpus_for(cfg)
    report = pipeline.evaluate_vcmr(model, corpus, args.split, cfg.eval_levels,
                                    config=cfg.to_dict(), seed=cfg.seed)
    report.to_json(os.path.join(out, f"vcmr_{args.split}.json"))
    print(json.dumps({"recall": report.recall, "num_queries": report.num_queries}))


def cmd_inspect_pyramid(args, cfg):
    s = validate_config(cfg.model.pyramid)
    summary = s.summary()
    print(f"layer sizes: {list(s.layer_sizes)}")
    print(f"N_e = {s.total_prompts}")
    print("layer index start end")
    for row in summary["segments"]:
        print(f"{row['layer']:>5} {row['index']:>5} {row['start']:>5} {row['end']:>3}")
    if args.out:
        with open(os.path.join(_out_dir(args, cfg), "pyramid.json"), "w") as fh:
            json.dump(summary, fh, indent=1)


def cmd_export_masks(args, cfg):
    out = _out_dir(args, cfg)
    model_cfg = cfg.model
    s = validate_config(model_cfg.pyramid)
    masks = build_masks(s, model_cfg.visual.tokens_per_frame, model_cfg.visual.visual_prompts,
                        model_cfg.variant, model_cfg.vp_op)
    manifest = export_masks(s, masks, out)
    print(json.dumps({"out": out, "files": manifest["files"]}))


def cmd_gradcheck(args, cfg):
    out = _out_dir(args, cfg)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else pipeline.build_model(cfg)
    # move zero-initialized up-projections off zero so their inputs get gradient signal
    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "adapters" in name and "up" in name:
                p.add_(0.02 * torch.randn(p.shape, generator=gen))
    corpus = pipeline.corpus_for(cfg)
    queries = corpus.queries_for("train")
    picked, seen = [], set()
    for q in queries:
        if q.video_id not in seen:
            picked.append(q)
            seen.add(q.video_id)
        if len(picked) == 3:
            break
    videos = torch.from_numpy(corpus.video_array([q.video_id for q in picked]))
    ids, ends = pad_batch([q.tokens for q in picked])
    coords = sample_coordinates(model, args.coordinates, seed=cfg.seed)
    results = grad_check(model, Batch(videos, ids, ends), coords, eps=args.eps,
                         levels=cfg.train.mil_levels)
    worst = max(r["rel_error"] for r in results)
    with open(os.path.join(out, "gradcheck.json"), "w") as fh:
        json.dump({"eps": args.eps, "max_rel_error": worst, "coordinates": results}, fh, indent=1)
    print(json.dumps({"coordinates": len(results), "max_rel_error": worst}))
    return 0 if worst < args.tolerance else 1


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "vcmr-eval": cmd_vcmr_eval, "inspect-pyramid": cmd_inspect_pyramid,
            "export-masks": cmd_export_masks, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults to the built-in toy config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint", help="checkpoint directory")
        p.add_argument("--variant", help="interaction variant (AD, A, D, P, C, PC, W, S)")
        p.add_argument("--mechanism", help="frame mechanism (ORIG, ADAPTER, ...)")
        p.add_argument("--levels", help="comma-separated pyramid layers for MIL, or 'all'")
        if name in ("eval", "vcmr-eval"):
            p.add_argument("--split", default="test", choices=("train", "test", "all"))
        if name == "gradcheck":
            p.add_argument("--coordinates", type=int, default=24)
            p.add_argument("--eps", type=float, default=1e-3)
            p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _error_record(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc).replace("\n", " ")})


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("PROPY_THREADS")
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    try:
        if threads:
            torch.set_num_threads(max(1, int(threads)))
        cfg = _run_config(args)
        code = HANDLERS[args.command](args, cfg)
        return int(code or 0)
    except (PromptPyramidError, ValueError, KeyError, OSError, TypeError) as exc:
        print(_error_record(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
