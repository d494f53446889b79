"""``edgedistill`` command line.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .captioning import PROMPT_TEMPLATES, expand
from .config import ABLATION_MASKS, ExperimentConfig, load_config_with_overrides
from .dataset_io import load_distilled, load_manifest, write_distilled, write_manifest
from .diffusion import load_checkpoint, save_checkpoint
from .distiller import baseline_random_select
from .errors import ConfigurationError, EdgeDistillError
from . import pipeline as pl

log = logging.getLogger("edgedistill")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

PRETRAINED_NAME = "pretrained.pt"
CHECKPOINT_NAME = "checkpoint.pt"


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _mask_list(text: str) -> list[str]:
    masks = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in masks if m not in ABLATION_MASKS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown masks {bad}; choose from {list(ABLATION_MASKS)}")
    return masks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment TOML file")
    common.add_argument("--seed", type=int, help="global seed; overrides run.seed")
    common.add_argument("--out", type=Path, help="run directory; overrides run.out")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="edgedistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("distill", parents=[common], help="pretrain if needed, then EDGE fine-tune")

    p = sub.add_parser("synthesize", parents=[common], help="sample a distilled dataset")
    p.add_argument("--checkpoint", type=Path, help="fine-tuned checkpoint (default: <out>/checkpoint.pt)")
    p.add_argument("--baseline", choices=["pretrained"],
                   help="sample from the pretrained model instead")
    p.add_argument("--skip-caption", action="store_true", help="leave one caption per image")

    p = sub.add_parser("caption", parents=[common], help="expand a distilled dataset to cpi captions")
    p.add_argument("--input", type=Path, required=True, help="distilled dataset directory")
    p.add_argument("--cpi", type=int, help="captions per image (default: synthesis.cpi)")

    p = sub.add_parser("eval", parents=[common], help="train evaluation models and report recall")
    p.add_argument("--distilled", type=Path, help="distilled dataset directory (default: <out>/distilled)")
    p.add_argument("--validation", type=Path, help="validation manifest (default: generated from config)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated evaluation seeds")

    p = sub.add_parser("ablate", parents=[common], help="run the component ablation table")
    p.add_argument("--masks", type=_mask_list, help=f"comma-separated subset of {list(ABLATION_MASKS)}")

    p = sub.add_parser("baseline", parents=[common], help="build a baseline distilled dataset")
    p.add_argument("--kind", choices=["random", "pretrained"], default="random")
    return parser


def load_experiment(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"run.out={json.dumps(str(args.out))}")
    cfg = load_config_with_overrides(args.config, overrides)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    return cfg.validate()


# ---------------------------------------------------------------------------
# commands

def _pretrained(cfg, run: pl.RunDirectory, corpus):
    cache = run.path / PRETRAINED_NAME
    model, tlog = pl.pretrained_model(cfg, corpus, cache=cache)
    if tlog is not None:
        run.record("pretrain_log", tlog.write(run.path / "pretrain_log.jsonl"))
    if cache.is_file():
        run.record("pretrained", cache)
    return model


def cmd_distill(cfg, run: pl.RunDirectory, args) -> dict:
    corpus = pl.build_corpus(cfg.corpus)
    base = _pretrained(cfg, run, corpus)
    model, tlog = pl.distill_model(cfg, corpus, base)
    run.record("checkpoint", save_checkpoint(model, run.path / CHECKPOINT_NAME,
                                             {"stage": "finetune", "loss_mask": cfg.train.loss_mask}))
    run.record("training_log", tlog.write(run.path / "training_log.jsonl"))
    return {"steps": len(tlog.records), "final_loss": tlog.records[-1]["loss"] if tlog.records else None}


def _load_model(path: Path):
    if not path.is_file():
        raise EdgeDistillError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    return model


def cmd_synthesize(cfg, run: pl.RunDirectory, args) -> dict:
    corpus = pl.build_corpus(cfg.corpus)
    if args.baseline == "pretrained":
        path = args.checkpoint or run.path / PRETRAINED_NAME
        target = run.path / "baseline_pretrained"
    else:
        path = args.checkpoint or run.path / CHECKPOINT_NAME
        target = run.path / "distilled"
    model = _load_model(path)
    ds = pl.synthesize_distilled(cfg, model, corpus, caption=not args.skip_caption,
                                 baseline=args.baseline == "pretrained")
    run.record("distilled", write_distilled(ds, target))
    return {"n_images": ds.n_images, "pair_count": ds.pair_count, "digest": pl.dataset_digest(ds)}


def cmd_caption(cfg, run: pl.RunDirectory, args) -> dict:
    ds = load_distilled(args.input)
    cpi = args.cpi or cfg.synthesis.cpi
    captioner = pl.make_captioner(cfg.captioner, cfg.corpus)
    ds = expand(ds, cpi, captioner, PROMPT_TEMPLATES[cfg.captioner.prompt], cfg.captioner.workers)
    run.record("captioned", write_distilled(ds, run.path / "captioned"))
    return {"n_images": ds.n_images, "pair_count": ds.pair_count}


def _validation(cfg, run: pl.RunDirectory, args):
    if args.validation is not None:
        return load_manifest(args.validation)
    validation = pl.build_corpus(cfg.validation, "validation")
    run.record("validation", write_manifest(validation, run.path / "validation"))
    return validation


def cmd_eval(cfg, run: pl.RunDirectory, args) -> dict:
    ds = load_distilled(args.distilled or run.path / "distilled")
    validation = _validation(cfg, run, args)
    seeds = args.seeds or list(cfg.eval.seeds)
    mask = cfg.train.loss_mask
    if ds.provenance and ds.provenance[0].source != "edge":
        mask = ds.provenance[0].source
    report = pl.evaluate(cfg, ds, validation, seeds, loss_mask=mask)
    path = run.path / "metrics.json"
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run.record("metrics", path)
    return {"IR@1": report.mean.get("IR@1"), "TR@1": report.mean.get("TR@1")}


def cmd_ablate(cfg, run: pl.RunDirectory, args) -> dict:
    corpus = pl.build_corpus(cfg.corpus)
    base = _pretrained(cfg, run, corpus)
    table = pl.run_ablation(cfg, args.masks, pretrained=base, corpus=corpus)
    run.record("ablation", table.write(run.path / "ablation.json"))
    return {"rows": len(table.rows)}


def cmd_baseline(cfg, run: pl.RunDirectory, args) -> dict:
    corpus = pl.build_corpus(cfg.corpus)
    if args.kind == "random":
        ds = baseline_random_select(corpus, cfg.synthesis.pair_count, cfg.synthesis.seed or 0)
        target = run.path / "baseline_random"
    else:
        model = _pretrained(cfg, run, corpus)
        ds = pl.synthesize_distilled(cfg, model, corpus, baseline=True)
        target = run.path / "baseline_pretrained"
    run.record("distilled", write_distilled(ds, target))
    return {"n_images": ds.n_images, "pair_count": ds.pair_count, "digest": pl.dataset_digest(ds)}


COMMANDS = {
    "distill": cmd_distill,
    "synthesize": cmd_synthesize,
    "caption": cmd_caption,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_experiment(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with pl.RunDirectory(cfg.run.out, args.command) as run:
            summary = COMMANDS[args.command](cfg, run, args)
            run.write_descriptor(cfg, argv, {"summary": summary})
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EdgeDistillError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, "out": str(cfg.run.out), **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
