"""Command-line entry point: ``semaug <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import archive
from .errors import ConfigError, InvalidInputError, LoadError

log = logging.getLogger("semaug")


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _merge(cls, base, overrides: dict):
    """``base`` dataclass with ``overrides`` applied; unknown keys are an error."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    return dataclasses.replace(base, **overrides)


def _set_determinism(args) -> None:
    torch.manual_seed(args.seed)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _image_list(path: str) -> list[np.ndarray]:
    from PIL import Image

    from .data import load_dataset

    root = Path(path)
    if (root / "annotations.json").is_file():
        return [s.image for s in load_dataset(root / "annotations.json").samples]
    files = sorted(root.glob("*.png"))
    if not files:
        raise LoadError(f"{root}: no annotations.json and no PNG images")
    return [np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files]


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg: dict) -> None:
    from .data import TOY_CLASSES, domain_spec, generate_synthetic_domain, save_dataset

    settings = {"domains": args.domains, "n": args.n, "image_size": args.image_size, **cfg}
    domains = settings["domains"]
    if isinstance(domains, str):
        domains = [d for d in domains.split(",") if d]
    out = Path(args.out)
    for name in domains:
        ds = generate_synthetic_domain(domain_spec(name), int(settings["n"]), int(settings["image_size"]),
                                       TOY_CLASSES, seed=args.seed)
        save_dataset(ds, out / name)
        log.info("wrote %d %s images to %s", len(ds), name, out / name)


def cmd_curate(args, cfg: dict) -> None:
    from .embedding import load_bundle
    from .prompts import curate, fixture_path, load_merge_spec, load_ranks, load_wordlist

    bundle = load_bundle(args.encoder) if args.encoder else None
    curation = json.loads(Path(args.curation or fixture_path("manual_curation.json")).read_text(encoding="utf-8"))
    result = curate(
        load_wordlist(args.hyponyms or fixture_path("weather_hyponyms.txt")),
        load_ranks(args.ranks or fixture_path("frequency_ranks.tsv")),
        load_merge_spec(args.merge or fixture_path("merge_spec.json")),
        curation,
        load_wordlist(args.times or fixture_path("times_of_day.txt")).words,
        anchor=cfg.get("anchor", args.anchor),
        sim_threshold=float(cfg.get("sim_threshold", args.sim_threshold)),
        top_k=int(cfg.get("top_k", args.top_k)),
        bundle=bundle,
    )
    result.prompts.save(args.out)
    if args.stages:
        archive.dump_json({
            stage: getattr(result, stage).words
            for stage in ("hyponyms", "after_similarity", "intermediate", "merged", "concepts", "weathers")
        }, args.stages)
    log.info("%d intermediate words, weathers %s, M=%d", len(result.intermediate),
             result.weathers.words, result.prompts.M)


def cmd_pretrain_embed(args, cfg: dict) -> None:
    from .data import generate_caption_corpus
    from .embedding import ArchConfig, ToyPretrainConfig, pretrain_toy_embedding, save_bundle

    arch = _merge(ArchConfig, ArchConfig(), cfg.get("arch", {}))
    pre = {k: v for k, v in cfg.items() if k not in ("arch", "n_images", "image_size")}
    if args.epochs is not None:
        pre["epochs"] = args.epochs
    pcfg = _merge(ToyPretrainConfig, ToyPretrainConfig(seed=args.seed), pre)
    corpus = generate_caption_corpus(int(cfg.get("n_images", args.n_images)), int(cfg.get("image_size", 64)),
                                     seed=args.seed)
    bundle = pretrain_toy_embedding(corpus, pcfg, arch)
    save_bundle(bundle, args.out)
    log.info("held-out matched-minus-mismatched cosine gap %.3f", bundle.meta.get("holdout_gap", float("nan")))


def cmd_optimize_aug(args, cfg: dict) -> None:
    from .augment import OptConfig, optimize_augmentations, save_augmentations
    from .embedding import load_bundle
    from .prompts import PromptSet, default_prompt_set

    over = dict(cfg)
    if args.iters is not None:
        over["iterations"] = args.iters
    if args.lr is not None:
        over["learning_rate"] = args.lr
    ocfg = _merge(OptConfig, OptConfig(seed=args.seed), over)
    prompts = PromptSet.load(args.prompts) if args.prompts else default_prompt_set()
    aug = optimize_augmentations(_image_list(args.images), prompts, load_bundle(args.encoder), ocfg)
    save_augmentations(aug, args.out)
    log.info("loss %.4f -> %.4f over %d iterations", aug.optimizer_log[0], aug.optimizer_log[-1], ocfg.iterations)


def cmd_train(args, cfg: dict) -> None:
    from .augment import load_augmentations
    from .data import load_domains
    from .detector import build_class_bank, save_detector
    from .embedding import load_bundle
    from .training import TOY_PROFILE, TrainConfig, train_detector

    base = TOY_PROFILE.to_json()
    det = {**base.pop("detector"), **cfg.pop("detector", {})}
    tcfg = TrainConfig.from_json({**base, **cfg, "detector": det, "seed": args.seed})
    aug = load_augmentations(args.aug) if args.aug else None
    if aug is None and tcfg.theta > 0:
        tcfg = dataclasses.replace(tcfg, theta=0.0)
        log.info("no augmentation set given; training with theta=0")
    domains = load_domains(args.data)
    source = domains.get(args.source) if args.source in domains else next(iter(domains.values()))
    bundle = load_bundle(args.encoder)
    bank = build_class_bank(source.class_names, bundle)
    model, tlog = train_detector(source, bundle, aug, bank, tcfg)
    save_detector(model, args.out, {"train_config": tcfg.to_json(), "source_domain": source.domain})
    if args.log:
        tlog.to_jsonl(args.log)
    log.info("final loss %.4f", tlog.records[-1].total)


def cmd_eval(args, cfg: dict) -> None:
    from .data import load_domains
    from .detector import load_detector
    from .evaluation import evaluate_map

    iou = float(cfg.get("iou", args.iou))
    report = evaluate_map(load_detector(args.model), load_domains(args.data), iou)
    report.save(args.out)
    if args.markdown:
        Path(args.markdown).write_text(report.to_markdown(args.name), encoding="utf-8")
    for name, value in report.maps().items():
        log.info("%s mAP@%.2f = %.4f", name, iou, value)


def cmd_project(args, cfg: dict) -> None:
    from .augment import load_augmentations
    from .data import load_domains
    from .embedding import load_bundle
    from .projection import augmented_embeddings, domain_embeddings, export_projection

    per_domain = int(cfg.get("per_domain", args.per_domain))
    if per_domain < 1:
        raise InvalidInputError("--per-domain must be >= 1")
    bundle = load_bundle(args.encoder)
    domains = load_domains(args.data)
    real = domain_embeddings(domains, bundle, per_domain)
    augmented = {}
    if args.aug:
        source = domains.get(args.source) if args.source in domains else next(iter(domains.values()))
        augmented = augmented_embeddings(source, load_augmentations(args.aug), bundle, per_domain)
    export_projection(real, augmented, args.out)


def cmd_ablate(args, cfg: dict) -> None:
    from .ablation import run_ablation
    from .augment import OptConfig
    from .data import load_domains
    from .embedding import load_bundle
    from .training import TOY_PROFILE, TrainConfig

    grid = args.preset
    if args.grid:
        grid = _read_config(args.grid)
    base = TOY_PROFILE.to_json()
    det = {**base.pop("detector"), **cfg.pop("detector", {})}
    opt = cfg.pop("opt", {})
    tcfg = TrainConfig.from_json({**base, **cfg, "detector": det})
    ocfg = _merge(OptConfig, OptConfig(seed=args.seed), opt)
    domains = load_domains(args.data)
    if args.source not in domains:
        raise ConfigError(f"source domain {args.source!r} not found under {args.data}")
    source = domains[args.source]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    report = run_ablation(grid, source, domains, load_bundle(args.encoder), seeds, tcfg, ocfg,
                          progress=lambda r: log.info("%s seed %d: %s", r["row"], r["seed"],
                                                      {k: round(v, 4) for k, v in r["mAP"].items()}))
    report.save(args.out, args.markdown)


# ---------------------------------------------------------------------------
# parser

def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0,
                        help="master random seed")
    parser.add_argument("--config", default=default, help="JSON file with command settings")
    parser.add_argument("--deterministic", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="force deterministic torch kernels on one thread")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semaug", description=__doc__)
    _common(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "render synthetic multi-domain detection datasets")
    p.add_argument("--domains", default="clear,fog,night,rain,dusk_rain")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = add("curate", cmd_curate, "build the domain prompt set from word lists")
    p.add_argument("--hyponyms")
    p.add_argument("--ranks")
    p.add_argument("--merge")
    p.add_argument("--curation")
    p.add_argument("--times")
    p.add_argument("--anchor", default="weather")
    p.add_argument("--sim-threshold", type=float, default=0.5)
    p.add_argument("--top-k", type=int, default=10000)
    p.add_argument("--encoder", help="encoder archive for the similarity stage (skipped if absent)")
    p.add_argument("--stages", help="optional JSON with the word list after every stage")
    p.add_argument("--out", required=True)

    p = add("pretrain-embed", cmd_pretrain_embed, "contrastively pretrain the toy image/text encoders")
    p.add_argument("--n-images", type=int, default=3000)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)

    p = add("optimize-aug", cmd_optimize_aug, "optimise one feature augmentation per prompt")
    p.add_argument("--images", required=True, help="dataset directory or directory of PNGs")
    p.add_argument("--prompts", help="prompt set JSON (default: shipped fixtures)")
    p.add_argument("--encoder", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a detector on the source domain")
    p.add_argument("--data", required=True)
    p.add_argument("--source", default="clear")
    p.add_argument("--encoder", required=True)
    p.add_argument("--aug")
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = add("eval", cmd_eval, "mAP of a trained detector on one or more domains")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--markdown")
    p.add_argument("--name", default="model")

    p = add("project", cmd_project, "export 2-D PCA projections of real and augmented embeddings")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--aug")
    p.add_argument("--source", default="clear")
    p.add_argument("--per-domain", type=int, default=200)
    p.add_argument("--out", required=True, help="output prefix")

    p = add("ablate", cmd_ablate, "run an ablation grid over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--source", default="clear")
    p.add_argument("--encoder", required=True)
    p.add_argument("--grid", help="grid JSON (list of rows or {'rows': [...]})")
    p.add_argument("--preset", default="strategies", help="strategies or components")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", required=True)
    p.add_argument("--markdown")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = _read_config(args.config)
        _set_determinism(args)
        args.func(args, cfg)
    except (ConfigError, InvalidInputError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
