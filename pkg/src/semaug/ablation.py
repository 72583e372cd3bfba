"""Grid runner for augmentation-strategy and component ablations.

Each grid row fixes four toggles; every row is trained once per seed on the
same source dataset and evaluated on the same per-domain test sets. The
report keeps every per-seed mAP and the per-domain median over seeds.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .augment import AugmentationSet, OptConfig, optimize_augmentations, random_augmentation_set
from .data import DetectionDataset
from .detector import build_class_bank
from .embedding import EncoderBundle, build_bundle
from .errors import ConfigError
from .evaluation import evaluate_map, markdown_table
from .prompts import OFF_CONCEPT_WORDS, PromptSet, default_prompt_set, generate_word_prompts
from .training import TOY_PROFILE, TrainConfig, train_detector

TOGGLES = {
    "init": ("pretrained", "random"),
    "classifier": ("text", "linear"),
    "pooling": ("attention", "average"),
    "aug": ("sem", "none", "random", "off_concept"),
}


@dataclass(frozen=True)
class AblationRow:
    name: str
    init: str = "pretrained"
    classifier: str = "text"
    pooling: str = "attention"
    aug: str = "sem"

    def __post_init__(self):
        for key, allowed in TOGGLES.items():
            value = getattr(self, key)
            if value not in allowed:
                raise ConfigError(f"row {self.name!r}: {key}={value!r} not in {allowed}")

    @classmethod
    def from_json(cls, d: Mapping) -> "AblationRow":
        unknown = set(d) - set(TOGGLES) - {"name"}
        if unknown:
            raise ConfigError(f"unknown toggle(s) {sorted(unknown)}; known: {sorted(TOGGLES)}")
        d = dict(d)
        name = d.pop("name", None) or "/".join(str(d.get(k, getattr(cls, k))) for k in TOGGLES)
        return cls(name=name, **d)


STRATEGY_ROWS = (
    AblationRow("no-aug", aug="none"),
    AblationRow("random", aug="random"),
    AblationRow("clip-random", aug="off_concept"),
    AblationRow("sem-aug", aug="sem"),
)

COMPONENT_ROWS = (
    AblationRow("baseline", init="random", classifier="linear", pooling="average", aug="none"),
    AblationRow("+init", init="pretrained", classifier="linear", pooling="average", aug="none"),
    AblationRow("+text-loss", init="pretrained", classifier="text", pooling="average", aug="none"),
    AblationRow("+attn-pool", init="pretrained", classifier="text", pooling="attention", aug="none"),
    AblationRow("+sem-aug", init="pretrained", classifier="text", pooling="attention", aug="sem"),
)

PRESETS = {"strategies": STRATEGY_ROWS, "components": COMPONENT_ROWS}


def parse_grid(spec) -> list[AblationRow]:
    """Rows from a preset name, a list of row dicts, or ``{"rows": [...]}``."""
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ConfigError(f"unknown preset {spec!r}; expected one of {sorted(PRESETS)}")
        return list(PRESETS[spec])
    if isinstance(spec, Mapping):
        if "preset" in spec:
            return parse_grid(spec["preset"])
        spec = spec.get("rows")
    if not isinstance(spec, Sequence) or not spec:
        raise ConfigError("grid must be a preset name or a non-empty list of rows")
    rows = [r if isinstance(r, AblationRow) else AblationRow.from_json(r) for r in spec]
    names = [r.name for r in rows]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate row names in {names}")
    return rows


@dataclass
class AblationReport:
    rows: list[dict]
    seeds: list[int]
    domains: list[str]
    meta: dict = field(default_factory=dict)

    def medians(self) -> dict[str, dict[str, float]]:
        return {r["name"]: r["median"] for r in self.rows}

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "domains": self.domains, "rows": self.rows, "meta": self.meta}

    def to_markdown(self) -> str:
        return markdown_table(self.medians())

    def save(self, json_path: str | Path, markdown_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if markdown_path is not None:
            Path(markdown_path).write_text(self.to_markdown(), encoding="utf-8")


class _AugCache:
    """Optimised augmentation sets, computed once per (pooling, prompt kind)."""

    def __init__(self, bundle: EncoderBundle, images, opt_cfg: OptConfig, prompts: PromptSet):
        self.bundle, self.images, self.opt_cfg, self.prompts = bundle, images, opt_cfg, prompts
        self._sets: dict[tuple[str, str], AugmentationSet] = {}

    def get(self, pooling: str, kind: str) -> AugmentationSet:
        key = (pooling, kind)
        if key not in self._sets:
            prompts = self.prompts if kind == "sem" else generate_word_prompts(
                OFF_CONCEPT_WORDS, source_prompt=self.prompts.source_prompt)
            self._sets[key] = optimize_augmentations(self.images, prompts, self.bundle.with_pooling(pooling),
                                                     self.opt_cfg)
        return self._sets[key]


def run_ablation(grid, train_set: DetectionDataset, eval_sets: Mapping[str, DetectionDataset],
                 bundle: EncoderBundle, seeds: Sequence[int], train_cfg: TrainConfig = TOY_PROFILE,
                 opt_cfg: OptConfig = OptConfig(), prompt_set: PromptSet | None = None,
                 random_sigma: float | None = None, random_init_offset: int = 1000,
                 progress: Callable[[dict], None] | None = None) -> AblationReport:
    """Train and evaluate every grid row for every seed.

    ``bundle`` is the pretrained encoder; random-init rows draw a fresh
    bundle seeded with ``random_init_offset + seed``. The class text bank and
    all augmentation sets always come from the pretrained encoder. Random
    augmentations match the shapes of the semantic set for the same pooling
    and default to its entry standard deviation.
    """
    rows = parse_grid(grid)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("at least one seed is required")
    if not eval_sets:
        raise ConfigError("no evaluation datasets")
    bank = build_class_bank(train_set.class_names, bundle)
    cache = _AugCache(bundle, [s.image for s in train_set.samples], opt_cfg, prompt_set or default_prompt_set())
    out_rows = []
    for row in rows:
        per_seed = {}
        for seed in seeds:
            aug_set, theta = None, 0.0
            if row.aug in ("sem", "off_concept"):
                aug_set, theta = cache.get(row.pooling, row.aug), train_cfg.theta
            elif row.aug == "random":
                aug_set = random_augmentation_set(cache.get(row.pooling, "sem"), random_sigma, seed=seed)
                theta = train_cfg.theta
            if row.init == "pretrained":
                init = bundle.with_pooling(row.pooling)
            else:
                init = build_bundle(replace(bundle.cfg, pooling=row.pooling), random_init_offset + seed)
            cfg = replace(train_cfg, seed=seed, theta=theta,
                          detector=replace(train_cfg.detector, classifier=row.classifier))
            model, _ = train_detector(train_set, init, aug_set, bank, cfg)
            maps = evaluate_map(model, dict(eval_sets)).maps()
            per_seed[str(seed)] = maps
            if progress is not None:
                progress({"row": row.name, "seed": seed, "mAP": maps})
        domains = list(eval_sets)
        median = {d: float(np.median([per_seed[str(s)][d] for s in seeds])) for d in domains}
        out_rows.append({"name": row.name, "toggles": {k: getattr(row, k) for k in TOGGLES},
                         "per_seed": per_seed, "median": median})
    meta = {"train_config": train_cfg.to_json(), "opt_config": asdict(opt_cfg),
            "n_train": len(train_set), "n_eval": {k: len(v) for k, v in eval_sets.items()}}
    return AblationReport(out_rows, seeds, list(eval_sets), meta)
