"""Domain prompt curation: word-list ingestion, pruning, synonym merging and templating."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import InvalidInputError

DEFAULT_TEMPLATE = "an image taken on a {weather} {time}"
DEFAULT_SOURCE_PROMPT = "an image taken during the day"
OFF_CONCEPT_TEMPLATE = "an image of {word}"
OFF_CONCEPT_WORDS = ("desert", "ocean", "forest", "mountain")


@dataclass
class WordList:
    words: list[str]
    provenance: str = ""

    def __post_init__(self):
        if any(not w for w in self.words):
            raise InvalidInputError("word list contains an empty entry")
        if len(set(self.words)) != len(self.words):
            raise InvalidInputError("word list contains duplicates")

    def __iter__(self):
        return iter(self.words)

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        if isinstance(other, WordList):
            return self.words == other.words
        return self.words == list(other)


def _dedup(words) -> list[str]:
    return list(dict.fromkeys(words))


@dataclass
class MergeSpec:
    replace_map: dict[str, str] = field(default_factory=dict)
    drop_set: set[str] = field(default_factory=set)

    def __post_init__(self):
        clash = set(self.replace_map.values()) & set(self.drop_set)
        if clash:
            raise InvalidInputError(f"canonical words also dropped: {sorted(clash)}")

    @classmethod
    def from_json(cls, d: Mapping) -> "MergeSpec":
        return cls({k.lower(): v.lower() for k, v in d.get("replace", {}).items()},
                   {w.lower() for w in d.get("drop", [])})

    def to_json(self) -> dict:
        return {"replace": dict(sorted(self.replace_map.items())), "drop": sorted(self.drop_set)}


@dataclass
class PromptTarget:
    id: int
    text: str
    weather: str
    time: str


@dataclass
class PromptSet:
    source_prompt: str
    targets: list[PromptTarget]
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        ids = [t.id for t in self.targets]
        if ids != list(range(1, len(ids) + 1)):
            raise InvalidInputError(f"target ids must be 1..M in order, got {ids}")
        if any(t.text == self.source_prompt for t in self.targets):
            raise InvalidInputError("source prompt appears among the targets")

    @property
    def M(self) -> int:
        return len(self.targets)

    def to_json(self) -> dict:
        return {
            "source_prompt": self.source_prompt,
            "template": self.template,
            "M": self.M,
            "targets": [{"id": t.id, "text": t.text, "weather": t.weather, "time": t.time} for t in self.targets],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "PromptSet":
        targets = [PromptTarget(int(t["id"]), t["text"], t.get("weather", ""), t.get("time", ""))
                   for t in d["targets"]]
        ps = cls(d["source_prompt"], targets, d.get("template", DEFAULT_TEMPLATE))
        if "M" in d and int(d["M"]) != ps.M:
            raise InvalidInputError(f"M={d['M']} but {ps.M} targets")
        return ps

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PromptSet":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("semaug") / "fixtures" / name))


def load_wordlist(path: str | Path, provenance: str | None = None) -> WordList:
    """One entry per line; blank lines skipped, entries lowercased and deduplicated."""
    text = Path(path).read_text(encoding="utf-8")
    words = [line.strip().lower() for line in text.splitlines()]
    return WordList(_dedup(w for w in words if w), provenance or Path(path).name)


def load_ranks(path: str | Path) -> dict[str, int]:
    """Two whitespace/tab separated columns: word (may contain spaces if tab-separated), rank."""
    ranks = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, _, rank = line.rpartition("\t") if "\t" in line else line.rpartition(" ")
        ranks[word.strip().lower()] = int(rank)
    return ranks


def load_merge_spec(path: str | Path) -> MergeSpec:
    return MergeSpec.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def prune_by_similarity(words: WordList, anchor: str, threshold: float, bundle) -> WordList:
    """Keep words whose text embedding has cosine similarity >= ``threshold`` with ``anchor``'s."""
    if not -1.0 <= threshold <= 1.0:
        raise InvalidInputError(f"threshold {threshold} outside [-1, 1]")
    if len(words) == 0:
        return WordList([], f"{words.provenance} | sim>={threshold}")
    from .embedding import encode_texts

    emb = encode_texts([anchor] + list(words.words), bundle)
    sims = F.cosine_similarity(emb[1:], emb[:1].expand_as(emb[1:]), dim=-1)
    # the anchor compared with itself may round to just below 1
    kept = [w for w, s in zip(words.words, sims.tolist()) if w == anchor or s >= threshold]
    return WordList(kept, f"{words.provenance} | sim>={threshold}")


def prune_by_frequency(words: WordList, ranks: Mapping[str, int], top_k: int) -> WordList:
    """Keep words ranked within ``top_k``; unranked words are dropped."""
    if top_k <= 0:
        raise InvalidInputError("top_k must be > 0")
    return WordList([w for w in words if w in ranks and ranks[w] <= top_k], f"{words.provenance} | top{top_k}")


def merge_synonyms(words: WordList, spec: MergeSpec) -> WordList:
    mapped = (spec.replace_map.get(w, w) for w in words)
    return WordList(_dedup(w for w in mapped if w not in spec.drop_set), f"{words.provenance} | merged")


def apply_manual_curation(words: WordList, curation: Mapping) -> WordList:
    """Editorial step recorded as data: ``drop`` words, append ``add`` words,
    then order by ``order`` (unlisted words keep their relative order at the end)."""
    drop = {w.lower() for w in curation.get("drop", [])}
    out = [w for w in words if w not in drop]
    out.extend(w.lower() for w in curation.get("add", []) if w.lower() not in out)
    order = [w.lower() for w in curation.get("order", [])]
    rank = {w: i for i, w in enumerate(order)}
    out.sort(key=lambda w: rank.get(w, len(order)))
    return WordList(_dedup(out), f"{words.provenance} | curated")


def _placeholders(template: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name is not None]


def generate_prompts(weathers: Sequence[str] | WordList, times: Sequence[str] | WordList,
                     template: str = DEFAULT_TEMPLATE, source_prompt: str = DEFAULT_SOURCE_PROMPT) -> PromptSet:
    """Cartesian product of weather and time words, weather-major."""
    try:
        names = _placeholders(template)
    except ValueError as exc:
        raise InvalidInputError(f"malformed template {template!r}: {exc}") from exc
    if sorted(names) != ["time", "weather"]:
        raise InvalidInputError(f"template must contain {{weather}} and {{time}} exactly once, got {names}")
    targets = []
    for w in weathers:
        for t in times:
            targets.append(PromptTarget(len(targets) + 1, template.format(weather=w, time=t), w, t))
    return PromptSet(source_prompt, targets, template)


def generate_word_prompts(words: Sequence[str], template: str = OFF_CONCEPT_TEMPLATE,
                          source_prompt: str = DEFAULT_SOURCE_PROMPT) -> PromptSet:
    """Single-placeholder prompts such as ``an image of {word}``."""
    targets = [PromptTarget(i + 1, template.format(word=w), w, "") for i, w in enumerate(words)]
    return PromptSet(source_prompt, targets, template)


@dataclass
class CurationResult:
    hyponyms: WordList
    after_similarity: WordList
    intermediate: WordList
    merged: WordList
    concepts: WordList
    weathers: WordList
    prompts: PromptSet


def curate(hyponyms: WordList, ranks: Mapping[str, int], merge: MergeSpec, curation: Mapping,
           times: Sequence[str], *, anchor: str = "weather", sim_threshold: float = 0.5, top_k: int = 10000,
           bundle=None, source_concept: str = "sunshine", template: str = DEFAULT_TEMPLATE,
           source_prompt: str = DEFAULT_SOURCE_PROMPT) -> CurationResult:
    """Full pipeline from a hyponym list to a PromptSet.

    The similarity stage needs a text encoder; with ``bundle=None`` it is a
    pass-through.
    """
    if bundle is not None:
        after_sim = prune_by_similarity(hyponyms, anchor, sim_threshold, bundle)
    else:
        after_sim = WordList(list(hyponyms.words), f"{hyponyms.provenance} | sim skipped")
    inter = prune_by_frequency(after_sim, ranks, top_k)
    merged = merge_synonyms(inter, merge)
    concepts = apply_manual_curation(merged, curation)
    weathers = WordList([w for w in concepts if w != source_concept], f"{concepts.provenance} | -{source_concept}")
    prompts = generate_prompts(weathers, times, template, source_prompt)
    return CurationResult(hyponyms, after_sim, inter, merged, concepts, weathers, prompts)


def default_prompt_set() -> PromptSet:
    """The 15 weather x time prompts produced by the shipped fixtures."""
    return curate_fixtures().prompts


def curate_fixtures(bundle=None) -> CurationResult:
    return curate(
        load_wordlist(fixture_path("weather_hyponyms.txt")),
        load_ranks(fixture_path("frequency_ranks.tsv")),
        load_merge_spec(fixture_path("merge_spec.json")),
        json.loads(fixture_path("manual_curation.json").read_text(encoding="utf-8")),
        load_wordlist(fixture_path("times_of_day.txt")).words,
        bundle=bundle,
    )


def cosine_similarity(a, b) -> float:
    return float(F.cosine_similarity(torch.as_tensor(a).reshape(1, -1), torch.as_tensor(b).reshape(1, -1))[0])
