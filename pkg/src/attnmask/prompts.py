"""Prompt construction: templates, sub-class expansion, caption retrieval.

Prompt diversity is what keeps the synthetic data distribution wide, so a
class can draw its prompts either from handcrafted templates crossed with
a sub-class list, or from a file-backed caption bank scored offline for
similarity to the class. When retrieval is enabled the retrieved captions
replace the templates outright.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

CLASS_SLOT = "[class]"
SUBCLASS_SLOT = "[sub-class]"

PROVENANCE_TEMPLATE = "template"
PROVENANCE_RETRIEVED = "retrieved"

DEFAULT_TEMPLATES = (
    "a photo of a [sub-class] [class]",
    "a [sub-class] [class] in the wild",
)


@dataclass(frozen=True)
class PromptTemplate:
    """A pattern with [class] / [sub-class] slots plus an optional scene suffix."""

    pattern: str
    context: str | None = None

    def __post_init__(self):
        if CLASS_SLOT not in self.pattern and SUBCLASS_SLOT not in self.pattern:
            raise ValidationError(
                f"template {self.pattern!r} has neither {CLASS_SLOT} nor {SUBCLASS_SLOT}"
            )

    def render(self, class_name: str, subclass: str) -> str:
        text = self.pattern.replace(SUBCLASS_SLOT, subclass).replace(CLASS_SLOT, class_name)
        if self.context:
            text = f"{text} {self.context}"
        return " ".join(text.split())


@dataclass(frozen=True)
class Prompt:
    text: str
    class_id: int
    provenance: str

    def __post_init__(self):
        if not self.text:
            raise ValidationError("prompt text is empty")
        if self.provenance not in (PROVENANCE_TEMPLATE, PROVENANCE_RETRIEVED):
            raise ValidationError(f"unknown prompt provenance {self.provenance!r}")


def expand_templates(
    class_name: str,
    class_id: int,
    subclasses: Sequence[str],
    templates: Iterable[PromptTemplate],
) -> list[Prompt]:
    """Cross every template with every sub-class; order follows the inputs."""
    if not class_name:
        raise ValidationError("class name is empty")
    subs = [s for s in subclasses]
    if not subs:
        raise ValidationError(f"class {class_name!r} has an empty sub-class list")
    if any(not s for s in subs):
        raise ValidationError("sub-class names must be non-empty")
    prompts = []
    for template in templates:
        for sub in subs:
            prompts.append(
                Prompt(template.render(class_name, sub), class_id, PROVENANCE_TEMPLATE)
            )
    return prompts


def load_subclass_list(path: str | Path) -> list[str]:
    """Plain text, one sub-class name per line; blank lines are skipped."""
    path = Path(path)
    names = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if not names:
        raise ValidationError(f"{path}: sub-class list is empty")
    return names


class CaptionBank:
    """Offline caption store: JSON-lines of {class, caption, score}.

    Scores are precomputed similarities between the caption and the class
    it is filed under; retrieval just ranks by score, so no embedding
    model is needed at run time.
    """

    def __init__(self, by_class: dict[str, list[tuple[float, str]]]):
        self._by_class = by_class

    @classmethod
    def load(cls, path: str | Path) -> "CaptionBank":
        path = Path(path)
        by_class: dict[str, list[tuple[float, str]]] = {}
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    cls_name = str(row["class"])
                    caption = str(row["caption"])
                    score = float(row["score"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValidationError(f"{path}:{lineno}: malformed caption row ({exc})") from exc
                if not caption:
                    raise ValidationError(f"{path}:{lineno}: empty caption")
                by_class.setdefault(cls_name, []).append((score, caption))
        if not by_class:
            raise ValidationError(f"{path}: caption bank is empty")
        return cls(by_class)

    def classes(self) -> list[str]:
        return sorted(self._by_class)

    def __contains__(self, class_name: str) -> bool:
        return class_name in self._by_class


def retrieve_captions(class_name: str, bank: CaptionBank, n: int) -> list[str]:
    """Top-n captions for a class, ranked by score descending.

    Score ties break on caption text ascending so the ranking is a total
    order. n = 0 returns an empty list; asking for more captions than the
    bank holds returns them all, without padding.
    """
    if n < 0:
        raise ValidationError(f"caption count must be non-negative, got {n}")
    if class_name not in bank:
        raise ValidationError(f"caption bank has no class {class_name!r}")
    if n == 0:
        return []
    ranked = sorted(bank._by_class[class_name], key=lambda sc: (-sc[0], sc[1]))
    return [caption for _, caption in ranked[:n]]


def retrieval_pool(
    class_name: str,
    class_id: int,
    bank: CaptionBank,
    k_templates: int,
    n_per_template: int,
) -> list[Prompt]:
    """Retrieved prompt pool replacing k templates: at most k * n captions."""
    if k_templates < 1 or n_per_template < 1:
        raise ValidationError("template and caption counts must be positive")
    captions = retrieve_captions(class_name, bank, k_templates * n_per_template)
    return [Prompt(c, class_id, PROVENANCE_RETRIEVED) for c in captions]


def sample_prompt(pool: Sequence[Prompt], seed: int) -> Prompt:
    """Uniform seeded draw from a non-empty pool."""
    if not pool:
        raise ValidationError("prompt pool is empty")
    rng = np.random.default_rng(seed)
    return pool[int(rng.integers(0, len(pool)))]
