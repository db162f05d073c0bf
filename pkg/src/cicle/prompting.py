"""Prompt assembly and size accounting.

A prompt is intro, then the shots class-major in ShotSet order, then the
query, then the output instruction, joined by blank lines. The ShotSet's
class order must already reflect the mode: label order for plain few-shot,
descending base probability for the conformal pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .corpus import LabeledText
from .errors import DataError
from .selection import ShotSet

MODES = ("fewshot", "cicle")

_PLACEHOLDERS = {
    "task_intro": ("{task}",),
    "example_format": ("{text}", "{label}"),
    "query_format": ("{text}",),
    "instruction": (),
}


@dataclass(frozen=True)
class PromptTemplate:
    task_intro: str
    example_format: str
    query_format: str
    instruction: str

    def __post_init__(self):
        for name, placeholders in _PLACEHOLDERS.items():
            segment = getattr(self, name)
            for ph in placeholders:
                if segment.count(ph) != 1:
                    raise DataError(f"template segment {name!r} must contain {ph} exactly once")


DEFAULT_TEMPLATE = PromptTemplate(
    task_intro="Classify each text into the correct label for this task: {task}.",
    example_format="Text: {text}\nLabel: {label}",
    query_format="Text: {text}\nLabel:",
    instruction="Answer with only the label.",
)


def template_from_file(path) -> PromptTemplate:
    """Load the four template segments from a JSON file."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read template {path}: {exc}") from None
    missing = [k for k in _PLACEHOLDERS if k not in payload]
    if missing:
        raise DataError(f"template {path} is missing fields: {', '.join(missing)}")
    return PromptTemplate(**{k: str(payload[k]) for k in _PLACEHOLDERS})


@dataclass(frozen=True)
class PromptStats:
    token_count: int
    shot_count: int
    candidate_count: int


class SubwordVocab:
    """Token counting from a user-supplied vocabulary, longest-match greedy.

    At each position the longest vocabulary entry matching the remaining text
    is consumed; a character matched by no entry counts as one token.
    """

    def __init__(self, tokens):
        self.tokens = set(tokens)
        if not self.tokens:
            raise DataError("subword vocabulary is empty")
        self._max_len = max(len(t) for t in self.tokens)

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from None
        tokens = [line.strip() for line in lines if line.strip()]
        if not tokens:
            raise DataError(f"vocabulary file {path} contains no tokens")
        return cls(tokens)

    def count(self, text: str) -> int:
        n, pos, total = len(text), 0, 0
        while pos < n:
            step = 1
            for length in range(min(self._max_len, n - pos), 0, -1):
                if text[pos:pos + length] in self.tokens:
                    step = length
                    break
            total += 1
            pos += step
        return total


def count_tokens(prompt: str, tokenizer: Callable[[str], int] | SubwordVocab | None = None) -> int:
    """Token count under the configured rule; default is whitespace runs."""
    if tokenizer is None:
        return len(prompt.split())
    if isinstance(tokenizer, SubwordVocab):
        return tokenizer.count(prompt)
    return tokenizer(prompt)


def build_prompt(template: PromptTemplate, shots: ShotSet, query: LabeledText, mode: str,
                 task: str = "text classification",
                 tokenizer: Callable[[str], int] | SubwordVocab | None = None,
                 ) -> tuple[str, PromptStats]:
    """Assemble the classification prompt and its size statistics.

    In fewshot mode an empty ShotSet is an error; in cicle mode the conformal
    set guarantees at least one candidate class (its pool may still be empty,
    which only reduces the shot count).
    """
    if mode not in MODES:
        raise ValueError(f"unknown prompt mode {mode!r}; expected one of {MODES}")
    shot_count = shots.shot_count()
    if mode == "fewshot" and shot_count == 0:
        raise ValueError("few-shot prompt requires at least one example")
    parts = [template.task_intro.replace("{task}", task)]
    for cls, items in shots.per_class:
        for item in items:
            parts.append(template.example_format
                         .replace("{text}", item.text)
                         .replace("{label}", item.label))
    parts.append(template.query_format.replace("{text}", query.text))
    parts.append(template.instruction)
    prompt = "\n\n".join(parts)
    stats = PromptStats(
        token_count=count_tokens(prompt, tokenizer),
        shot_count=shot_count,
        candidate_count=len(shots.per_class),
    )
    return prompt, stats
