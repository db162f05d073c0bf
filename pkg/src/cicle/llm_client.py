"""Completion dispatch: chat-completions HTTP endpoint or deterministic mock oracles.

The endpoint field of LlmConfig selects the route: anything containing
"://" is treated as a chat-completions-compatible URL; anything else must
name a registered oracle. Oracles are deterministic functions of the prompt
and its metadata, which makes whole runs reproducible without a network.

Retries happen only on transport failures and 5xx responses, with
exponential backoff; a well-formed response is never retried.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import requests

from .corpus import LabelSpace
from .errors import TransportError

log = logging.getLogger(__name__)

API_KEY_ENV = "CICLE_API_KEY"


@dataclass
class LlmConfig:
    endpoint: str
    model_id: str = "default"
    max_new_tokens: int = 5
    deterministic: bool = True
    timeout: float = 60.0
    max_retries: int = 2
    concurrency_limit: int = 4
    backoff: float = 0.5
    oracle_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.deterministic:
            raise ValueError("deterministic decoding is required; set deterministic=True")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.concurrency_limit < 1:
            raise ValueError(f"concurrency_limit must be >= 1, got {self.concurrency_limit}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")

    @property
    def is_remote(self) -> bool:
        return "://" in self.endpoint


@dataclass(frozen=True)
class PromptMeta:
    """Per-item metadata consumed by mock oracles; never sent over the wire."""

    classes: tuple[str, ...] = ()
    gold_label: str | None = None
    last_shot_label: str | None = None
    item_id: str | None = None


@dataclass
class LlmResponse:
    raw: str
    latency: float
    attempts: int


OracleFn = Callable[[str, PromptMeta | None, dict], str]


def _oracle_perfect(prompt: str, meta: PromptMeta | None, params: dict) -> str:
    """Gold label whenever it is among the prompt's candidate classes, else the first class."""
    if meta is None or not meta.classes:
        return ""
    if meta.gold_label is not None and meta.gold_label in meta.classes:
        return meta.gold_label
    return meta.classes[0]


def _oracle_majority(prompt: str, meta: PromptMeta | None, params: dict) -> str:
    """Always the first listed class."""
    if meta is None or not meta.classes:
        return ""
    return meta.classes[0]


def _oracle_noisy(prompt: str, meta: PromptMeta | None, params: dict) -> str:
    """Gold with a per-class accuracy, otherwise a deterministic wrong candidate.

    params: {"accuracy": {class name: rate}, "default_accuracy": rate, "seed": int}.
    The coin is seeded from the prompt text, so repeated calls agree.
    """
    if meta is None or not meta.classes:
        return ""
    gold = meta.gold_label
    acc = params.get("accuracy", {}).get(gold, params.get("default_accuracy", 0.8))
    digest = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest()
    rng = random.Random(int.from_bytes(digest, "big") ^ int(params.get("seed", 0)))
    if gold is not None and gold in meta.classes and rng.random() < acc:
        return gold
    wrong = [c for c in meta.classes if c != gold]
    return rng.choice(wrong) if wrong else meta.classes[0]


def _oracle_copy_last_shot(prompt: str, meta: PromptMeta | None, params: dict) -> str:
    """The label of the final example shown in the prompt."""
    if meta is None or meta.last_shot_label is None:
        return ""
    return meta.last_shot_label


ORACLES: dict[str, OracleFn] = {
    "perfect": _oracle_perfect,
    "majority": _oracle_majority,
    "noisy": _oracle_noisy,
    "copy-last-shot": _oracle_copy_last_shot,
}


def register_oracle(name: str, fn: OracleFn) -> None:
    ORACLES[name] = fn


class LlmClient:
    """Shareable completion client with a concurrency bound and a call counter."""

    def __init__(self, config: LlmConfig):
        self.config = config
        if not config.is_remote and config.endpoint not in ORACLES:
            raise ValueError(
                f"unknown oracle {config.endpoint!r}; known oracles: {', '.join(sorted(ORACLES))}")
        self._sem = threading.Semaphore(config.concurrency_limit)
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def call_count(self) -> int:
        return self._calls

    def complete(self, prompt: str, meta: PromptMeta | None = None) -> LlmResponse:
        with self._sem:
            with self._lock:
                self._calls += 1
            start = time.monotonic()
            if self.config.is_remote:
                raw, attempts = self._complete_remote(prompt, meta)
            else:
                raw = ORACLES[self.config.endpoint](prompt, meta, self.config.oracle_params)
                attempts = 1
            return LlmResponse(raw=raw, latency=time.monotonic() - start, attempts=attempts)

    def _complete_remote(self, prompt: str, meta: PromptMeta | None) -> tuple[str, int]:
        cfg = self.config
        payload = {
            "model": cfg.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "max_tokens": cfg.max_new_tokens,
        }
        headers = {}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        item_id = meta.item_id if meta else None
        last_failure = "no attempt made"
        for attempt in range(1, cfg.max_retries + 2):
            try:
                resp = requests.post(cfg.endpoint, json=payload, headers=headers,
                                     timeout=cfg.timeout)
            except requests.RequestException as exc:
                last_failure = f"transport failure: {exc}"
            else:
                if resp.status_code >= 500:
                    last_failure = f"server error {resp.status_code}"
                elif resp.status_code != 200:
                    raise TransportError(
                        f"completion endpoint returned {resp.status_code} (item {item_id})",
                        item_id=item_id, attempts=attempt)
                else:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError):
                        raise TransportError(
                            f"malformed completion response (item {item_id})",
                            item_id=item_id, attempts=attempt) from None
                    return str(content), attempt
            if attempt <= cfg.max_retries:
                delay = cfg.backoff * (2 ** (attempt - 1))
                log.warning("completion attempt %d/%d failed (%s); retrying in %.2fs",
                            attempt, cfg.max_retries + 1, last_failure, delay)
                time.sleep(delay)
        raise TransportError(
            f"completion failed after {cfg.max_retries + 1} attempts ({last_failure}) "
            f"(item {item_id})", item_id=item_id, attempts=cfg.max_retries + 1)


def complete(config: LlmConfig, prompt: str, meta: PromptMeta | None = None) -> LlmResponse:
    """One-shot completion; long runs should share an LlmClient instead."""
    return LlmClient(config).complete(prompt, meta)


def parse_label(raw: str, labels: LabelSpace) -> int | None:
    """Trimmed, case-insensitive exact match against the label names.

    Returns the class index, or None (Invalid) for anything else; Invalid is
    a value scored as wrong downstream, never an error.
    """
    norm = raw.strip().casefold()
    for i, name in enumerate(labels.labels):
        if name.casefold() == norm:
            return i
    return None
