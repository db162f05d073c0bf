"""Split conformal prediction over classifier probabilities.

Calibration scores each held-out item with the nonconformity s = 1 - p(true
class) and takes the threshold q_hat as the r-th smallest score, with
r = ceil((n+1)(1-alpha)); when r exceeds n the threshold saturates at 1.0
(the finite-sample correction). A prediction set then contains every class y
with 1 - p(y) <= q_hat, ordered by descending probability. Under
exchangeability the true class lands in the set with probability >= 1-alpha.

An empty raw set (possible because the threshold can undercut even the top
probability) falls back to the argmax singleton, flagged as forced_fallback,
so every item stays classified.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import LogisticModel, predict_proba_many
from .errors import DataError


@dataclass(frozen=True)
class ConformalConfig:
    alpha: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class ConformalCalibration:
    """Sorted calibration scores and the derived set-inclusion threshold."""

    alpha: float
    scores: np.ndarray
    n: int
    q_hat: float


@dataclass
class ConformalSet:
    """Candidate classes as (class index, probability), descending by probability."""

    candidates: list[tuple[int, float]]
    forced_fallback: bool = False

    def __len__(self) -> int:
        return len(self.candidates)

    def classes(self) -> list[int]:
        return [c for c, _ in self.candidates]

    def contains(self, class_index: int) -> bool:
        return any(c == class_index for c, _ in self.candidates)


def quantile_rank(n: int, alpha: float) -> int:
    """1-based rank of the conformal quantile: ceil((n+1)(1-alpha)).

    The product is nudged down by one part in 1e12 before the ceiling so that
    IEEE representation noise (e.g. 10 * 0.9 -> 9.000000000000002) cannot
    bump an exactly-integer rank up by one.
    """
    if n < 1:
        raise ValueError("calibration size must be >= 1")
    v = (n + 1) * (1.0 - alpha)
    return math.ceil(v - v * 1e-12)


def calibration_from_scores(scores, config: ConformalConfig) -> ConformalCalibration:
    """Build a calibration from raw nonconformity scores in [0, 1]."""
    scores = np.sort(np.asarray(scores, dtype=float))
    n = len(scores)
    if n == 0:
        raise ValueError("empty calibration: need at least one score")
    # scores are 1 - probability; clip float spill just outside [0, 1]
    scores = np.clip(scores, 0.0, 1.0)
    r = quantile_rank(n, config.alpha)
    q_hat = float(scores[r - 1]) if r <= n else 1.0
    return ConformalCalibration(alpha=config.alpha, scores=scores, n=n, q_hat=q_hat)


def calibrate(model: LogisticModel, calib, config: ConformalConfig | None = None) -> ConformalCalibration:
    """Score (vector, true class) calibration pairs through the model.

    ``calib`` is a non-empty sequence of (SparseVector, class index) pairs;
    each contributes the score 1 - p(true class).
    """
    config = config or ConformalConfig()
    calib = list(calib)
    if not calib:
        raise ValueError("empty calibration set")
    vectors = [x for x, _ in calib]
    y = np.asarray([c for _, c in calib], dtype=np.int64)
    probs = predict_proba_many(model, vectors)
    if y.min() < 0 or y.max() >= probs.shape[1]:
        raise ValueError("calibration labels contain class indices outside the label space")
    scores = 1.0 - probs[np.arange(len(y)), y]
    return calibration_from_scores(scores, config)


def predict_set(calibration: ConformalCalibration, probs) -> ConformalSet:
    """Candidate classes whose nonconformity clears the calibrated threshold.

    Candidates are ordered by descending probability, ties broken by class
    index. An empty raw set yields the argmax singleton with
    forced_fallback=True.
    """
    probs = np.asarray(probs, dtype=float)
    include = (1.0 - probs) <= calibration.q_hat
    order = np.argsort(-probs, kind="stable")
    candidates = [(int(i), float(probs[i])) for i in order if include[i]]
    if not candidates:
        top = int(np.argmax(probs))
        return ConformalSet(candidates=[(top, float(probs[top]))], forced_fallback=True)
    return ConformalSet(candidates=candidates)


def save_calibration(calibration: ConformalCalibration, path) -> None:
    payload = {
        "alpha": calibration.alpha,
        "n": calibration.n,
        "scores": [float(s) for s in calibration.scores],
        "q_hat": calibration.q_hat,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_calibration(path) -> ConformalCalibration:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        cal = ConformalCalibration(
            alpha=float(payload["alpha"]),
            scores=np.asarray(payload["scores"], dtype=float),
            n=int(payload["n"]),
            q_hat=float(payload["q_hat"]),
        )
    except KeyError as exc:
        raise DataError(f"calibration file {path} is missing field {exc}") from None
    if len(cal.scores) != cal.n:
        raise DataError(f"calibration file {path}: n={cal.n} but {len(cal.scores)} scores")
    return cal
