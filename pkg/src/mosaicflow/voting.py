"""Random voting: replace the pseudo-target when enough checkpoint candidates beat it."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .degradation import Observation, apply_mosaic, apply_spectral


def eval_consistency(x: np.ndarray, obs: Observation, weights: np.ndarray) -> float:
    """E(X) = ||P - A_P(X)||^2 + ||m - A_m(X)||^2."""
    spe = obs.pan - apply_spectral(x, weights)
    spa = obs.mosaic - apply_mosaic(x, obs.pattern)
    return float(np.vdot(spe, spe) + np.vdot(spa, spa))


@dataclass(frozen=True)
class VoteState:
    target: np.ndarray
    score: float
    window: int = 10
    k: int = 4
    threshold: float = 0.75
    registry: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if not 1 <= self.k <= self.window:
            raise ValueError(f"need 1 <= k <= window, got k={self.k}, window={self.window}")


@dataclass(frozen=True)
class VoteRecord:
    epoch: int
    candidate_scores: list[float]
    incumbent_score: float
    win_rate: float
    updated: bool
    winner: int | None = None
    checkpoints: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "candidate_scores": list(self.candidate_scores),
                "incumbent_score": self.incumbent_score, "win_rate": self.win_rate,
                "updated": self.updated, "winner": self.winner,
                "checkpoints": list(self.checkpoints)}


def decide(incumbent: float, scores: Sequence[float], threshold: float) -> tuple[float, int | None]:
    """Win rate of ``scores`` against ``incumbent`` and the argmin index if it passes."""
    if len(scores) == 0:
        raise ValueError("vote needs at least one candidate")
    wins = sum(1 for s in scores if s < incumbent)
    rate = wins / len(scores)
    if rate >= threshold:
        return rate, int(np.argmin(scores))
    return rate, None


def vote(state: VoteState, candidates: Sequence[np.ndarray],
         evaluate: Callable[[np.ndarray], float], epoch: int = 0,
         checkpoints: Sequence[int] = ()) -> tuple[VoteState, VoteRecord]:
    """Score candidates and the incumbent with ``evaluate`` and apply the update rule."""
    if len(candidates) == 0:
        raise ValueError("vote needs at least one candidate")
    incumbent = evaluate(state.target)
    scores = [evaluate(c) for c in candidates]
    rate, winner = decide(incumbent, scores, state.threshold)
    if winner is None:
        new = replace(state, score=incumbent)
    else:
        new = replace(state, target=np.array(candidates[winner]), score=scores[winner])
    record = VoteRecord(epoch, scores, incumbent, rate, winner is not None, winner, list(checkpoints))
    return new, record


def select_checkpoints(epochs: Sequence[int], k: int, rng: np.random.Generator,
                       mode: str = "random") -> list[int]:
    """Pick ``k`` checkpoint epochs from the window: uniformly without replacement or the last k."""
    epochs = sorted(epochs)
    if k > len(epochs):
        raise ValueError(f"cannot pick {k} checkpoints from {len(epochs)}")
    if mode == "fixed":
        return epochs[-k:]
    if mode != "random":
        raise ValueError(f"unknown selection mode {mode!r}")
    idx = rng.choice(len(epochs), size=k, replace=False)
    return sorted(epochs[i] for i in idx)
