"""Landmark-based scoring: TRE, diagonal-relative TRE, medians, robustness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LandmarkSet


@dataclass(frozen=True)
class PairScore:
    tres: tuple[float, ...]
    rtres: tuple[float, ...]
    median_rtre: float
    robustness: float
    w: int
    h: int


@dataclass(frozen=True)
class Summary:
    n_pairs: int
    avg_median_rtre: float
    avg_robustness: float

    def line(self) -> str:
        return (f"pairs={self.n_pairs} avg_median_rtre={self.avg_median_rtre:.9f} "
                f"avg_robustness={self.avg_robustness:.6f}")


def tre(target: LandmarkSet, warped: LandmarkSet) -> list[float]:
    if len(target) != len(warped):
        raise ValueError(f"landmark count mismatch: {len(target)} vs {len(warped)}")
    d = target.points - warped.points
    return np.hypot(d[:, 0], d[:, 1]).tolist()


def rtre(tres, w: float, h: float) -> list[float]:
    if w < 1 or h < 1:
        raise ValueError("image width and height must be >= 1")
    diag = np.sqrt(float(w) ** 2 + float(h) ** 2)
    return (np.asarray(tres, dtype=np.float64) / diag).tolist()


def score_pair(target: LandmarkSet, warped_before: LandmarkSet, warped_after: LandmarkSet,
               w: int, h: int) -> PairScore:
    """Median rTRE after registration; robustness is the share of landmarks that got strictly closer."""
    if not (len(target) == len(warped_before) == len(warped_after)):
        raise ValueError("landmark sets differ in length")
    if len(target) == 0:
        raise ValueError("cannot score an empty landmark set")
    before = tre(target, warped_before)
    after = tre(target, warped_after)
    rel = rtre(after, w, h)
    improved = np.asarray(after) < np.asarray(before)
    return PairScore(tuple(after), tuple(rel), float(np.median(rel)),
                     float(improved.mean()), int(w), int(h))


def aggregate(scores) -> Summary:
    scores = list(scores)
    if not scores:
        raise ValueError("no pair scores to aggregate")
    return Summary(len(scores),
                   float(np.mean([s.median_rtre for s in scores])),
                   float(np.mean([s.robustness for s in scores])))
