"""Crown-stem co-registration: score candidate pairs from height
agreement and lean angle, then solve the one-to-one assignment that
maximizes total score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ingest import CrownCloud, FieldStem

SCORE_TIERS = (
    (0.10, 5.0, 100),
    (0.20, 10.0, 70),
    (0.30, 15.0, 40),
)


@dataclass
class LabeledCrown:
    crown: CrownCloud
    label: str  # "conifer" | "deciduous"
    crown_class: str
    matched_stem_id: str
    score: int


@dataclass
class Registration:
    """One row of the registration table."""

    crown_id: str
    stem_id: str
    score: int
    label: str
    crown_class: str


def pair_score(crown: CrownCloud, stem: FieldStem) -> int:
    """Score a (crown, stem) candidate pair.

    Height agreement is the relative height difference; lean is the angle
    at the apex between vertical and the line down to the stem position.
    All tier thresholds are strict.
    """
    if crown.tree_height <= 0:
        raise ValueError(f"crown {crown.crown_id} has non-positive height")
    if stem.height <= 0:
        raise ValueError(f"stem {stem.stem_id} has non-positive height")
    hdiff = abs(crown.tree_height - stem.height) / stem.height
    horizontal = math.hypot(crown.apex.x - stem.x, crown.apex.y - stem.y)
    lean = math.degrees(math.atan2(horizontal, crown.tree_height))
    for hdiff_limit, lean_limit, score in SCORE_TIERS:
        if hdiff < hdiff_limit and lean < lean_limit:
            return score
    return 0


def max_score_assignment(scores: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one assignment maximizing the total score.

    Zero-score cells are never part of the result. Among equal-total
    assignments a secondary objective prefers pairs early in row-major
    order, keeping the output deterministic.
    """
    scores = np.asarray(scores, dtype=np.int64)
    if scores.size == 0 or scores.max() == 0:
        return []
    n_rows, n_cols = scores.shape
    cell = np.arange(n_rows * n_cols, dtype=np.int64).reshape(n_rows, n_cols)
    bonus = n_rows * n_cols - cell
    # The primary scale exceeds any achievable bonus sum, so the bonus can
    # never trade away score.
    scale = min(n_rows, n_cols) * n_rows * n_cols + 1
    value = np.where(scores > 0, scores * scale + bonus, 0)
    rows, cols = linear_sum_assignment(value, maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if scores[i, j] > 0]


def register_crowns(
    crowns: list[CrownCloud], stems: list[FieldStem]
) -> list[LabeledCrown]:
    """Match crowns to live field stems, one-to-one, maximizing total
    pair score. Unmatched crowns and stems are dropped."""
    crowns = sorted(crowns, key=lambda c: c.crown_id)
    stems = sorted(stems, key=lambda s: s.stem_id)
    if not crowns or not stems:
        return []
    scores = np.zeros((len(crowns), len(stems)), dtype=np.int64)
    for i, crown in enumerate(crowns):
        for j, stem in enumerate(stems):
            scores[i, j] = pair_score(crown, stem)
    labeled = []
    for i, j in max_score_assignment(scores):
        labeled.append(
            LabeledCrown(
                crown=crowns[i],
                label=stems[j].species_class,
                crown_class=stems[j].crown_class,
                matched_stem_id=stems[j].stem_id,
                score=int(scores[i, j]),
            )
        )
    return labeled


def write_registrations(path: "str | Path", labeled: list[LabeledCrown]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["crown_id", "stem_id", "score", "label", "crown_class"])
        for item in labeled:
            writer.writerow(
                [
                    item.crown.crown_id,
                    item.matched_stem_id,
                    item.score,
                    item.label,
                    item.crown_class,
                ]
            )


def read_registrations(path: "str | Path") -> list[Registration]:
    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            rows.append(
                Registration(
                    crown_id=row["crown_id"],
                    stem_id=row["stem_id"],
                    score=int(row["score"]),
                    label=row["label"],
                    crown_class=row["crown_class"],
                )
            )
    return rows
