"""Teacher-generated step segments and the refresh curriculum around them.

A frozen teacher scores each article step against every frame; the best frame
seeds a segment that grows outward while scores stay above a fraction zeta of
the peak. Low-peak rows are dropped entirely (gamma filter): a wrong label
hurts more than a missing one, and most videos simply do not show every step.

Training alternates: a few burn-in epochs on labels from an initial
narration-trained teacher, then the student replaces the teacher every
refresh_every epochs and relabels with its own step-to-video scores.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .corpus.records import Segment
from .encoder import AlignmentSet


class PseudoError(ValueError):
    pass


class TeacherAction(enum.Enum):
    USE_INITIAL = "use_initial"
    REFRESH = "refresh"
    REUSE = "reuse"


@dataclass(frozen=True)
class PseudoConfig:
    zeta: float = 0.7            # expansion keeps frames >= zeta * peak
    gamma: float = 0.65          # rows with peak below this are discarded
    source: str = "direct_sv"    # which matrix labels come from
    burn_in_epochs: int = 3
    refresh_every: int = 3

    def validate(self) -> None:
        if not (0.0 < self.zeta <= 1.0):
            raise PseudoError(f"zeta must be in (0, 1], got {self.zeta}")
        if self.source not in ("direct_sv", "fused"):
            raise PseudoError(f"unknown pseudo-label source {self.source!r}")
        if self.burn_in_epochs < 0 or self.refresh_every < 1:
            raise PseudoError("need burn_in_epochs >= 0 and refresh_every >= 1")


@dataclass(frozen=True)
class PseudoLabel:
    video_id: str
    step: int
    kept: bool
    segment: Optional[Segment]
    peak: float

    def __post_init__(self):
        # discarded rows carry no segment at all; a tempting "segment anyway,
        # just flagged" representation invites accidental training on it
        if self.kept == (self.segment is None):
            raise PseudoError(
                f"({self.video_id}, {self.step}): kept={self.kept} "
                f"inconsistent with segment={self.segment}")


def extract_segment(scores: np.ndarray, zeta: float) -> tuple[int, Segment]:
    """Locate the peak frame and expand while scores stay >= zeta * peak.

    Ties on the peak go to the lowest index; expansion is contiguous and
    inclusive (>=) on both sides. A negative peak yields the single-frame
    segment [p, p]: the threshold sits above every other score by definition
    of the maximum.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise PseudoError(f"scores must be a non-empty vector, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise PseudoError("scores contain non-finite values")
    p = int(np.argmax(scores))
    threshold = zeta * scores[p]
    lo = p
    while lo > 0 and scores[lo - 1] >= threshold:
        lo -= 1
    hi = p
    while hi < scores.size - 1 and scores[hi + 1] >= threshold:
        hi += 1
    return p, Segment(lo, hi)


class PseudoLabelSet:
    """Lookup table (video_id, step) -> PseudoLabel with JSONL persistence."""

    def __init__(self, labels: Iterable[PseudoLabel] = (),
                 meta: Optional[dict] = None):
        self._by_key: dict[tuple[str, int], PseudoLabel] = {}
        for label in labels:
            self.add(label)
        self.meta = dict(meta or {})

    def add(self, label: PseudoLabel) -> None:
        key = (label.video_id, label.step)
        if key in self._by_key:
            raise PseudoError(f"duplicate pseudo-label for {key}")
        self._by_key[key] = label

    def get(self, key: tuple[str, int]) -> Optional[PseudoLabel]:
        return self._by_key.get(key)

    def __len__(self) -> int:
        return len(self._by_key)

    def __iter__(self) -> Iterator[PseudoLabel]:
        return iter(self._by_key.values())

    def coverage(self) -> float:
        if not self._by_key:
            return 0.0
        return sum(1 for l in self if l.kept) / len(self)

    def save_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(json.dumps({"meta": self.meta}) + "\n")
            for key in sorted(self._by_key):
                l = self._by_key[key]
                f.write(json.dumps({
                    "video_id": l.video_id, "step": l.step, "kept": l.kept,
                    "start": l.segment.start if l.kept else None,
                    "end": l.segment.end if l.kept else None,
                    "peak": l.peak}) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "PseudoLabelSet":
        path = Path(path)
        out = cls()
        with open(path) as f:
            first = f.readline()
            if not first:
                raise PseudoError(f"{path}: empty pseudo-label file")
            header = json.loads(first)
            if "meta" not in header:
                raise PseudoError(f"{path}: first line must carry the meta object")
            out.meta = header["meta"]
            for line_no, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    kept = bool(row["kept"])
                    seg = (Segment(int(row["start"]), int(row["end"]))
                           if kept else None)
                    out.add(PseudoLabel(
                        video_id=row["video_id"], step=int(row["step"]),
                        kept=kept, segment=seg, peak=float(row["peak"])))
                except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                    raise PseudoError(f"{path}:{line_no}: bad record ({e})") from e
        return out


def _source_matrix(alignment: AlignmentSet, source: str) -> np.ndarray:
    if source == "direct_sv":
        return alignment.a_sv
    if source == "fused":
        return alignment.a_fused
    raise PseudoError(f"unknown pseudo-label source {source!r}")


def generate_pseudolabels(alignments: Iterable[AlignmentSet],
                          config: PseudoConfig,
                          meta: Optional[dict] = None) -> PseudoLabelSet:
    """Label every step row of every alignment set.

    A row is kept only when its peak clears gamma and is strictly positive;
    a non-positive peak means the teacher found nothing resembling the step,
    and no threshold setting should turn that into supervision.
    """
    config.validate()
    out = PseudoLabelSet(meta=meta)
    for alignment in alignments:
        matrix = _source_matrix(alignment, config.source)
        for s in range(matrix.shape[0]):
            peak_idx, segment = extract_segment(matrix[s], config.zeta)
            peak = float(matrix[s, peak_idx])
            kept = bool(peak > 0.0 and peak >= config.gamma)
            out.add(PseudoLabel(video_id=alignment.video_id, step=s, kept=kept,
                                segment=segment if kept else None, peak=peak))
    return out


def teacher_action(epoch: int, config: PseudoConfig) -> TeacherAction:
    """What the curriculum does with the teacher at the start of this epoch."""
    if epoch < config.burn_in_epochs:
        return TeacherAction.USE_INITIAL
    if (epoch - config.burn_in_epochs) % config.refresh_every == 0:
        return TeacherAction.REFRESH
    return TeacherAction.REUSE
