"""Corpus persistence: manifest.json plus one feature file per matrix.

Layout under the corpus root:

    manifest.json
    videos/<id>.frames.bin      frame features, (T, D_v) float32
    videos/<id>.narr.bin        narration features, (N, D_n) float32
    articles/<task_id>.steps.bin

The manifest pins every shape, so a feature file that was truncated or
swapped on disk fails loudly at read time instead of training on garbage.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import tensorio
from .records import Article, Corpus, CorpusError, Segment, VideoRecord

MANIFEST_VERSION = 1


def _span_list(spans: tuple[Segment, ...]) -> list[list[int]]:
    return [[s.start, s.end] for s in spans]


def write_corpus(corpus: Corpus, root: str | Path) -> Path:
    """Serialize corpus under root; returns the manifest path."""
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    (root / "articles").mkdir(parents=True, exist_ok=True)

    video_entries = []
    for v in corpus.videos:
        frames_ref = f"videos/{v.id}.frames.bin"
        narr_ref = f"videos/{v.id}.narr.bin"
        tensorio.write_matrix(root / frames_ref, v.frame_features)
        tensorio.write_matrix(root / narr_ref, v.narration_features)
        gt = None
        if v.gt_step_segments is not None:
            gt = {str(s): _span_list(segs) for s, segs in sorted(v.gt_step_segments.items())}
        video_entries.append({
            "id": v.id,
            "frames": v.num_frames,
            "task_id": v.task_id,
            "frame_features": frames_ref,
            "narration_features": narr_ref,
            "narration_texts": list(v.narration_texts),
            "narration_spans": _span_list(v.narration_spans),
            "gt_segments": gt,
            "gt_narration_steps": (None if v.gt_narration_steps is None
                                   else list(v.gt_narration_steps)),
        })

    article_entries = []
    for task_id in sorted(corpus.articles):
        a = corpus.articles[task_id]
        ref = f"articles/{task_id}.steps.bin"
        tensorio.write_matrix(root / ref, a.step_features)
        article_entries.append({
            "task_id": a.task_id,
            "title": a.title,
            "steps": list(a.step_texts),
            "step_features": ref,
        })

    manifest = {
        "format_version": MANIFEST_VERSION,
        "dims": list(corpus.dims),
        "videos": video_entries,
        "articles": article_entries,
    }
    path = root / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return path


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise CorpusError(f"{where}: missing required key '{key}'")
    return entry[key]


def read_corpus(root: str | Path) -> Corpus:
    """Load a corpus written by write_corpus, verifying shapes against the manifest."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise CorpusError(f"no manifest.json under {root}")
    with open(path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}: not valid JSON ({e})") from e

    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise CorpusError(f"{path}: unsupported format_version {version!r}")
    dims = tuple(int(d) for d in _require(manifest, "dims", str(path)))
    if len(dims) != 3:
        raise CorpusError(f"{path}: dims must have three entries, got {dims}")
    d_v, d_n, d_s = dims

    articles: dict[str, Article] = {}
    for entry in _require(manifest, "articles", str(path)):
        task_id = _require(entry, "task_id", f"{path} article")
        where = f"{path} article {task_id}"
        steps = list(_require(entry, "steps", where))
        feats = tensorio.read_matrix(root / _require(entry, "step_features", where),
                                     expect_shape=(len(steps), d_s))
        articles[task_id] = Article(task_id, _require(entry, "title", where),
                                    tuple(steps), feats)

    videos = []
    for entry in _require(manifest, "videos", str(path)):
        vid = _require(entry, "id", f"{path} video")
        where = f"{path} video {vid}"
        t = int(_require(entry, "frames", where))
        spans = tuple(Segment(int(s), int(e))
                      for s, e in _require(entry, "narration_spans", where))
        texts = tuple(_require(entry, "narration_texts", where))
        frames = tensorio.read_matrix(root / _require(entry, "frame_features", where),
                                      expect_shape=(t, d_v))
        narr = tensorio.read_matrix(root / _require(entry, "narration_features", where),
                                    expect_shape=(len(spans), d_n))
        gt_raw = entry.get("gt_segments")
        gt = None
        if gt_raw is not None:
            gt = {int(s): tuple(Segment(int(a), int(b)) for a, b in segs)
                  for s, segs in gt_raw.items()}
        gt_narr = entry.get("gt_narration_steps")
        if gt_narr is not None:
            gt_narr = tuple(None if s is None else int(s) for s in gt_narr)
        task_id = entry.get("task_id")
        if task_id is not None and task_id not in articles:
            raise CorpusError(f"{where}: references unknown task_id {task_id!r}")
        videos.append(VideoRecord(
            id=vid, frame_features=frames, narration_texts=texts,
            narration_features=narr, narration_spans=spans, task_id=task_id,
            gt_step_segments=gt, gt_narration_steps=gt_narr))

    return Corpus(tuple(videos), articles, (d_v, d_n, d_s))
