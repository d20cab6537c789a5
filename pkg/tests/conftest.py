"""Shared builders for hand-sized corpora and batches."""

import numpy as np
import pytest

from stepalign.corpus import Article, Corpus, Segment, VideoRecord
from stepalign.corpus.batching import LabelSource, batch_iter


def make_video(vid, frames, spans, narr_feats=None, task_id=None, gt=None,
               gt_narr=None, d_n=3):
    frames = np.asarray(frames, dtype=np.float32)
    if narr_feats is None:
        rng = np.random.default_rng(abs(hash(vid)) % 2**32)
        narr_feats = rng.normal(size=(len(spans), d_n)).astype(np.float32)
    texts = tuple(f"{vid} narration {i}" for i in range(len(spans)))
    return VideoRecord(id=vid, frame_features=frames, narration_texts=texts,
                       narration_features=np.asarray(narr_feats, np.float32),
                       narration_spans=tuple(spans), task_id=task_id,
                       gt_step_segments=gt, gt_narration_steps=gt_narr)


def make_article(task_id, num_steps, d_s=3, title=None, seed=0):
    rng = np.random.default_rng(seed)
    return Article(task_id=task_id, title=title or f"title of {task_id}",
                   step_texts=tuple(f"step {s} of {task_id}" for s in range(num_steps)),
                   step_features=rng.normal(size=(num_steps, d_s)).astype(np.float32))


@pytest.fixture
def tiny_corpus():
    """Two videos, one task, fully annotated; dims (4, 3, 3)."""
    rng = np.random.default_rng(7)
    art = make_article("taskA", 2, d_s=3)
    v0 = make_video("v0", rng.normal(size=(6, 4)), [Segment(1, 3)],
                    task_id="taskA",
                    gt={0: (Segment(0, 2),), 1: (Segment(3, 5),)}, gt_narr=(0,))
    v1 = make_video("v1", rng.normal(size=(9, 4)),
                    [Segment(0, 2), Segment(5, 8)], task_id="taskA",
                    gt={0: (Segment(0, 3),), 1: (Segment(5, 8),)},
                    gt_narr=(0, 1))
    return Corpus((v0, v1), {"taskA": art}, (4, 3, 3))


def one_batch(corpus, batch_size=8, max_frames=64, **kw):
    return next(batch_iter(corpus, batch_size, max_frames, None,
                           LabelSource.ASR_TIMESTAMPS, **kw))
