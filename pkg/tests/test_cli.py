"""End-to-end command flows, exit codes, and on-disk artifact formats."""

import csv
import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from stepalign.cli import _write_alignment_csv, _write_pgm, main
from stepalign.config import (ConfigError, RunConfig, load_run_config,
                              run_config_from_dict, save_run_config)
from stepalign.corpus import Corpus, Segment, write_corpus
from stepalign.encoder import forward
from stepalign.evalkit import blob_detect

from conftest import make_article, make_video

TINY_CONFIG = {
    "corpus": {
        "num_tasks": 2, "steps_per_task": [3, 3], "videos_per_task": 8,
        "frames_range": [32, 64], "dims": [12, 8, 8], "latent_dim": 6,
        "background_dim": 4, "noise_std": 0.0, "p_miss_step": 0.2,
    },
    "model": {
        "model_dim": 16, "num_layers": 1, "num_heads": 2, "mlp_hidden": 16,
        "ffn_dim": 32, "max_frames": 64, "max_narrations": 8, "max_steps": 4,
        "dropout": 0.0,
    },
    "train": {
        "epochs": 3, "batch_size": 4, "base_lr": 5e-3,
        "teacher_pre_epochs": 1, "max_frames": 64,
    },
    "pseudo": {"burn_in_epochs": 2, "refresh_every": 2},
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One generated corpus and one finished training run, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    corpus_dir = root / "corpus"
    assert main(["generate", "--out", str(corpus_dir), "--config", str(cfg),
                 "--seed", "5"]) == 0
    workdir = root / "run"
    assert main(["train", "--corpus", str(corpus_dir), "--workdir",
                 str(workdir), "--config", str(cfg), "--seed", "5"]) == 0
    return SimpleNamespace(root=root, config=cfg, corpus=corpus_dir,
                           workdir=workdir, ckpt=workdir / "last.ckpt")


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_manifest(ws):
    manifest = json.loads((ws.corpus / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    assert manifest["dims"] == [12, 8, 8]
    assert len(manifest["videos"]) == 16
    assert len(manifest["articles"]) == 2


def test_generate_rejects_malformed_config(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert main(["generate", "--out", str(tmp_path / "c"),
                 "--config", str(bad)]) == 2


def test_generate_rejects_unknown_config_keys(tmp_path):
    bad = tmp_path / "extra.json"
    bad.write_text(json.dumps({"corpus": {"frames": 10}}))
    assert main(["generate", "--out", str(tmp_path / "c"),
                 "--config", str(bad)]) == 2


def test_generate_seed_flag_beats_config_seed(tmp_path, ws):
    cfg = tmp_path / "seeded.json"
    seeded = dict(TINY_CONFIG)
    seeded["corpus"] = {**TINY_CONFIG["corpus"], "seed": 999}
    cfg.write_text(json.dumps(seeded))
    out = tmp_path / "c"
    assert main(["generate", "--out", str(out), "--config", str(cfg),
                 "--seed", "5"]) == 0
    ours = json.loads((out / "manifest.json").read_text())
    theirs = json.loads((ws.corpus / "manifest.json").read_text())
    assert ours == theirs


def test_generate_holdout_split(tmp_path, ws):
    out = tmp_path / "split"
    assert main(["generate", "--out", str(out), "--config", str(ws.config),
                 "--holdout-fraction", "0.25"]) == 0
    train_m = json.loads((out / "train" / "manifest.json").read_text())
    eval_m = json.loads((out / "eval" / "manifest.json").read_text())
    assert len(train_m["videos"]) == 12
    assert len(eval_m["videos"]) == 4
    assert main(["generate", "--out", str(tmp_path / "x"),
                 "--config", str(ws.config), "--holdout-fraction", "1.5"]) == 2


# ---------------------------------------------------------------------------
# train


def test_train_artifacts(ws):
    assert ws.ckpt.exists()
    assert (ws.workdir / "last.ckpt.json").exists()
    assert (ws.workdir / "pseudo" / "initial.jsonl").exists()
    log = (ws.workdir / "train_log.jsonl").read_text().splitlines()
    entries = [json.loads(l) for l in log]
    assert [e["stage"] for e in entries] == ["teacher"] + ["main"] * 3

    saved = load_run_config(ws.workdir / "run_config.json")
    assert saved.model.feature_dims == (12, 8, 8)  # resolved from the corpus
    assert saved.train.seed == 5


def test_train_resume_without_checkpoint_fails(tmp_path, ws):
    assert main(["train", "--corpus", str(ws.corpus), "--workdir",
                 str(tmp_path / "fresh"), "--config", str(ws.config),
                 "--resume"]) == 1


def test_train_missing_corpus_is_data_error(tmp_path, ws):
    assert main(["train", "--corpus", str(tmp_path / "nowhere"),
                 "--workdir", str(tmp_path / "w"),
                 "--config", str(ws.config)]) == 4


# ---------------------------------------------------------------------------
# eval


def test_eval_reports_metrics(ws, capsys):
    assert main(["eval", "--corpus", str(ws.corpus),
                 "--checkpoint", str(ws.ckpt)]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l]
    names = {l.split()[0] for l in lines}
    assert {"step_r1", "recall@1_iou0.5", "narration_r1"} <= names
    for line in lines:
        name, value, ratio = line.split()
        assert 0.0 <= float(value) <= 1.0
        assert ratio.startswith("(") and "/" in ratio


def test_eval_deterministic_and_matrix_choice(ws, capsys):
    args = ["eval", "--corpus", str(ws.corpus), "--checkpoint", str(ws.ckpt)]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert main(args + ["--matrix", "direct_sv"]) == 0
    capsys.readouterr()
    assert main(args + ["--no-narrations"]) == 0
    stripped = capsys.readouterr().out
    assert "narration_r1" not in stripped  # nothing left to judge narrations on


def test_eval_per_video_csv(ws, tmp_path, capsys):
    path = tmp_path / "per_video.csv"
    assert main(["eval", "--corpus", str(ws.corpus), "--checkpoint",
                 str(ws.ckpt), "--per-video", str(path)]) == 0
    capsys.readouterr()
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["video_id", "metric", "numerator", "denominator"]
    assert len(rows) > 16  # at least one metric row per video
    assert all(len(r) == 4 for r in rows[1:])


def test_eval_k_and_iou_flags(ws, capsys):
    assert main(["eval", "--corpus", str(ws.corpus), "--checkpoint",
                 str(ws.ckpt), "--k", "1", "--k", "3", "--iou", "0.3"]) == 0
    out = capsys.readouterr().out
    assert "recall@1_iou0.3" in out and "recall@3_iou0.3" in out
    assert "iou0.5" not in out


def test_eval_requires_checkpoint_or_predictions(ws, capsys):
    assert main(["eval", "--corpus", str(ws.corpus)]) == 2


def test_eval_bad_checkpoint_is_data_error(ws, tmp_path, capsys):
    fake = tmp_path / "junk.ckpt"
    fake.write_bytes(b"not a checkpoint")
    assert main(["eval", "--corpus", str(ws.corpus),
                 "--checkpoint", str(fake)]) == 4


def test_eval_dims_mismatch_is_protocol_error(ws, tmp_path, capsys):
    other = tmp_path / "narrow"
    cfg = tmp_path / "narrow.json"
    narrow = dict(TINY_CONFIG)
    narrow["corpus"] = {**TINY_CONFIG["corpus"], "dims": [10, 6, 6],
                        "latent_dim": 4, "background_dim": 2}
    cfg.write_text(json.dumps(narrow))
    assert main(["generate", "--out", str(other), "--config", str(cfg)]) == 0
    assert main(["eval", "--corpus", str(other),
                 "--checkpoint", str(ws.ckpt)]) == 3


def no_gt_corpus(tmp_path):
    art = make_article("bake", 2, d_s=8)
    rng = np.random.default_rng(0)
    video = make_video("v0", rng.normal(size=(16, 12)).astype(np.float32),
                       [Segment(0, 3)], task_id=None, d_n=8)
    corpus = Corpus((video,), {"bake": art}, (12, 8, 8))
    path = tmp_path / "nogt"
    write_corpus(corpus, path)
    return path


def test_eval_without_ground_truth_is_protocol_error(ws, tmp_path, capsys):
    path = no_gt_corpus(tmp_path)
    assert main(["eval", "--corpus", str(path), "--checkpoint", str(ws.ckpt),
                 "--task-strategy", "top1"]) == 3


def test_eval_predictions_path(ws, tmp_path, capsys):
    manifest = json.loads((ws.corpus / "manifest.json").read_text())
    rows = []
    for v in manifest["videos"]:
        for step, segs in v["gt_segments"].items():
            rows.append({"video_id": v["id"], "step": int(step),
                         "segments": segs})
    preds = tmp_path / "preds.jsonl"
    preds.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    assert main(["eval", "--corpus", str(ws.corpus),
                 "--predictions", str(preds)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("recall@1_iou0.5 1.000000")


# ---------------------------------------------------------------------------
# infer


def first_video_id(ws):
    manifest = json.loads((ws.corpus / "manifest.json").read_text())
    return manifest["videos"][0]["id"]


def test_infer_emits_all_artifacts(ws, tmp_path, capsys):
    vid = first_video_id(ws)
    out = tmp_path / "out"
    assert main(["infer", "--corpus", str(ws.corpus), "--checkpoint",
                 str(ws.ckpt), "--video", vid, "--out", str(out)]) == 0
    assert (out / f"{vid}.alignment.csv").exists()
    assert (out / f"{vid}.fused.pgm").exists()
    assert (out / f"{vid}.segments.jsonl").exists()


def test_infer_csv_matches_model_scores(ws, tmp_path, capsys):
    from stepalign.cli import _load_model
    from stepalign.corpus import LabelSource, batch_iter, read_corpus

    vid = first_video_id(ws)
    out = tmp_path / "out"
    assert main(["infer", "--corpus", str(ws.corpus), "--checkpoint",
                 str(ws.ckpt), "--video", vid, "--out", str(out),
                 "--emit", "csv", "--emit", "segments"]) == 0

    params, mc = _load_model(str(ws.ckpt))
    corpus = read_corpus(ws.corpus)
    video = corpus.video_by_id(vid)
    sub = Corpus((video,), corpus.articles, corpus.dims)
    batch = next(batch_iter(sub, 1, mc.max_frames, None,
                            LabelSource.ASR_TIMESTAMPS))
    fused = forward(params, mc, batch)[0].a_fused

    with open(out / f"{vid}.alignment.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["row", "frame", "score"]
    assert len(rows) == 1 + fused.size
    for r, c, score in rows[1:]:
        assert abs(float(score) - fused[int(r), int(c)]) < 1e-6

    seg_rows = [json.loads(l) for l in
                (out / f"{vid}.segments.jsonl").read_text().splitlines()]
    assert [r["step"] for r in seg_rows] == list(range(fused.shape[0]))
    blobs = blob_detect(fused[0], 0.0, 0.7)
    assert seg_rows[0]["segments"] == [[s.start, s.end] for s, _ in blobs]
    assert not (out / f"{vid}.fused.pgm").exists()  # not requested


def test_infer_unknown_video_is_data_error(ws, tmp_path, capsys):
    assert main(["infer", "--corpus", str(ws.corpus), "--checkpoint",
                 str(ws.ckpt), "--video", "missing", "--out",
                 str(tmp_path / "o")]) == 4


def test_infer_unknown_task_is_protocol_error(ws, tmp_path, capsys):
    assert main(["infer", "--corpus", str(ws.corpus), "--checkpoint",
                 str(ws.ckpt), "--video", first_video_id(ws),
                 "--task", "nonsense", "--out", str(tmp_path / "o")]) == 3


def test_infer_needs_task_when_metadata_missing(ws, tmp_path, capsys):
    path = no_gt_corpus(tmp_path)
    out = tmp_path / "o"
    assert main(["infer", "--corpus", str(path), "--checkpoint", str(ws.ckpt),
                 "--video", "v0", "--out", str(out)]) == 3
    assert main(["infer", "--corpus", str(path), "--checkpoint", str(ws.ckpt),
                 "--video", "v0", "--task", "bake", "--out", str(out)]) == 0


# ---------------------------------------------------------------------------
# golden bytes for the writers


def test_pgm_golden_bytes(tmp_path):
    path = tmp_path / "g.pgm"
    _write_pgm(path, np.array([[1.0, -1.0, 0.0]]))
    assert path.read_bytes() == b"P5\n3 1\n255\n" + bytes([255, 0, 128])


def test_alignment_csv_golden_bytes(tmp_path):
    path = tmp_path / "g.csv"
    _write_alignment_csv(path, np.array([[0.1234567, -1.0]]))
    assert path.read_bytes() == (b"row,frame,score\r\n"
                                 b"0,0,0.123457\r\n"
                                 b"0,1,-1.000000\r\n")


# ---------------------------------------------------------------------------
# run configuration


def test_run_config_round_trip(tmp_path):
    cfg = run_config_from_dict(TINY_CONFIG)
    path = tmp_path / "rc.json"
    save_run_config(cfg, path)
    assert load_run_config(path) == cfg


def test_run_config_defaults_and_strictness():
    assert run_config_from_dict({}) == RunConfig()
    with pytest.raises(ConfigError, match="unknown sections"):
        run_config_from_dict({"optimizer": {}})
    with pytest.raises(ConfigError, match="unknown keys"):
        run_config_from_dict({"train": {"lr": 0.1}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"train": {"epochs": -3}})  # fails validation


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--corpus", "somewhere"])  # --workdir missing
    assert exc.value.code == 2
