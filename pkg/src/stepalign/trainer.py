"""Optimization loop with the teacher-student labeling curriculum.

Stage 0 trains a model on narration supervision alone, encoding article steps
through the narration pathway so the finished model can score steps zero-shot.
That model writes the initial step pseudo-labels and warm-starts the student.

The main stage trains with both loss terms. For the first burn_in_epochs the
step labels stay frozen at the initial set; afterwards the student snapshots
itself every refresh_every epochs and relabels the corpus with its own scores,
now through the proper step pathway.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .corpus.batching import LabelSource, batch_iter
from .corpus.records import Corpus
from .encoder import (ModelConfig, detach_params, forward, forward_batch,
                      init_params, load_checkpoint, params_from_arrays,
                      save_checkpoint)
from .evalkit import evaluate_video, merge_reports
from .objective import LossConfig, gradients, total_loss
from .pseudolabel import (PseudoConfig, PseudoLabelSet, TeacherAction,
                          generate_pseudolabels, teacher_action)


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    base_lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    teacher_pre_epochs: int = 5
    teacher_lr: float | None = None
    max_frames: int = 128
    eval_every: int = 1
    seed: int = 0

    def resolved_teacher_lr(self) -> float:
        return self.base_lr if self.teacher_lr is None else self.teacher_lr

    def validate(self) -> None:
        if self.epochs < 0:
            raise TrainError("epochs must be >= 0")
        if self.batch_size < 1 or self.max_frames < 1:
            raise TrainError("batch_size and max_frames must be >= 1")
        if self.base_lr <= 0 or self.eps <= 0:
            raise TrainError("base_lr and eps must be > 0")
        if self.teacher_lr is not None and self.teacher_lr <= 0:
            raise TrainError("teacher_lr must be > 0 when set")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise TrainError("need weight_decay >= 0 and grad_clip > 0")
        if self.teacher_pre_epochs < 0:
            raise TrainError("teacher_pre_epochs must be >= 0")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr to zero over total_steps updates."""
    if total_steps < 1:
        raise TrainError("total_steps must be >= 1")
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    """AdamW first/second moments plus the shared update counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float, config: TrainConfig) -> float:
    """One decoupled-weight-decay Adam update; returns the pre-clip grad norm.

    The whole gradient vector is rescaled to grad_clip before touching the
    moments, so a single spiky batch cannot poison the running statistics.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainError(f"non-finite gradient for parameter {name!r}")
    norm = global_grad_norm(grads)
    scale = config.grad_clip / norm if norm > config.grad_clip else 1.0
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads[name] * scale
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        p.data -= lr * (update + config.weight_decay * p.data)
    return norm


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    model_config: ModelConfig
    opt_state: Optional[OptimizerState]
    labels: Optional[PseudoLabelSet]
    history: list[dict] = field(default_factory=list)


def label_corpus(params, model_config: ModelConfig, corpus: Corpus,
                 pseudo_config: PseudoConfig, *, batch_size: int,
                 max_frames: int, assignment=None,
                 steps_as_narrations: bool = False,
                 meta: Optional[dict] = None) -> PseudoLabelSet:
    """Run the model over the corpus and turn step scores into pseudo-labels."""
    sets = []
    for batch in batch_iter(corpus, batch_size, max_frames, None,
                            LabelSource.ASR_TIMESTAMPS, assignment=assignment):
        sets.extend(forward(params, model_config, batch,
                            steps_as_narrations=steps_as_narrations))
    return generate_pseudolabels(sets, pseudo_config, meta=meta)


def _epoch_eval(params, model_config, corpus, batch_size, max_frames,
                assignment) -> dict[str, float]:
    reports = []
    for batch in batch_iter(corpus, batch_size, max_frames, None,
                            LabelSource.ASR_TIMESTAMPS, assignment=assignment):
        for alignment in forward(params, model_config, batch):
            video = corpus.video_by_id(alignment.video_id)
            if video.gt_step_segments is None:
                continue
            reports.append(evaluate_video(alignment, video))
    merged = merge_reports(r for d in reports for r in d.values())
    return {name: report.value for name, report in merged.items()}


def _run_epoch(params, model_config, corpus, train_cfg: TrainConfig,
               loss_cfg: LossConfig, state: OptimizerState, total_steps: int,
               shuffle_seed: int, label_source: LabelSource,
               pseudo_store: Optional[PseudoLabelSet], assignment,
               steps_as_narrations: bool, where: str) -> dict[str, float]:
    losses, norms, lr_last = [], [], 0.0
    rows_sv = 0
    # one dropout stream per epoch, separate key from the shuffle stream;
    # batch order is fixed by shuffle_seed, so consumption is reproducible
    drop_rng = (np.random.default_rng([13, shuffle_seed])
                if model_config.dropout > 0.0 else None)
    for batch in batch_iter(corpus, train_cfg.batch_size, train_cfg.max_frames,
                            shuffle_seed, label_source,
                            assignment=assignment, pseudo_store=pseudo_store):
        alignments = forward_batch(params, model_config, batch,
                                   steps_as_narrations=steps_as_narrations,
                                   dropout_rng=drop_rng)
        loss, report = total_loss(alignments, batch, loss_cfg)
        if not math.isfinite(report.total):
            raise TrainError(f"loss diverged ({report.total}) during {where}")
        grads = gradients(loss, params)
        lr_last = cosine_lr(state.step, total_steps, train_cfg.base_lr)
        norms.append(adamw_step(params, grads, state, lr_last, train_cfg))
        losses.append(report.total)
        rows_sv += report.rows_sv
    return {"loss": float(np.mean(losses)) if losses else 0.0,
            "grad_norm": float(np.mean(norms)) if norms else 0.0,
            "lr": lr_last, "rows_sv": rows_sv}


def _mix_seed(seed: int, stage: int, epoch: int) -> int:
    return (seed * 1_000_003 + stage * 101 + epoch) % (2 ** 63)


def train(corpus: Corpus, model_config: ModelConfig, train_cfg: TrainConfig,
          loss_cfg: LossConfig, pseudo_cfg: PseudoConfig, *,
          assignment: Optional[Mapping[str, str]] = None,
          eval_corpus: Optional[Corpus] = None,
          workdir: Optional[str | Path] = None,
          resume: bool = False,
          log_fn: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Full curriculum: narration-only teacher, then pseudo-labeled student.

    With a workdir, every epoch appends one JSONL log line, refreshed label
    sets land under pseudo/, and last.ckpt carries enough to resume mid-run
    (per-epoch shuffling and labeling are derived from (seed, epoch), so no
    generator state needs saving).
    """
    train_cfg.validate()
    loss_cfg.validate()
    pseudo_cfg.validate()
    model_config.validate()
    if len(corpus.videos) == 0:
        raise TrainError("cannot train on an empty corpus")
    if train_cfg.epochs == 0:
        # a zero-epoch run is a no-op by contract: fresh params, nothing logged
        return TrainResult(params=init_params(model_config, train_cfg.seed),
                           model_config=model_config,
                           opt_state=None, labels=None, history=[])
    if train_cfg.epochs < pseudo_cfg.burn_in_epochs:
        raise TrainError(
            f"epochs {train_cfg.epochs} shorter than burn-in "
            f"{pseudo_cfg.burn_in_epochs}")

    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    log_path = workdir / "train_log.jsonl" if workdir else None
    history: list[dict] = []

    def emit(entry: dict) -> None:
        history.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(entry) + "\n")

    steps_per_epoch = math.ceil(len(corpus.videos) / train_cfg.batch_size)
    main_total = train_cfg.epochs * steps_per_epoch

    start_epoch = 0
    labels: Optional[PseudoLabelSet] = None
    labels_file = ""
    if resume:
        if workdir is None:
            raise TrainError("resume needs a workdir")
        ckpt = workdir / "last.ckpt"
        if not ckpt.exists():
            raise TrainError(f"resume requested but {ckpt} does not exist")
        params, state, meta = _load_train_checkpoint(ckpt)
        start_epoch = int(meta["next_epoch"])
        labels_file = meta.get("labels_file", "")
        if labels_file:
            labels = PseudoLabelSet.load_jsonl(workdir / labels_file)
    else:
        # stage 0: narration-only teacher, steps scored through the
        # narration pathway so labeling works without a trained step encoder
        params = init_params(model_config, train_cfg.seed)
        state = OptimizerState.fresh(params)
        if train_cfg.teacher_pre_epochs > 0:
            pre_state = OptimizerState.fresh(params)
            pre_total = train_cfg.teacher_pre_epochs * steps_per_epoch
            pre_cfg = replace(train_cfg, base_lr=train_cfg.resolved_teacher_lr())
            nv_only = LossConfig(eta=loss_cfg.eta, lambda_nv=loss_cfg.lambda_nv,
                                 lambda_sv=0.0)
            for epoch in range(train_cfg.teacher_pre_epochs):
                stats = _run_epoch(params, model_config, corpus, pre_cfg,
                                   nv_only, pre_state, pre_total,
                                   _mix_seed(train_cfg.seed, 0, epoch),
                                   LabelSource.ASR_TIMESTAMPS, None,
                                   assignment, True, f"teacher epoch {epoch}")
                emit({"stage": "teacher", "epoch": epoch, **stats})

    for epoch in range(start_epoch, train_cfg.epochs):
        action = teacher_action(epoch, pseudo_cfg)
        if action == TeacherAction.USE_INITIAL and labels is None:
            labels = label_corpus(
                detach_params(params), model_config, corpus, pseudo_cfg,
                batch_size=train_cfg.batch_size, max_frames=train_cfg.max_frames,
                assignment=assignment, steps_as_narrations=True,
                meta={"teacher": "initial", "epoch": epoch})
            labels_file = "pseudo/initial.jsonl"
            _save_labels(workdir, labels, "initial")
        elif action == TeacherAction.REFRESH or labels is None:
            labels = label_corpus(
                detach_params(params), model_config, corpus, pseudo_cfg,
                batch_size=train_cfg.batch_size, max_frames=train_cfg.max_frames,
                assignment=assignment, steps_as_narrations=False,
                meta={"teacher": "student_snapshot", "epoch": epoch})
            labels_file = f"pseudo/epoch_{epoch:03d}.jsonl"
            _save_labels(workdir, labels, f"epoch_{epoch:03d}")

        stats = _run_epoch(params, model_config, corpus, train_cfg, loss_cfg,
                           state, main_total,
                           _mix_seed(train_cfg.seed, 1, epoch),
                           LabelSource.PROVIDED_PSEUDO, labels, assignment,
                           False, f"epoch {epoch}")
        entry = {"stage": "main", "epoch": epoch, "teacher": action.value,
                 "pseudo_coverage": labels.coverage(), **stats}
        if eval_corpus is not None and (epoch + 1) % train_cfg.eval_every == 0:
            metrics = _epoch_eval(params, model_config, eval_corpus,
                                  train_cfg.batch_size, train_cfg.max_frames,
                                  None)
            entry.update({f"eval_{k}": v for k, v in metrics.items()})
        emit(entry)

        if workdir is not None:
            _save_train_checkpoint(workdir / "last.ckpt", params, state, {
                "next_epoch": epoch + 1,
                "labels_file": labels_file,
                "model_config": asdict(model_config),
            })

    return TrainResult(params=params, model_config=model_config,
                       opt_state=state, labels=labels, history=history)


def _save_labels(workdir: Optional[Path], labels: PseudoLabelSet,
                 name: str) -> None:
    if workdir is not None:
        labels.save_jsonl(workdir / "pseudo" / f"{name}.jsonl")


def _save_train_checkpoint(path: Path, params, state: OptimizerState,
                           meta: dict) -> None:
    arrays: dict[str, np.ndarray] = {k: p.data for k, p in params.items()}
    for k, m in state.m.items():
        arrays[f"opt.m.{k}"] = m
    for k, v in state.v.items():
        arrays[f"opt.v.{k}"] = v
    save_checkpoint(path, arrays, meta={**meta, "opt_step": state.step})


def _load_train_checkpoint(path: Path):
    arrays, meta = load_checkpoint(path)
    params = params_from_arrays(
        {k: v for k, v in arrays.items() if not k.startswith("opt.")})
    m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")}
    state = OptimizerState(m=m, v=v, step=int(meta.get("opt_step", 0)))
    return params, state, meta
