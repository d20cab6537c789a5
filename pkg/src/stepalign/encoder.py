"""Three-modality alignment model.

Frames, narrations, and article steps are lifted into a shared space by
per-modality two-layer MLPs plus learned positional embeddings, concatenated
into one token sequence, and run through a pre-norm transformer so each
modality can condition on the others. Alignment scores are cosine
similarities between the contextualized tokens:

    a_nv  narration x frame        a_sv  step x frame
    a_sn  step x narration
    a_snv step x frame routed through narrations: softmax(a_sn / xi) @ a_nv
    a_fused = (a_sv + a_snv) / 2

The indirect pathway lets noisy narrations vote on where a step lives even
when the step text itself matches the frames poorly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import tensorio
from .autodiff import Tensor, concat, gelu, softmax
from .corpus.batching import Batch

LAYERNORM_EPS = 1e-5
COSINE_EPS = 1e-8
MASK_FILL = -1e9  # drives masked attention logits to exp-underflow zero
RESIDUAL_INIT_SCALE = 0.1  # residual branch output projections start damped


class ModelError(ValueError):
    """Configuration or parameter problems detected before any math runs."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are the desk-scale model."""

    feature_dims: tuple[int, int, int] = (48, 32, 32)
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_hidden: int = 64
    ffn_dim: int = 256
    max_frames: int = 256
    max_narrations: int = 32
    max_steps: int = 16
    pe_for_steps: bool = True
    separate_text_mlp: bool = True
    dropout: float = 0.1
    xi: float = 0.07

    def validate(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise ModelError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        positives = ("model_dim", "num_heads", "mlp_hidden", "ffn_dim",
                     "max_frames", "max_narrations", "max_steps")
        for name in positives:
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ModelError("num_layers must be >= 0")
        if any(d < 1 for d in self.feature_dims):
            raise ModelError(f"feature_dims must be positive, got {self.feature_dims}")
        if self.xi <= 0:
            raise ModelError(f"xi must be > 0, got {self.xi}")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")


def full_scale_config(feature_dims: tuple[int, int, int]) -> ModelConfig:
    """The production-size variant: 512-wide, 6 pre-norm layers, 8 heads."""
    return ModelConfig(feature_dims=feature_dims, model_dim=512, num_layers=6,
                       num_heads=8, mlp_hidden=512, ffn_dim=2048,
                       max_frames=1024, max_narrations=128, max_steps=32)


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh trainable parameters; every array is 2-D so checkpoints stay flat."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    d = config.model_dim
    params: dict[str, Tensor] = {}

    def linear(name: str, d_in: int, d_out: int) -> None:
        bound = 1.0 / np.sqrt(d_in)
        params[f"{name}.w"] = Tensor(
            rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype), True)
        params[f"{name}.b"] = Tensor(np.zeros((1, d_out), dtype=dtype), True)

    def mlp(name: str, d_in: int) -> None:
        linear(f"{name}.l1", d_in, config.mlp_hidden)
        linear(f"{name}.l2", config.mlp_hidden, d)

    def layernorm(name: str) -> None:
        params[f"{name}.g"] = Tensor(np.ones((1, d), dtype=dtype), True)
        params[f"{name}.b"] = Tensor(np.zeros((1, d), dtype=dtype), True)

    d_v, d_n, d_s = config.feature_dims
    mlp("mlp_v", d_v)
    mlp("mlp_n", d_n)
    if config.separate_text_mlp:
        mlp("mlp_s", d_s)
    elif d_s != d_n:
        raise ModelError(
            f"separate_text_mlp=False needs matching text dims, got {d_n} vs {d_s}")

    def positions(name: str, count: int) -> None:
        params[name] = Tensor(rng.normal(0.0, 0.02, size=(count, d)).astype(dtype), True)

    positions("pos_v", config.max_frames)
    positions("pos_n", config.max_narrations)
    if config.pe_for_steps:
        positions("pos_s", config.max_steps)

    for i in range(config.num_layers):
        layernorm(f"layers.{i}.ln1")
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"layers.{i}.attn.{proj}", d, d)
        layernorm(f"layers.{i}.ln2")
        linear(f"layers.{i}.ffn.l1", d, config.ffn_dim)
        linear(f"layers.{i}.ffn.l2", config.ffn_dim, d)
        # blocks start near identity: at init attention is near uniform, so an
        # undamped output projection adds one shared vector to every token,
        # which pins all cross-modal cosines near 1 and breaks any absolute
        # confidence threshold downstream
        params[f"layers.{i}.attn.wo.w"].data *= RESIDUAL_INIT_SCALE
        params[f"layers.{i}.ffn.l2.w"].data *= RESIDUAL_INIT_SCALE
    if config.num_layers > 0:
        layernorm("final_ln")
    return params


def detach_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: v.detach() for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward pieces


def _linear(params, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _mlp(params, name: str, x: Tensor) -> Tensor:
    return _linear(params, f"{name}.l2", gelu(_linear(params, f"{name}.l1", x)))


def _layer_norm(params, name: str, x: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + LAYERNORM_EPS).sqrt()
    return normed * params[f"{name}.g"] + params[f"{name}.b"]


def unimodal_encode(params, config: ModelConfig, x: Tensor, modality: str) -> Tensor:
    """MLP projection plus positional embedding for one modality.

    x is (B, n, D_mod). Encoding steps with modality="narration" is legal and
    deliberately so: a model trained only on narrations can then score step
    texts through the narration pathway.
    """
    if modality == "video":
        mlp_name, pos = "mlp_v", params["pos_v"]
    elif modality == "narration":
        mlp_name, pos = "mlp_n", params["pos_n"]
    elif modality == "step":
        mlp_name = "mlp_s" if config.separate_text_mlp else "mlp_n"
        pos = params["pos_s"] if config.pe_for_steps else None
    else:
        raise ModelError(f"unknown modality {modality!r}")
    n = x.shape[1]
    h = _mlp(params, mlp_name, x)
    if pos is not None:
        if n > pos.shape[0]:
            raise ModelError(
                f"{modality} count {n} exceeds positional table size {pos.shape[0]}")
        h = h + pos[:n]
    return h


def _attention(params, name: str, x: Tensor, key_mask: np.ndarray,
               num_heads: int) -> Tensor:
    b, n_tok, d = x.shape
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, n_tok, num_heads, dh).swapaxes(1, 2)

    q = heads(_linear(params, f"{name}.wq", x))
    k = heads(_linear(params, f"{name}.wk", x))
    v = heads(_linear(params, f"{name}.wv", x))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    bias = np.where(key_mask, 0.0, MASK_FILL).astype(x.dtype)
    scores = scores + Tensor(bias[:, None, None, :])
    attn = softmax(scores, axis=-1)
    out = (attn @ v).swapaxes(1, 2).reshape(b, n_tok, d)
    return _linear(params, f"{name}.wo", out)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; identity when no generator is supplied (inference)."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


def multimodal_encode(params, config: ModelConfig, h_v: Tensor, h_n: Tensor,
                      h_s: Tensor, token_mask: np.ndarray,
                      dropout_rng=None) -> Tensor:
    """Joint transformer over [video; narration; step] tokens.

    token_mask is (B, T+N+S) bool; padding tokens are blocked as attention
    keys, so their values cannot leak into valid positions. With zero layers
    this is the identity, which keeps the unimodal pathway testable on its own.
    Passing a dropout_rng enables train-mode dropout on the token embeddings
    and both residual branches; besides regularizing, this stops the token
    cloud from collapsing onto a few directions, which would saturate every
    cosine score near 1 and blind the absolute pseudo-label filter.
    """
    x = concat([h_v, h_n, h_s], axis=1)
    if x.shape[1] != token_mask.shape[1]:
        raise ModelError(
            f"token mask covers {token_mask.shape[1]} tokens, model has {x.shape[1]}")
    if not token_mask.any(axis=1).all():
        raise ModelError("a batch row has no valid tokens")
    x = _dropout(x, config.dropout, dropout_rng)
    for i in range(config.num_layers):
        attn = _attention(params, f"layers.{i}.attn",
                          _layer_norm(params, f"layers.{i}.ln1", x),
                          token_mask, config.num_heads)
        x = x + _dropout(attn, config.dropout, dropout_rng)
        ffn = _mlp(params, f"layers.{i}.ffn",
                   _layer_norm(params, f"layers.{i}.ln2", x))
        x = x + _dropout(ffn, config.dropout, dropout_rng)
    if config.num_layers > 0:
        x = _layer_norm(params, "final_ln", x)
    return x


def _unit_rows(x: Tensor) -> Tensor:
    norm_sq = (x * x).sum(axis=-1, keepdims=True)
    return x / (norm_sq + COSINE_EPS).sqrt()


def cosine_alignment(h_a: Tensor, h_b: Tensor) -> Tensor:
    """Pairwise cosine similarity, (B, n_a, n_b)."""
    return _unit_rows(h_a) @ _unit_rows(h_b).swapaxes(-1, -2)


def indirect_alignment(a_sn: Tensor, a_nv: Tensor, narration_mask: np.ndarray,
                       xi: float) -> Tensor:
    """Step-video scores routed through narrations.

    Rows are convex combinations of valid narration rows of a_nv: the softmax
    weights are nonnegative and sum to one, with invalid narrations forced to
    exactly zero weight by the additive mask.
    """
    bias = np.where(narration_mask, 0.0, MASK_FILL).astype(a_sn.dtype)
    weights = softmax(a_sn * (1.0 / xi) + Tensor(bias[:, None, :]), axis=-1)
    return weights @ a_nv


def fuse(a_sv: Tensor, a_snv: Tensor) -> Tensor:
    return (a_sv + a_snv) * 0.5


# ---------------------------------------------------------------------------
# whole-model forward


@dataclass
class BatchAlignments:
    """Graph-bearing similarity tensors for one batch (padded shapes)."""

    a_nv: Tensor
    a_sv: Tensor
    a_sn: Tensor
    a_snv: Tensor
    a_fused: Tensor
    frame_mask: np.ndarray
    narration_mask: np.ndarray
    step_mask: np.ndarray


@dataclass
class AlignmentSet:
    """Detached per-video similarity matrices, trimmed to true sizes."""

    video_id: str
    a_nv: np.ndarray   # (N, T)
    a_sv: np.ndarray   # (S, T)
    a_sn: np.ndarray   # (S, N)
    a_snv: np.ndarray  # (S, T)
    a_fused: np.ndarray
    narration_index: tuple[int, ...] = ()


def forward_batch(params, config: ModelConfig, batch: Batch,
                  steps_as_narrations: bool = False,
                  dropout_rng=None) -> BatchAlignments:
    """Run the model and return all five similarity tensors with graph attached.

    steps_as_narrations routes step features through the narration MLP and
    positional table, for scoring steps with a narration-only model; it
    requires the step and narration feature widths to match. dropout_rng, when
    given, turns on train-mode dropout inside the joint transformer.
    """
    h_v = unimodal_encode(params, config, Tensor(batch.frames), "video")
    h_n = unimodal_encode(params, config, Tensor(batch.narrations), "narration")
    if steps_as_narrations:
        if batch.steps.shape[2] != batch.narrations.shape[2]:
            raise ModelError("steps_as_narrations needs matching text feature dims")
        h_s = unimodal_encode(params, config, Tensor(batch.steps), "narration")
    else:
        h_s = unimodal_encode(params, config, Tensor(batch.steps), "step")

    token_mask = np.concatenate(
        [batch.frame_mask, batch.narration_mask, batch.step_mask], axis=1)
    z = multimodal_encode(params, config, h_v, h_n, h_s, token_mask,
                          dropout_rng=dropout_rng)
    t, n = batch.frames.shape[1], batch.narrations.shape[1]
    z_v = z[:, :t]
    z_n = z[:, t:t + n]
    z_s = z[:, t + n:]

    a_nv = cosine_alignment(z_n, z_v)
    a_sv = cosine_alignment(z_s, z_v)
    a_sn = cosine_alignment(z_s, z_n)
    a_snv = indirect_alignment(a_sn, a_nv, batch.narration_mask, config.xi)
    return BatchAlignments(a_nv=a_nv, a_sv=a_sv, a_sn=a_sn, a_snv=a_snv,
                           a_fused=fuse(a_sv, a_snv),
                           frame_mask=batch.frame_mask,
                           narration_mask=batch.narration_mask,
                           step_mask=batch.step_mask)


def forward(params, config: ModelConfig, batch: Batch,
            steps_as_narrations: bool = False) -> list[AlignmentSet]:
    """Inference entry point: detached, per-video, trimmed alignment matrices.

    Videos with no usable narrations get a_fused = a_sv; the indirect pathway
    has nothing to route through, so its output is not meaningful there.
    """
    out = forward_batch(detach_params(params), config, batch, steps_as_narrations)
    results = []
    for i, vid in enumerate(batch.video_ids):
        t = int(out.frame_mask[i].sum())
        n = int(out.narration_mask[i].sum())
        s = int(out.step_mask[i].sum())
        a_sv = out.a_sv.data[i, :s, :t]
        if n > 0:
            a_snv = out.a_snv.data[i, :s, :t]
            fused = out.a_fused.data[i, :s, :t]
        else:
            a_snv = np.zeros_like(a_sv)
            fused = a_sv
        results.append(AlignmentSet(
            video_id=vid,
            a_nv=out.a_nv.data[i, :n, :t].copy(),
            a_sv=a_sv.copy(),
            a_sn=out.a_sn.data[i, :s, :n].copy(),
            a_snv=a_snv.copy(),
            a_fused=fused.copy(),
            narration_index=batch.narration_index[i]))
    return results


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, arrays: Mapping[str, "Tensor | np.ndarray"],
                    meta: Optional[dict] = None) -> None:
    """Write named matrices as concatenated binary blocks plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        value = arrays[name]
        mat = value.data if isinstance(value, Tensor) else np.asarray(value)
        dtype = "float64" if mat.dtype == np.float64 else "float32"
        block = tensorio.pack_block(mat, dtype=dtype)
        entries.append({"name": name, "rows": int(mat.shape[0]),
                        "cols": int(mat.shape[1]), "dtype": dtype,
                        "offset": offset})
        blobs.append(block)
        offset += len(block)
    with open(path, "wb") as f:
        for blob in blobs:
            f.write(blob)
    sidecar = {"format_version": 1, "tensors": entries, "meta": meta or {}}
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays and metadata saved by save_checkpoint."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise tensorio.FormatError(f"checkpoint incomplete: need {path} and {sidecar_path}")
    with open(sidecar_path) as f:
        sidecar = json.load(f)
    if sidecar.get("format_version") != 1:
        raise tensorio.FormatError(
            f"{sidecar_path}: unsupported format_version {sidecar.get('format_version')!r}")
    buf = path.read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in sidecar["tensors"]:
        mat, _ = tensorio.unpack_block(buf, offset=int(entry["offset"]),
                                       dtype=entry["dtype"], source=str(path))
        if mat.shape != (entry["rows"], entry["cols"]):
            raise tensorio.FormatError(
                f"{path}: tensor {entry['name']} has shape {mat.shape}, "
                f"sidecar says ({entry['rows']}, {entry['cols']})")
        arrays[entry["name"]] = mat
    return arrays, sidecar.get("meta", {})


def params_from_arrays(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
