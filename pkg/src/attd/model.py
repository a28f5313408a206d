"""Language stream, two cross-attention visual decoders, and Hadamard-fusion scoring.

Parameter names are prefixed by partition:

* ``lang.*``  language stream (word/position embeddings, encoder, pooler)
* ``vq.*``    question decoder, its attended projection and score head
* ``vr.*``    reasoning decoder, its attended projection and score head
* ``geo.*``   2D geometric embedding of image tokens, shared by both decoders

Both decoders read their word embeddings from ``lang.tok_emb``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import container
from . import numcore as nc
from .gridvqa import CLS, PAD, SEP, Sample
from .numcore import Tensor

N_CANDIDATES = 4
PARTITIONS = ("lang", "vq", "vr", "geo")


class InputError(ValueError):
    """A sample cannot be fed to the model."""


class ConfigMismatchError(ValueError):
    """Checkpoint, dataset or model configurations disagree."""


@dataclass
class ModelConfig:
    vocab_size: int
    max_seq_len: int = 16
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_visual: int = 32
    grid_h: int = 8
    grid_w: int = 8
    d_ff: int = 128
    n_candidates: int = N_CANDIDATES
    init_std: float = 0.05
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_candidates != N_CANDIDATES:
            raise ValueError("n_candidates is fixed at 4")
        if min(self.n_enc_layers, self.n_dec_layers) < 1:
            raise ValueError("encoder and decoder need at least one layer")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def to_json(self) -> dict:
        return asdict(self)


# -- parameter construction -------------------------------------------------------------


def _attn_shapes(prefix: str, d: int, shapes: dict) -> None:
    for p in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{p}"] = (d, d)
        shapes[f"{prefix}.b{p}"] = (d,)


def _ln_shapes(prefix: str, d: int, shapes: dict) -> None:
    shapes[f"{prefix}.g"] = (d,)
    shapes[f"{prefix}.b"] = (d,)


def _ffn_shapes(prefix: str, d: int, d_ff: int, shapes: dict) -> None:
    shapes[f"{prefix}.w1"] = (d, d_ff)
    shapes[f"{prefix}.b1"] = (d_ff,)
    shapes[f"{prefix}.w2"] = (d_ff, d)
    shapes[f"{prefix}.b2"] = (d,)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    s: dict[str, tuple[int, ...]] = {
        "lang.tok_emb": (cfg.vocab_size, d),
        "lang.pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_enc_layers):
        _ln_shapes(f"lang.enc{i}.ln1", d, s)
        _attn_shapes(f"lang.enc{i}.attn", d, s)
        _ln_shapes(f"lang.enc{i}.ln2", d, s)
        _ffn_shapes(f"lang.enc{i}.ffn", d, cfg.d_ff, s)
    _ln_shapes("lang.ln_f", d, s)
    s["lang.pool.w"] = (d, d)
    s["lang.pool.b"] = (d,)
    for dec in ("vq", "vr"):
        s[f"{dec}.cls"] = (d,)
        s[f"{dec}.pos_emb"] = (cfg.max_seq_len + 1, d)
        s[f"{dec}.img_in.w"] = (cfg.d_visual, d)
        s[f"{dec}.img_in.b"] = (d,)
        _ln_shapes(f"{dec}.mem_ln", d, s)
        for i in range(cfg.n_dec_layers):
            _ln_shapes(f"{dec}.dec{i}.ln1", d, s)
            _attn_shapes(f"{dec}.dec{i}.self", d, s)
            _ln_shapes(f"{dec}.dec{i}.ln2", d, s)
            _attn_shapes(f"{dec}.dec{i}.cross", d, s)
            _ln_shapes(f"{dec}.dec{i}.ln3", d, s)
            _ffn_shapes(f"{dec}.dec{i}.ffn", d, cfg.d_ff, s)
        s[f"{dec}.attend.w"] = (cfg.d_visual, d)
        s[f"{dec}.attend.b"] = (d,)
        s[f"{dec}.score.w"] = (d, 1)
        s[f"{dec}.score.b"] = (1,)
    s["geo.emb"] = (cfg.n_cells, d)
    return s


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Normal(0, init_std) weights and embeddings, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def partition_of(name: str) -> str:
    return name.split(".", 1)[0]


# -- input packing -----------------------------------------------------------------------


def _pad(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class Batch:
    """Padded arrays for a list of samples."""

    lang_ids: np.ndarray  # (B, 4, T)
    question_ids: np.ndarray  # (B, Tq)
    rationale_ids: np.ndarray | None  # (B, Tr)
    features: np.ndarray  # (B, h*w, d_visual)
    targets: np.ndarray  # (B,)
    target_mask: np.ndarray  # (B, h*w) bool
    ids: list[int] = field(default_factory=list)
    grid_hw: tuple[int, int] = (0, 0)

    @property
    def size(self) -> int:
        return len(self.targets)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], max_seq_len: int, need_rationale: bool = False) -> "Batch":
        if not samples:
            raise InputError("empty batch")
        h, w, _ = samples[0].grid.shape
        lang, quest, rat = [], [], []
        for s in samples:
            if len(s.candidate_ids) != N_CANDIDATES:
                raise InputError(f"sample {s.id} has {len(s.candidate_ids)} candidates, expected 4")
            if s.grid.shape[:2] != (h, w):
                raise InputError(f"sample {s.id} grid {s.grid.shape[:2]} differs from batch grid {(h, w)}")
            for cand in s.candidate_ids:
                seq = [CLS, *s.question_ids, SEP, *cand, SEP]
                if len(seq) > max_seq_len:
                    raise InputError(f"sample {s.id}: sequence of {len(seq)} tokens exceeds max_seq_len={max_seq_len}")
                lang.append(seq)
            if len(s.question_ids) > max_seq_len:
                raise InputError(f"sample {s.id}: question exceeds max_seq_len={max_seq_len}")
            quest.append(s.question_ids)
            if need_rationale:
                if not s.rationale_ids:
                    raise InputError(f"sample {s.id} has no rationale (required in train mode)")
                if len(s.rationale_ids) > max_seq_len:
                    raise InputError(f"sample {s.id}: rationale exceeds max_seq_len={max_seq_len}")
                rat.append(s.rationale_ids)
        mask = np.zeros((len(samples), h * w), dtype=bool)
        for i, s in enumerate(samples):
            for r, c in s.target_cells:
                mask[i, r * w + c] = True
        return cls(
            lang_ids=_pad(lang).reshape(len(samples), N_CANDIDATES, -1),
            question_ids=_pad(quest),
            rationale_ids=_pad(rat) if need_rationale else None,
            features=np.stack([s.grid.reshape(h * w, -1) for s in samples]),
            targets=np.array([s.correct_index for s in samples], dtype=np.int64),
            target_mask=mask,
            ids=[s.id for s in samples],
            grid_hw=(h, w),
        )


@dataclass
class ForwardOutput:
    """Per-batch outputs; leading axis is the sample. Attention maps are flattened row-major."""

    x_cls: Tensor  # (B, 4, d)
    alpha_q: Tensor  # (B, h*w)
    v_q: Tensor  # (B, d)
    logits_q: Tensor  # (B, 4)
    y_q: Tensor  # (B, 4)
    grid_hw: tuple[int, int]
    alpha_r: Tensor | None = None
    v_r: Tensor | None = None
    logits_r: Tensor | None = None
    y_r: Tensor | None = None

    def alpha_q_grid(self) -> np.ndarray:
        return self.alpha_q.data.reshape(-1, *self.grid_hw)

    def alpha_r_grid(self) -> np.ndarray | None:
        return None if self.alpha_r is None else self.alpha_r.data.reshape(-1, *self.grid_hw)


# -- building blocks ------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nc.matmul(x, w) + b


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, t, d = x.shape
    return x.reshape(n, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(
    p: dict[str, Tensor], prefix: str, xq: Tensor, xkv: Tensor, key_mask: np.ndarray | None, n_heads: int
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention. Returns the projected output and weights (N, H, Tq, Tk)."""
    n, tq, d = xq.shape
    q = _split_heads(linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    k = _split_heads(linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), n_heads)
    v = _split_heads(linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), n_heads)
    scores = nc.matmul(q, nc.swap_last(k)) * (1.0 / math.sqrt(d // n_heads))
    if key_mask is None:
        weights = nc.softmax(scores, axis=-1)
    else:
        weights = nc.masked_softmax(scores, key_mask[:, None, None, :], axis=-1)
    out = nc.matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, tq, d)
    return linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"]), weights


def _ln(p, prefix, x, eps):
    return nc.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)


def _ffn(p, prefix, x):
    hidden = nc.gelu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


# -- model operations ----------------------------------------------------------------------


def encode_language(cfg: ModelConfig, p: dict[str, Tensor], ids: np.ndarray) -> Tensor:
    """Pooled [CLS] representation for token sequences ``ids`` (..., T) -> (..., d_model)."""
    ids = np.asarray(ids, dtype=np.int64)
    lead, t = ids.shape[:-1], ids.shape[-1]
    if t > cfg.max_seq_len:
        raise InputError(f"sequence length {t} exceeds max_seq_len={cfg.max_seq_len}")
    flat = ids.reshape(-1, t)
    mask = flat != PAD
    x = nc.embedding(p["lang.tok_emb"], flat) + p["lang.pos_emb"][:t]
    for i in range(cfg.n_enc_layers):
        pre = f"lang.enc{i}"
        h1 = _ln(p, f"{pre}.ln1", x, cfg.ln_eps)
        a, _ = multi_head_attention(p, f"{pre}.attn", h1, h1, mask, cfg.n_heads)
        x = x + a
        x = x + _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln2", x, cfg.ln_eps))
    cls = _ln(p, "lang.ln_f", x[:, 0, :], cfg.ln_eps)
    pooled = nc.tanh(linear(cls, p["lang.pool.w"], p["lang.pool.b"]))
    return pooled.reshape(*lead, cfg.d_model)


def image_memory(cfg: ModelConfig, p: dict[str, Tensor], dec: str, features: np.ndarray | Tensor) -> Tensor:
    """Project (N, h*w, d_visual) features to decoder keys/values with geometric embedding added."""
    feats = nc.as_tensor(features)
    if feats.shape[-2:] != (cfg.n_cells, cfg.d_visual):
        raise nc.DimensionError(
            f"grid features {feats.shape[-2:]} do not match config ({cfg.n_cells} cells x {cfg.d_visual})"
        )
    mem = linear(feats, p[f"{dec}.img_in.w"], p[f"{dec}.img_in.b"]) + p["geo.emb"]
    return _ln(p, f"{dec}.mem_ln", mem, cfg.ln_eps)


def cross_attention_decode(
    cfg: ModelConfig, p: dict[str, Tensor], dec: str, query_ids: np.ndarray, features
) -> tuple[Tensor, Tensor]:
    """Run decoder ``dec`` ('vq' or 'vr').

    Queries are a learned [CLS] vector followed by the word embeddings of
    ``query_ids`` (N, T). Returns ``alpha`` (N, h*w), the head-averaged final-layer
    cross-attention of the [CLS] query, and the decoded sequence (N, T+1, d).
    """
    query_ids = np.asarray(query_ids, dtype=np.int64)
    n, t = query_ids.shape
    if t + 1 > cfg.max_seq_len + 1:
        raise InputError(f"query length {t} exceeds max_seq_len={cfg.max_seq_len}")
    words = nc.embedding(p["lang.tok_emb"], query_ids)
    cls = nc.add(Tensor(np.zeros((n, 1, cfg.d_model))), p[f"{dec}.cls"])
    x = nc.concat([cls, words], axis=1) + p[f"{dec}.pos_emb"][: t + 1]
    self_mask = np.concatenate([np.ones((n, 1), dtype=bool), query_ids != PAD], axis=1)
    mem = image_memory(cfg, p, dec, features)
    weights = None
    for i in range(cfg.n_dec_layers):
        pre = f"{dec}.dec{i}"
        h1 = _ln(p, f"{pre}.ln1", x, cfg.ln_eps)
        a, _ = multi_head_attention(p, f"{pre}.self", h1, h1, self_mask, cfg.n_heads)
        x = x + a
        c, weights = multi_head_attention(p, f"{pre}.cross", _ln(p, f"{pre}.ln2", x, cfg.ln_eps), mem, None,
                                          cfg.n_heads)
        x = x + c
        x = x + _ffn(p, f"{pre}.ffn", _ln(p, f"{pre}.ln3", x, cfg.ln_eps))
    alpha = weights[:, :, 0, :].mean(axis=1)
    return alpha, x


def attended_representation(alpha: Tensor, features, w: Tensor, b: Tensor) -> Tensor:
    """``Linear(sum_cells alpha * F)``: (N, P) weights over (N, P, d_visual) features -> (N, d_model)."""
    feats = nc.as_tensor(features)
    n, cells = alpha.shape
    pooled = nc.matmul(alpha.reshape(n, 1, cells), feats).reshape(n, feats.shape[-1])
    return linear(pooled, w, b)


def fuse_and_score(x_cls: Tensor, v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Scalar logit ``score(x_cls * v)`` per candidate: (B, 4, d) x (B, d) -> (B, 4)."""
    fused = x_cls * v.reshape(v.shape[0], 1, v.shape[1])
    return nc.matmul(fused, w).reshape(x_cls.shape[0], x_cls.shape[1]) + b


class VQAModel:
    """Parameters plus forward passes for the two-branch architecture."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        missing = set(param_shapes(config)) ^ set(self.params)
        if missing:
            raise ConfigMismatchError(f"parameter names disagree with config: {sorted(missing)[:5]}")

    def partition(self, name: str) -> dict[str, Tensor]:
        if name not in PARTITIONS:
            raise ValueError(f"unknown partition {name!r}")
        return {k: v for k, v in self.params.items() if partition_of(k) == name}

    def batch(self, samples: Sequence[Sample], need_rationale: bool = False) -> Batch:
        return Batch.from_samples(samples, self.config.max_seq_len, need_rationale)

    def _branch(self, dec: str, query_ids, features, x_cls):
        p = self.params
        alpha, _ = cross_attention_decode(self.config, p, dec, query_ids, features)
        v = attended_representation(alpha, features, p[f"{dec}.attend.w"], p[f"{dec}.attend.b"])
        logits = fuse_and_score(x_cls, v, p[f"{dec}.score.w"], p[f"{dec}.score.b"])
        return alpha, v, logits, nc.softmax(logits, axis=-1)

    def forward(self, batch: Batch | Sequence[Sample], mode: str = "test") -> ForwardOutput:
        """Answer distributions for a batch. ``mode='train'`` also runs the reasoning branch."""
        if mode not in ("train", "test"):
            raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
        if not isinstance(batch, Batch):
            batch = self.batch(batch, need_rationale=mode == "train")
        if batch.grid_hw != (self.config.grid_h, self.config.grid_w):
            raise nc.DimensionError(f"batch grid {batch.grid_hw} does not match model grid "
                                    f"{(self.config.grid_h, self.config.grid_w)}")
        if mode == "train" and batch.rationale_ids is None:
            raise InputError("train mode needs rationales")
        x_cls = encode_language(self.config, self.params, batch.lang_ids)
        feats = Tensor(batch.features)
        alpha_q, v_q, logits_q, y_q = self._branch("vq", batch.question_ids, feats, x_cls)
        out = ForwardOutput(x_cls, alpha_q, v_q, logits_q, y_q, batch.grid_hw)
        if mode == "train":
            out.alpha_r, out.v_r, out.logits_r, out.y_r = self._branch("vr", batch.rationale_ids, feats, x_cls)
        return out

    def reasoning_attention(self, batch: Batch) -> Tensor:
        """alpha^R alone, for diagnostics on rationale-bearing splits."""
        if batch.rationale_ids is None:
            raise InputError("batch has no rationales")
        alpha, _ = cross_attention_decode(self.config, self.params, "vr", batch.rationale_ids,
                                          Tensor(batch.features))
        return alpha

    # -- persistence --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "model", "model_config": self.config.to_json(), **(extra_meta or {})}
        container.write(path, self.state_arrays(), meta)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "VQAModel":
        shapes = param_shapes(config)
        params = {}
        for name, shape in shapes.items():
            if name not in arrays:
                raise ConfigMismatchError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != shape:
                raise ConfigMismatchError(f"{name}: checkpoint shape {arrays[name].shape} != config shape {shape}")
            params[name] = Tensor(arrays[name].copy(), requires_grad=True, name=name)
        return cls(config, params)

    @classmethod
    def load(cls, path) -> "VQAModel":
        arrays, meta = container.read(path)
        config = ModelConfig(**meta["model_config"])
        return cls.from_arrays(config, {k: v for k, v in arrays.items() if "/" not in k})
