"""Two-stage training: joint answer training, then attention distillation with a frozen reasoning decoder."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from . import numcore as nc
from .evalviz import check_compatible, evaluate
from .gridvqa import Dataset, Sample
from .losses import stage1_loss, stage2_loss
from .model import ConfigMismatchError, ModelConfig, VQAModel

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "train_state"


class DivergenceError(RuntimeError):
    """Loss became non-finite."""


@dataclass
class TrainConfig:
    stage1_epochs: int = 11
    stage2_epochs: int = 5
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    stage2_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    momentum: float = 0.9
    clip_norm: float = 5.0
    kl_weight: float = 1.0
    stage2_train_language: bool = True
    seed: int = 1
    checkpoint_dir: str | None = None
    log_every: int = 25
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out


# -- optimizers -------------------------------------------------------------------


def clip_grad_norm(params: Sequence[nc.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


class Adam:
    def __init__(self, names: Sequence[str], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.names = list(names)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, nc.Tensor]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in self.names:
            p = params[name]
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"adam.m/{k}": v for k, v in self.m.items()}
        arrays.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return arrays, {"kind": "adam", "t": self.t, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                        "names": self.names}

    def load(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.t = meta["t"]
        self.m = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}


class SGD:
    def __init__(self, names: Sequence[str], lr=1e-2, momentum=0.9):
        self.names = list(names)
        self.lr, self.momentum = lr, momentum
        self.t = 0
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, nc.Tensor]) -> None:
        self.t += 1
        for name in self.names:
            p = params[name]
            b = self.buf.get(name)
            if b is None:
                b = self.buf[name] = np.zeros_like(p.grad)
            b *= self.momentum
            b += p.grad
            p.data -= self.lr * b

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        meta = {"kind": "sgd", "t": self.t, "lr": self.lr, "momentum": self.momentum, "names": self.names}
        return {f"sgd.buf/{k}": v for k, v in self.buf.items()}, meta

    def load(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.t = meta["t"]
        self.buf = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("sgd.buf/")}


def make_optimizer(config: TrainConfig, names: Sequence[str], stage: int):
    lr = config.lr if stage == 1 else config.stage2_lr
    if config.optimizer == "adam":
        return Adam(names, lr, config.betas, config.adam_eps)
    return SGD(names, lr, config.momentum)


# -- state ------------------------------------------------------------------------------


@dataclass
class TrainState:
    model: VQAModel
    optimizer: Adam | SGD
    stage: int
    epoch: int
    step: int
    rng: np.random.Generator
    frozen: list[str] = field(default_factory=list)
    best_val: float = -1.0

    @property
    def params(self) -> dict[str, nc.Tensor]:
        return self.model.params

    def trainable(self) -> list[str]:
        return [k for k in self.model.params if k not in set(self.frozen)]


def model_config_for(dataset: Dataset, overrides: dict | None = None) -> ModelConfig:
    base = {
        "vocab_size": len(dataset.vocab),
        "grid_h": dataset.config.h,
        "grid_w": dataset.config.w,
        "d_visual": dataset.config.d_visual,
    }
    base.update(overrides or {})
    return ModelConfig(**base)


def init_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    model = VQAModel(model_config_for(dataset, config.model), seed=config.seed)
    names = list(model.params)
    return TrainState(model, make_optimizer(config, names, 1), stage=1, epoch=0, step=0,
                      rng=np.random.default_rng([config.seed, 1]))


def apply_freezing(state: TrainState, frozen: Sequence[str]) -> None:
    state.frozen = sorted(frozen)
    frozen_set = set(frozen)
    for name, p in state.model.params.items():
        p.set_requires_grad(name not in frozen_set)


def stage2_frozen_names(model: VQAModel, train_language: bool) -> list[str]:
    """Everything outside the question decoder; the language stream stays trainable when requested."""
    keep = {"vq", "lang"} if train_language else {"vq"}
    return [k for k in model.params if k.split(".", 1)[0] not in keep]


def save_checkpoint(state: TrainState, path, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    opt_arrays, opt_meta = state.optimizer.state()
    arrays = dict(state.model.state_arrays())
    arrays.update(opt_arrays)
    meta = {
        "kind": CHECKPOINT_KIND,
        "model_config": state.model.config.to_json(),
        "stage": state.stage,
        "epoch": state.epoch,
        "step": state.step,
        "frozen": list(state.frozen),
        "best_val": state.best_val,
        "optimizer": opt_meta,
        "rng": state.rng.bit_generator.state,
    }
    if config is not None:
        meta["train_config"] = config.to_json()
    meta.update(extra or {})
    container.write(path, arrays, meta)


def load_checkpoint(path) -> TrainState:
    arrays, meta = container.read(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ConfigMismatchError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
    model = VQAModel.from_arrays(ModelConfig(**meta["model_config"]),
                                 {k: v for k, v in arrays.items() if "/" not in k})
    opt_meta = meta["optimizer"]
    if opt_meta["kind"] == "adam":
        opt = Adam(opt_meta["names"], opt_meta["lr"], opt_meta["betas"], opt_meta["eps"])
    else:
        opt = SGD(opt_meta["names"], opt_meta["lr"], opt_meta["momentum"])
    opt.load(arrays, opt_meta)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(model, opt, meta["stage"], meta["epoch"], meta["step"], rng, best_val=meta["best_val"])
    apply_freezing(state, meta["frozen"])
    return state


def load_model(path) -> VQAModel:
    """Model parameters from either a training checkpoint or a bare model container."""
    arrays, meta = container.read(path)
    if "model_config" not in meta:
        raise ConfigMismatchError(f"{path}: container has no model config")
    return VQAModel.from_arrays(ModelConfig(**meta["model_config"]), {k: v for k, v in arrays.items() if "/" not in k})


# -- loop -----------------------------------------------------------------------------------


class MetricsLog:
    """Append-only JSON-lines writer; keeps records in memory as well."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _check_finite(value: float, stage: int, epoch: int, batch_no: int, ids: Sequence[int]) -> None:
    if not math.isfinite(value):
        raise DivergenceError(
            f"non-finite loss at stage {stage} epoch {epoch} batch {batch_no} (sample ids {list(ids)[:8]}...)"
        )


def train_step(state: TrainState, batch_samples: Sequence[Sample], config: TrainConfig, batch_no: int = 0) -> dict:
    """One optimizer step for the state's current stage; returns the loss values."""
    model = state.model
    if state.stage == 2:
        vr = [k for k in model.params if k.startswith("vr.")]
        if not set(vr) <= set(state.frozen) or any(model.params[k].requires_grad for k in vr):
            raise nc.ContractError("stage-2 step on a state whose reasoning decoder is not frozen")
    batch = model.batch(batch_samples, need_rationale=True)
    trainable = [model.params[k] for k in state.trainable()]
    nc.zero_grad(model.params.values())
    try:
        out = model.forward(batch, mode="train")
        if state.stage == 1:
            report = stage1_loss(out, batch.targets)
        else:
            report = stage2_loss(out, batch.targets, config.kl_weight)
        value = report.total.item()
    except FloatingPointError:
        value = math.nan
    _check_finite(value, state.stage, state.epoch + 1, batch_no, batch.ids)
    report.total.backward()
    clip_grad_norm(trainable, config.clip_norm)
    state.optimizer.step(model.params)
    state.step += 1
    return report.as_dict()


def _run_stage(
    state: TrainState,
    dataset: Dataset,
    config: TrainConfig,
    n_epochs: int,
    metrics: MetricsLog,
    ckpt_dir: Path | None,
) -> TrainState:
    check_compatible(state.model, dataset)
    train = dataset.train
    while state.epoch < n_epochs:
        order = state.rng.permutation(len(train))
        sums: dict[str, float] = {}
        n_batches = 0
        epoch = state.epoch + 1
        for batch_no, start in enumerate(range(0, len(train), config.batch_size)):
            chunk = [train[i] for i in order[start : start + config.batch_size]]
            losses = train_step(state, chunk, config, batch_no)
            n_batches += 1
            for key in ("l_q", "l_r", "kl", "total"):
                if key in losses:
                    sums[key] = sums.get(key, 0.0) + losses[key]
            if config.log_every and state.step % config.log_every == 0:
                rec = {"stage": state.stage, "epoch": epoch, "step": state.step, "l_q": losses["l_q"]}
                for key in ("l_r", "kl"):
                    if key in losses:
                        rec[key] = losses[key]
                metrics.write(rec)
        state.epoch = epoch
        report = evaluate(state.model, dataset.val)
        rec = {"stage": state.stage, "epoch": epoch, "step": state.step, "summary": True,
               "val_acc": report.accuracy, "attn_on_target": report.mean_attn_on_target}
        if report.mean_kl_q_r is not None:
            rec["val_kl"] = report.mean_kl_q_r
        for key, total in sums.items():
            rec[key if key != "total" else "loss"] = total / n_batches
        metrics.write(rec)
        log.info("stage %d epoch %d: %s", state.stage, epoch, rec)
        if ckpt_dir is not None:
            save_checkpoint(state, ckpt_dir / f"stage{state.stage}_epoch{epoch:02d}.ckpt", config)
        if report.accuracy > state.best_val:
            state.best_val = report.accuracy
            if ckpt_dir is not None:
                save_checkpoint(state, ckpt_dir / f"stage{state.stage}_best.ckpt", config)
    if ckpt_dir is not None:
        save_checkpoint(state, ckpt_dir / f"stage{state.stage}.ckpt", config)
    return state


def _ckpt_dir(config: TrainConfig) -> Path | None:
    if config.checkpoint_dir is None:
        return None
    path = Path(config.checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_stage1(dataset: Dataset, config: TrainConfig, state: TrainState | None = None,
                 metrics: MetricsLog | None = None) -> tuple[TrainState, MetricsLog]:
    """Joint training of both branches on the sum of the two answer losses."""
    if state is None:
        state = init_state(dataset, config)
    elif state.stage != 1:
        raise nc.ContractError("stage-1 training needs a fresh or stage-1 state")
    metrics = metrics or MetricsLog()
    return _run_stage(state, dataset, config, config.stage1_epochs, metrics, _ckpt_dir(config)), metrics


def begin_stage2(state: TrainState, config: TrainConfig) -> TrainState:
    """Freeze everything but the question decoder (and optionally the language stream); fresh optimizer."""
    if state.stage == 2:
        return state
    frozen = stage2_frozen_names(state.model, config.stage2_train_language)
    apply_freezing(state, frozen)
    state.stage, state.epoch, state.best_val = 2, 0, -1.0
    state.optimizer = make_optimizer(config, state.trainable(), 2)
    return state


def train_stage2(dataset: Dataset, config: TrainConfig, state: TrainState,
                 metrics: MetricsLog | None = None) -> tuple[TrainState, MetricsLog]:
    """Finetune the question decoder on answer loss plus KL(alpha_q || alpha_r)."""
    begin_stage2(state, config)
    metrics = metrics or MetricsLog()
    return _run_stage(state, dataset, config, config.stage2_epochs, metrics, _ckpt_dir(config)), metrics


def train_both(dataset: Dataset, config: TrainConfig, metrics: MetricsLog | None = None):
    """Stage 1 then stage 2; returns (stage-1 model snapshot path or None, final state, metrics)."""
    state, metrics = train_stage1(dataset, config, metrics=metrics)
    stage1_arrays = {k: v.copy() for k, v in state.model.state_arrays().items()}
    state, metrics = train_stage2(dataset, config, state, metrics)
    return stage1_arrays, state, metrics
