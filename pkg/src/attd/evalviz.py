"""Accuracy and grounding metrics, the object-masking ablation, and heatmap export."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .gridvqa import Dataset, Sample
from .model import ConfigMismatchError, VQAModel

UPSCALE = 32
RED = (255, 0, 0)


@dataclass
class EvalReport:
    accuracy: float
    mean_attn_on_target: float
    mean_kl_q_r: float | None
    n_samples: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AblationReport:
    accuracy_clean: float
    accuracy_masked: float
    drop: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def check_compatible(model: VQAModel, dataset: Dataset) -> None:
    cfg = model.config
    if cfg.vocab_size != len(dataset.vocab):
        raise ConfigMismatchError(f"model vocab {cfg.vocab_size} != dataset vocab {len(dataset.vocab)}")
    dc = dataset.config
    if (cfg.grid_h, cfg.grid_w, cfg.d_visual) != (dc.h, dc.w, dc.d_visual):
        raise ConfigMismatchError(
            f"model grid {cfg.grid_h}x{cfg.grid_w}x{cfg.d_visual} != dataset grid {dc.h}x{dc.w}x{dc.d_visual}"
        )


def predict(model: VQAModel, samples: Sequence[Sample], batch_size: int = 256):
    """Test-mode pass. Returns (y_q (N, 4), alpha_q (N, h*w), alpha_r (N, h*w) or None)."""
    ys, aq, ar = [], [], []
    with_r = all(s.rationale_ids for s in samples)
    with nc.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = model.batch(chunk, need_rationale=with_r)
            out = model.forward(batch, mode="test")
            ys.append(out.y_q.data)
            aq.append(out.alpha_q.data)
            if with_r:
                ar.append(model.reasoning_attention(batch).data)
    return np.concatenate(ys), np.concatenate(aq), (np.concatenate(ar) if with_r else None)


def attention_on_target(alpha: np.ndarray, samples: Sequence[Sample], grid_w: int) -> np.ndarray:
    """Per-sample attention mass inside ``target_cells``."""
    out = np.zeros(len(samples))
    for i, s in enumerate(samples):
        for r, c in s.target_cells:
            out[i] += alpha[i, r * grid_w + c]
    return out


def evaluate(model: VQAModel, samples: Sequence[Sample], batch_size: int = 256) -> EvalReport:
    """Question-branch accuracy (argmax, lowest index wins ties) and attention diagnostics."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    y, alpha_q, alpha_r = predict(model, samples, batch_size)
    correct = np.argmax(y, axis=1) == np.array([s.correct_index for s in samples])
    on_target = attention_on_target(alpha_q, samples, model.config.grid_w)
    kl = None
    if alpha_r is not None:
        kl = float(nc.forward_kl(nc.Tensor(alpha_q), nc.Tensor(alpha_r)).data.mean())
    return EvalReport(
        accuracy=float(correct.mean()),
        mean_attn_on_target=float(np.clip(on_target, 0.0, 1.0).mean()),
        mean_kl_q_r=kl,
        n_samples=len(samples),
    )


def mask_referenced_objects(sample: Sample) -> Sample:
    """Copy of ``sample`` with the features of its target cells zeroed."""
    grid = sample.grid.copy()
    for r, c in sample.target_cells:
        grid[r, c, :] = 0.0
    return dataclasses.replace(sample, grid=grid)


def ablation(model: VQAModel, samples: Sequence[Sample], batch_size: int = 256) -> AblationReport:
    clean = evaluate(model, samples, batch_size).accuracy
    masked = evaluate(model, [mask_referenced_objects(s) for s in samples], batch_size).accuracy
    return AblationReport(clean, masked, clean - masked)


# -- heatmaps --------------------------------------------------------------------


def heatmap_pixels(alpha: np.ndarray) -> np.ndarray:
    """16-bit grey levels ``round(65535 * alpha / max alpha)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    peak = alpha.max()
    if peak <= 0:
        return np.zeros(alpha.shape, dtype=np.uint16)
    return np.rint(65535.0 * alpha / peak).astype(np.uint16)


def write_pgm16(pixels: np.ndarray, path) -> None:
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != "P5" or maxval != 65535:
        raise ValueError(f"{path}: expected a 16-bit binary graymap, got {magic} maxval {maxval}")
    body = raw[pos + 1 :]
    return np.frombuffer(body, dtype=">u2", count=w * h).reshape(h, w).astype(np.uint16)


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def heatmap_rgb(alpha: np.ndarray, target_cells: Sequence[tuple[int, int]], scale: int = UPSCALE) -> np.ndarray:
    """Grey heatmap upscaled nearest-neighbour, with a red one-pixel outline around each target cell."""
    grey = np.rint(heatmap_pixels(alpha) / 257.0).astype(np.uint8)
    big = np.kron(grey, np.ones((scale, scale), dtype=np.uint8))
    rgb = np.repeat(big[:, :, None], 3, axis=2)
    for r, c in target_cells:
        top, left = r * scale, c * scale
        block = rgb[top : top + scale, left : left + scale]
        block[0, :] = RED
        block[-1, :] = RED
        block[:, 0] = RED
        block[:, -1] = RED
    return rgb


def export_heatmap(alpha: np.ndarray, target_cells: Sequence[tuple[int, int]], path) -> tuple[Path, Path]:
    """Write ``<path>.pgm`` (16-bit, h x w) and ``<path>.ppm`` (colour, x32). Returns both paths."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2 or np.any(alpha < 0):
        raise ValueError("attention map must be a nonnegative 2D array")
    stem = Path(path)
    if stem.suffix in (".pgm", ".ppm"):
        stem = stem.with_suffix("")
    pgm, ppm = stem.with_suffix(".pgm"), stem.with_suffix(".ppm")
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        write_pgm16(heatmap_pixels(alpha), pgm)
        write_ppm(heatmap_rgb(alpha, target_cells), ppm)
    except OSError as exc:
        raise OSError(f"cannot write heatmap {stem}: {exc}") from exc
    return pgm, ppm


def compare_checkpoints(
    baseline: VQAModel,
    distilled: VQAModel,
    samples: Sequence[Sample],
    out_dir=None,
    n_heatmaps: int = 8,
) -> dict:
    """Side-by-side metrics and paired question-attention heatmaps for two models."""
    if baseline.config != distilled.config:
        raise ConfigMismatchError("baseline and distilled checkpoints have different model configs")
    summary = {}
    alphas = {}
    for label, model in (("baseline", baseline), ("distilled", distilled)):
        report = evaluate(model, samples)
        abl = ablation(model, samples)
        summary[label] = {
            "accuracy": report.accuracy,
            "mean_attn_on_target": report.mean_attn_on_target,
            "mean_kl_q_r": report.mean_kl_q_r,
            "ablation_drop": abl.drop,
            "accuracy_masked": abl.accuracy_masked,
        }
        alphas[label] = predict(model, samples[:n_heatmaps])[1]
    written = []
    if out_dir is not None:
        out = Path(out_dir)
        h, w = baseline.config.grid_h, baseline.config.grid_w
        for i, s in enumerate(samples[:n_heatmaps]):
            for label in ("baseline", "distilled"):
                written.extend(export_heatmap(alphas[label][i].reshape(h, w), s.target_cells,
                                              out / f"sample{s.id:06d}_{label}"))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    summary["heatmaps"] = [str(p) for p in written]
    return summary
