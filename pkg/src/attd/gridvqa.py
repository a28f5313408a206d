"""GridVQA: synthetic multiple-choice VQA over grids of colored shapes.

Each scene places 2-5 objects on an ``h x w`` grid. A cell's feature vector is
``code(shape) + code(color) + noise``; empty cells carry noise only. Questions
refer to one object by a single attribute (or two, for the row template) and
never mention its location, while the rationale names the object's colour,
shape, row and column.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container

FORMAT_VERSION = 1

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow")
MAX_GRID = 16
SPECIALS = ("[CLS]", "[SEP]", "[PAD]")
CLS, SEP, PAD = 0, 1, 2
WORDS = ("what", "color", "is", "the", "shape", "object", "which", "row", "in", "at", "col")

TEMPLATES = (
    "what color is the {shape}",
    "what shape is the {color} object",
    "which row is the {color} {shape} in",
)
RATIONALE = "the {color} {shape} is at row {row} col {col}"
COMPONENT_FILES = ("manifest.json", "vocab.json", "codes.bin", "train.jsonl", "val.jsonl", "features.bin")


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MissingComponentError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetFormatError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class AmbiguousSceneError(ValueError):
    """The scene has no object that the template can refer to uniquely."""


class Vocabulary:
    """Fixed token/id bijection shared by every GridVQA dataset."""

    def __init__(self, tokens: Sequence[str] | None = None):
        if tokens is None:
            tokens = [*SPECIALS, *WORDS, *SHAPES, *COLORS, *(str(i) for i in range(MAX_GRID))]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if tuple(self.tokens[:3]) != SPECIALS:
            raise ValueError("special tokens must occupy ids 0-2")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.index[w] for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def to_json(self) -> dict[str, int]:
        return dict(self.index)

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> "Vocabulary":
        tokens = sorted(mapping, key=mapping.__getitem__)
        if [mapping[t] for t in tokens] != list(range(len(tokens))):
            raise DatasetFormatError("vocabulary ids are not a contiguous range from 0")
        return cls(tokens)


@dataclass
class SceneSpec:
    objects: list[tuple[int, int, str, str]]
    h: int = 8
    w: int = 8
    noise_sigma: float = 0.1

    def __post_init__(self):
        self.objects = [(int(r), int(c), str(s), str(k)) for r, c, s, k in self.objects]
        cells = [(r, c) for r, c, _, _ in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("object cells must be distinct")
        for r, c, s, k in self.objects:
            if not (0 <= r < self.h and 0 <= c < self.w):
                raise ValueError(f"object at ({r}, {c}) lies outside a {self.h}x{self.w} grid")
            if s not in SHAPES or k not in COLORS:
                raise ValueError(f"unknown shape/color {s}/{k}")


@dataclass
class GridConfig:
    h: int = 8
    w: int = 8
    d_visual: int = 32
    noise_sigma: float = 0.1
    min_objects: int = 2
    max_objects: int = 5

    def __post_init__(self):
        if not (4 <= self.h <= MAX_GRID and 1 <= self.w <= MAX_GRID):
            raise ValueError(f"grid must be 4..{MAX_GRID} rows and 1..{MAX_GRID} cols, got {self.h}x{self.w}")
        if not (2 <= self.min_objects <= self.max_objects <= 5):
            raise ValueError("object counts must satisfy 2 <= min <= max <= 5")
        if self.max_objects > self.h * self.w:
            raise ValueError("grid too small for the object count")

    def to_json(self) -> dict:
        return {
            "h": self.h,
            "w": self.w,
            "d_visual": self.d_visual,
            "noise_sigma": self.noise_sigma,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
        }


@dataclass
class Sample:
    id: int
    scene: SceneSpec
    grid: np.ndarray
    question_ids: list[int]
    candidate_ids: list[list[int]]
    correct_index: int
    rationale_ids: list[int] | None
    target_cells: list[tuple[int, int]]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "scene": {"objects": [list(o) for o in self.scene.objects], "h": self.scene.h, "w": self.scene.w},
            "question_ids": list(self.question_ids),
            "candidate_ids": [list(c) for c in self.candidate_ids],
            "correct_index": self.correct_index,
            "rationale_ids": None if self.rationale_ids is None else list(self.rationale_ids),
            "target_cells": [list(c) for c in self.target_cells],
        }


@dataclass
class Dataset:
    config: GridConfig
    seed: int
    vocab: Vocabulary
    codes: dict[str, np.ndarray]
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.val


# -- generation ------------------------------------------------------------


def make_codes(d_visual: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random unit vectors, one per shape and per colour."""
    codes = {}
    for name in [f"shape/{s}" for s in SHAPES] + [f"color/{c}" for c in COLORS]:
        v = rng.normal(size=d_visual)
        codes[name] = v / np.linalg.norm(v)
    return codes


def render_features(scene: SceneSpec, codes: dict[str, np.ndarray], seed) -> np.ndarray:
    d = len(codes[f"shape/{SHAPES[0]}"])
    if scene.noise_sigma > 0:
        grid = np.random.default_rng(seed).normal(0.0, scene.noise_sigma, size=(scene.h, scene.w, d))
    else:
        grid = np.zeros((scene.h, scene.w, d))
    for r, c, s, k in scene.objects:
        grid[r, c] += codes[f"shape/{s}"] + codes[f"color/{k}"]
    return grid


def random_scene(rng: np.random.Generator, config: GridConfig) -> SceneSpec:
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(config.h * config.w, size=n, replace=False)
    objects = [
        (int(cell // config.w), int(cell % config.w), SHAPES[rng.integers(4)], COLORS[rng.integers(4)])
        for cell in cells
    ]
    return SceneSpec(objects, config.h, config.w, config.noise_sigma)


def _referable(scene: SceneSpec, template_id: int) -> list[tuple[int, int, str, str]]:
    if template_id == 0:
        key = lambda o: o[2]  # noqa: E731
    elif template_id == 1:
        key = lambda o: o[3]  # noqa: E731
    elif template_id == 2:
        key = lambda o: (o[2], o[3])  # noqa: E731
    else:
        raise ValueError(f"unknown template id {template_id}")
    keys = [key(o) for o in scene.objects]
    return [o for o in scene.objects if keys.count(key(o)) == 1]


def generate_sample(
    scene: SceneSpec,
    template_id: int,
    rng: np.random.Generator,
    *,
    codes: dict[str, np.ndarray],
    vocab: Vocabulary | None = None,
    sample_id: int = 0,
    config: GridConfig | None = None,
    max_retries: int = 1000,
) -> Sample:
    """Build one sample; draws a fresh scene from ``rng`` while ``scene`` is ambiguous."""
    vocab = vocab or Vocabulary()
    config = config or GridConfig(h=scene.h, w=scene.w, d_visual=len(next(iter(codes.values()))),
                                  noise_sigma=scene.noise_sigma)
    for _ in range(max_retries):
        options = _referable(scene, template_id)
        if options:
            break
        scene = random_scene(rng, config)
    else:
        raise AmbiguousSceneError(f"no unambiguous scene for template {template_id} after {max_retries} draws")

    row, col, shape, color = options[int(rng.integers(len(options)))]
    question = TEMPLATES[template_id].format(shape=shape, color=color)
    if template_id == 0:
        answer, pool = color, [c for c in COLORS if c != color]
    elif template_id == 1:
        answer, pool = shape, [s for s in SHAPES if s != shape]
    else:
        answer, pool = str(row), [str(r) for r in range(scene.h) if r != row]
    distractors = [pool[i] for i in rng.choice(len(pool), size=3, replace=False)]
    correct = int(rng.integers(4))
    answers = distractors[:correct] + [answer] + distractors[correct:]
    rationale = RATIONALE.format(color=color, shape=shape, row=row, col=col)
    feature_seed = int(rng.integers(2**63))
    return Sample(
        id=sample_id,
        scene=scene,
        grid=render_features(scene, codes, feature_seed),
        question_ids=vocab.encode(question),
        candidate_ids=[vocab.encode(a) for a in answers],
        correct_index=correct,
        rationale_ids=vocab.encode(rationale),
        target_cells=[(row, col)],
    )


def sample_for_id(sample_id: int, seed: int, config: GridConfig, codes, vocab: Vocabulary) -> Sample:
    """Deterministic sample from the sub-seed ``(seed, sample_id)``."""
    rng = np.random.default_rng([seed, sample_id])
    template_id = int(rng.integers(len(TEMPLATES)))
    scene = random_scene(rng, config)
    return generate_sample(scene, template_id, rng, codes=codes, vocab=vocab, sample_id=sample_id, config=config)


def build_dataset(n_train: int, n_val: int, config: GridConfig | None = None, seed: int = 1) -> Dataset:
    if n_train < 1 or n_val < 1:
        raise ValueError("split sizes must be at least 1")
    config = config or GridConfig()
    vocab = Vocabulary()
    codes = make_codes(config.d_visual, np.random.default_rng([seed, 2**32 - 1]))
    samples = [sample_for_id(i, seed, config, codes, vocab) for i in range(n_train + n_val)]
    return Dataset(config, seed, vocab, codes, samples[:n_train], samples[n_train:])


def generate_dataset(out_dir, n_train: int, n_val: int, config: GridConfig | None = None, seed: int = 1) -> Dataset:
    dataset = build_dataset(n_train, n_val, config, seed)
    write_dataset(dataset, out_dir)
    return dataset


# -- file I/O ------------------------------------------------------------------


def _jsonl(samples: Sequence[Sample]) -> bytes:
    lines = [json.dumps(s.to_record(), sort_keys=True, separators=(",", ":")) for s in samples]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    blobs = {
        "vocab.json": (json.dumps(dataset.vocab.to_json(), indent=0, sort_keys=True) + "\n").encode("utf-8"),
        "codes.bin": container.encode(dataset.codes, {"kind": "gridvqa-codes"}),
        "train.jsonl": _jsonl(dataset.train),
        "val.jsonl": _jsonl(dataset.val),
        "features.bin": b"".join(
            np.ascontiguousarray(s.grid, dtype="<f8").tobytes() for s in dataset.train + dataset.val
        ),
    }
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": dataset.seed,
        "config": dataset.config.to_json(),
        "counts": {"train": len(dataset.train), "val": len(dataset.val)},
        "crc32": {name: zlib.crc32(blob) for name, blob in sorted(blobs.items())},
    }
    blobs["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, blob in blobs.items():
            (out / name).write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc


def manifest_hash(path) -> str:
    """CRC32 of the manifest file, as hex; identifies a dataset directory."""
    return f"{zlib.crc32((Path(path) / 'manifest.json').read_bytes()):08x}"


def load_dataset(path) -> Dataset:
    root = Path(path)
    for name in COMPONENT_FILES:
        if not (root / name).is_file():
            raise MissingComponentError(f"dataset component missing: {root / name}")
    blobs = {name: (root / name).read_bytes() for name in COMPONENT_FILES}
    try:
        manifest = json.loads(blobs["manifest.json"])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{root / 'manifest.json'}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"{root}: dataset format version {manifest.get('format_version')}, expected {FORMAT_VERSION}"
        )
    try:
        codes, _ = container.decode(blobs["codes.bin"])
    except container.TruncatedError as exc:
        raise TruncatedPayloadError(f"{root / 'codes.bin'}: {exc}") from exc
    except container.ContainerError as exc:
        raise DatasetFormatError(f"{root / 'codes.bin'}: {exc}") from exc

    config = GridConfig(**manifest["config"])
    counts = manifest["counts"]
    n_total = counts["train"] + counts["val"]
    record_bytes = config.h * config.w * config.d_visual * 8
    if len(blobs["features.bin"]) != n_total * record_bytes:
        raise TruncatedPayloadError(
            f"{root / 'features.bin'}: {len(blobs['features.bin'])} bytes, expected {n_total * record_bytes}"
        )
    for name, expected in manifest["crc32"].items():
        if zlib.crc32(blobs[name]) != expected:
            raise ChecksumError(f"{root / name}: CRC32 mismatch")

    vocab = Vocabulary.from_json(json.loads(blobs["vocab.json"]))
    feats = np.frombuffer(blobs["features.bin"], dtype="<f8").astype(np.float64)
    feats = feats.reshape(n_total, config.h, config.w, config.d_visual)

    splits = {}
    offset = 0
    for split in ("train", "val"):
        lines = blobs[f"{split}.jsonl"].decode("utf-8").splitlines()
        if len(lines) != counts[split]:
            raise TruncatedPayloadError(f"{root / split}.jsonl: {len(lines)} records, expected {counts[split]}")
        samples = []
        for line in lines:
            rec = json.loads(line)
            sc = rec["scene"]
            samples.append(
                Sample(
                    id=rec["id"],
                    scene=SceneSpec([tuple(o) for o in sc["objects"]], sc["h"], sc["w"], config.noise_sigma),
                    grid=feats[offset].copy(),
                    question_ids=rec["question_ids"],
                    candidate_ids=rec["candidate_ids"],
                    correct_index=rec["correct_index"],
                    rationale_ids=rec["rationale_ids"],
                    target_cells=[tuple(c) for c in rec["target_cells"]],
                )
            )
            offset += 1
        splits[split] = samples
    return Dataset(config, manifest["seed"], vocab, codes, splits["train"], splits["val"])
