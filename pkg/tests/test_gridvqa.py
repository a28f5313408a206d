import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from attd import gridvqa as g


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    ds = g.generate_dataset(root / "d", 30, 12, g.GridConfig(h=6, w=5, d_visual=8), seed=11)
    return ds, root / "d"


@pytest.fixture(scope="module")
def codes():
    return g.make_codes(16, np.random.default_rng(0))


def test_vocabulary_specials_and_bijection():
    v = g.Vocabulary()
    assert v.tokens[:3] == ["[CLS]", "[SEP]", "[PAD]"]
    assert (g.CLS, g.SEP, g.PAD) == (0, 1, 2)
    assert sorted(v.index.values()) == list(range(len(v)))
    assert g.Vocabulary.from_json(v.to_json()) == v


def test_render_noise_free_same_attributes_identical(codes):
    scene = g.SceneSpec([(0, 0, "star", "red"), (2, 3, "star", "red"), (1, 1, "circle", "blue")], 4, 4, 0.0)
    grid = g.render_features(scene, codes, seed=5)
    assert np.array_equal(grid[0, 0], grid[2, 3])
    assert not np.array_equal(grid[0, 0], grid[1, 1])


def test_render_empty_noise_free_is_zero(codes):
    grid = g.render_features(g.SceneSpec([], 4, 4, 0.0), codes, seed=5)
    assert grid.shape == (4, 4, 16) and not grid.any()


def test_render_deterministic(codes):
    scene = g.SceneSpec([(1, 2, "square", "green"), (3, 3, "triangle", "yellow")], 4, 4, 0.3)
    assert np.array_equal(g.render_features(scene, codes, 9), g.render_features(scene, codes, 9))
    assert not np.array_equal(g.render_features(scene, codes, 9), g.render_features(scene, codes, 10))


def test_scene_validation():
    with pytest.raises(ValueError):
        g.SceneSpec([(0, 0, "star", "red"), (0, 0, "circle", "blue")], 4, 4)
    with pytest.raises(ValueError):
        g.SceneSpec([(4, 0, "star", "red")], 4, 4)


@pytest.mark.parametrize("template_id", [0, 1, 2])
def test_generated_sample_structure(template_id, codes):
    vocab = g.Vocabulary()
    config = g.GridConfig(h=8, w=8, d_visual=16)
    rng = np.random.default_rng(template_id)
    for i in range(200):
        scene = g.random_scene(rng, config)
        s = g.generate_sample(scene, template_id, rng, codes=codes, vocab=vocab, sample_id=i, config=config)
        cands = [vocab.decode(c) for c in s.candidate_ids]
        assert len(cands) == 4 and len(set(cands)) == 4
        (r, c), = s.target_cells
        obj = next(o for o in s.scene.objects if (o[0], o[1]) == (r, c))
        truth = {0: obj[3], 1: obj[2], 2: str(obj[0])}[template_id]
        assert cands[s.correct_index] == truth
        question = vocab.decode(s.question_ids)
        rationale = vocab.decode(s.rationale_ids).split()
        assert "row" in rationale and "col" in rationale
        assert rationale[rationale.index("row") + 1] == str(r)
        assert rationale[rationale.index("col") + 1] == str(c)
        assert "col" not in question.split()
        # the question's referring attributes pick out exactly the target object
        refs = [o for o in s.scene.objects if all(w in question.split() for w in
                                                  ([o[2]] if template_id == 0 else [o[3]] if template_id == 1
                                                   else [o[2], o[3]]))]
        assert refs == [obj]


def test_ambiguous_scene_is_redrawn(codes):
    scene = g.SceneSpec([(0, 0, "star", "red"), (1, 1, "star", "red")], 8, 8, 0.1)
    s = g.generate_sample(scene, 0, np.random.default_rng(0), codes=codes)
    assert s.scene != scene


def test_correct_position_balance():
    """Count over 10,000 samples: each position is correct 25% +/- 2%."""
    config = g.GridConfig(h=8, w=8, d_visual=4, noise_sigma=0.0)
    codes = g.make_codes(4, np.random.default_rng(0))
    vocab = g.Vocabulary()
    counts = np.zeros(4)
    for i in range(10_000):
        counts[g.sample_for_id(i, 123, config, codes, vocab).correct_index] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.25) <= 0.02), freq


def test_split_sizes_and_disjoint_ids(small):
    ds, _ = small
    assert len(ds.train) == 30 and len(ds.val) == 12
    assert not {s.id for s in ds.train} & {s.id for s in ds.val}


def test_vocabulary_closure(small):
    ds, _ = small
    n = len(ds.vocab)
    for s in ds.train + ds.val:
        for seq in [s.question_ids, s.rationale_ids, *s.candidate_ids]:
            assert all(0 <= t < n for t in seq)


def test_same_seed_byte_identical(tmp_path, small):
    _, path = small
    g.generate_dataset(tmp_path / "again", 30, 12, g.GridConfig(h=6, w=5, d_visual=8), seed=11)
    for name in g.COMPONENT_FILES:
        assert filecmp.cmp(path / name, tmp_path / "again" / name, shallow=False), name


def test_round_trip_field_for_field(small):
    ds, path = small
    loaded = g.load_dataset(path)
    assert loaded.vocab == ds.vocab and loaded.config == ds.config and loaded.seed == ds.seed
    assert set(loaded.codes) == set(ds.codes)
    for k in ds.codes:
        assert np.array_equal(loaded.codes[k], ds.codes[k])
    for a, b in zip(ds.train + ds.val, loaded.train + loaded.val):
        assert a.to_record() == b.to_record()
        assert np.array_equal(a.grid, b.grid)
        assert a.scene == b.scene


def test_write_read_write_byte_identical(small, tmp_path):
    _, path = small
    g.write_dataset(g.load_dataset(path), tmp_path / "copy")
    for name in g.COMPONENT_FILES:
        assert (path / name).read_bytes() == (tmp_path / "copy" / name).read_bytes(), name


def _copy(path: Path, dest: Path) -> Path:
    dest.mkdir()
    for name in g.COMPONENT_FILES:
        (dest / name).write_bytes((path / name).read_bytes())
    return dest


def test_corrupted_magic_is_format_error(small, tmp_path):
    d = _copy(small[1], tmp_path / "bad")
    raw = bytearray((d / "codes.bin").read_bytes())
    raw[:4] = b"XXXX"
    (d / "codes.bin").write_bytes(bytes(raw))
    with pytest.raises(g.DatasetFormatError):
        g.load_dataset(d)


def test_missing_vocabulary(small, tmp_path):
    d = _copy(small[1], tmp_path / "novocab")
    (d / "vocab.json").unlink()
    with pytest.raises(g.MissingComponentError, match="vocab.json"):
        g.load_dataset(d)


def test_version_mismatch(small, tmp_path):
    d = _copy(small[1], tmp_path / "ver")
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["format_version"] = 99
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(g.DatasetVersionError):
        g.load_dataset(d)


def test_truncated_features(small, tmp_path):
    d = _copy(small[1], tmp_path / "trunc")
    (d / "features.bin").write_bytes((d / "features.bin").read_bytes()[:-8])
    with pytest.raises(g.TruncatedPayloadError):
        g.load_dataset(d)


def test_checksum_failure(small, tmp_path):
    d = _copy(small[1], tmp_path / "crc")
    text = (d / "train.jsonl").read_text().replace('"correct_index":0', '"correct_index":1', 1)
    (d / "train.jsonl").write_text(text)
    with pytest.raises(g.ChecksumError):
        g.load_dataset(d)


def test_error_classes_are_distinct():
    kinds = {g.ChecksumError, g.DatasetVersionError, g.DatasetFormatError, g.TruncatedPayloadError,
             g.MissingComponentError}
    assert len(kinds) == 5 and all(issubclass(k, g.DatasetError) for k in kinds)


def test_masking_target_makes_answer_unidentifiable(codes):
    """With target features removed, other cells hold no copy of the queried object."""
    config = g.GridConfig(h=8, w=8, d_visual=16, noise_sigma=0.0)
    vocab = g.Vocabulary()
    for i in range(300):
        s = g.sample_for_id(i, 5, config, codes, vocab)
        (r, c), = s.target_cells
        target = s.grid[r, c]
        others = [s.grid[o[0], o[1]] for o in s.scene.objects if (o[0], o[1]) != (r, c)]
        assert not any(np.array_equal(target, o) for o in others)
