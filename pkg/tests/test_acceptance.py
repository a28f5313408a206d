"""Acceptance criteria 1-10, each at its stated tolerance.

Criteria 4-7 share one set of full default-benchmark trainings (seeds 1, 2, 3),
run once per session; expect roughly a quarter of an hour on one core.
Every test records a PASS/FAIL line before asserting; the lines are printed in
the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from attd import cli, container
from attd import evalviz as E
from attd import gridvqa as g
from attd import numcore as nc
from attd import trainloop as T
from attd.losses import cross_entropy, forward_kl, stage1_loss, stage2_loss
from attd.model import ModelConfig, VQAModel
from conftest import ACCEPTANCE

SEEDS = (1, 2, 3)


def record(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    return bool(passed)


@pytest.fixture(scope="session")
def benchmark():
    return g.build_dataset(4000, 1000, g.GridConfig(h=8, w=8), seed=1)


@pytest.fixture(scope="session")
def runs(benchmark, tmp_path_factory):
    """Default two-stage training for each seed, with per-stage evaluation and ablation."""
    out = {}
    for seed in SEEDS:
        ckpt_dir = tmp_path_factory.mktemp(f"seed{seed}")
        config = T.TrainConfig(seed=seed, checkpoint_dir=str(ckpt_dir))
        t0 = time.perf_counter()
        state, metrics = T.train_stage1(benchmark, config)
        stage1_seconds = time.perf_counter() - t0
        stage1_model = T.load_model(ckpt_dir / "stage1.ckpt")
        state, metrics = T.train_stage2(benchmark, config, state, metrics)
        stage2_model = T.load_model(ckpt_dir / "stage2.ckpt")
        out[seed] = {
            "dir": ckpt_dir,
            "stage1_seconds": stage1_seconds,
            "eval1": E.evaluate(stage1_model, benchmark.val),
            "eval2": E.evaluate(stage2_model, benchmark.val),
            "abl1": E.ablation(stage1_model, benchmark.val),
            "abl2": E.ablation(stage2_model, benchmark.val),
        }
    return out


# -- 1 -------------------------------------------------------------------------------------


def test_criterion_01_gradients_of_both_stage_losses():
    t0 = time.perf_counter()
    full = g.build_dataset(4, 1, g.GridConfig(h=4, w=4, d_visual=8), seed=11)
    samples = [g.Sample(s.id, s.scene, np.ascontiguousarray(s.grid[:2, :2]), s.question_ids, s.candidate_ids,
                        s.correct_index, s.rationale_ids, [(0, 0)]) for s in full.train]
    cfg = ModelConfig(vocab_size=len(full.vocab), d_model=16, n_heads=2, d_ff=32, n_enc_layers=1, n_dec_layers=1,
                      d_visual=8, grid_h=2, grid_w=2, init_std=0.3)
    model = VQAModel(cfg, seed=7)
    batch = model.batch(samples, need_rationale=True)
    rng = np.random.default_rng(0)
    worst = {}
    counts = {}
    for stage, loss_fn in ((1, stage1_loss), (2, stage2_loss)):
        def loss():
            return loss_fn(model.forward(batch, "train"), batch.targets).total

        nc.zero_grad(model.params.values())
        loss().backward()
        # stage 2 stops gradients at the reasoning decoder, so sample where gradients can flow
        names = sorted(k for k in model.params if stage == 1 or not k.startswith("vr."))
        errors = []
        for name in rng.choice(names, size=24, replace=False):
            p = model.params[name]
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p.data[idx]
            with nc.no_grad():
                p.data[idx] = old + 1e-5
                fp = loss().item()
                p.data[idx] = old - 1e-5
                fm = loss().item()
                p.data[idx] = old
            errors.append(float(nc.relative_error(p.grad[idx], (fp - fm) / 2e-5, floor=1e-6)))
        worst[stage] = max(errors)
        counts[stage] = len(errors)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and min(counts.values()) >= 20 and elapsed < 30
    record(1, ok, f"max rel err stage1 {worst[1]:.1e}, stage2 {worst[2]:.1e} on {counts[1]}+{counts[2]} params, "
                  f"{elapsed:.1f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------------------


def test_criterion_02_closed_form_losses():
    ce = cross_entropy(nc.Tensor([0.25] * 4), 3).item()
    kl = forward_kl(nc.Tensor([[1.0, 0.0, 0.0, 0.0]]), nc.Tensor([[0.25] * 4])).item()
    ok = abs(ce - math.log(4)) <= 1e-9 and abs(kl - math.log(4)) <= 1e-9
    record(2, ok, f"|CE - ln4| = {abs(ce - math.log(4)):.1e}, |KL - ln4| = {abs(kl - math.log(4)):.1e}")
    assert ok


# -- 3 -------------------------------------------------------------------------------------


def test_criterion_03_attention_validity_over_1000_passes():
    rng = np.random.default_rng(3)
    pools = {
        (4, 4): g.build_dataset(64, 1, g.GridConfig(h=4, w=4, d_visual=8), seed=31),
        (8, 8): g.build_dataset(64, 1, g.GridConfig(h=8, w=8, d_visual=8), seed=32),
        (5, 3): g.build_dataset(64, 1, g.GridConfig(h=5, w=3, d_visual=8), seed=33),
    }
    worst_sum, worst_min, passes = 0.0, math.inf, 0
    keys = list(pools)
    while passes < 1000:
        h, w = keys[passes % len(keys)]
        ds = pools[(h, w)]
        heads = int(rng.choice([1, 2, 4]))
        cfg = ModelConfig(vocab_size=len(ds.vocab), d_model=8, n_heads=heads, d_ff=16, n_enc_layers=1,
                          n_dec_layers=int(rng.integers(1, 3)), d_visual=8, grid_h=h, grid_w=w,
                          init_std=float(rng.choice([0.02, 0.3, 1.0, 3.0])))
        model = VQAModel(cfg, seed=int(rng.integers(2**31)))
        pick = rng.choice(len(ds.train), size=4, replace=False)
        with nc.no_grad():
            out = model.forward([ds.train[i] for i in pick], mode="train")
        for a in (out.alpha_q.data, out.alpha_r.data):
            worst_sum = max(worst_sum, float(np.abs(a.sum(axis=1) - 1).max()))
            worst_min = min(worst_min, float(a.min()))
        passes += 1
    ok = worst_sum <= 1e-6 and worst_min >= 0
    record(3, ok, f"{passes} passes: max |sum - 1| = {worst_sum:.1e}, min weight = {worst_min:.1e}")
    assert ok


# -- 4 -------------------------------------------------------------------------------------


def test_criterion_04_reasoning_decoder_frozen(runs):
    details, ok = [], True
    for seed, r in runs.items():
        a, _ = container.read(r["dir"] / "stage1.ckpt")
        b, _ = container.read(r["dir"] / "stage2.ckpt")
        vr = [k for k in a if k.startswith("vr.")]
        same = bool(vr) and all(a[k].tobytes() == b[k].tobytes() for k in vr)
        ok &= same
        details.append(f"seed {seed}: {len(vr)} tensors {'identical' if same else 'CHANGED'}")
    record(4, ok, "; ".join(details))
    assert ok


# -- 5 -------------------------------------------------------------------------------------


def test_criterion_05_learnability(runs):
    r = runs[1]
    acc, seconds = r["eval1"].accuracy, r["stage1_seconds"]
    others = ", ".join(f"seed {s}: {runs[s]['eval1'].accuracy:.3f}" for s in SEEDS if s != 1)
    ok = acc >= 0.60 and seconds < 15 * 60
    record(5, ok, f"seed 1 stage-1 val accuracy {acc:.3f} (>= 0.60) in {seconds / 60:.1f} min; {others}")
    assert ok


# -- 6 -------------------------------------------------------------------------------------


def test_criterion_06_distillation_direction(runs):
    mean = lambda key, field: float(np.mean([getattr(runs[s][key], field) for s in SEEDS]))  # noqa: E731
    acc1, acc2 = mean("eval1", "accuracy"), mean("eval2", "accuracy")
    on1, on2 = mean("eval1", "mean_attn_on_target"), mean("eval2", "mean_attn_on_target")
    kl1, kl2 = mean("eval1", "mean_kl_q_r"), mean("eval2", "mean_kl_q_r")
    ok = acc2 >= acc1 and on2 > on1 and kl2 < kl1
    per_seed = "; ".join(f"s{s} {runs[s]['eval1'].accuracy:.3f}->{runs[s]['eval2'].accuracy:.3f}" for s in SEEDS)
    record(6, ok, f"mean acc {acc1:.4f} -> {acc2:.4f}, attn-on-target {on1:.3f} -> {on2:.3f}, "
                  f"KL {kl1:.3f} -> {kl2:.3f} ({per_seed})")
    assert ok


# -- 7 -------------------------------------------------------------------------------------


def test_criterion_07_ablation_direction(runs):
    d1 = [runs[s]["abl1"].drop for s in SEEDS]
    d2 = [runs[s]["abl2"].drop for s in SEEDS]
    m1, m2 = float(np.mean(d1)), float(np.mean(d2))
    ok = m2 > m1 and m1 >= 0 and m2 >= 0
    per_seed = "; ".join(f"s{s} {a:.3f}/{b:.3f}" for s, a, b in zip(SEEDS, d1, d2))
    record(7, ok, f"mean masking drop stage 1 {m1:.4f}, stage 2 {m2:.4f} (per seed stage1/stage2: {per_seed})")
    assert ok


# -- 8 -------------------------------------------------------------------------------------


def test_criterion_08_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTD_RUN_DIR", str(tmp_path / "runs"))
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "1", "--train", "96", "--val", "32"]) == 0
    logs = []
    for tag in ("a", "b"):
        code = cli.main(["train", "--stage", "both", "--data", str(tmp_path / "d"), "--seed", "1",
                         "--ckpt-dir", str(tmp_path / tag)])
        assert code == 0
        logs.append((tmp_path / tag / "metrics.jsonl").read_bytes())
    last = logs[0].decode().strip().splitlines()[-1]
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    record(8, ok, f"two `train --stage both` runs: {len(logs[0])} bytes of metrics each, "
                  f"{'byte-identical' if ok else 'DIFFERENT'}; last record {last[:60]}...")
    assert ok


# -- 9 -------------------------------------------------------------------------------------


def test_criterion_09_round_trips(tmp_path):
    ds = g.generate_dataset(tmp_path / "d1", 50, 20, g.GridConfig(), seed=9)
    g.write_dataset(g.load_dataset(tmp_path / "d1"), tmp_path / "d2")
    data_ok = all((tmp_path / "d1" / n).read_bytes() == (tmp_path / "d2" / n).read_bytes() for n in g.COMPONENT_FILES)

    config = T.TrainConfig(stage1_epochs=1, batch_size=25, seed=2, log_every=0)
    state, _ = T.train_stage1(ds, config)
    T.save_checkpoint(state, tmp_path / "a.ckpt", config)
    T.save_checkpoint(T.load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt", config)
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    rng = np.random.default_rng(9)
    hits = 0
    for i in range(100):
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        alpha = rng.dirichlet(np.full(h * w, 0.5)).reshape(h, w)
        pgm, _ = E.export_heatmap(alpha, [], tmp_path / "hm" / f"m{i}")
        hits += int(np.argmax(E.read_pgm16(pgm))) == int(np.argmax(alpha))
    ok = data_ok and ckpt_ok and hits == 100
    record(9, ok, f"dataset {'identical' if data_ok else 'DIFFERS'}, checkpoint {'identical' if ckpt_ok else 'DIFFERS'}, "
                  f"heatmap argmax {hits}/100")
    assert ok


# -- 10 ------------------------------------------------------------------------------------


def test_criterion_10_untrained_model_is_at_chance(benchmark):
    model = T.init_state(benchmark, T.TrainConfig(seed=1)).model
    acc = E.evaluate(model, benchmark.val).accuracy
    sigma = math.sqrt(0.25 * 0.75 / len(benchmark.val))
    ok = abs(acc - 0.25) <= 3 * sigma
    record(10, ok, f"untrained val accuracy {acc:.3f}, chance band [{0.25 - 3 * sigma:.3f}, {0.25 + 3 * sigma:.3f}]")
    assert ok
