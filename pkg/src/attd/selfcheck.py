"""Fast invariant suite behind ``attd selfcheck``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import gridvqa
from . import numcore as nc
from . import losses
from .trainloop import TrainConfig, begin_stage2, init_state, train_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SelfcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def first_failure(self) -> str | None:
        return next((r.name for r in self.results if not r.passed), None)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "first_failure": self.first_failure,
            "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in self.results],
        }


def _micro_dataset() -> gridvqa.Dataset:
    return gridvqa.build_dataset(16, 8, gridvqa.GridConfig(h=4, w=4, d_visual=8), seed=3)


MICRO_MODEL = {"d_model": 16, "n_heads": 2, "d_ff": 32, "n_enc_layers": 1, "n_dec_layers": 1}


def run_selfcheck(kl_fn: Callable | None = None) -> SelfcheckReport:
    """Run every check; ``kl_fn`` (default ``losses.forward_kl``) lets tests substitute a broken divergence."""
    kl_fn = kl_fn or losses.forward_kl
    report = SelfcheckReport()
    rng = np.random.default_rng(0)

    def record(name, passed, detail=""):
        report.results.append(CheckResult(name, bool(passed), detail))

    y = nc.softmax(nc.Tensor(np.log([1.0, 2.0, 3.0])))
    record("softmax closed form", np.allclose(y.data, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-12))
    ce = nc.cross_entropy(nc.Tensor([0.25] * 4), 2).item()
    record("cross_entropy uniform", abs(ce - math.log(4)) <= 1e-9, f"{ce!r}")

    worst = math.inf
    for _ in range(200):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        worst = min(worst, kl_fn(nc.Tensor(p[None]), nc.Tensor(q[None])).item())
    record("forward_kl nonnegativity", worst >= -1e-12, f"min KL {worst:.3e}")
    kl = kl_fn(nc.Tensor([[1.0, 0, 0, 0]]), nc.Tensor([[0.25] * 4])).item()
    record("forward_kl closed form", abs(kl - math.log(4)) <= 1e-9, f"{kl!r}")

    rng_b = rng.normal(size=(4, 2))
    w5 = rng.normal(size=5)
    w24 = rng.normal(size=(2, 4))
    q5 = rng.dirichlet(np.ones(5))
    checks = {
        "matmul": (lambda x: (nc.matmul(x, nc.Tensor(rng_b)) * nc.matmul(x, nc.Tensor(rng_b))).sum(), (3, 4)),
        "softmax": (lambda x: (nc.softmax(x) * nc.Tensor(w5)).sum(), (5,)),
        "layer_norm": (lambda x: (nc.layer_norm(x, nc.Tensor(np.ones(4)), nc.Tensor(np.zeros(4))) * nc.Tensor(w24)).sum(),
                       (2, 4)),
        "forward_kl": (lambda x: kl_fn(nc.softmax(x)[None], nc.Tensor(q5[None])).sum(), (5,)),
    }
    for name, (f, shape) in checks.items():
        rep = nc.grad_check(f, rng.normal(size=shape), step=1e-5, tol=1e-5)
        record(f"gradient check: {name}", rep.passed, f"max rel err {rep.max_rel_error:.2e}")

    dataset = _micro_dataset()
    config = TrainConfig(seed=5, batch_size=8, log_every=0, model=MICRO_MODEL)
    state = init_state(dataset, config)
    with nc.no_grad():
        out = state.model.forward(dataset.train, mode="train")
    sums = np.concatenate([out.alpha_q.data.sum(axis=1), out.alpha_r.data.sum(axis=1)])
    nonneg = min(out.alpha_q.data.min(), out.alpha_r.data.min()) >= 0
    record("attention normalization", nonneg and np.abs(sums - 1).max() <= 1e-6,
           f"max |sum-1| {np.abs(sums - 1).max():.1e}")

    train_step(state, dataset.train[:8], config)
    before = {k: v.data.copy() for k, v in state.model.params.items() if k.startswith("vr.")}
    begin_stage2(state, config)
    for i in range(2):
        train_step(state, dataset.train[8 * i : 8 * i + 8], config)
    unchanged = all(np.array_equal(before[k], state.model.params[k].data) for k in before)
    record("stage-2 freezing", unchanged, f"{len(before)} reasoning tensors compared")
    return report
