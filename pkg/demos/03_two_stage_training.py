# %% [markdown]
# Two-stage training on a small dataset. Stage 1 trains both decoders on their
# answers; stage 2 pulls the question decoder's attention toward the frozen
# reasoning decoder's. The quick run uses half the benchmark; pass --full for
# all of it (about 5 minutes on one core).

# %%
import sys
import tempfile
from pathlib import Path

from attd import evalviz as E
from attd import gridvqa as g
from attd import trainloop as T

full = "--full" in sys.argv
n_train, n_val = (4000, 1000) if full else (2000, 500)
ds = g.build_dataset(n_train, n_val, g.GridConfig(), seed=1)
out = Path(tempfile.mkdtemp(prefix="attd-demo-"))
config = T.TrainConfig(seed=1, checkpoint_dir=str(out), log_every=0)

# %%
state, metrics = T.train_stage1(ds, config)
for rec in metrics.records:
    print(f"epoch {rec['epoch']:2d}  loss {rec['loss']:.3f}  val acc {rec['val_acc']:.3f}")
before = T.load_model(out / "stage1.ckpt")

# %%
state, metrics = T.train_stage2(ds, config, state, metrics)
after = T.load_model(out / "stage2.ckpt")

# %%
for tag, model in (("stage 1", before), ("stage 2", after)):
    rep = E.evaluate(model, ds.val)
    abl = E.ablation(model, ds.val)
    print(f"{tag}: acc {rep.accuracy:.3f}  attention on target {rep.mean_attn_on_target:.3f}  "
          f"KL(q||r) {rep.mean_kl_q_r:.3f}  masking drop {abl.drop:.3f}")

# %%
# heatmaps for the first few validation questions
summary = E.compare_checkpoints(before, after, ds.val[:4], out / "heatmaps")
print("heatmaps in", out / "heatmaps")
