# %% [markdown]
# A walk through the synthetic grid dataset: scenes, questions, candidates and
# the rationale sentence that names where the answer lives.

# %%
import numpy as np

from attd import gridvqa as g

ds = g.build_dataset(8, 4, g.GridConfig(), seed=1)
print(len(ds.vocab), "tokens in the vocabulary")
print(ds.config)

# %%
# every sample carries a per-cell feature grid plus token ids
s = ds.train[0]
print("grid", s.grid.shape, s.grid.dtype)
print("Q:", ds.vocab.decode(s.question_ids))
for i, c in enumerate(s.candidate_ids):
    mark = "*" if i == s.correct_index else " "
    print(f"  {mark} {ds.vocab.decode(c)}")
print("R:", ds.vocab.decode(s.rationale_ids))
print("target cells", s.target_cells)

# %%
# the scene behind the features, drawn as text
board = np.full((ds.config.h, ds.config.w), " . ", dtype=object)
for row, col, shape, color in s.scene.objects:
    board[row, col] = f"{color[0]}{shape[:2]}"
print("\n".join(" ".join(row) for row in board))

# %%
# feature norms separate occupied cells from background
norms = np.linalg.norm(s.grid, axis=-1)
print(np.round(norms, 1))
