"""
Attention maps and co-purchases on generated baskets
=====================================================

Baskets are drawn from three themes (breakfast, baking, pasta night). Each
basket holds three items from one theme in random order, so an item's
likely partners are the other items of its theme. After fitting a
bidirectional EFA model we read off what it learned: the attention each
masked position pays to the rest of its basket, and which items it pairs
with a given item.
"""

import numpy as np

from efa.experiments import export_attention_weights, top_copurchase
from efa.model import SequenceBatch, instantiate_example
from efa.training import FitConfig, evaluate, fit

themes = [["eggs", "bacon", "toast", "coffee"], ["flour", "sugar", "butter", "yeast"],
          ["pasta", "tomato", "basil", "parmesan"]]
items = [name for theme in themes for name in theme]
D = len(items)

rng = np.random.default_rng(0)
x = []
for _ in range(600):
    t = rng.integers(len(themes))
    x.append(4 * t + rng.permutation(4)[:3])
x = np.array(x)
train, val = SequenceBatch(x=x[:500]), SequenceBatch(x=x[500:])

model = instantiate_example("baskets", {"n_items": D, "max_len": 3, "embed_dim": 6}, "bidirectional", seed=0,
                           ordered=False, n_layers=1, n_heads=2, readout_hidden=(16,))
fit(model, train, val, FitConfig(learning_rate=1e-2, max_epochs=60, batch_size=50))
# a model that knows the theme picks among the two unseen items of it: log 2
print(f"validation cross-entropy {evaluate(model, val, 'CrossEntropy'):.3f} (theme-aware floor {np.log(2):.3f})")

# Row i is the pass that masks position i; it sums to one over the basket.
basket = [0, 2, 3]
mats = export_attention_weights(model, basket)
print("head-averaged attention for", [items[t] for t in basket])
print(np.round(mats["mean"], 3))

# The embedding score delta_item^T beta_g + beta_g^T delta_item reads the raw
# embeddings only. In a network with value, query and readout maps between
# them it need not agree with what the model predicts, so compare it with the
# model's own answer: mask the second slot of the two-item basket
# [item, ?] and read the predicted distribution.
for item in (0, 4, 8):
    by_score = [items[g] for g, _ in top_copurchase(model, item, k=3)]
    probs = model.categorical_probs(np.array([item, item]))[0][:, 1]
    probs[item] = -1.0
    by_model = [items[g] for g in np.argsort(-probs, kind="stable")[:3]]
    print(f"  {items[item]:>6}: embedding score {by_score}, model prediction {by_model}")

# Saved checkpoints give the same views from the command line:
#   efa dump-attention --checkpoint CKPT --sequence 0,2,3 --out dumps
#   efa copurchase --checkpoint CKPT --item 0
