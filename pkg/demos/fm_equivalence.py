"""
A latent factor model is a special case of EFA
================================================

Three constructions set EFA parameters so that the network reproduces a
factor model exactly:

* P1 (categorical): softmax attention with zero query and key maps averages
  the context, which is what the factor model does.
* P2 (Gaussian with location attributes): linear attention whose scores are
  inner products of encoded attributes.
* P3 (Poisson): linear attention whose keys carry the center embedding.
"""

import numpy as np

from efa.fm import FMModel, construct_equivalent_efa, fm_categorical_logits, fm_poisson_natural
from efa.model import SequenceBatch

rng = np.random.default_rng(0)
K, D, I = 4, 7, 5

# Categorical factor model with random embeddings.
fm = FMModel("categorical", n_items=D, embed_dim=K)
fm.rho.data[...] = rng.standard_normal((K, D))
fm.alpha.data[...] = rng.standard_normal((K, D))
x = rng.integers(0, D, I)

efa = construct_equivalent_efa("P1", fm, I)
gap = np.abs(efa.categorical_probs(x)[0] - fm.categorical_probs(x)[0]).max()
print("P1 max |probability difference|:", gap)
print("factor model logits for position 0:", np.round(fm_categorical_logits(fm, x)[:, 0], 3))

# Poisson factor model: ratings enter the context through alpha * y.
fm = FMModel("poisson_v1", n_items=D, embed_dim=K)
fm.rho.data[...] = rng.standard_normal((K, D))
fm.alpha.data[...] = rng.standard_normal((K, D))
y = rng.integers(1, 4, I).astype(float)
efa = construct_equivalent_efa("P3", fm, I)
kappa = efa.value_natural_params(SequenceBatch(x=x[None], y=y[None]))[0]
print("P3 max |natural parameter difference|:", np.abs(kappa - fm_poisson_natural(fm, x, y)).max())

# The key map of the P3 network: an identity block moves the center
# embedding into the slot the query reads.
wk = efa.value.layers[0].heads[0].wk.data
print("P3 key map, rows K:2K:\n", wk[K:2 * K])
