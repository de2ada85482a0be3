"""Linear latent factor baselines and their exact EFA realizations.

Every variant predicts position ``i`` from an average (or a plain sum) of
context embeddings over a context set ``c_i``:

* ``categorical``:       ``logits_i = (1/|c_i|) rho^T sum_{j in c_i} alpha_{x_j}``
* ``poisson_v1``:        ``kappa_i = (1/|c_i|) rho_{x_i}^T sum_{j in c_i} alpha_{x_j} y_j``, ``y_i - 1 ~ Poisson(e^kappa)``
* ``poisson_v2``:        same ``kappa_i``, ``y_i ~ Poisson(1 + e^kappa)``
* ``gaussian_ratings``:  same ``kappa_i`` read as a Gaussian mean
* ``gaussian_knn``:      ``mean_i = h(tau_i)^T sum_{j in knn(i)} h(tau_j) y_j`` (no averaging)

``c_i`` is every other valid position (bidirectional) or the valid positions
before ``i`` (unidirectional). An empty context yields natural parameter 0.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionHead, AttentionLayer
from .heads import Categorical, GaussianKnownVar, PoissonOnePlus, PoissonShifted
from .model import (
    AttributeEncoder,
    Dense,
    EFAConfig,
    EFAModel,
    Model,
    SequenceBatch,
    VocabError,
    register_loader,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "FM_VARIANTS",
    "NeighborError",
    "FMModel",
    "context_matrix",
    "fm_categorical_logits",
    "fm_gaussian_mean",
    "fm_poisson_natural",
    "construct_equivalent_efa",
]

FM_VARIANTS = ("categorical", "gaussian_knn", "poisson_v1", "poisson_v2", "gaussian_ratings")


class NeighborError(ValueError):
    """Invalid neighbour lists."""


def context_matrix(valid: np.ndarray, causal: bool, knn: np.ndarray | None = None,
                   average: bool = True) -> np.ndarray:
    """``(F, I, I)`` weights ``C[f, j, i]``: how much position ``j`` feeds position ``i``.

    With ``average`` each nonempty column sums to one (weights ``1/|c_i|``).
    ``knn`` (``(I, k)`` neighbour indices) replaces the default context.
    """
    valid = np.asarray(valid, dtype=bool)
    F, I = valid.shape
    if knn is not None:
        base = np.zeros((I, I), dtype=bool)
        base[knn.reshape(-1), np.repeat(np.arange(I), knn.shape[1])] = True
    elif causal:
        base = np.triu(np.ones((I, I), dtype=bool), k=1)
    else:
        base = ~np.eye(I, dtype=bool)
    C = (base[None] & valid[:, :, None]).astype(np.float64)
    if average:
        n = C.sum(axis=1, keepdims=True)
        C = np.divide(C, n, out=np.zeros_like(C), where=n > 0)
    return C


class FMModel(Model):
    kind = "fm"

    def __init__(self, variant: str, n_items: int = 0, embed_dim: int = 16, causal: bool = False, seed: int = 0,
                 attr_dim: int = 0, attr_hidden: int = 128, knn: np.ndarray | None = None,
                 variance: float = 1.0, init_range: float = 0.05):
        if variant not in FM_VARIANTS:
            raise ValueError(f"unknown FM variant {variant!r}")
        self.variant = variant
        self.n_items = int(n_items)
        self.embed_dim = int(embed_dim)
        self.causal = bool(causal)
        self.seed = int(seed)
        self.attr_dim, self.attr_hidden = int(attr_dim), int(attr_hidden)
        self.variance = float(variance)
        self.init_range = float(init_range)
        rng = np.random.default_rng(seed)
        r = init_range
        self.rho = self.alpha = self.h = None
        self.knn = None
        if variant == "gaussian_knn":
            if attr_dim < 1:
                raise ValueError("gaussian_knn needs attr_dim >= 1")
            if causal:
                raise ValueError("gaussian_knn is bidirectional only")
            self.h = AttributeEncoder.init(rng, attr_dim, attr_hidden, embed_dim, bias=True, init_range=r)
            if knn is not None:
                self.set_neighbors(knn)
        else:
            if n_items < 2 if variant == "categorical" else n_items < 1:
                raise ValueError("n_items too small for this variant")
            self.rho = Tensor(rng.uniform(-r, r, (embed_dim, n_items)), requires_grad=True)
            self.alpha = Tensor(rng.uniform(-r, r, (embed_dim, n_items)), requires_grad=True)
        self.head_x = Categorical(n_items) if variant == "categorical" else None
        self.head_y = {
            "categorical": None,
            "gaussian_knn": GaussianKnownVar(variance),
            "gaussian_ratings": GaussianKnownVar(variance),
            "poisson_v1": PoissonShifted(),
            "poisson_v2": PoissonOnePlus(),
        }[variant]

    def set_neighbors(self, knn) -> None:
        knn = np.asarray(knn, dtype=np.int64)
        if knn.ndim != 2 or knn.shape[1] < 1:
            raise NeighborError("neighbour lists must be an (I, k) array with k >= 1")
        I = knn.shape[0]
        if knn.shape[1] >= I:
            raise NeighborError(f"k = {knn.shape[1]} must be below the site count {I}")
        if knn.min() < 0 or knn.max() >= I:
            raise NeighborError("neighbour index out of range")
        if np.any(knn == np.arange(I)[:, None]):
            raise NeighborError("neighbour lists must exclude self")
        self.knn = knn

    def named_parameters(self):
        if self.h is not None:
            return self.h.named_parameters("h")
        return {"rho": self.rho, "alpha": self.alpha}

    def buffers(self):
        return {} if self.knn is None else {"knn": self.knn}

    def meta(self):
        return {"variant": self.variant, "n_items": self.n_items, "embed_dim": self.embed_dim,
                "causal": self.causal, "seed": self.seed, "attr_dim": self.attr_dim,
                "attr_hidden": self.attr_hidden, "variance": self.variance, "init_range": self.init_range}

    # -- forward maps ----------------------------------------------------------
    def _check_tokens(self, batch):
        x = np.where(batch.valid, batch.x, 0)
        if x.size and (x.min() < 0 or x.max() >= self.n_items):
            raise VocabError(f"token outside vocabulary [0, {self.n_items})")
        return x

    def logits_all(self, batch: SequenceBatch) -> Tensor:
        """``(F, I, D)`` logits at every position."""
        x = self._check_tokens(batch)
        A = T.transpose(T.take(self.alpha, x, axis=1), (1, 0, 2))  # (F, K, I)
        S = T.matmul(A, Tensor(context_matrix(batch.valid, self.causal)))
        return T.matmul(T.transpose(S), self.rho)

    def natural_all(self, batch: SequenceBatch) -> Tensor:
        """``(F, I)`` natural parameters at every position (value variants)."""
        y = Tensor(np.where(batch.valid, batch.y, 0.0)[:, None, :])
        if self.variant == "gaussian_knn":
            if batch.tau is None:
                raise ValueError("gaussian_knn needs tau")
            tau = batch.tau
            H = self.h.encode(tau.T if tau.ndim == 2 else np.swapaxes(tau, 1, 2))
            if self.knn is not None and self.knn.shape[0] != batch.shape[1]:
                raise ShapeError("neighbour lists do not match the number of sites")
            C = context_matrix(batch.valid, False, self.knn, average=False)
            R = H
        else:
            x = self._check_tokens(batch)
            H = T.transpose(T.take(self.alpha, x, axis=1), (1, 0, 2))
            R = T.transpose(T.take(self.rho, x, axis=1), (1, 0, 2))
            C = context_matrix(batch.valid, self.causal)
        S = T.matmul(T.mul(H, y), Tensor(C))
        return T.sum(T.mul(R, S), axis=-2)

    def categorical_logits(self, batch: SequenceBatch):
        if self.variant != "categorical":
            return super().categorical_logits(batch)
        L = self.logits_all(batch)
        pf, pt = np.nonzero(batch.valid)
        F, I, D = L.shape
        return T.take(T.reshape(L, (F * I, D)), pf * I + pt, axis=0), pf, pt

    def value_natural(self, batch: SequenceBatch):
        if self.variant == "categorical":
            return super().value_natural(batch)
        if batch.y is None:
            raise ValueError("value variants need y")
        N = self.natural_all(batch)
        pf, pt = np.nonzero(batch.target)
        F, I = N.shape
        return T.take(T.reshape(N, (F * I,)), pf * I + pt, axis=0), pf, pt


@register_loader("fm")
def _load_fm(header, params, buffers):
    keys = ("variant", "n_items", "embed_dim", "causal", "seed", "attr_dim", "attr_hidden", "variance", "init_range")
    model = FMModel(**{k: header[k] for k in keys})
    if "knn" in buffers:
        model.set_neighbors(buffers["knn"])
    model.load_state_dict(params)
    return model


# ---------------------------------------------------------------------------
# closed forms on plain arrays


def fm_categorical_logits(model: FMModel, x) -> np.ndarray:
    """``(D, I)`` logits for one sequence (or ``(F, D, I)`` for a batch)."""
    x = np.asarray(x)
    batch = SequenceBatch(x=np.atleast_2d(x))
    with T.no_grad():
        L = np.swapaxes(model.logits_all(batch).data, 1, 2)
    return L[0] if x.ndim == 1 else L


def fm_gaussian_mean(model: FMModel, y, tau) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    batch = SequenceBatch(y=np.atleast_2d(y), tau=tau)
    with T.no_grad():
        out = model.natural_all(batch).data
    return out[0] if y.ndim == 1 else out


def fm_poisson_natural(model: FMModel, x, y) -> np.ndarray:
    x = np.asarray(x)
    batch = SequenceBatch(x=np.atleast_2d(x), y=np.atleast_2d(y))
    with T.no_grad():
        out = model.natural_all(batch).data
    return out[0] if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# exact EFA realizations


def _const(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _single_head_layer(wq, wk, wv):
    return AttentionLayer([AttentionHead(_const(wq), _const(wk), _const(wv))])


def construct_equivalent_efa(prop: str, fm: FMModel, seq_len: int) -> EFAModel:
    """Build EFA parameters that reproduce ``fm`` exactly on length-``seq_len`` sequences.

    ``"P1"`` (categorical FM): softmax attention with zero query/key maps, so
    every column averages the context; ``delta`` rescales ``rho`` by
    ``I/(I-1)`` to undo the MASK column's share of the average.

    ``"P2"`` (Gaussian FM with attribute encoder, full context): linear
    attention whose scores are ``g(tau_a)^T g(tau_b)`` and whose values read
    the scalar ``y``.

    ``"P3"`` (Poisson FM): linear attention over ``[rho; alpha/(I-1); y]``
    columns. The key map moves the ``rho`` block into the middle slot and the
    query map keeps only that slot, so scores equal
    ``alpha_{x_a}^T rho_{x_b} / (I-1)``.

    The result is valid only for the sequence length it was built for.
    """
    I = int(seq_len)
    if I < 2:
        raise ValueError("constructions need seq_len >= 2")
    K = fm.embed_dim
    if prop == "P1":
        if fm.variant != "categorical" or fm.causal:
            raise ValueError("P1 needs a bidirectional categorical FM")
        D = fm.n_items
        cfg = EFAConfig(n_items=D, max_len=I, embed_dim=K, categorical=True, value=False, causal=False,
                        positional=True, n_layers=1, n_heads=1, attention="softmax", head=None)
        model = EFAModel(cfg)
        c = model.categorical
        c.beta.data[:, :D] = fm.alpha.data
        c.beta.data[:, D] = 0.0
        c.delta.data[...] = I / (I - 1) * fm.rho.data
        c.pos.data[...] = 0.0
        c.layers = [_single_head_layer(np.zeros((K, K)), np.zeros((K, K)), np.eye(K))]
        return model
    if prop == "P2":
        if fm.variant != "gaussian_knn" or fm.knn is not None:
            raise ValueError("P2 needs a gaussian_knn FM with full context (no neighbour lists)")
        h = fm.h
        cfg = EFAConfig(n_items=0, max_len=I, embed_dim=K, categorical=False, value=True, causal=False,
                        positional=False, value_tokens="attribute", attr_dim=fm.attr_dim, attr_hidden=fm.attr_hidden,
                        attr_bias=True, value_embed="identity", value_dim=1, mask_embed="zero",
                        n_layers=1, n_heads=1, attention="linear", readout_hidden=(), readout_bias=False,
                        head="gaussian", variance=fm.variance)
        model = EFAModel(cfg)
        v = model.value
        for name in ("G1", "G2", "b1", "b2"):
            getattr(v.attr, name).data[...] = getattr(h, name).data
        d = K + 1
        qk = np.diag(np.r_[np.ones(K), 0.0])
        wv = np.diag(np.r_[np.zeros(K), 1.0])
        v.layers = [_single_head_layer(qk, qk, wv)]
        w = np.zeros((1, d))
        w[0, -1] = d
        v.readout = [Dense(_const(w), None)]
        return model
    if prop == "P3":
        if fm.variant not in ("poisson_v1", "poisson_v2") or fm.causal:
            raise ValueError("P3 needs a bidirectional Poisson FM")
        cfg = EFAConfig(n_items=fm.n_items, max_len=I, embed_dim=K, categorical=False, value=True, causal=False,
                        positional=True, value_tokens="both", value_embed="identity", value_dim=1,
                        mask_embed="zero", n_layers=1, n_heads=1, attention="linear", readout_hidden=(),
                        readout_bias=False, head=fm.head_y.name)
        model = EFAModel(cfg)
        v = model.value
        v.beta.data[...] = fm.rho.data
        v.delta.data[...] = fm.alpha.data / (I - 1)
        v.pos.data[...] = 0.0
        d = 2 * K + 1
        wq = np.diag(np.r_[np.zeros(K), np.ones(K), 0.0])
        wk = np.zeros((d, d))
        wk[K:2 * K, :K] = np.eye(K)
        wv = np.diag(np.r_[np.zeros(2 * K), 1.0])
        v.layers = [_single_head_layer(wq, wk, wv)]
        w = np.zeros((1, d))
        w[0, -1] = d
        v.readout = [Dense(_const(w), None)]
        return model
    raise ValueError(f"unknown construction {prop!r}")
