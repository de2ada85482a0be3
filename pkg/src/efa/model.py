"""The exponential family attention model.

Two components share the same masked-pass machinery:

* the categorical component predicts token ``x_i`` from the other tokens by
  replacing column ``i`` with the MASK embedding, running the attention stack
  and scoring the output column against the center embeddings ``delta``;
* the value component predicts ``y_i`` from the tokens and the other values by
  replacing ``lambda_1(y_i)`` with ``lambda_1(MASK)`` and reading the output
  column through ``lambda_2`` into a natural parameter ``kappa_i``.

Each target position gets its own masked copy of the sequence ("pass"), so a
batch of ``F`` sequences of length ``I`` becomes up to ``F * I`` passes that
are evaluated together as a ``(B, d, I)`` stack.

Tokens are 0-based: items are ``0 .. D-1`` and ``D`` is the MASK token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionKind, AttentionLayer, Mask, init_layer, multi_head_multi_layer
from .heads import Categorical, ExpFamHead, make_head
from .tensor import ShapeError, Tensor

__all__ = [
    "VocabError",
    "StructureError",
    "SequenceBatch",
    "EFAConfig",
    "AttributeEncoder",
    "Dense",
    "CategoricalComponent",
    "ValueComponent",
    "Model",
    "EFAModel",
    "instantiate_example",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class VocabError(ValueError):
    """A token lies outside the model vocabulary."""


class StructureError(ValueError):
    """The model is not in the structural form an operation requires."""


# ---------------------------------------------------------------------------
# data container


@dataclass
class SequenceBatch:
    """``F`` sequences of length ``I``.

    ``x`` holds 0-based tokens, ``y`` the associated values. ``valid`` marks
    real (non-padding) positions; ``target`` marks positions whose value is
    modelled (lag columns and padding are context only). ``tau`` carries
    per-position attributes, either shared ``(I, t)`` or per sequence
    ``(F, I, t)``; ``day`` the lag slot of each column.
    """

    x: np.ndarray | None = None
    y: np.ndarray | None = None
    tau: np.ndarray | None = None
    valid: np.ndarray | None = None
    target: np.ndarray | None = None
    day: np.ndarray | None = None

    def __post_init__(self):
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=np.int64)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64)
        ref = self.x if self.x is not None else self.y
        if ref is None:
            raise ValueError("a SequenceBatch needs x or y")
        if ref.ndim != 2:
            raise ShapeError("x and y must be (F, I) matrices")
        if self.x is not None and self.y is not None and self.x.shape != self.y.shape:
            raise ShapeError(f"x and y shapes differ: {self.x.shape} vs {self.y.shape}")
        if self.valid is None:
            self.valid = np.ones(ref.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.target is None:
            self.target = self.valid.copy()
        else:
            self.target = np.asarray(self.target, dtype=bool) & self.valid
        if self.tau is not None:
            self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.day is not None:
            self.day = np.asarray(self.day, dtype=np.int64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def __len__(self) -> int:
        return self.valid.shape[0]

    def subset(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        tau = self.tau
        if tau is not None and tau.ndim == 3:
            tau = tau[idx]
        return SequenceBatch(
            x=None if self.x is None else self.x[idx],
            y=None if self.y is None else self.y[idx],
            tau=tau,
            valid=self.valid[idx],
            target=self.target[idx],
            day=None if self.day is None else self.day[idx],
        )

    def n_targets(self) -> int:
        return int(self.target.sum())


# ---------------------------------------------------------------------------
# configuration


@dataclass
class EFAConfig:
    """Structural hyperparameters; everything needed to rebuild a model."""

    n_items: int = 0
    max_len: int = 1
    embed_dim: int = 16
    categorical: bool = True
    value: bool = False
    causal: bool = False
    positional: bool = True
    n_layers: int = 1
    n_heads: int = 1
    attention: str = "softmax"
    scale_mode: str = "dim"
    residual: bool = False
    ffn_dim: int = 0
    layer_norm: bool = False
    # value component
    value_tokens: str = "context"  # context | both | attribute | none
    value_dim: int = 16
    value_embed: str = "mlp"  # identity | linear | mlp | table
    value_embed_hidden: int = 16
    n_values: int = 0
    value_min: int = 0
    mask_embed: str = "learned"  # learned | zero
    attr_dim: int = 0
    attr_hidden: int = 32
    attr_bias: bool = True
    day_slots: int = 0
    day_dim: int = 0
    input_hidden: int = 0
    input_dim: int = 0
    readout_hidden: tuple = (32,)
    readout_bias: bool = True
    head: str | None = "gaussian"
    variance: float = 1.0
    init_range: float = 0.05

    def __post_init__(self):
        self.readout_hidden = tuple(int(h) for h in self.readout_hidden)
        if self.value_tokens not in ("context", "both", "attribute", "none"):
            raise ValueError(f"unknown value_tokens {self.value_tokens!r}")
        if self.value_embed not in ("identity", "linear", "mlp", "table"):
            raise ValueError(f"unknown value_embed {self.value_embed!r}")
        if self.mask_embed not in ("learned", "zero"):
            raise ValueError(f"unknown mask_embed {self.mask_embed!r}")
        if self.value_embed == "identity" and self.value_dim != 1:
            raise ValueError("identity value embedding requires value_dim == 1")
        if self.value_tokens == "attribute" and self.attr_dim < 1:
            raise ValueError("attribute tokens need attr_dim >= 1")
        if self.value_embed == "table" and self.n_values < 1:
            raise ValueError("table value embedding needs n_values")

    @property
    def value_width(self) -> int:
        """Row count of the stacked value-component input (before projection)."""
        k = self.embed_dim
        width = {"context": k, "both": 2 * k, "attribute": k, "none": 0}[self.value_tokens]
        return width + (self.day_dim if self.day_slots else 0) + self.value_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["readout_hidden"] = list(self.readout_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EFAConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# small building blocks


def _param(rng, shape, init_range):
    return Tensor(rng.uniform(-init_range, init_range, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class Dense:
    """Row-vector affine layer ``z -> z W^T + b`` acting on ``(B, in)``."""

    weight: Tensor  # (out, in)
    bias: Tensor | None  # (out,)

    def __call__(self, z: Tensor) -> Tensor:
        out = T.matmul(z, T.transpose(self.weight))
        return out if self.bias is None else T.add(out, self.bias)

    def named_parameters(self, prefix):
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


def _mlp_apply(layers: list[Dense], z: Tensor) -> Tensor:
    for n, layer in enumerate(layers):
        z = layer(z)
        if n < len(layers) - 1:
            z = T.relu(z)
    return z


@dataclass
class AttributeEncoder:
    """``g(tau) = G2 relu(G1 tau + b1) + b2`` (biases optional)."""

    G1: Tensor  # (K', t)
    G2: Tensor  # (K, K')
    b1: Tensor | None = None  # (K', 1)
    b2: Tensor | None = None  # (K, 1)

    @classmethod
    def init(cls, rng, tau_dim, hidden, out_dim, bias=True, init_range=0.05):
        return cls(
            _param(rng, (hidden, tau_dim), init_range),
            _param(rng, (out_dim, hidden), init_range),
            _zeros((hidden, 1)) if bias else None,
            _zeros((out_dim, 1)) if bias else None,
        )

    @property
    def out_dim(self) -> int:
        return self.G2.shape[0]

    def encode(self, tau) -> Tensor:
        """Encode one attribute vector ``(t,)`` or a column stack ``(..., t, n)``."""
        tau_t = tau if isinstance(tau, Tensor) else Tensor(tau)
        vector = tau_t.ndim == 1
        if vector:
            tau_t = T.reshape(tau_t, (tau_t.shape[0], 1))
        if tau_t.shape[-2] != self.G1.shape[1]:
            raise ShapeError(f"attribute dimension {tau_t.shape[-2]} != {self.G1.shape[1]}")
        h = T.matmul(self.G1, tau_t)
        if self.b1 is not None:
            h = T.add(h, self.b1)
        out = T.matmul(self.G2, T.relu(h))
        if self.b2 is not None:
            out = T.add(out, self.b2)
        return T.reshape(out, (out.shape[0],)) if vector else out

    def named_parameters(self, prefix):
        out = {f"{prefix}.G1": self.G1, f"{prefix}.G2": self.G2}
        if self.b1 is not None:
            out[f"{prefix}.b1"] = self.b1
            out[f"{prefix}.b2"] = self.b2
        return out


def _passes(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pf, pt = np.nonzero(mask)
    return pf.astype(np.intp), pt.astype(np.intp)


def _key_mask(valid: np.ndarray, pf: np.ndarray, causal: bool) -> Mask:
    rows = valid[pf]
    return Mask(causal=causal, key_valid=None if rows.all() else rows)


# ---------------------------------------------------------------------------
# components


class CategoricalComponent:
    """Masked-token prediction: ``eta_i = softmax(delta^T X'_ii)``."""

    def __init__(self, cfg: EFAConfig, rng: np.random.Generator):
        K, D, r = cfg.embed_dim, cfg.n_items, cfg.init_range
        if D < 2:
            raise ValueError("categorical component needs n_items >= 2")
        self.D = D
        self.beta = _param(rng, (K, D + 1), r)
        self.delta = _param(rng, (K, D), r)
        self.pos = _param(rng, (K, cfg.max_len), r) if cfg.positional else None
        self.layers = [
            init_layer(rng, K, cfg.n_heads, ffn_dim=cfg.ffn_dim, layer_norm=cfg.layer_norm,
                       residual=cfg.residual, init_range=r)
            for _ in range(cfg.n_layers)
        ]
        self.causal = cfg.causal
        self.kind = AttentionKind(cfg.attention, cfg.scale_mode)

    def named_parameters(self, prefix="cat"):
        out = {f"{prefix}.beta": self.beta, f"{prefix}.delta": self.delta}
        if self.pos is not None:
            out[f"{prefix}.pos"] = self.pos
        for n, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layer{n}"))
        return out

    def masked_inputs(self, x: np.ndarray, valid: np.ndarray, pf, pt) -> Tensor:
        """``X_i`` for every pass: context embeddings with column ``i`` set to MASK, plus positions."""
        i_len = x.shape[1]
        tokens = x[pf].copy()
        tokens[~valid[pf]] = self.D
        tokens[np.arange(len(pf)), pt] = self.D
        X = T.transpose(T.take(self.beta, tokens, axis=1), (1, 0, 2))
        if self.pos is not None:
            if i_len > self.pos.shape[1]:
                raise ShapeError(f"sequence length {i_len} exceeds positional table {self.pos.shape[1]}")
            X = T.add(X, T.take(self.pos, np.arange(i_len), axis=1))
        return X

    def context(self, batch: SequenceBatch, weights_out: list | None = None):
        """Return ``(H, pf, pt)`` where ``H[b] = X'_ii`` for pass ``b``."""
        x, valid = batch.x, batch.valid
        if x is None:
            raise ValueError("categorical component needs tokens")
        xv = x[valid]
        if xv.size and (xv.min() < 0 or xv.max() >= self.D):
            raise VocabError(f"token outside vocabulary [0, {self.D})")
        pf, pt = _passes(valid)
        X = self.masked_inputs(x, valid, pf, pt)
        out = multi_head_multi_layer(X, self.layers, _key_mask(valid, pf, self.causal), self.kind, weights_out)
        return T.select_columns(out, pt), pf, pt

    def logits(self, batch: SequenceBatch):
        H, pf, pt = self.context(batch)
        return T.matmul(H, self.delta), pf, pt


class ValueComponent:
    """Masked-value prediction: ``kappa_i = lambda_2(Y'_ii)``."""

    def __init__(self, cfg: EFAConfig, rng: np.random.Generator):
        K, Kv, r = cfg.embed_dim, cfg.value_dim, cfg.init_range
        self.cfg = cfg
        self.beta = self.delta = self.attr = None
        if cfg.value_tokens in ("context", "both"):
            if cfg.n_items < 1:
                raise ValueError("token blocks need n_items >= 1")
            self.beta = _param(rng, (K, cfg.n_items), r)
            if cfg.value_tokens == "both":
                self.delta = _param(rng, (K, cfg.n_items), r)
        elif cfg.value_tokens == "attribute":
            self.attr = AttributeEncoder.init(rng, cfg.attr_dim, cfg.attr_hidden, K, cfg.attr_bias, r)
        # lambda_1
        self.embed_kind = cfg.value_embed
        self.embed: dict[str, Tensor] = {}
        if cfg.value_embed == "linear":
            self.embed = {"w": _param(rng, (Kv, 1), r), "b": _zeros((Kv, 1))}
        elif cfg.value_embed == "mlp":
            h = cfg.value_embed_hidden
            self.embed = {"w1": _param(rng, (h, 1), r), "b1": _zeros((h, 1)),
                          "w2": _param(rng, (Kv, h), r), "b2": _zeros((Kv, 1))}
        elif cfg.value_embed == "table":
            self.embed = {"table": _param(rng, (Kv, cfg.n_values + 1), r)}
        if cfg.value_embed == "table":
            self.mask_vec = None  # last table column
        elif cfg.mask_embed == "learned":
            self.mask_vec = _param(rng, (Kv, 1), r)
        else:
            self.mask_vec = None
        self.day = _param(rng, (cfg.day_dim, cfg.day_slots), r) if cfg.day_slots else None
        width = cfg.value_width
        self.pos = _param(rng, (width, cfg.max_len), r) if cfg.positional else None
        self.proj = None
        if cfg.input_dim:
            hid = cfg.input_hidden or cfg.input_dim
            self.proj = (_param(rng, (hid, width), r), _zeros((hid, 1)),
                         _param(rng, (cfg.input_dim, hid), r), _zeros((cfg.input_dim, 1)))
            width = cfg.input_dim
        self.width = width
        self.layers = [
            init_layer(rng, width, cfg.n_heads, ffn_dim=cfg.ffn_dim, layer_norm=cfg.layer_norm,
                       residual=cfg.residual, init_range=r)
            for _ in range(cfg.n_layers)
        ]
        self.causal = cfg.causal
        self.kind = AttentionKind(cfg.attention, cfg.scale_mode)
        dims = [width, *cfg.readout_hidden, 1]
        self.readout: list[Dense] = []
        for n in range(len(dims) - 1):
            last = n == len(dims) - 2
            w = _zeros((dims[n + 1], dims[n])) if last else _param(rng, (dims[n + 1], dims[n]), r)
            b = None if (last and not cfg.readout_bias) else _zeros((dims[n + 1],))
            self.readout.append(Dense(w, b))

    def named_parameters(self, prefix="val"):
        out: dict[str, Tensor] = {}
        if self.beta is not None:
            out[f"{prefix}.beta"] = self.beta
        if self.delta is not None:
            out[f"{prefix}.delta"] = self.delta
        if self.attr is not None:
            out.update(self.attr.named_parameters(f"{prefix}.attr"))
        for k, v in self.embed.items():
            out[f"{prefix}.embed.{k}"] = v
        if self.mask_vec is not None:
            out[f"{prefix}.mask"] = self.mask_vec
        if self.day is not None:
            out[f"{prefix}.day"] = self.day
        if self.pos is not None:
            out[f"{prefix}.pos"] = self.pos
        if self.proj is not None:
            for k, v in zip(("w1", "b1", "w2", "b2"), self.proj):
                out[f"{prefix}.proj.{k}"] = v
        for n, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layer{n}"))
        for n, layer in enumerate(self.readout):
            out.update(layer.named_parameters(f"{prefix}.readout{n}"))
        return out

    # lambda_1 on a (F, I) value matrix -> (F, K', I)
    def _embed_values(self, y: np.ndarray) -> Tensor:
        y3 = Tensor(y[:, None, :])
        if self.embed_kind == "identity":
            return y3
        if self.embed_kind == "linear":
            return T.add(T.mul(self.embed["w"], y3), self.embed["b"])
        e = self.embed
        h = T.relu(T.add(T.mul(e["w1"], y3), e["b1"]))
        return T.add(T.matmul(e["w2"], h), e["b2"])

    def _value_block(self, batch: SequenceBatch, pf, pt) -> Tensor:
        B, i_len = len(pf), batch.shape[1]
        if self.embed_kind == "table":
            n = self.cfg.n_values
            idx = np.rint(batch.y[pf]).astype(np.int64) - self.cfg.value_min
            idx[~batch.valid[pf]] = 0
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise VocabError(f"value outside table range [{self.cfg.value_min}, {self.cfg.value_min + n})")
            idx[~batch.valid[pf]] = n
            idx[np.arange(B), pt] = n
            return T.transpose(T.take(self.embed["table"], idx, axis=1), (1, 0, 2))
        y = np.where(batch.valid, batch.y, 0.0)
        E = T.take(self._embed_values(y), pf, axis=0)
        onehot = np.zeros((B, 1, i_len))
        onehot[np.arange(B), 0, pt] = 1.0
        E = T.mul(E, 1.0 - onehot)
        if self.mask_vec is not None:
            E = T.add(E, T.mul(self.mask_vec, onehot))
        return E

    def masked_inputs(self, batch: SequenceBatch, pf, pt) -> Tensor:
        B, i_len = len(pf), batch.shape[1]
        blocks = []
        if self.beta is not None:
            if batch.x is None:
                raise ValueError("token blocks need x")
            tokens = np.where(batch.valid, batch.x, 0)[pf]
            if tokens.size and (tokens.min() < 0 or tokens.max() >= self.beta.shape[1]):
                raise VocabError(f"token outside vocabulary [0, {self.beta.shape[1]})")
            blocks.append(T.transpose(T.take(self.beta, tokens, axis=1), (1, 0, 2)))
            if self.delta is not None:
                blocks.append(T.transpose(T.take(self.delta, tokens, axis=1), (1, 0, 2)))
        if self.attr is not None:
            if batch.tau is None:
                raise ValueError("attribute tokens need tau")
            tau = batch.tau
            if tau.ndim == 2:
                g = self.attr.encode(tau.T)  # (K, I)
                blocks.append(T.take(T.reshape(g, (1,) + g.shape), np.zeros(B, dtype=np.intp), axis=0))
            else:
                g = self.attr.encode(np.swapaxes(tau, 1, 2))  # (F, K, I)
                blocks.append(T.take(g, pf, axis=0))
        if self.day is not None:
            if batch.day is None:
                raise ValueError("day embeddings need a day index")
            blocks.append(T.transpose(T.take(self.day, batch.day[pf], axis=1), (1, 0, 2)))
        blocks.append(self._value_block(batch, pf, pt))
        Y = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=-2)
        if self.pos is not None:
            if i_len > self.pos.shape[1]:
                raise ShapeError(f"sequence length {i_len} exceeds positional table {self.pos.shape[1]}")
            Y = T.add(Y, T.take(self.pos, np.arange(i_len), axis=1))
        if self.proj is not None:
            w1, b1, w2, b2 = self.proj
            Y = T.add(T.matmul(w2, T.relu(T.add(T.matmul(w1, Y), b1))), b2)
        return Y

    def column(self, batch: SequenceBatch, weights_out: list | None = None):
        if batch.y is None:
            raise ValueError("value component needs y")
        pf, pt = _passes(batch.target)
        Y = self.masked_inputs(batch, pf, pt)
        out = multi_head_multi_layer(Y, self.layers, _key_mask(batch.valid, pf, self.causal), self.kind, weights_out)
        return T.select_columns(out, pt), pf, pt

    def readout_features(self, z: Tensor) -> Tensor:
        """Input of the last readout layer (``K_emb`` in affine-readout mode)."""
        for layer in self.readout[:-1]:
            z = T.relu(layer(z))
        return z

    def natural(self, batch: SequenceBatch):
        z, pf, pt = self.column(batch)
        kappa = _mlp_apply(self.readout, z)
        return T.reshape(kappa, (kappa.shape[0],)), pf, pt


# ---------------------------------------------------------------------------
# models


class Model:
    """Parameter bookkeeping and checkpoint IO shared by EFA and FM models."""

    kind = "model"

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def meta(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint: parameters, buffers and a JSON header."""
        header = {"format": "efa-checkpoint", "version": CHECKPOINT_VERSION, "model": self.kind, **self.meta()}
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        arrays.update({f"buffer/{k}": v for k, v in self.buffers().items()})
        arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    # -- interface implemented by subclasses ---------------------------------
    head_x: Categorical | None = None
    head_y: ExpFamHead | None = None

    def categorical_logits(self, batch: SequenceBatch):
        """``(logits (B, D), pf, pt)`` for every valid position ``(pf[b], pt[b])``."""
        raise StructureError(f"{type(self).__name__} has no categorical component")

    def value_natural(self, batch: SequenceBatch):
        """``(kappa (B,), pf, pt)`` for every target position."""
        raise StructureError(f"{type(self).__name__} has no value component")

    # -- derived quantities ---------------------------------------------------
    def categorical_probs(self, x, valid=None) -> np.ndarray:
        """``(F, D, I)`` array whose column ``i`` is ``eta_i``; padding columns are zero."""
        batch = x if isinstance(x, SequenceBatch) else SequenceBatch(x=np.atleast_2d(x), valid=valid)
        with T.no_grad():
            logits, pf, pt = self.categorical_logits(batch)
        F, I = batch.shape
        out = np.zeros((F, self.head_x.D, I))
        out[pf, :, pt] = self.head_x.mean(logits.data)
        return out

    def categorical_log_prob(self, batch: SequenceBatch) -> np.ndarray:
        """``(F, I)`` array of ``log eta_i(x_i)`` at valid positions, NaN elsewhere."""
        with T.no_grad():
            logits, pf, pt = self.categorical_logits(batch)
        out = np.full(batch.shape, np.nan)
        out[pf, pt] = self.head_x.log_prob(logits.data, batch.x[pf, pt])
        return out

    def value_natural_params(self, batch: SequenceBatch) -> np.ndarray:
        """``(F, I)`` array of ``kappa_i`` at target positions, NaN elsewhere."""
        with T.no_grad():
            kappa, pf, pt = self.value_natural(batch)
        out = np.full(batch.shape, np.nan)
        out[pf, pt] = kappa.data
        return out

    def has_categorical(self) -> bool:
        return self.head_x is not None

    def has_value(self) -> bool:
        return self.head_y is not None

    # -- likelihood -------------------------------------------------------------
    def log_likelihood_sums(self, batch: SequenceBatch, categorical: bool = True, value: bool = True):
        """Summed log-likelihood of each enabled term, as Tensors (or None)."""
        cat = val = None
        if categorical and self.has_categorical():
            logits, pf, pt = self.categorical_logits(batch)
            cat = T.sum(self.head_x.log_prob_tensor(logits, batch.x[pf, pt]))
        if value and self.has_value():
            kappa, pf, pt = self.value_natural(batch)
            val = T.sum(self.head_y.log_prob_tensor(kappa, batch.y[pf, pt]))
        return cat, val

    def joint_log_likelihood(self, batch: SequenceBatch, categorical: bool = True, value: bool = True) -> Tensor:
        """Sum of ``log eta_i(x_i) + log p(y_i | kappa_i)`` over the batch, divided by the valid-position count."""
        cat, val = self.log_likelihood_sums(batch, categorical, value)
        terms = [t for t in (cat, val) if t is not None]
        if not terms:
            raise StructureError("no likelihood term enabled")
        total = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
        return T.scale(total, 1.0 / int(batch.valid.sum()))

    def loss(self, batch: SequenceBatch) -> Tensor:
        return T.neg(self.joint_log_likelihood(batch))

    # -- prediction ---------------------------------------------------------------
    def predict_mean(self, batch: SequenceBatch) -> np.ndarray:
        kappa = self.value_natural_params(batch)
        out = np.full(batch.shape, np.nan)
        m = batch.target
        out[m] = self.head_y.mean(kappa[m])
        return out

    def predict_masked(self, batch: SequenceBatch, f: int, i: int) -> tuple[float, float]:
        """Predicted mean of held-out ``y[f, i]`` and its log-probability."""
        F, I = batch.shape
        if not (0 <= f < F and 0 <= i < I) or not batch.target[f, i]:
            raise IndexError(f"position ({f}, {i}) is not a target")
        single = batch.subset([f])
        kappa = self.value_natural_params(single)[0, i]
        return float(self.head_y.mean(kappa)), float(self.head_y.log_prob(kappa, batch.y[f, i]))


class EFAModel(Model):
    kind = "efa"

    def __init__(self, config: EFAConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.categorical = CategoricalComponent(config, rng) if config.categorical else None
        self.value = ValueComponent(config, rng) if config.value else None
        self.head_x = Categorical(config.n_items) if config.categorical else None
        self.head_y: ExpFamHead | None = None
        if config.value:
            self.head_y = make_head({"kind": config.head, "variance": config.variance})

    def named_parameters(self):
        out = {}
        if self.categorical is not None:
            out.update(self.categorical.named_parameters("cat"))
        if self.value is not None:
            out.update(self.value.named_parameters("val"))
        return out

    def meta(self):
        return {"config": self.config.to_dict(), "seed": self.seed}

    def categorical_logits(self, batch: SequenceBatch):
        if self.categorical is None:
            raise StructureError("model has no categorical component")
        return self.categorical.logits(batch)

    def value_natural(self, batch: SequenceBatch):
        if self.value is None:
            raise StructureError("model has no value component")
        return self.value.natural(batch)


# ---------------------------------------------------------------------------
# the three worked instantiations


def instantiate_example(kind: str, dims: dict, direction: str = "bidirectional", seed: int = 0,
                        **overrides) -> EFAModel:
    """Configure an EFA model for one of the three worked data types.

    ``kind`` is ``"baskets"``, ``"spatiotemporal_gaussian"`` or
    ``"movie_ratings"``. ``dims`` supplies sizes (``n_items``, ``max_len``,
    ``embed_dim``, ``value_dim``, ``attr_dim``); ``overrides`` go straight
    into :class:`EFAConfig`. Baskets take ``ordered`` (default True) to
    decide whether positional embeddings are used.
    """
    if direction not in ("unidirectional", "bidirectional"):
        raise ValueError(f"unknown direction {direction!r}")
    causal = direction == "unidirectional"
    if any(int(v) <= 0 for k, v in dims.items() if isinstance(v, (int, np.integer)) and k != "value_min"):
        raise ValueError("dims must be positive")
    base = {k: v for k, v in dims.items() if k in {f.name for f in fields(EFAConfig)}}
    if kind == "baskets":
        ordered = overrides.pop("ordered", True)
        cfg = EFAConfig(categorical=True, value=False, causal=causal, positional=bool(ordered), head=None,
                        **base)
    elif kind == "spatiotemporal_gaussian":
        if causal:
            raise ValueError("spatiotemporal model is bidirectional only")
        cfg = EFAConfig(categorical=False, value=True, causal=False, positional=False,
                        value_tokens="attribute", head="gaussian", **base)
    elif kind == "movie_ratings":
        cfg = EFAConfig(categorical=True, value=True, causal=causal, positional=True,
                        value_tokens="both", head="poisson_shifted", **base)
    else:
        raise ValueError(f"unknown example kind {kind!r}")
    if overrides:
        cfg = replace(cfg, **overrides)
    return EFAModel(cfg, seed=seed)


# ---------------------------------------------------------------------------
# checkpoints


_LOADERS = {}


def register_loader(kind):
    def deco(fn):
        _LOADERS[kind] = fn
        return fn
    return deco


@register_loader("efa")
def _load_efa(header, params, buffers):
    model = EFAModel(EFAConfig.from_dict(header["config"]), seed=header.get("seed", 0))
    model.load_state_dict(params)
    return model


def load_checkpoint(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as npz:
        header = json.loads(str(npz["__header__"]))
        if header.get("format") != "efa-checkpoint":
            raise ValueError(f"{path} is not an efa checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
        buffers = {k[len("buffer/"):]: npz[k] for k in npz.files if k.startswith("buffer/")}
    kind = header["model"]
    if kind not in _LOADERS:
        # FM loader registers on import
        from . import fm  # noqa: F401
    return _LOADERS[kind](header, params, buffers)
