"""Self-attention over column-stacked sequences.

A sequence is a ``d x I`` matrix whose columns are positions (batched as
``(B, d, I)``). One head computes::

    X' = W_V X . softmax((W_Q X)^T W_K X / d + M)      (softmax kind)
    X' = W_V X . ((W_Q X)^T W_K X / d)                 (linear kind)

with the softmax taken down each column. Entry ``(a, b)`` of the weight
matrix is how much output column ``b`` draws from input column ``a``, so a
causal mask keeps rows ``a <= b`` of column ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "AttentionKind",
    "AttentionHead",
    "AttentionLayer",
    "Mask",
    "causal_mask",
    "attend",
    "multi_head_multi_layer",
    "init_layer",
]


@dataclass(frozen=True)
class AttentionKind:
    kind: str = "softmax"
    scale_mode: str = "dim"  # "dim" divides by d; "sqrt" divides by sqrt(d)

    def __post_init__(self):
        if self.kind not in ("softmax", "linear"):
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.scale_mode not in ("dim", "sqrt"):
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")

    def denominator(self, d: int) -> float:
        return float(d) if self.scale_mode == "dim" else math.sqrt(d)


SOFTMAX = AttentionKind("softmax")
LINEAR = AttentionKind("linear")


def causal_mask(i_len: int, kind: AttentionKind | str = SOFTMAX) -> np.ndarray:
    """``M[a, b] = 0`` if ``a <= b`` else ``-inf`` (softmax) / ``1`` else ``0`` (linear)."""
    if i_len < 1:
        raise ValueError("sequence length must be at least 1")
    kind = AttentionKind(kind) if isinstance(kind, str) else kind
    visible = np.triu(np.ones((i_len, i_len), dtype=bool))
    if kind.kind == "softmax":
        return np.where(visible, 0.0, -np.inf)
    return visible.astype(np.float64)


@dataclass
class Mask:
    """Which input columns each output column may read.

    ``causal`` restricts column ``b`` to rows ``a <= b``; ``key_valid`` (shape
    ``(B, I)``) hides padded columns from every reader.
    """

    causal: bool = False
    key_valid: np.ndarray | None = None

    def visible(self, i_len: int) -> np.ndarray | None:
        vis = None
        if self.causal:
            vis = np.triu(np.ones((i_len, i_len), dtype=bool))
        if self.key_valid is not None:
            kv = np.asarray(self.key_valid, dtype=bool)[:, :, None]
            vis = kv if vis is None else (vis[None] & kv)
        return vis

    def realize(self, i_len: int, kind: AttentionKind) -> np.ndarray | None:
        vis = self.visible(i_len)
        if vis is None:
            return None
        if kind.kind == "softmax":
            return np.where(vis, 0.0, -np.inf)
        return vis.astype(np.float64)


@dataclass
class AttentionHead:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv}


@dataclass
class AttentionLayer:
    heads: list[AttentionHead]
    use_residual: bool = False
    ffn: tuple[Tensor, Tensor, Tensor, Tensor] | None = None  # W1 (D'xd), b1 (D'x1), W2 (dxD'), b2 (dx1)
    norm: tuple[Tensor, Tensor] | None = None  # gain (dx1), bias (dx1)

    def __post_init__(self):
        if not self.heads:
            raise ValueError("a layer needs at least one head")
        d = self.heads[0].wq.shape[0]
        for h in self.heads:
            for w in (h.wq, h.wk, h.wv):
                if w.shape != (d, d):
                    raise ShapeError(f"head matrices must all be {d}x{d}, got {w.shape}")

    @property
    def dim(self) -> int:
        return self.heads[0].wq.shape[0]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m, h in enumerate(self.heads):
            out.update(h.named_parameters(f"{prefix}.head{m}"))
        if self.ffn is not None:
            for name, t in zip(("w1", "b1", "w2", "b2"), self.ffn):
                out[f"{prefix}.ffn.{name}"] = t
        if self.norm is not None:
            out[f"{prefix}.norm.gain"], out[f"{prefix}.norm.bias"] = self.norm
        return out


def attend(x: Tensor, head: AttentionHead, mask: Mask | None = None,
           kind: AttentionKind = SOFTMAX, weights_out: list | None = None) -> Tensor:
    """One attention head applied to ``x`` of shape ``(..., d, I)``."""
    d, i_len = x.shape[-2], x.shape[-1]
    if head.wq.shape[1] != d:
        raise ShapeError(f"head expects dimension {head.wq.shape[1]}, input has {d}")
    q = T.matmul(head.wq, x)
    k = T.matmul(head.wk, x)
    v = T.matmul(head.wv, x)
    scores = T.scale(T.matmul(T.transpose(q), k), 1.0 / kind.denominator(d))
    realized = mask.realize(i_len, kind) if mask is not None else None
    if kind.kind == "softmax":
        weights = T.masked_softmax_columns(scores, realized)
    else:
        weights = scores if realized is None else T.mul(scores, realized)
    if weights_out is not None:
        weights_out.append(weights.data)
    return T.matmul(v, weights)


def multi_head_multi_layer(x: Tensor, layers: list[AttentionLayer], mask: Mask | None = None,
                           kind: AttentionKind = SOFTMAX, weights_out: list | None = None) -> Tensor:
    """Apply ``layers`` in order.

    Within a layer: heads are summed, then the residual is added, then the
    feed-forward block (itself residual when the layer is), then layer norm.
    ``weights_out`` collects one list of per-head weight arrays per layer.
    """
    h = x
    for layer in layers:
        per_head: list | None = [] if weights_out is not None else None
        outs = [attend(h, head, mask, kind, per_head) for head in layer.heads]
        a = outs[0]
        for o in outs[1:]:
            a = T.add(a, o)
        if weights_out is not None:
            weights_out.append(per_head)
        h = T.add(h, a) if layer.use_residual else a
        if layer.ffn is not None:
            w1, b1, w2, b2 = layer.ffn
            f = T.add(T.matmul(w2, T.relu(T.add(T.matmul(w1, h), b1))), b2)
            h = T.add(h, f) if layer.use_residual else f
        if layer.norm is not None:
            h = T.layer_norm(h, layer.norm[0], layer.norm[1])
    return h


def init_layer(rng: np.random.Generator, d: int, n_heads: int = 1, *, ffn_dim: int = 0,
               layer_norm: bool = False, residual: bool = False, init_range: float = 0.05) -> AttentionLayer:
    def u(*shape):
        return Tensor(rng.uniform(-init_range, init_range, size=shape), requires_grad=True)

    heads = [AttentionHead(u(d, d), u(d, d), u(d, d)) for _ in range(n_heads)]
    ffn = None
    if ffn_dim:
        ffn = (u(ffn_dim, d), Tensor(np.zeros((ffn_dim, 1)), requires_grad=True),
               u(d, ffn_dim), Tensor(np.zeros((d, 1)), requires_grad=True))
    norm = None
    if layer_norm:
        norm = (Tensor(np.ones((d, 1)), requires_grad=True), Tensor(np.zeros((d, 1)), requires_grad=True))
    return AttentionLayer(heads, use_residual=residual, ffn=ffn, norm=norm)
