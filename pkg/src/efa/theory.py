"""Empirical counterparts of the identifiability and generalization theory.

* embedding extraction: context embedding ``H = X'_ii``, center embeddings
  ``e = delta``, and, in affine-readout mode, the factorization
  ``kappa = K_emb^T L_vec`` of the value component;
* linear identifiability probes between two models;
* diversity matrices and their condition numbers;
* the operator-norm functional ``||theta||``, clipping, and the excess-loss
  bound expression (with its unspecified constant set to 1).
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .attention import AttentionLayer
from .model import AttributeEncoder, EFAModel, SequenceBatch, StructureError
from .tensor import Tensor, clip

__all__ = [
    "SamplingError",
    "extract_embeddings",
    "context_embeddings",
    "value_embeddings",
    "IdentifiabilityProbeReport",
    "linear_identifiability_probe",
    "plant_linear_map",
    "diversity_matrices",
    "operator_norm",
    "theta_norm",
    "model_theta_norm",
    "clip",
    "clip_array",
    "GeneralizationBoundInputs",
    "generalization_bound",
]


class SamplingError(ValueError):
    """Not enough distinct data to build a diversity matrix."""


# ---------------------------------------------------------------------------
# embeddings


def context_embeddings(model: EFAModel, batch: SequenceBatch):
    """Rows ``H_b = X'_ii`` for every valid position, with the pass indices."""
    if model.categorical is None:
        raise StructureError("model has no categorical component")
    with T.no_grad():
        H, pf, pt = model.categorical.context(batch)
    return H.data, pf, pt


def value_embeddings(model: EFAModel, batch: SequenceBatch):
    """Rows ``K_emb`` for every target position, the vector ``L_vec``, and pass indices.

    Requires affine-readout mode: the final readout layer has no bias, so
    ``kappa = K_emb^T L_vec`` exactly.
    """
    v = model.value
    if v is None:
        raise StructureError("model has no value component")
    last = v.readout[-1]
    if last.bias is not None:
        raise StructureError("value readout has a bias; build the model with readout_bias=False")
    with T.no_grad():
        z, pf, pt = v.column(batch)
        K_emb = v.readout_features(z).data
    return K_emb, last.weight.data[0].copy(), pf, pt


def extract_embeddings(model: EFAModel, batch: SequenceBatch, f: int, i: int) -> dict:
    """Embeddings at position ``(f, i)``.

    Returns ``H`` (``X'_ii``) and ``e`` (all center embeddings, ``K x D``)
    when the model has a categorical component, and ``K_emb`` / ``L_vec``
    when it has a value component in affine-readout mode.
    """
    single = batch.subset([f])
    if not single.valid[0, i]:
        raise IndexError(f"position ({f}, {i}) is padding")
    out = {}
    if model.categorical is not None:
        H, _, pt = context_embeddings(model, single)
        out["H"] = H[list(pt).index(i)]
        out["e"] = model.categorical.delta.data.copy()
    if model.value is not None:
        if not single.target[0, i]:
            raise IndexError(f"position ({f}, {i}) is not a target")
        K_emb, L_vec, _, pt = value_embeddings(model, single)
        out["K_emb"] = K_emb[list(pt).index(i)]
        out["L_vec"] = L_vec
    return out


# ---------------------------------------------------------------------------
# identifiability probes


@dataclass
class IdentifiabilityProbeReport:
    maps: dict = field(default_factory=dict)  # name -> fitted matrix (list of lists)
    residuals: dict = field(default_factory=dict)  # name -> relative residual
    condition: dict = field(default_factory=dict)  # name -> condition number of the regressor
    n_probes: int = 0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _fit_map(target: np.ndarray, source: np.ndarray):
    """Least-squares ``A`` with ``target_row ~= A source_row`` for rows of ``(n, d)`` stacks."""
    sol, _, rank, sv = np.linalg.lstsq(source, target, rcond=None)
    A = sol.T
    resid = np.linalg.norm(target - source @ sol)
    denom = np.linalg.norm(target)
    rel = float(resid / denom) if denom > 0 else float(resid)
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else math.inf
    return A, rel, cond, int(rank), source.shape[1]


def linear_identifiability_probe(model_a: EFAModel, model_b: EFAModel, probe: SequenceBatch,
                                 cond_limit: float = 1e10) -> IdentifiabilityProbeReport:
    """Fit ``H_A ~= A H_B``, ``e_A ~= B e_B`` (and ``K_emb``, ``L_vec`` for value components).

    Residuals are ``||target - fitted||_F / ||target||_F``. This reports; it does not judge.
    """
    rep = IdentifiabilityProbeReport()

    def record(name, target, source):
        A, rel, cond, rank, d = _fit_map(target, source)
        rep.maps[name] = A.tolist()
        rep.residuals[name] = rel
        rep.condition[name] = cond
        if rank < d or cond > cond_limit:
            rep.warnings.append(f"{name}: regressor is ill-conditioned (rank {rank} of {d}, condition {cond:.3g})")

    if model_a.categorical is not None and model_b.categorical is not None:
        Ha, _, _ = context_embeddings(model_a, probe)
        Hb, _, _ = context_embeddings(model_b, probe)
        record("H", Ha, Hb)
        record("e", model_a.categorical.delta.data.T, model_b.categorical.delta.data.T)
        rep.n_probes = Ha.shape[0]
    if model_a.value is not None and model_b.value is not None:
        Ka, La, _, _ = value_embeddings(model_a, probe)
        Kb, Lb, _, _ = value_embeddings(model_b, probe)
        record("K_emb", Ka, Kb)
        # a single vector: report the best scalar multiple (a rank-one check)
        denom = float(Lb @ Lb)
        s = float(La @ Lb) / denom if denom > 0 else 0.0
        rep.maps["L_vec"] = [[s]]
        na = np.linalg.norm(La)
        rep.residuals["L_vec"] = float(np.linalg.norm(La - s * Lb) / na) if na > 0 else 0.0
        rep.n_probes = max(rep.n_probes, Ka.shape[0])
    if not rep.residuals:
        raise StructureError("models share no component to probe")
    return rep


def plant_linear_map(model: EFAModel, M: np.ndarray) -> EFAModel:
    """Copy of ``model`` whose categorical context embeddings are ``M H`` and
    center embeddings ``M^{-T} delta``, so every probability is unchanged.

    The last attention layer must have no residual connection or layer norm;
    ``M`` is applied to its output map (feed-forward ``W2, b2`` if present,
    otherwise every head's ``W_V``).
    """
    if model.categorical is None:
        raise StructureError("model has no categorical component")
    M = np.asarray(M, dtype=np.float64)
    K = model.config.embed_dim
    if M.shape != (K, K):
        raise ValueError(f"M must be {K}x{K}")
    new = copy.deepcopy(model)
    cat = new.categorical
    if not cat.layers:
        raise StructureError("planting needs at least one attention layer")
    last = cat.layers[-1]
    if last.use_residual or last.norm is not None:
        raise StructureError("last layer must not use a residual connection or layer norm")
    if last.ffn is not None:
        w1, b1, w2, b2 = last.ffn
        w2.data[...] = M @ w2.data
        b2.data[...] = M @ b2.data
    else:
        for head in last.heads:
            head.wv.data[...] = M @ head.wv.data
    cat.delta.data[...] = np.linalg.solve(M.T, cat.delta.data)
    return new


# ---------------------------------------------------------------------------
# diversity matrices


def _condition(mat: np.ndarray) -> float:
    sv = np.linalg.svd(mat, compute_uv=False)
    return float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf


def diversity_matrices(model: EFAModel, data: SequenceBatch | None = None, *, tuples=None, points=None,
                       value_points=None, seed: int = 0, singular_limit: float = 1e12) -> dict:
    """Build the ``L``, ``M`` and ``N`` diversity matrices and their condition numbers.

    * ``L`` (``K x K``): columns ``e(x_A) - e(x_B)`` for ``K`` token pairs
      (by default a star: one hub token paired with ``K`` others);
    * ``M`` (``(K+1) x (K+1)``): columns ``[-logsumexp(H^T e); H]`` for ``K+1``
      context embeddings;
    * ``N`` (``d_j x d_j``): columns ``K_emb`` for ``d_j`` value positions.

    Pairs and positions are drawn with a seeded RNG from ``data`` unless given
    explicitly (``tuples``: list of token pairs; ``points``/``value_points``:
    row indices into the stacked embeddings).
    """
    rng = np.random.default_rng(seed)
    out: dict = {}
    if model.categorical is not None:
        delta = model.categorical.delta.data
        K, D = delta.shape
        if tuples is None:
            # a star of pairs (x_0, x_j) avoids cycles, which would make L singular by construction
            present = np.unique(data.x[data.valid]) if data is not None else np.arange(D)
            if present.size < K + 1:
                raise SamplingError(f"only {present.size} distinct tokens; need {K + 1}")
            hub, *rest = rng.permutation(present)[:K + 1]
            tuples = [(int(hub), int(b)) for b in rest]
        if len(tuples) != K:
            raise SamplingError(f"L needs exactly {K} tuples")
        L = np.stack([delta[:, a] - delta[:, b] for a, b in tuples], axis=1)
        out["L"] = L
        out["cond_L"] = _condition(L)
        if data is not None:
            H, _, _ = context_embeddings(model, data)
            uniq = np.unique(np.round(H, 12), axis=0, return_index=True)[1]
            if points is None:
                if uniq.size < K + 1:
                    raise SamplingError(f"only {uniq.size} distinct context embeddings; need {K + 1}")
                points = np.sort(rng.choice(uniq, size=K + 1, replace=False))
            Hs = H[np.asarray(points)]
            lse = logsumexp(Hs @ delta, axis=1)
            Mm = np.concatenate([-lse[None, :], Hs.T], axis=0)
            out["M"] = Mm
            out["cond_M"] = _condition(Mm)
    if model.value is not None and data is not None and model.value.readout[-1].bias is None:
        K_emb, _, _, _ = value_embeddings(model, data)
        dj = K_emb.shape[1]
        uniq = np.unique(np.round(K_emb, 12), axis=0, return_index=True)[1]
        if value_points is None:
            if uniq.size < dj:
                raise SamplingError(f"only {uniq.size} distinct value embeddings; need {dj}")
            value_points = np.sort(rng.choice(uniq, size=dj, replace=False))
        N = K_emb[np.asarray(value_points)].T
        out["N"] = N
        out["cond_N"] = _condition(N)
    if not out:
        raise StructureError("nothing to build: model lacks the needed components or data")
    out["singular"] = {k[5:]: bool(v > singular_limit) for k, v in out.items() if k.startswith("cond_")}
    return out


# ---------------------------------------------------------------------------
# norms, clipping, bound


def operator_norm(W, tol: float = 1e-9, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    W = np.asarray(W.data if isinstance(W, Tensor) else W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("operator_norm needs a matrix")
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(0).standard_normal(W.shape[1])
    sigma = np.linalg.norm(W @ v) / np.linalg.norm(v)
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new_sigma = np.linalg.norm(W @ v) / np.linalg.norm(v)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return float(new_sigma)
        sigma = new_sigma
    warnings.warn("operator_norm: power iteration did not converge", RuntimeWarning, stacklevel=2)
    return float(sigma)


def theta_norm(layers: list[AttentionLayer], encoder: AttributeEncoder | None = None, tol: float = 1e-9) -> float:
    """``max_l [max_m max(|Q_m|, |K_m|) + sum_m |V_m| + |W1| + |W2|] + |G1| + |G2|`` in operator norms."""
    worst = 0.0
    for layer in layers:
        qk = max(max(operator_norm(h.wq, tol), operator_norm(h.wk, tol)) for h in layer.heads)
        v = sum(operator_norm(h.wv, tol) for h in layer.heads)
        ffn = 0.0
        if layer.ffn is not None:
            ffn = operator_norm(layer.ffn[0], tol) + operator_norm(layer.ffn[2], tol)
        worst = max(worst, qk + v + ffn)
    if encoder is not None:
        worst += operator_norm(encoder.G1, tol) + operator_norm(encoder.G2, tol)
    return float(worst)


def model_theta_norm(model: EFAModel, tol: float = 1e-9) -> float:
    """``theta_norm`` of the value component (its attention stack and attribute encoder)."""
    if model.value is None:
        raise StructureError("model has no value component")
    return theta_norm(model.value.layers, model.value.attr, tol)


def clip_array(x, bound: float) -> np.ndarray:
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    return np.clip(np.asarray(x, dtype=np.float64), -bound, bound)


@dataclass(frozen=True)
class GeneralizationBoundInputs:
    B_y: float
    B: float
    R: float
    L: int
    M: int
    D: int
    D_prime: int
    K: int
    K_prime: int
    tau_dim: int
    F: int
    xi: float

    def __post_init__(self):
        for name in ("B_y", "B", "R"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("L", "M", "D", "D_prime", "K", "K_prime", "tau_dim", "F"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 < self.xi < 1:
            raise ValueError("xi must lie in (0, 1)")


def generalization_bound(inp: GeneralizationBoundInputs) -> float:
    """``B_y^2 sqrt((43 L (L (3 M D^2 + 2 D D') + K' (K + tau)) iota + log(1/xi)) / F)``.

    ``iota = log(2 + max(B, R, 1/(2 B_y)))``. The leading constant is set
    to 1, so the value is a relative complexity measure.
    """
    iota = math.log(2.0 + max(inp.B, inp.R, 1.0 / (2.0 * inp.B_y)))
    arch = inp.L * (3 * inp.M * inp.D ** 2 + 2 * inp.D * inp.D_prime) + inp.K_prime * (inp.K + inp.tau_dim)
    inner = 43.0 * inp.L * arch * iota + math.log(1.0 / inp.xi)
    return inp.B_y ** 2 * math.sqrt(inner / inp.F)
