"""Config-driven experiment runs, attention/QKV dumps and co-purchase queries.

A run writes one directory::

    config.snapshot   the validated config (JSON)
    metrics.json      evaluation numbers; no timings, byte-stable for a fixed config and seed
    report.json       the fit report, including wall-clock time
    checkpoint.npz    fitted parameters
    items.json        token labels, when the data has them
    dumps/            attention weights for the first test sequence (EFA with tokens)
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import datasets as ds
from .fm import FMModel, context_matrix
from .model import EFAModel, Model, SequenceBatch, StructureError, instantiate_example, load_checkpoint
from .training import FitConfig, FitReport, evaluate, fit

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "RunResult",
    "export_attention_weights",
    "fm_attention_weights",
    "write_matrix_csv",
    "read_matrix_csv",
    "export_qkv_embeddings",
    "top_copurchase",
    "theory_probe",
]

log = logging.getLogger(__name__)

EXPERIMENTS = ("synthetic", "ratings_seq", "ratings_values", "baskets", "temperature")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    experiment: str = "synthetic"
    model: str = "efa"  # efa | fm
    direction: str = "unidirectional"
    head: str = ""  # ratings_values: poisson_v1 | poisson_v2
    # architecture
    embed_dim: int = 16
    value_dim: int = 16
    n_layers: int = 2
    n_heads: int = 2
    residual: bool = True
    ffn_dim: int = 0
    layer_norm: bool = False
    readout_hidden: list = field(default_factory=lambda: [32])
    positional: bool | None = None  # None: experiment default
    attr_hidden: int = 128
    input_hidden: int = 0
    input_dim: int = 0
    # optimisation
    learning_rate: float = 3e-3
    max_epochs: int = 60
    patience: int = 10
    batch_size: int = 128
    # synthetic data
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 1000
    # external data
    data_path: str = ""
    top_n: int = 50
    min_basket_count: int = 1
    min_items_per_basket: int = 1
    split_fractions: list = field(default_factory=lambda: [0.5625, 0.1875, 0.25])
    train_years: list = field(default_factory=lambda: [2007, 2012])
    val_years: list = field(default_factory=lambda: [2013, 2016])
    test_years: list = field(default_factory=lambda: [2017, 2019])
    knn_k: int = 0  # 0: full context
    lags: bool = False
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    dumps: bool = True

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.model not in ("efa", "fm"):
            raise ConfigError(f"model must be 'efa' or 'fm', got {self.model!r}")
        if self.direction not in ("unidirectional", "bidirectional"):
            raise ConfigError(f"direction must be 'unidirectional' or 'bidirectional', got {self.direction!r}")
        if self.experiment == "ratings_values" and self.head not in ("poisson_v1", "poisson_v2"):
            raise ConfigError("ratings_values needs head 'poisson_v1' or 'poisson_v2'")
        if self.experiment != "ratings_values" and self.head:
            raise ConfigError("head is only configurable for ratings_values")
        if self.experiment == "temperature":
            if self.positional:
                raise ConfigError("temperature sites have no order: positional embeddings are not allowed")
            if self.direction != "bidirectional":
                raise ConfigError("temperature models are bidirectional only")
            if self.model == "fm" and self.lags:
                raise ConfigError("lag columns are only supported for EFA")
        elif self.lags:
            raise ConfigError("lags apply to the temperature experiment only")
        if self.knn_k and not (self.experiment == "temperature" and self.model == "fm"):
            raise ConfigError("knn_k applies to the temperature FM only")
        if self.experiment != "synthetic" and not self.data_path:
            raise ConfigError(f"{self.experiment} needs data_path")
        for name in ("embed_dim", "value_dim", "n_heads", "max_epochs", "patience", "n_train", "n_val", "n_test"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.n_layers < 0 or self.batch_size < 0 or self.knn_k < 0:
            raise ConfigError("n_layers, batch_size and knn_k must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three numbers summing to 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    """Read a flat YAML or JSON mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict) or any(isinstance(v, dict) for v in doc.values()):
        raise ConfigError("config must be a flat key-value mapping")
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# data and models per experiment


@dataclass
class _Prepared:
    splits: dict
    n_items: int = 0
    max_len: int = 1
    items: list | None = None
    tau_dim: int = 0
    coords: np.ndarray | None = None


def _prepare(cfg: ExperimentConfig) -> _Prepared:
    if cfg.experiment == "synthetic":
        sp = ds.synthetic_splits(cfg.n_train, cfg.n_val, cfg.n_test, seed=cfg.seed)
        return _Prepared(sp, n_items=5, max_len=5, items=[1, 2, 3, 4, 5])
    if cfg.experiment in ("ratings_seq", "ratings_values"):
        events = ds.load_ratings_csv(cfg.data_path)
        fn = ds.preprocess_ratings_exp1 if cfg.experiment == "ratings_seq" else ds.preprocess_ratings_exp2
        data = fn(events, top_n=cfg.top_n, seed=cfg.seed, fractions=tuple(cfg.split_fractions))
        sp = {k: data.split(k) for k in ("train", "val", "test")}
        return _Prepared(sp, n_items=len(data.items), max_len=data.batch.shape[1], items=data.items)
    if cfg.experiment == "baskets":
        ids, baskets = ds.load_baskets_csv(cfg.data_path)
        data = ds.preprocess_baskets(baskets, cfg.min_basket_count, cfg.min_items_per_basket, basket_ids=ids)
        idx = ds.split_indices(len(data.basket_ids), tuple(cfg.split_fractions), cfg.seed)
        sp = {k: data.batch.subset(v) for k, v in idx.items()}
        return _Prepared(sp, n_items=len(data.items), max_len=data.batch.shape[1], items=data.items)
    # temperature
    years = {"train": cfg.train_years, "val": cfg.val_years, "test": cfg.test_years}
    data = ds.load_temperatures(cfg.data_path.split(","), {k: tuple(v) for k, v in years.items()})
    tau = data.tau
    scaled = (tau - tau.mean(axis=0)) / np.where(tau.std(axis=0) > 0, tau.std(axis=0), 1.0)
    sp = {}
    for name, batch in data.splits.items():
        b = SequenceBatch(y=batch.y, tau=scaled)
        if cfg.lags:
            b, _ = ds.augment_lags(b, data.dates[name])
        sp[name] = b
    return _Prepared(sp, max_len=sp["train"].shape[1], tau_dim=2, coords=tau)


def _build_model(cfg: ExperimentConfig, prep: _Prepared) -> Model:
    causal = cfg.direction == "unidirectional"
    K = cfg.embed_dim
    if cfg.model == "fm":
        if cfg.experiment in ("ratings_seq", "baskets"):
            return FMModel("categorical", prep.n_items, K, causal=causal, seed=cfg.seed)
        if cfg.experiment == "synthetic":
            return FMModel("gaussian_ratings", prep.n_items, K, causal=causal, seed=cfg.seed)
        if cfg.experiment == "ratings_values":
            return FMModel(cfg.head, prep.n_items, K, causal=causal, seed=cfg.seed)
        knn = ds.haversine_knn(prep.coords, cfg.knn_k) if cfg.knn_k else None
        return FMModel("gaussian_knn", embed_dim=K, attr_dim=prep.tau_dim, attr_hidden=cfg.attr_hidden,
                       knn=knn, seed=cfg.seed)
    arch = dict(n_layers=cfg.n_layers, n_heads=cfg.n_heads, residual=cfg.residual, ffn_dim=cfg.ffn_dim,
                layer_norm=cfg.layer_norm, readout_hidden=tuple(cfg.readout_hidden))
    dims = {"n_items": prep.n_items, "max_len": prep.max_len, "embed_dim": K}
    if cfg.experiment in ("ratings_seq", "baskets"):
        over = dict(arch)
        if cfg.positional is not None:
            over["ordered"] = cfg.positional
        return instantiate_example("baskets", dims, cfg.direction, seed=cfg.seed, **over)
    if cfg.experiment == "synthetic":
        return instantiate_example("movie_ratings", dims, cfg.direction, seed=cfg.seed, categorical=False,
                                   value_tokens="context", value_dim=cfg.value_dim, value_embed="mlp",
                                   value_embed_hidden=cfg.value_dim, head="gaussian",
                                   positional=True if cfg.positional is None else cfg.positional, **arch)
    if cfg.experiment == "ratings_values":
        head = {"poisson_v1": "poisson_shifted", "poisson_v2": "poisson_one_plus"}[cfg.head]
        return instantiate_example("movie_ratings", dims, cfg.direction, seed=cfg.seed, categorical=False,
                                   value_tokens="context", value_dim=cfg.value_dim, value_embed="table",
                                   n_values=3, value_min=1, head=head,
                                   positional=True if cfg.positional is None else cfg.positional, **arch)
    dims = {"max_len": prep.max_len, "embed_dim": K, "attr_dim": prep.tau_dim}
    extra = dict(value_dim=cfg.value_dim, value_embed="mlp", value_embed_hidden=cfg.attr_hidden,
                 attr_hidden=cfg.attr_hidden, input_hidden=cfg.input_hidden, input_dim=cfg.input_dim, **arch)
    if cfg.lags:
        extra.update(day_slots=2, day_dim=K)
    return instantiate_example("spatiotemporal_gaussian", dims, "bidirectional", seed=cfg.seed, **extra)


def _metrics(cfg: ExperimentConfig, model: Model, sp: dict) -> dict:
    out = {}
    for name in ("val", "test"):
        data = sp[name]
        m = {}
        if model.has_categorical():
            m["cross_entropy"] = evaluate(model, data, "CrossEntropy")
        if model.has_value():
            m["mse"] = evaluate(model, data, "MSE")
            if cfg.experiment == "ratings_values":
                m["poisson_nll"] = evaluate(model, data, "PoissonNLL")
                m["mean_by_actual"] = {str(int(k)): v for k, v in evaluate(model, data, "MeanByActual").items()}
        out[name] = m
    return out


@dataclass
class RunResult:
    out_dir: Path
    metrics: dict
    report: FitReport
    model: Model


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    prep = _prepare(cfg)
    model = _build_model(cfg, prep)
    fit_cfg = FitConfig(learning_rate=cfg.learning_rate, max_epochs=cfg.max_epochs, patience=cfg.patience,
                        batch_size=cfg.batch_size, seed=cfg.seed)
    report = fit(model, prep.splits["train"], prep.splits["val"], fit_cfg)
    metrics = {
        "experiment": cfg.experiment,
        "model": cfg.model.upper(),
        "direction": cfg.direction,
        "seed": cfg.seed,
        "best_epoch": report.best_epoch,
        "epochs_run": report.epochs_run,
        "best_val_loss": report.best_val_loss,
        "metrics": _metrics(cfg, model, prep.splits),
        "sizes": {k: len(v) for k, v in prep.splits.items()},
    }
    report.final_metrics = metrics["metrics"]
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    (out / "report.json").write_text(report.to_json() + "\n")
    model.save(out / "checkpoint.npz")
    if prep.items is not None:
        (out / "items.json").write_text(json.dumps(prep.items) + "\n")
    if cfg.dumps and isinstance(model, EFAModel) and model.categorical is not None:
        dump_dir = out / "dumps"
        first = prep.splits["test"].subset([0])
        n = int(first.valid[0].sum())
        for layer in range(len(model.categorical.layers)):
            mats = export_attention_weights(model, first.x[0, :n], layer)
            for name, mat in mats.items():
                write_matrix_csv(dump_dir / f"attention_layer{layer}_{name}.csv", mat)
    return RunResult(out, metrics, report, model)


# ---------------------------------------------------------------------------
# dumps


def _as_model(model_or_path) -> Model:
    return model_or_path if isinstance(model_or_path, Model) else load_checkpoint(model_or_path)


def export_attention_weights(model_or_path, sequence, layer: int = 0) -> dict:
    """Per-head and head-averaged attention matrices of the categorical component.

    Row ``i`` comes from the pass that masks position ``i`` and holds the
    weights its query column puts on every position, so rows sum to one.
    """
    model = _as_model(model_or_path)
    if not isinstance(model, EFAModel) or model.categorical is None:
        raise StructureError("attention dumps need an EFA model with a categorical component")
    cat = model.categorical
    if not 0 <= layer < len(cat.layers):
        raise IndexError(f"layer {layer} out of range (model has {len(cat.layers)})")
    x = np.asarray(sequence, dtype=np.int64)[None, :]
    batch = SequenceBatch(x=x)
    collected: list = []
    from . import tensor as T

    with T.no_grad():
        cat.context(batch, weights_out=collected)
    per_head = collected[layer]  # list of (I passes, I, I)
    I = x.shape[1]
    rows = np.arange(I)
    mats = {}
    for m, w in enumerate(per_head):
        mats[f"head{m}"] = w[rows, :, rows]  # row i: pass i, column i
    mats["mean"] = np.mean([mats[f"head{m}"] for m in range(len(per_head))], axis=0)
    return mats


def fm_attention_weights(length: int, causal: bool) -> np.ndarray:
    """The implicit FM weights: row ``i`` spreads ``1/|c_i|`` over its context."""
    return context_matrix(np.ones((1, length), dtype=bool), causal)[0].T


def write_matrix_csv(path, mat: np.ndarray, row_labels=None, col_labels=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mat = np.asarray(mat)
    row_labels = list(range(mat.shape[0])) if row_labels is None else list(row_labels)
    col_labels = list(range(mat.shape[1])) if col_labels is None else list(col_labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", *col_labels])
        for label, row in zip(row_labels, mat):
            w.writerow([label, *(repr(float(v)) for v in row)])
    return path


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def export_qkv_embeddings(model_or_path, layer: int = 0, head: int = 0) -> dict:
    """``W_Q beta``, ``W_K beta`` and ``W_V beta`` (each ``K x D``, MASK column excluded)."""
    model = _as_model(model_or_path)
    if not isinstance(model, EFAModel) or model.categorical is None:
        raise StructureError("QKV dumps need an EFA model with a categorical component")
    cat = model.categorical
    if not 0 <= layer < len(cat.layers):
        raise IndexError(f"layer {layer} out of range")
    heads = cat.layers[layer].heads
    if not 0 <= head < len(heads):
        raise IndexError(f"head {head} out of range")
    beta = cat.beta.data[:, :cat.D]
    h = heads[head]
    return {"query": h.wq.data @ beta, "key": h.wk.data @ beta, "value": h.wv.data @ beta}


def top_copurchase(model_or_path, item: int, k: int = 3) -> list[tuple[int, float]]:
    """Items ``g != item`` ranked by ``delta_item^T beta_g + beta_g^T delta_item`` (ties by index)."""
    model = _as_model(model_or_path)
    if not isinstance(model, EFAModel) or model.categorical is None:
        raise StructureError("co-purchase queries need an EFA model with a categorical component")
    cat = model.categorical
    D = cat.D
    if not 0 <= item < D:
        raise KeyError(f"unknown item {item}")
    if not 1 <= k < D:
        raise ValueError(f"k must satisfy 1 <= k < {D}")
    d = cat.delta.data[:, item]
    beta = cat.beta.data[:, :D]
    scores = d @ beta + beta.T @ d
    others = [g for g in range(D) if g != item]
    ranked = sorted(others, key=lambda g: (-scores[g], g))
    return [(g, float(scores[g])) for g in ranked[:k]]


# ---------------------------------------------------------------------------
# identifiability probe experiment


# two fits count as "the same conditional distribution" below this validation NLL gap (nats)
SAME_FIT_GAP = 1e-2


def theory_probe(seed: int = 0, n_users: int = 1000, embed_dim: int = 4, max_epochs: int = 80,
                 learning_rate: float = 1e-2, direction: str = "unidirectional", batch_size: int = 50) -> dict:
    """Train two categorical EFA models (seeds ``seed`` and ``seed + 1``) on the
    synthetic movie orders and report linear-identifiability residuals, along
    with a planted-map control on the first model.
    """
    from .theory import diversity_matrices, linear_identifiability_probe, plant_linear_map

    D = 5
    if embed_dim > D - 1:
        raise ConfigError(f"embed_dim must be at most {D - 1}")
    data = ds.generate_synthetic_ratings(n_users, seed)
    idx = ds.split_indices(n_users, (0.6, 0.2, 0.2), seed)
    train, val, test = (data.subset(idx[k]) for k in ("train", "val", "test"))
    train, val, test = (SequenceBatch(x=b.x) for b in (train, val, test))
    models, reports = [], []
    for s in (seed, seed + 1):
        m = instantiate_example("baskets", {"n_items": D, "max_len": D, "embed_dim": embed_dim}, direction,
                                seed=s, n_layers=1, n_heads=1)
        reports.append(fit(m, train, val, FitConfig(learning_rate=learning_rate, max_epochs=max_epochs,
                                                     patience=5, batch_size=batch_size, seed=s)))
        models.append(m)
    probe = linear_identifiability_probe(models[0], models[1], test)
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((embed_dim, embed_dim)) + embed_dim * np.eye(embed_dim)
    planted = plant_linear_map(models[0], M)
    control = linear_identifiability_probe(planted, models[0], test)
    div = diversity_matrices(models[0], test, seed=seed)
    gap = abs(reports[0].best_val_loss - reports[1].best_val_loss)
    return {
        "val_loss": [r.best_val_loss for r in reports],
        "val_loss_gap": gap,
        "same_fit": gap < SAME_FIT_GAP,
        "trained_pair": probe.to_dict(),
        "planted": {"residuals": control.residuals, "map_error": float(
            np.abs(np.array(control.maps["H"]) - M).max())},
        "diversity_condition": {k: div[k] for k in div if k.startswith("cond_")},
    }
