"""Conditional output distributions driven by a natural parameter.

Each head maps a natural parameter (logits for the categorical head, a scalar
``kappa`` otherwise) to a distribution over one observation. The Gaussian head
reads ``kappa`` as the mean; the two Poisson heads read it as a log-rate:

* ``PoissonShifted``:  ``y - 1 ~ Poisson(exp(kappa))``, support ``{1, 2, ...}``
* ``PoissonOnePlus``:  ``y ~ Poisson(1 + exp(kappa))``, support ``{0, 1, ...}``

The second is not a canonical exponential family, so every head carries its
own log-likelihood instead of a shared ``t(y)`` / ``A(kappa)`` pair.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, log_softmax as _np_log_softmax, softmax as _np_softmax

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "SupportError",
    "ExpFamHead",
    "Categorical",
    "GaussianKnownVar",
    "PoissonShifted",
    "PoissonOnePlus",
    "make_head",
]


class SupportError(ValueError):
    """An observation lies outside the support of the head."""


class ExpFamHead:
    """Base class. Subclasses implement ``log_prob``, ``mean`` and ``_log_prob_tensor``."""

    name = "head"

    def check_support(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64)

    def log_prob(self, natural, y):
        raise NotImplementedError

    def mean(self, natural):
        raise NotImplementedError

    def _log_prob_tensor(self, natural: Tensor, y: np.ndarray) -> Tensor:
        raise NotImplementedError

    def log_prob_tensor(self, natural: Tensor, y) -> Tensor:
        """Differentiable per-entry log-likelihood."""
        return self._log_prob_tensor(natural, self.check_support(y))

    def nll_batch(self, natural, y) -> Tensor:
        """Mean negative log-likelihood over a batch (differentiable)."""
        natural = natural if isinstance(natural, Tensor) else Tensor(natural)
        y = np.asarray(y)
        if y.size == 0:
            raise ValueError("nll_batch needs a non-empty batch")
        return T.neg(T.mean(self.log_prob_tensor(natural, y)))

    def to_dict(self) -> dict:
        return {"kind": self.name}

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Categorical(ExpFamHead):
    name = "categorical"

    def __init__(self, n_categories: int):
        if n_categories < 2:
            raise ValueError("Categorical needs at least 2 categories")
        self.D = int(n_categories)

    def check_support(self, y) -> np.ndarray:
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.mod(y, 1) == 0):
                raise SupportError("categorical observations must be integers")
            y = y.astype(np.intp)
        if y.size and (y.min() < 0 or y.max() >= self.D):
            raise SupportError(f"category outside [0, {self.D})")
        return y

    def log_prob(self, natural, y):
        logits = np.asarray(natural, dtype=np.float64)
        y = self.check_support(y)
        lp = _np_log_softmax(logits, axis=-1)
        return np.take_along_axis(lp, y[..., None], axis=-1)[..., 0]

    def mean(self, natural):
        return _np_softmax(np.asarray(natural, dtype=np.float64), axis=-1)

    def _log_prob_tensor(self, natural, y):
        onehot = np.eye(self.D)[y]
        return T.sum(T.mul(T.log_softmax(natural, axis=-1), onehot), axis=-1)

    def to_dict(self):
        return {"kind": self.name, "D": self.D}

    def __repr__(self):
        return f"Categorical({self.D})"


class GaussianKnownVar(ExpFamHead):
    name = "gaussian"

    def __init__(self, variance: float = 1.0):
        if not variance > 0:
            raise ValueError("variance must be positive")
        self.variance = float(variance)
        self._const = -0.5 * math.log(2.0 * math.pi * self.variance)

    def log_prob(self, natural, y):
        k = np.asarray(natural, dtype=np.float64)
        y = self.check_support(y)
        return self._const - (y - k) ** 2 / (2.0 * self.variance)

    def mean(self, natural):
        return np.asarray(natural, dtype=np.float64)

    def _log_prob_tensor(self, natural, y):
        sq = T.square(T.sub(natural, y))
        return T.add(T.scale(sq, -0.5 / self.variance), self._const)

    def to_dict(self):
        return {"kind": self.name, "variance": self.variance}

    def __repr__(self):
        return f"GaussianKnownVar({self.variance})"


class _PoissonBase(ExpFamHead):
    lower = 0

    def check_support(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.size and (np.any(np.mod(y, 1) != 0) or y.min() < self.lower):
            raise SupportError(f"{self.name} support is integers >= {self.lower}")
        return y


class PoissonShifted(_PoissonBase):
    name = "poisson_shifted"
    lower = 1

    def log_prob(self, natural, y):
        k = np.asarray(natural, dtype=np.float64)
        y = self.check_support(y)
        return (y - 1.0) * k - np.exp(k) - gammaln(y)

    def mean(self, natural):
        return 1.0 + np.exp(np.asarray(natural, dtype=np.float64))

    def _log_prob_tensor(self, natural, y):
        return T.sub(T.sub(T.mul(natural, y - 1.0), T.exp(natural)), gammaln(y))


class PoissonOnePlus(_PoissonBase):
    name = "poisson_one_plus"
    lower = 0

    def log_prob(self, natural, y):
        k = np.asarray(natural, dtype=np.float64)
        y = self.check_support(y)
        log_rate = np.logaddexp(0.0, k)
        return y * log_rate - (1.0 + np.exp(k)) - gammaln(y + 1.0)

    def mean(self, natural):
        return 1.0 + np.exp(np.asarray(natural, dtype=np.float64))

    def _log_prob_tensor(self, natural, y):
        rate_term = T.add(T.exp(natural), 1.0)
        return T.sub(T.sub(T.mul(T.softplus(natural), y), rate_term), gammaln(y + 1.0))


def make_head(desc: dict | str | None) -> ExpFamHead | None:
    """Rebuild a head from ``to_dict`` output or a bare kind name."""
    if desc is None:
        return None
    if isinstance(desc, str):
        desc = {"kind": desc}
    kind = desc["kind"]
    if kind == "categorical":
        return Categorical(desc["D"])
    if kind == "gaussian":
        return GaussianKnownVar(desc.get("variance", 1.0))
    if kind == "poisson_shifted":
        return PoissonShifted()
    if kind == "poisson_one_plus":
        return PoissonOnePlus()
    raise ValueError(f"unknown head kind {kind!r}")
