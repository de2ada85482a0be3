import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efa import tensor as T
from efa.fm import (
    FMModel,
    NeighborError,
    construct_equivalent_efa,
    context_matrix,
    fm_categorical_logits,
    fm_gaussian_mean,
    fm_poisson_natural,
)
from efa.model import SequenceBatch, load_checkpoint


def _rand_fm(rng, variant, K, D, causal=False, scale=1.0):
    m = FMModel(variant, n_items=D, embed_dim=K, causal=causal)
    m.rho.data[...] = rng.standard_normal((K, D)) * scale
    m.alpha.data[...] = rng.standard_normal((K, D)) * scale
    return m


def _rand_knn_fm(rng, K, t, hidden):
    m = FMModel("gaussian_knn", embed_dim=K, attr_dim=t, attr_hidden=hidden)
    for p in m.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    return m


def _context(i, n, causal):
    return list(range(i)) if causal else [j for j in range(n) if j != i]


def categorical_oracle(rho, alpha, x, causal=False):
    n = len(x)
    out = np.zeros((rho.shape[1], n))
    for i in range(n):
        ctx = _context(i, n, causal)
        if ctx:
            s = sum(alpha[:, x[j]] for j in ctx) / len(ctx)
            out[:, i] = rho.T @ s
    return out


def poisson_oracle(rho, alpha, x, y, causal=False):
    n = len(x)
    out = np.zeros(n)
    for i in range(n):
        ctx = _context(i, n, causal)
        if ctx:
            out[i] = rho[:, x[i]] @ sum(alpha[:, x[j]] * y[j] for j in ctx) / len(ctx)
    return out


def knn_oracle(h, tau, y, knn):
    g = [h(tau[j]) for j in range(len(y))]
    return np.array([g[i] @ sum(g[j] * y[j] for j in knn[i]) for i in range(len(y))])


class TestContextMatrix:
    def test_bidirectional_average(self):
        C = context_matrix(np.ones((1, 3), bool), causal=False)[0]
        np.testing.assert_allclose(C, (np.ones((3, 3)) - np.eye(3)) / 2)

    def test_causal_first_column_empty(self):
        C = context_matrix(np.ones((1, 3), bool), causal=True)[0]
        np.testing.assert_array_equal(C[:, 0], 0.0)
        np.testing.assert_allclose(C[:, 2], [0.5, 0.5, 0.0])

    def test_padding_excluded(self):
        C = context_matrix(np.array([[True, False, True]]), causal=False)[0]
        np.testing.assert_allclose(C[:, 0], [0.0, 0.0, 1.0])


class TestCategorical:
    def test_length_two_reduction(self):
        rng = np.random.default_rng(0)
        m = _rand_fm(rng, "categorical", 3, 4)
        logits = fm_categorical_logits(m, np.array([2, 1]))
        np.testing.assert_allclose(logits[:, 0], m.rho.data.T @ m.alpha.data[:, 1], atol=1e-14)

    @pytest.mark.parametrize("causal", [False, True])
    def test_matches_oracle(self, causal):
        rng = np.random.default_rng(1)
        m = _rand_fm(rng, "categorical", 4, 6, causal=causal)
        x = rng.integers(0, 6, 5)
        np.testing.assert_allclose(fm_categorical_logits(m, x), categorical_oracle(m.rho.data, m.alpha.data, x, causal),
                                   atol=1e-12)

    def test_zero_rho_is_uniform(self):
        rng = np.random.default_rng(2)
        m = _rand_fm(rng, "categorical", 3, 5)
        m.rho.data[...] = 0.0
        np.testing.assert_allclose(m.categorical_probs(np.array([0, 1, 4])), 0.2, atol=1e-15)

    def test_out_of_vocabulary(self):
        m = FMModel("categorical", n_items=3, embed_dim=2)
        from efa.model import VocabError

        with pytest.raises(VocabError):
            fm_categorical_logits(m, np.array([0, 3]))


class TestGaussianKnn:
    def _setup(self, k, seed=3):
        rng = np.random.default_rng(seed)
        n = 5
        m = _rand_knn_fm(rng, 3, 2, 4)
        tau = rng.standard_normal((n, 2))
        y = rng.standard_normal(n)
        d = np.linalg.norm(tau[:, None] - tau[None], axis=-1) + np.diag(np.full(n, np.inf))
        knn = np.argsort(d, axis=1, kind="stable")[:, :k]
        return m, tau, y, knn

    def test_matches_double_loop(self):
        m, tau, y, knn = self._setup(2)
        m.set_neighbors(knn)
        h = lambda t: m.h.encode(t).data  # noqa: E731
        np.testing.assert_allclose(fm_gaussian_mean(m, y, tau), knn_oracle(h, tau, y, knn), atol=1e-12)

    def test_single_neighbor_dependence(self):
        m, tau, y, knn = self._setup(1)
        m.set_neighbors(knn)
        base = fm_gaussian_mean(m, y, tau)
        for j in range(len(y)):
            y2 = y.copy()
            y2[j] += 1.0
            changed = fm_gaussian_mean(m, y2, tau) != base
            np.testing.assert_array_equal(changed, knn[:, 0] == j)

    def test_full_neighborhood_equals_full_sum(self):
        m, tau, y, knn = self._setup(4)
        m.set_neighbors(knn)
        a = fm_gaussian_mean(m, y, tau)
        m.knn = None
        np.testing.assert_allclose(a, fm_gaussian_mean(m, y, tau), atol=1e-12)

    @pytest.mark.parametrize("knn", [
        np.array([[1], [0], [0]]).reshape(3),
        np.array([[0], [1], [2]]),
        np.array([[1, 2, 0], [0, 2, 1], [0, 1, 2]]),
        np.array([[3], [0], [1]]),
    ])
    def test_invalid_neighbors(self, knn):
        m = FMModel("gaussian_knn", embed_dim=2, attr_dim=1, attr_hidden=2)
        with pytest.raises(NeighborError):
            m.set_neighbors(knn)

    def test_requires_attributes(self):
        with pytest.raises(ValueError):
            FMModel("gaussian_knn", embed_dim=2)


class TestPoisson:
    @pytest.mark.parametrize("causal", [False, True])
    def test_matches_oracle(self, causal):
        rng = np.random.default_rng(4)
        m = _rand_fm(rng, "poisson_v1", 3, 5, causal=causal)
        x, y = rng.integers(0, 5, 6), rng.integers(1, 6, 6).astype(float)
        np.testing.assert_allclose(fm_poisson_natural(m, x, y), poisson_oracle(m.rho.data, m.alpha.data, x, y, causal),
                                   atol=1e-12)

    def test_zero_rho_gives_unit_rate(self):
        rng = np.random.default_rng(5)
        m = _rand_fm(rng, "poisson_v2", 3, 5)
        m.rho.data[...] = 0.0
        kappa = fm_poisson_natural(m, np.array([0, 1, 2]), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(np.exp(kappa), 1.0)

    def test_unidirectional_first_position_is_zero(self):
        rng = np.random.default_rng(6)
        m = _rand_fm(rng, "poisson_v1", 3, 5, causal=True)
        assert fm_poisson_natural(m, np.array([3, 1, 2]), np.array([1.0, 2.0, 3.0]))[0] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["categorical", "poisson_v1", "gaussian_ratings"]), st.integers(0, 2**31 - 1))
def test_bidirectional_fm_ignores_context_order(variant, seed):
    rng = np.random.default_rng(seed)
    m = _rand_fm(rng, variant, 3, 6)
    n = int(rng.integers(2, 7))
    x, y = rng.integers(0, 6, n), rng.integers(1, 5, n).astype(float)
    perm = rng.permutation(n)
    b, bp = SequenceBatch(x=x[None], y=y[None]), SequenceBatch(x=x[perm][None], y=y[perm][None])
    if variant == "categorical":
        a, c = m.categorical_probs(b)[0], m.categorical_probs(bp)[0]
        np.testing.assert_allclose(c, a[:, perm], atol=1e-12)
    else:
        a, c = m.value_natural_params(b)[0], m.value_natural_params(bp)[0]
        np.testing.assert_allclose(c, a[perm], atol=1e-12)


class TestConstructions:
    def test_p1(self):
        rng = np.random.default_rng(7)
        fm = _rand_fm(rng, "categorical", 4, 6)
        x = rng.integers(0, 6, 5)
        efa = construct_equivalent_efa("P1", fm, 5)
        np.testing.assert_allclose(efa.categorical_probs(x)[0], fm.categorical_probs(x)[0], atol=1e-12)

    def test_p2_hand_check_before_rescale(self):
        """K = 2, I = 3: the last row of the attended column equals sum_j g_j . g_i y_j / (K + 1)."""
        rng = np.random.default_rng(8)
        fm = _rand_knn_fm(rng, 2, 2, 3)
        tau, y = rng.standard_normal((3, 2)), rng.standard_normal(3)
        efa = construct_equivalent_efa("P2", fm, 3)
        b = SequenceBatch(y=y[None], tau=tau)
        with T.no_grad():
            z, pf, pt = efa.value.column(b)
        g = fm.h.encode(tau.T).data
        for col, i in zip(z.data, pt):
            expected = sum(g[:, j] @ g[:, i] * y[j] for j in range(3) if j != i) / 3
            assert col[-1] == pytest.approx(expected, abs=1e-12)
        np.testing.assert_allclose(efa.value_natural_params(b)[0], fm_gaussian_mean(fm, y, tau), atol=1e-12)

    @pytest.mark.parametrize("variant", ["poisson_v1", "poisson_v2"])
    def test_p3(self, variant):
        rng = np.random.default_rng(9)
        fm = _rand_fm(rng, variant, 3, 5)
        x, y = rng.integers(0, 5, 4), rng.integers(1, 5, 4).astype(float)
        efa = construct_equivalent_efa("P3", fm, 4)
        b = SequenceBatch(x=x[None], y=y[None])
        np.testing.assert_allclose(efa.value_natural_params(b), fm.value_natural_params(b), atol=1e-12)
        assert efa.head_y.name == fm.head_y.name

    def test_p3_key_block(self):
        K = 3
        fm = _rand_fm(np.random.default_rng(10), "poisson_v1", K, 5)
        wk = construct_equivalent_efa("P3", fm, 4).value.layers[0].heads[0].wk.data
        np.testing.assert_array_equal(wk[K:2 * K, :K], np.eye(K))
        mask = np.ones_like(wk, dtype=bool)
        mask[K:2 * K, :K] = False
        np.testing.assert_array_equal(wk[mask], 0.0)

    @pytest.mark.parametrize("prop,variant,causal", [
        ("P1", "poisson_v1", False), ("P1", "categorical", True), ("P3", "categorical", False),
        ("P3", "poisson_v1", True), ("P4", "categorical", False),
    ])
    def test_invalid_pairings(self, prop, variant, causal):
        fm = FMModel(variant, n_items=4, embed_dim=2, causal=causal)
        with pytest.raises(ValueError):
            construct_equivalent_efa(prop, fm, 3)

    def test_p2_rejects_neighbor_lists(self):
        fm = FMModel("gaussian_knn", embed_dim=2, attr_dim=1, attr_hidden=2, knn=np.array([[1], [0], [0]]))
        with pytest.raises(ValueError):
            construct_equivalent_efa("P2", fm, 3)

    def test_constructed_model_round_trips(self, tmp_path):
        rng = np.random.default_rng(11)
        fm = _rand_fm(rng, "poisson_v1", 3, 5)
        efa = construct_equivalent_efa("P3", fm, 4)
        efa.save(tmp_path / "p3.npz")
        b = SequenceBatch(x=rng.integers(0, 5, (2, 4)), y=rng.integers(1, 5, (2, 4)).astype(float))
        np.testing.assert_array_equal(load_checkpoint(tmp_path / "p3.npz").value_natural_params(b),
                                      efa.value_natural_params(b))
