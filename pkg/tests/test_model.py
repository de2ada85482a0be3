import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efa import tensor as T
from efa.model import (
    AttributeEncoder,
    EFAConfig,
    EFAModel,
    SequenceBatch,
    StructureError,
    VocabError,
    instantiate_example,
    load_checkpoint,
)
from efa.tensor import Tensor

from model_variants import CAUSAL_VARIANTS, VARIANTS, gradient_errors, make


class TestSequenceBatch:
    def test_defaults(self):
        b = SequenceBatch(x=[[0, 1, 2]])
        assert b.shape == (1, 3) and b.valid.all() and b.target.all()

    def test_target_restricted_to_valid(self):
        b = SequenceBatch(x=[[0, 1]], valid=[[True, False]], target=[[True, True]])
        np.testing.assert_array_equal(b.target, [[True, False]])

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            SequenceBatch(x=[0, 1])
        with pytest.raises(ValueError):
            SequenceBatch(x=[[0, 1]], y=[[1.0, 2.0, 3.0]])
        with pytest.raises(ValueError):
            SequenceBatch()

    def test_subset_keeps_shared_tau(self):
        tau = np.zeros((3, 2))
        b = SequenceBatch(y=np.zeros((4, 3)), tau=tau).subset([1, 2])
        assert len(b) == 2 and b.tau.shape == (3, 2)


class TestConfig:
    def test_round_trip(self):
        cfg = EFAConfig(n_items=4, readout_hidden=[8, 4], value=True)
        assert EFAConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kwargs", [
        {"value_tokens": "tokens"},
        {"value_embed": "cubic"},
        {"mask_embed": "random"},
        {"value_embed": "identity", "value_dim": 2},
        {"value_tokens": "attribute", "attr_dim": 0},
        {"value_embed": "table", "n_values": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            EFAConfig(**kwargs)


class TestAttributeEncoder:
    def test_identity_like_pads(self):
        enc = AttributeEncoder(Tensor(np.eye(3, 2)), Tensor(np.eye(4, 3)))
        np.testing.assert_array_equal(enc.encode(np.array([1.5, 2.0])).data, [1.5, 2.0, 0.0, 0.0])

    def test_identity_like_truncates(self):
        enc = AttributeEncoder(Tensor(np.eye(2, 3)), Tensor(np.eye(2)))
        np.testing.assert_array_equal(enc.encode(np.array([1.0, 2.0, 3.0])).data, [1.0, 2.0])

    def test_relu_zeroes_negative_preactivation(self):
        enc = AttributeEncoder(Tensor(np.eye(2)), Tensor(np.eye(2)))
        np.testing.assert_array_equal(enc.encode(np.array([-1.0, 2.0])).data, [0.0, 2.0])

    def test_two_step_oracle(self):
        rng = np.random.default_rng(0)
        G1, G2 = rng.standard_normal((5, 3)), rng.standard_normal((4, 5))
        b1, b2 = rng.standard_normal((5, 1)), rng.standard_normal((4, 1))
        enc = AttributeEncoder(Tensor(G1), Tensor(G2), Tensor(b1), Tensor(b2))
        tau = rng.standard_normal((3, 6))
        hidden = np.maximum(G1 @ tau + b1, 0.0)
        np.testing.assert_allclose(enc.encode(tau).data, G2 @ hidden + b2, atol=1e-12)

    def test_dimension_mismatch(self):
        enc = AttributeEncoder(Tensor(np.eye(2)), Tensor(np.eye(2)))
        with pytest.raises(ValueError):
            enc.encode(np.ones(3))


class TestInstantiateExample:
    def test_spatiotemporal_has_no_positions(self):
        m = instantiate_example("spatiotemporal_gaussian", {"embed_dim": 2, "value_dim": 2, "attr_dim": 2})
        assert m.value.pos is None and m.categorical is None
        assert m.head_y.name == "gaussian"

    def test_spatiotemporal_is_bidirectional_only(self):
        with pytest.raises(ValueError):
            instantiate_example("spatiotemporal_gaussian", {"attr_dim": 2}, "unidirectional")

    def test_unidirectional_baskets_are_causal(self):
        m = instantiate_example("baskets", {"n_items": 5, "max_len": 3, "embed_dim": 2}, "unidirectional")
        assert m.categorical.causal and m.value is None

    def test_unordered_baskets_drop_positions(self):
        m = instantiate_example("baskets", {"n_items": 5, "max_len": 3, "embed_dim": 2}, ordered=False)
        assert m.categorical.pos is None

    def test_movie_ratings_components(self):
        m = instantiate_example("movie_ratings", {"n_items": 5, "max_len": 3, "embed_dim": 2, "value_dim": 2})
        assert m.has_categorical() and m.has_value()
        assert m.head_y.name == "poisson_shifted" and m.value.delta is not None
        assert m.config.value_width == 2 * 2 + 2

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            instantiate_example("images", {})

    def test_nonpositive_dims(self):
        with pytest.raises(ValueError):
            instantiate_example("baskets", {"n_items": 0})

    def test_final_readout_starts_at_zero(self):
        m = instantiate_example("movie_ratings", {"n_items": 5, "max_len": 3, "embed_dim": 2, "value_dim": 2})
        b = SequenceBatch(x=[[0, 1, 2]], y=[[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(m.value_natural_params(b), np.zeros((1, 3)))


class TestCategoricalProbs:
    def test_zero_embeddings_are_uniform(self):
        m = instantiate_example("baskets", {"n_items": 2, "max_len": 4, "embed_dim": 3})
        for p in m.parameters():
            p.data[...] = 0.0
        probs = m.categorical_probs(np.array([0, 1, 1, 0]))
        np.testing.assert_allclose(probs, 0.5, atol=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_columns_sum_to_one(self, seed):
        m, b = make("efa_baskets_unordered_deep", seed)
        probs = m.categorical_probs(b)
        sums = probs.sum(axis=1)
        np.testing.assert_allclose(sums[b.valid], 1.0, atol=1e-12)
        np.testing.assert_array_equal(sums[~b.valid], 0.0)

    def test_out_of_vocabulary(self):
        m = instantiate_example("baskets", {"n_items": 3, "max_len": 2, "embed_dim": 2})
        with pytest.raises(VocabError):
            m.categorical_probs(np.array([0, 3]))

    def test_sequence_longer_than_positions(self):
        m = instantiate_example("baskets", {"n_items": 3, "max_len": 2, "embed_dim": 2})
        with pytest.raises(ValueError):
            m.categorical_probs(np.array([0, 1, 2]))


class TestLikelihood:
    def test_single_term_by_hand(self):
        m, b = make("efa_movie_ratings_bidirectional", 3)
        b = b.subset([1])
        with T.no_grad():
            joint = float(m.joint_log_likelihood(b).data)
        probs = m.categorical_probs(b)
        kappa = m.value_natural_params(b)
        total = 0.0
        for i in range(b.shape[1]):
            total += math.log(probs[0, b.x[0, i], i])
            k, y = kappa[0, i], b.y[0, i]
            total += (y - 1) * k - math.exp(k) - math.lgamma(y)
        assert joint == pytest.approx(total / b.shape[1], abs=1e-12)

    @pytest.mark.parametrize("name", ["efa_movie_ratings_bidirectional", "efa_joint_linear_embed_poisson_one_plus"])
    def test_joint_decomposes(self, name):
        m, b = make(name, 4)
        with T.no_grad():
            joint = float(m.joint_log_likelihood(b).data)
            cat = float(m.joint_log_likelihood(b, value=False).data)
            val = float(m.joint_log_likelihood(b, categorical=False).data)
        assert joint == pytest.approx(cat + val, abs=1e-12)

    def test_no_terms(self):
        m, b = make("efa_baskets_bidirectional", 0)
        with pytest.raises(StructureError):
            m.joint_log_likelihood(b, categorical=False)

    def test_missing_component(self):
        m, b = make("efa_baskets_bidirectional", 0)
        with pytest.raises(StructureError):
            m.value_natural(b)


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_gradients_match_finite_differences(name):
    model, batch = make(name, 11)
    errors = gradient_errors(model, batch)
    bad = {k: v for k, v in errors.items() if not v < 1e-4}
    assert not bad


def _perturb_future(batch, i, rng):
    x = None if batch.x is None else batch.x.copy()
    y = None if batch.y is None else batch.y.copy()
    if x is not None:
        D = int(x.max()) + 1
        x[:, i + 1:] = rng.integers(0, max(D, 2), x[:, i + 1:].shape)
    if y is not None:
        # stay inside every head's support and the value tables' range
        y[:, i:] = rng.integers(1, 4, y[:, i:].shape)
    return SequenceBatch(x=x, y=y, tau=batch.tau, valid=batch.valid, target=batch.target, day=batch.day)


@pytest.mark.parametrize("name", CAUSAL_VARIANTS)
def test_direction_contract(name):
    rng = np.random.default_rng(5)
    for trial in range(5):
        m, b = make(name, trial)
        D = m.head_x.D if m.has_categorical() else (m.config.n_items if hasattr(m, "config") else m.n_items)
        for i in range(b.shape[1] - 1):
            p = _perturb_future(b, i, rng)
            if p.x is not None:
                p.x[:, i + 1:] %= D
            if m.has_categorical():
                a, c = m.categorical_probs(b), m.categorical_probs(p)
                assert a[:, :, : i + 1].tobytes() == c[:, :, : i + 1].tobytes()
            if m.has_value():
                a, c = m.value_natural_params(b), m.value_natural_params(p)
                assert a[:, : i + 1].tobytes() == c[:, : i + 1].tobytes()


def test_padding_does_not_leak():
    m, b = make("efa_movie_ratings_bidirectional", 6)
    b2 = SequenceBatch(x=b.x.copy(), y=b.y.copy(), valid=b.valid)
    b2.x[~b.valid] = (b2.x[~b.valid] + 1) % 5
    b2.y[~b.valid] += 1
    np.testing.assert_array_equal(m.categorical_probs(b), m.categorical_probs(b2))
    np.testing.assert_array_equal(m.value_natural_params(b), m.value_natural_params(b2))


class TestPrediction:
    def test_gaussian_prediction_is_kappa(self):
        m, b = make("efa_spatiotemporal_gaussian", 0)
        kappa = m.value_natural_params(b)
        mean, lp = m.predict_masked(b, 1, 2)
        assert mean == kappa[1, 2]
        assert lp == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5 * (b.y[1, 2] - mean) ** 2)

    def test_poisson_prediction(self):
        m, b = make("efa_movie_ratings_unidirectional", 0)
        kappa = m.value_natural_params(b)
        mean, _ = m.predict_masked(b, 1, 1)
        assert mean == pytest.approx(1 + math.exp(kappa[1, 1]), abs=1e-12)

    def test_predict_mean_composition(self):
        m, b = make("efa_value_table", 2)
        np.testing.assert_allclose(m.predict_mean(b)[b.target], m.head_y.mean(m.value_natural_params(b)[b.target]))

    def test_non_target_position(self):
        m, b = make("efa_spatiotemporal_gaussian", 0)
        with pytest.raises(IndexError):
            m.predict_masked(b, 0, 0)  # lag column


class TestCheckpoint:
    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_round_trip(self, name, tmp_path):
        m, b = make(name, 8)
        path = tmp_path / "ckpt.npz"
        m.save(path)
        loaded = load_checkpoint(path)
        assert type(loaded) is type(m)
        with T.no_grad():
            assert float(loaded.loss(b).data) == float(m.loss(b).data)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, __header__=np.array('{"format": "other"}'))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_missing_parameter(self):
        m, _ = make("efa_baskets_bidirectional", 0)
        state = m.state_dict()
        state.pop("cat.beta")
        with pytest.raises(KeyError):
            m.load_state_dict(state)


def test_same_seed_same_init():
    cfg = EFAConfig(n_items=4, max_len=3, embed_dim=2)
    a, b = EFAModel(cfg, seed=3), EFAModel(cfg, seed=3)
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()


def test_value_table_rejects_value_colliding_with_mask():
    m, b = make("efa_value_table", 0)
    b.y[0, 0] = 4.0  # value_min 1 + n_values 3 would index the MASK column
    with pytest.raises(VocabError):
        m.value_natural_params(b)
