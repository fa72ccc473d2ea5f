import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from perimem.data import generate_synthetic
from perimem.errors import DataFormatError
from perimem.estimator import PeriodicMemoryClassifier, SumPoolingClassifier
from perimem.validation import infer_vocab_sizes

SMALL_KW = dict(
    slot_dim=8, embed_dim=8, energy_hidden=16, mlp_hidden=(32, 16),
    batch_size=8, epochs=2, seed=1,
)


@pytest.fixture(scope="module")
def dataset():
    samples, _ = generate_synthetic(10, 12, 10, 5, seed=13, targets_per_user=4)
    return samples[:30], samples[30:]


class TestSklearnContract:
    def test_get_params_round_trips_through_clone(self):
        est = PeriodicMemoryClassifier(
            periods=(1, 2), gate_bias_spans=(8.0, 64.0), slot_dim=8, epochs=3
        )
        params = est.get_params()
        assert params["periods"] == (1, 2)
        assert params["gate_bias_spans"] == (8.0, 64.0)
        twin = clone(est)
        assert twin.get_params() == params

    def test_set_params(self):
        est = PeriodicMemoryClassifier().set_params(epochs=7, slot_dim=4)
        assert est.epochs == 7 and est.slot_dim == 4

    def test_unfitted_predict_raises(self, dataset):
        train, _ = dataset
        with pytest.raises(NotFittedError):
            PeriodicMemoryClassifier(**SMALL_KW).predict(train)

    def test_baseline_exposes_a_zero_cov_weight(self):
        assert SumPoolingClassifier.cov_weight == 0.0
        assert "cov_weight" not in SumPoolingClassifier().get_params()


class TestFitPredict:
    def test_proba_shape_and_normalization(self, dataset):
        train, test = dataset
        est = PeriodicMemoryClassifier(**SMALL_KW).fit(train)
        proba = est.predict_proba(test)
        assert proba.shape == (len(test), 2)
        assert np.allclose(proba.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert ((proba > 0.0) & (proba < 1.0)).all()
        assert np.array_equal(est.classes_, [0, 1])

    def test_predict_thresholds_at_half(self, dataset):
        train, test = dataset
        est = PeriodicMemoryClassifier(**SMALL_KW).fit(train)
        labels = est.predict(test)
        assert set(labels.tolist()) <= {0, 1}
        assert np.array_equal(labels, (est.predict_proba(test)[:, 1] >= 0.5).astype(int))

    def test_same_seed_same_predictions(self, dataset):
        train, test = dataset
        a = PeriodicMemoryClassifier(**SMALL_KW).fit(train).predict_proba(test)
        b = PeriodicMemoryClassifier(**SMALL_KW).fit(train).predict_proba(test)
        assert np.array_equal(a, b)

    def test_y_overrides_embedded_labels(self, dataset):
        train, _ = dataset
        flipped = [1 - s.label for s in train]
        est = PeriodicMemoryClassifier(**SMALL_KW).fit(train, y=flipped)
        # the estimator trained on flipped labels; the samples themselves are untouched
        assert [s.label for s in train] == [1 - v for v in flipped]
        straight = PeriodicMemoryClassifier(**SMALL_KW).fit(train)
        assert not np.array_equal(est.predict_proba(train), straight.predict_proba(train))

    def test_wrong_y_shape_rejected(self, dataset):
        train, _ = dataset
        with pytest.raises(ValueError, match="y has shape"):
            PeriodicMemoryClassifier(**SMALL_KW).fit(train, y=[0, 1])

    def test_validation_tracks_test_metrics(self, dataset):
        train, test = dataset
        est = PeriodicMemoryClassifier(**SMALL_KW).fit(train, validation=test)
        result = est.fit_result_
        assert result.best_epoch in (1, 2)
        assert all(s.test_auc is not None for s in result.epoch_summaries)

    def test_explicit_vocab_sizes_survive_unseen_ids(self, dataset):
        train, test = dataset
        sizes = infer_vocab_sizes(train + test)
        est = PeriodicMemoryClassifier(vocab_sizes=sizes, **SMALL_KW).fit(train)
        assert est.predict_proba(test).shape == (len(test), 2)
        assert est.model_.config.vocab_sizes["item"] == sizes["item"]

    def test_input_validation(self):
        with pytest.raises(ValueError, match="at least one sample"):
            PeriodicMemoryClassifier(**SMALL_KW).fit([])
        with pytest.raises(TypeError, match="Sample"):
            PeriodicMemoryClassifier(**SMALL_KW).fit([1, 2, 3])


class TestAttentionWeights:
    def test_rows_are_distributions_over_layers(self, dataset):
        train, test = dataset
        est = PeriodicMemoryClassifier(**SMALL_KW).fit(train)
        weights = est.attention_weights(test)
        assert weights.shape == (len(test), 3)
        assert np.allclose(weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_depth_follows_periods(self, dataset):
        train, _ = dataset
        est = PeriodicMemoryClassifier(periods=(1, 2), **SMALL_KW).fit(train)
        assert est.attention_weights(train).shape == (len(train), 2)


class TestSumPoolingClassifier:
    def test_fit_predict(self, dataset):
        train, test = dataset
        est = SumPoolingClassifier(
            embed_dim=8, mlp_hidden=(32, 16), batch_size=8, epochs=2, seed=1
        ).fit(train, validation=test)
        proba = est.predict_proba(test)
        assert proba.shape == (len(test), 2)
        assert est.fit_result_.best_epoch is not None

    def test_clone_round_trip(self):
        est = SumPoolingClassifier(embed_dim=4, epochs=3)
        assert clone(est).get_params() == est.get_params()

    def test_has_no_attention_surface(self):
        assert not hasattr(SumPoolingClassifier(), "attention_weights")


class TestCheckSamplesErrors:
    def test_empty_history_rejected(self, dataset):
        import dataclasses

        from perimem.data import UserSequence

        train, _ = dataset
        s = train[0]
        bad = dataclasses.replace(
            s, sequence=UserSequence(user_id="u", user_side=(1,), events=())
        )
        with pytest.raises(DataFormatError, match="history"):
            PeriodicMemoryClassifier(**SMALL_KW).fit([bad])
