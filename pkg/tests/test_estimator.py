import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from scriptseq.estimator import ScriptEventPredictor
from scriptseq.validation import check_instances

from conftest import make_instance


def fast_predictor(**overrides):
    kwargs = dict(
        d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ffn=24,
        max_len=64, dropout=0.0, pretrain_epochs=2, finetune_epochs=2,
        pretrain_batch_size=16, finetune_batch_size=8,
        learning_rate=1e-3, patience=5, random_state=3,
    )
    kwargs.update(overrides)
    return ScriptEventPredictor(**kwargs)


def test_get_set_params_and_clone():
    est = fast_predictor(margin=0.25)
    assert est.get_params()["margin"] == 0.25
    est.set_params(loss="cross")
    assert est.loss == "cross"
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()


def test_not_fitted_error(tiny_dataset):
    est = fast_predictor()
    with pytest.raises(NotFittedError):
        est.predict(tiny_dataset["dev"])


def test_fit_predict_shapes(tiny_dataset):
    est = fast_predictor()
    est.fit(tiny_dataset["train"], dev=tiny_dataset["dev"])
    preds = est.predict(tiny_dataset["test"])
    assert preds.shape == (len(tiny_dataset["test"]),)
    assert set(preds) <= set(range(5))
    proba = est.predict_proba(tiny_dataset["test"])
    assert proba.shape == (len(tiny_dataset["test"]), 5)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    raw = est.decision_function(tiny_dataset["test"])
    np.testing.assert_array_equal(np.argmax(raw, axis=1), preds)


def test_score_uses_embedded_answers(tiny_dataset):
    est = fast_predictor()
    est.fit(tiny_dataset["train"], dev=tiny_dataset["dev"])
    acc = est.score(tiny_dataset["test"])
    answers = np.array([i.answer_index for i in tiny_dataset["test"]])
    manual = np.mean(est.predict(tiny_dataset["test"]) == answers)
    assert acc == pytest.approx(manual)
    assert acc == pytest.approx(est.score(tiny_dataset["test"], answers))


def test_default_dev_split(tiny_dataset):
    est = fast_predictor(dev_fraction=0.2)
    est.fit(tiny_dataset["train"])
    assert hasattr(est, "params_")


def test_skip_stages():
    data = [make_instance(f"t{i}") for i in range(12)]
    est = fast_predictor(pretrain=False, finetune_epochs=1)
    est.fit(data, dev=data[:3])
    assert est.pretrain_report_ is None
    assert est.finetune_report_ is not None

    est2 = fast_predictor(loss="none", pretrain_epochs=1)
    est2.fit(data, dev=data[:3])
    assert est2.finetune_report_ is None
    assert est2.pretrain_report_ is not None


def test_validation_helpers(tiny_dataset):
    with pytest.raises(ValueError):
        check_instances([])
    with pytest.raises(TypeError):
        check_instances([1, 2])
    with pytest.raises(TypeError):
        check_instances(tiny_dataset["dev"][0])
    mixed = [make_instance("a", m=5), make_instance("b", m=4)]
    with pytest.raises(ValueError):
        check_instances(mixed)
    assert check_instances(mixed, require_same_m=False) == mixed


def test_fit_learns_above_chance(tiny_dataset):
    est = fast_predictor(pretrain_epochs=3, finetune_epochs=4)
    est.fit(tiny_dataset["train"], dev=tiny_dataset["dev"])
    # 40 training instances: just check we beat the 0.2 random floor clearly
    assert est.score(tiny_dataset["train"]) > 0.4
