"""Scikit-learn style front door for the two-stage pipeline.

ScriptEventPredictor wires vocabulary construction, infilling
pretraining, contrastive fine-tuning, and likelihood ranking behind
fit/predict/predict_proba/score, so the pipeline composes with the usual
ecosystem tooling (get_params/set_params, clone, grid search).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .model import ModelConfig, add_classifier_head, init_params
from .scoring import score_instances, softmax_scores
from .training import TrainConfig, finetune, pretrain
from .validation import check_instances, check_is_fitted
from .verbalizer import build_vocab

__all__ = ["ScriptEventPredictor"]


class ScriptEventPredictor(BaseEstimator):
    """Generative script event predictor with likelihood-based ranking.

    fit() pretrains a small encoder-decoder LM with event-level blank
    infilling on the training scripts, then fine-tunes it contrastively
    over each instance's candidate set; predict() ranks candidates by the
    mean per-token log-probability of their verbalized form.

    Parameters mirror the underlying model and training configs; all are
    plain constructor arguments so sklearn clone/get_params work.  X is a
    sequence of MCNCInstance throughout; the labels live inside the
    instances, so y is accepted but ignored.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        n_enc_layers: int = 2,
        n_dec_layers: int = 2,
        d_ffn: int = 128,
        max_len: int = 160,
        dropout: float = 0.1,
        pretrain: bool = True,
        pretrain_epochs: int = 50,
        pretrain_batch_size: int = 32,
        finetune_epochs: int = 50,
        finetune_batch_size: int = 8,
        learning_rate: float = 1e-5,
        finetune_learning_rate: float | None = None,
        weight_decay: float = 1e-6,
        patience: int = 5,
        loss: str = "cot",
        margin: float = 0.1,
        margin_orientation: str = "conventional",
        scoring: str = "mean",
        norm: str = "paper",
        mask_style: str = "event",
        dev_fraction: float = 0.1,
        random_state: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.d_ffn = d_ffn
        self.max_len = max_len
        self.dropout = dropout
        self.pretrain = pretrain
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_batch_size = pretrain_batch_size
        self.finetune_epochs = finetune_epochs
        self.finetune_batch_size = finetune_batch_size
        self.learning_rate = learning_rate
        self.finetune_learning_rate = finetune_learning_rate
        self.weight_decay = weight_decay
        self.patience = patience
        self.loss = loss
        self.margin = margin
        self.margin_orientation = margin_orientation
        self.scoring = scoring
        self.norm = norm
        self.mask_style = mask_style
        self.dev_fraction = dev_fraction
        self.random_state = random_state

    # --- fitting -----------------------------------------------------------

    def _split_dev(self, instances):
        n_dev = max(1, int(round(len(instances) * self.dev_fraction)))
        if n_dev >= len(instances):
            raise ValueError("dataset too small to split off a dev set")
        return instances[:-n_dev], instances[-n_dev:]

    def fit(self, X, y=None, *, dev=None, test=None, out_dir=None):
        """Run the configured stages on X (a sequence of MCNCInstance).

        dev: held-out instances for early stopping; by default the last
        dev_fraction of X is used.  test: optional instances whose
        accuracy is logged per epoch (never used for selection).
        """
        instances = check_instances(X)
        if dev is None:
            train_set, dev_set = self._split_dev(instances)
        else:
            train_set, dev_set = instances, check_instances(dev)
        test_set = check_instances(test) if test is not None else None

        self.vocab_ = build_vocab(train_set)
        self.n_candidates_ = len(train_set[0].candidates)
        config = ModelConfig(
            vocab_size=len(self.vocab_),
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            d_ffn=self.d_ffn,
            max_len=self.max_len,
            dropout=self.dropout,
            seed=self.random_state,
        )
        params = init_params(config)

        lr2 = (
            self.finetune_learning_rate
            if self.finetune_learning_rate is not None
            else self.learning_rate
        )
        common = dict(
            weight_decay=self.weight_decay,
            patience=self.patience,
            seed=self.random_state,
            norm=self.norm,
        )
        self.pretrain_report_ = None
        if self.pretrain:
            stage1 = TrainConfig(
                learning_rate=self.learning_rate,
                batch_size=self.pretrain_batch_size,
                max_epochs=self.pretrain_epochs,
                mask_style=self.mask_style,
                **common,
            )
            out1 = None if out_dir is None else f"{out_dir}/stage1"
            params, self.pretrain_report_ = pretrain(
                params, self.vocab_, train_set, dev_set, stage1, out1, test_set
            )

        self.finetune_report_ = None
        if self.loss != "none":
            if self.loss == "classifier":
                params = add_classifier_head(params, self.n_candidates_)
            stage2 = TrainConfig(
                learning_rate=lr2,
                batch_size=self.finetune_batch_size,
                max_epochs=self.finetune_epochs,
                loss_kind=self.loss,
                margin=self.margin,
                margin_orientation=self.margin_orientation,
                scoring=self.scoring,
                **common,
            )
            out2 = None if out_dir is None else f"{out_dir}/stage2"
            params, self.finetune_report_ = finetune(
                params, self.vocab_, train_set, dev_set, stage2, out2, test_set
            )
        self.params_ = params
        return self

    # --- inference -----------------------------------------------------------

    def _scores(self, X) -> np.ndarray:
        check_is_fitted(self, ("params_", "vocab_"))
        instances = check_instances(X)
        return score_instances(
            self.params_, self.vocab_, instances, scoring=self.scoring, norm=self.norm
        )

    def decision_function(self, X) -> np.ndarray:
        """Raw candidate scores o, shape (n_instances, M)."""
        return self._scores(X)

    def predict_proba(self, X) -> np.ndarray:
        """Softmax candidate scores s, shape (n_instances, M)."""
        return softmax_scores(self._scores(X))

    def predict(self, X) -> np.ndarray:
        """Index of the predicted next event per instance."""
        return np.argmax(self._scores(X), axis=1)

    def score(self, X, y=None) -> float:
        """Accuracy against y, or each instance's own answer index."""
        instances = check_instances(X)
        predicted = self.predict(instances)
        if y is None:
            y = np.array([inst.answer_index for inst in instances])
        return float(np.mean(predicted == np.asarray(y)))
