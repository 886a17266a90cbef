"""scikit-learn style wrapper around the continual-learning loop.

Each call to :meth:`ExpertPoolContinualClassifier.partial_fit` is one task:
fresh expert pools are trained on it and their top experts merged into the
backbone. Tasks are referred to by the order in which they were fitted.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .ago import PastRegistry
from .bench import TaskDataset
from .core_math import SeededRng
from .model import AdaptedModel, forward_eval, prototypes_from_inputs
from .trainer import TrainConfig, build_backbone, end_of_task, train_task


class ExpertPoolContinualClassifier(ClassifierMixin, BaseEstimator):
    """Sequential task learner with sparse rank-1 expert composition.

    ``class_inputs`` passed to :meth:`partial_fit` are one representative
    input per class (row ``c`` for label ``c``); their frozen features act as
    the class prototypes for that task.
    """

    def __init__(self, lr=2e-3, batch_size=32, steps_per_task=500, lam=0.1, r=12, R=8,
                 merge_k=4, gate_mode="binary", merge_strategy="uniform_topk",
                 d_model=32, n_layers=2, temperature=0.1, seed=0):
        self.lr = lr
        self.batch_size = batch_size
        self.steps_per_task = steps_per_task
        self.lam = lam
        self.r = r
        self.R = R
        self.merge_k = merge_k
        self.gate_mode = gate_mode
        self.merge_strategy = merge_strategy
        self.d_model = d_model
        self.n_layers = n_layers
        self.temperature = temperature
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def partial_fit(self, X, y, class_inputs):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        class_inputs = check_array(class_inputs, dtype=np.float64)
        cfg = self._config()
        if not hasattr(self, "backbone_"):
            self.pristine_ = build_backbone(cfg, X.shape[1])
            self.backbone_ = self.pristine_.copy()
            self.registry_ = PastRegistry()
            self.prototypes_ = []
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        t = len(self.prototypes_)
        protos = prototypes_from_inputs(self.pristine_, class_inputs)
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= protos.shape[0]:
            raise ValueError("labels must index rows of class_inputs")
        root = SeededRng(cfg.seed)
        model = AdaptedModel.attach(self.backbone_, cfg.r, root.derive("adapter", t))
        model.prototypes = protos
        data = TaskDataset(t + 1, X, y, X[:0], y[:0], class_inputs, np.eye(X.shape[1]))
        result = train_task(model, data, self.registry_, cfg, root.derive("batches", t))
        result.merged_sets = end_of_task(model, self.registry_, cfg, t + 1)
        self.prototypes_.append(protos)
        self.classes_ = np.arange(protos.shape[0])
        self.last_result_ = result
        return self

    def fit(self, X, y, class_inputs):
        for attr in ("backbone_", "pristine_", "registry_", "prototypes_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y, class_inputs)

    def decision_function(self, X, task=-1):
        check_is_fitted(self, "backbone_")
        X = check_array(X, dtype=np.float64)
        return forward_eval(self.backbone_, X, self.prototypes_[task])

    def predict(self, X, task=-1):
        return np.argmax(self.decision_function(X, task), axis=1)

    def score(self, X, y, task=-1, sample_weight=None):
        return float(np.average(self.predict(X, task) == np.asarray(y), weights=sample_weight))
