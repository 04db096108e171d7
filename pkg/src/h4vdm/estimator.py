"""scikit-learn style wrapper around the extractor and the training loop.

``X`` for :meth:`GopPairVerifier.fit`, :meth:`~GopPairVerifier.predict` and
friends is a sequence of ``(ModelInput, ModelInput)`` pairs; ``transform``
takes a plain sequence of :class:`~h4vdm.gop_store.ModelInput`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import ShapeMismatch, SingleClass
from .gop_store import ModelInput
from .metrics import auc, choose_threshold
from .model import H4VDM, preset
from .pairs import PairSample, carve_validation
from .train import InputSource, TrainConfig, score_pairs, train


def check_inputs(X, L: int, height: int, width: int) -> list[ModelInput]:
    """Validate a sequence of model inputs against the configured geometry."""
    if isinstance(X, ModelInput):
        X = [X]
    X = list(X)
    if not X:
        raise ShapeMismatch("empty input")
    for i, x in enumerate(X):
        if not isinstance(x, ModelInput):
            raise TypeError(f"item {i} is {type(x).__name__}, expected ModelInput")
        if x.i_frame.shape != (height, width, 3) or x.L != L:
            raise ShapeMismatch(f"item {i}: expected L={L}, {height}x{width}; "
                                f"got L={x.L}, {x.i_frame.shape[:2]}")
    return X


def check_pairs(X, y=None, L: int = 8, height: int = 224, width: int = 224):
    """Validate ``(ModelInput, ModelInput)`` pairs and optional 0/1 labels."""
    X = list(X)
    for i, p in enumerate(X):
        if len(p) != 2:
            raise ShapeMismatch(f"pair {i} has {len(p)} members")
    flat = check_inputs([x for p in X for x in p], L, height, width)
    if y is None:
        return flat, None
    y = np.asarray(y).reshape(-1)
    if len(y) != len(X):
        raise ShapeMismatch(f"{len(X)} pairs but {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise SingleClass("training needs both labels")
    return flat, y.astype(np.int64)


class GopPairVerifier(BaseEstimator):
    """Same-device verification for pairs of GOPs.

    ``decision_function`` returns the similarity score in [0, 1];
    ``predict`` thresholds it at ``threshold_``, which is chosen on the held-out
    validation share of the training pairs unless ``threshold`` is fixed.
    """

    def __init__(self, preset="tiny", batch_size=72, base_lr=8e-6, warmup_epochs=5, decay=0.97,
                 patience=5, max_epochs=100, val_fraction=0.125, threshold=None, seed=0,
                 dtype="float32"):
        self.preset = preset
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.decay = decay
        self.patience = patience
        self.max_epochs = max_epochs
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.seed = seed
        self.dtype = dtype

    def _geometry(self):
        c = preset(self.preset) if isinstance(self.preset, str) else self.preset
        return c, (c.L, c.height, c.width)

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def fit(self, X, y):
        config, geom = self._geometry()
        flat, y = check_pairs(X, y, *geom)
        self.model_ = H4VDM(config)
        params = self.model_.init_params(self.seed, np.dtype(self.dtype))
        pairs = [PairSample(("", "", 2 * i), ("", "", 2 * i + 1), int(lab)) for i, lab in enumerate(y)]
        val, rest = carve_validation(pairs, self.val_fraction, self.seed)
        if not val or min(p.label for p in val) == max(p.label for p in val):
            raise SingleClass("validation share must contain both labels; add pairs or raise val_fraction")
        cfg = TrainConfig(batch_size=self.batch_size, warmup_epochs=self.warmup_epochs,
                          base_lr=self.base_lr, decay=self.decay, patience=self.patience,
                          max_epochs=self.max_epochs, seed=self.seed)
        src = _ListSource(flat, np.dtype(self.dtype))
        result = train(self.model_, params, src, rest, val, cfg)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        if self.threshold is None:
            v = score_pairs(self.model_, self.params_, src, val)
            self.threshold_ = choose_threshold(v, [p.label for p in val])
        else:
            self.threshold_ = float(self.threshold)
        return self

    def transform(self, X) -> np.ndarray:
        """GOP feature vectors, shape ``(n, D_r)``."""
        self._check_fitted()
        c = self.model_.config
        X = check_inputs(X, c.L, c.height, c.width)
        src = _ListSource(X, np.dtype(self.dtype))
        out = []
        for k in range(0, len(X), 64):
            refs = [("", "", i) for i in range(k, min(k + 64, len(X)))]
            out.append(self.model_.extract(self.params_, src.batch(refs)))
        return np.concatenate(out)

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        c = self.model_.config
        flat, _ = check_pairs(X, None, c.L, c.height, c.width)
        pairs = [PairSample(("", "", 2 * i), ("", "", 2 * i + 1), 0) for i in range(len(flat) // 2)]
        return score_pairs(self.model_, self.params_, _ListSource(flat, np.dtype(self.dtype)), pairs)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= self.threshold_).astype(np.int64)

    def score(self, X, y) -> float:
        """AUC of the similarity scores."""
        return auc(self.decision_function(X), y)


class _ListSource(InputSource):
    """Input source over an in-memory list; references are ``("", "", index)``."""

    def __init__(self, items: Sequence[ModelInput], dtype):
        first = items[0]
        super().__init__(lambda ref: None, first.L, *first.i_frame.shape[:2], dtype, cache_size=0)
        self._items = items

    def get(self, ref):
        x = self._items[ref[2]]
        if x.i_frame.dtype == self.dtype:
            return x
        return ModelInput(*(np.asarray(a, self.dtype) if a.dtype.kind == "f" else a
                            for a in (x.i_frame, x.frame_diffs, x.frame_type_ids, x.mb_type_maps,
                                      x.luma_qp_maps)))
