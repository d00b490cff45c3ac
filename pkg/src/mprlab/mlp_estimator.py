"""Shared MLP regressor used by the value net and the BC policy."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from mprlab import numcore as nc
from mprlab.errors import ConfigError, NumericError
from mprlab.numcore import MLP, Tape, Tensor

# tanh-output models regress the pre-activation onto atanh of targets clipped
# here; fitting saturated +-1 targets through tanh stalls on vanishing gradients
TANH_TARGET_CLIP = 0.995


class MLPRegressor(RegressorMixin, BaseEstimator):
    """Standardized-input MLP trained with AdamW on mean squared error.

    ``groups`` in :meth:`fit` holds an episode id per row; validation rows
    are whole held-out groups and the best-validation weights are kept.
    With ``output="tanh"`` the loss is taken before the squashing.
    """

    def __init__(self, hidden=(256, 256, 256), activation="relu", output="linear",
                 epochs=100, batch_size=256, lr=1e-3, weight_decay=0.0, val_ratio=0.1,
                 seed=0):
        self.hidden = hidden
        self.activation = activation
        self.output = output
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_ratio = val_ratio
        self.seed = seed

    def _init_net(self, n_in: int, n_out: int, rng: np.random.Generator) -> None:
        if self.output not in ("linear", "tanh"):
            raise ConfigError(f"unknown output '{self.output}'")
        self.net_ = MLP([n_in, *self.hidden, n_out], rng, activation=self.activation)

    def _forward(self, Xs: np.ndarray) -> nc.Tensor:
        out = self.net_(Tensor(Xs))
        return nc.tanh(out) if self.output == "tanh" else out

    def _fit_targets(self, y2: np.ndarray) -> np.ndarray:
        if self.output == "tanh":
            return np.arctanh(np.clip(y2, -TANH_TARGET_CLIP, TANH_TARGET_CLIP))
        return y2

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if not 0.0 <= self.val_ratio < 1.0:
            raise ConfigError("val_ratio must lie in [0, 1)")
        y2 = y.reshape(len(y), -1)
        self.n_outputs_ = y2.shape[1]
        self._single_output = y.ndim == 1
        rng = np.random.default_rng(self.seed)
        train, val = self._split(len(X), groups, rng)
        self.x_mean_ = X[train].mean(axis=0)
        self.x_std_ = np.maximum(X[train].std(axis=0), 1e-6)
        self.n_features_in_ = X.shape[1]
        self._init_net(X.shape[1], self.n_outputs_, rng)
        Xs = (X - self.x_mean_) / self.x_std_
        y2 = self._fit_targets(y2)
        opt = nc.AdamW(self.net_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        best_state, self.best_val_loss_ = self.net_.state_dict(), np.inf
        self.history_ = []
        for epoch in range(self.epochs):
            order = train[rng.permutation(len(train))]
            total = 0.0
            for i in range(0, len(order), self.batch_size):
                idx = order[i:i + self.batch_size]
                self.net_.zero_grad()
                with Tape() as tape:
                    loss = nc.mse(self.net_(Tensor(Xs[idx])), Tensor(y2[idx]))
                tape.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
            val_loss = self._mse(Xs[val], y2[val]) if len(val) else total / len(train)
            if not np.isfinite(val_loss):
                raise NumericError(f"validation loss is not finite at epoch {epoch}")
            self.history_.append({"epoch": epoch + 1, "train_loss": total / len(train),
                                  "val_loss": val_loss})
            if val_loss < self.best_val_loss_:
                self.best_val_loss_, best_state = val_loss, self.net_.state_dict()
        self.net_.load_state_dict(best_state)
        self.net_.set_trainable(False)
        return self

    def _split(self, n: int, groups, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.val_ratio == 0.0:
            return np.arange(n), np.arange(0)
        if groups is None:
            groups = np.arange(n)
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        n_val = int(round(self.val_ratio * len(uniq)))
        n_val = min(max(n_val, 1), len(uniq) - 1) if len(uniq) > 1 else 0
        held = rng.permutation(uniq)[:n_val]
        is_val = np.isin(groups, held)
        return np.flatnonzero(~is_val), np.flatnonzero(is_val)

    def _mse(self, Xs: np.ndarray, y2: np.ndarray) -> float:
        return float(((self.net_(Tensor(Xs)).data - y2) ** 2).mean())

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = self._forward((X - self.x_mean_) / self.x_std_).data
        return out[:, 0] if self._single_output else out

    # persistence helpers: parameters plus the input standardization
    def state(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "net_")
        st = {f"net.{k}": v for k, v in self.net_.state_dict().items()}
        st["x_mean"], st["x_std"] = self.x_mean_, self.x_std_
        return st

    def load_state(self, state: dict[str, np.ndarray], n_outputs: int, single_output: bool):
        self.x_mean_, self.x_std_ = np.asarray(state["x_mean"]), np.asarray(state["x_std"])
        self.n_features_in_ = len(self.x_mean_)
        self.n_outputs_, self._single_output = n_outputs, single_output
        self._init_net(self.n_features_in_, n_outputs, np.random.default_rng(0))
        self.net_.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("net.")})
        self.net_.set_trainable(False)
        return self
