"""Motion predictor F(P_{t-1}, P_t, tau) -> P_{t+1} and its training loop.

Items are fixed-width (300 slots) but most slots repeat a smaller set of raw
points.  Both architectures run on the unique raw rows: slot-mean pooling
weights each row by its multiplicity, and attention adds ``log(multiplicity)``
to the key logits, which reproduces attention over all 300 slots exactly.
Outputs are gathered back to slots at the end.
"""
from __future__ import annotations

import csv
import hashlib
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from mprlab import numcore as nc
from mprlab.errors import ConfigError, NumericError, PreprocessingError
from mprlab.numcore import MLP, LayerNorm, Linear, Module, Tape, Tensor
from mprlab.tracks import (
    MIXTURE_WIDTH,
    MixtureBatchItem,
    TrackSequence,
    make_item,
)

ARCHS = ("attention", "mlp_pool")
N_TAU_FREQS = 4
MASK_BIAS = -1e9


def tau_features(tau: np.ndarray) -> np.ndarray:
    """[tau, sin(k*pi*tau), cos(k*pi*tau)] for k = 1..4."""
    tau = np.asarray(tau, dtype=float)[..., None]
    k = np.arange(1, N_TAU_FREQS + 1) * np.pi
    return np.concatenate([tau, np.sin(k * tau), np.cos(k * tau)], axis=-1)


@dataclass
class Batch:
    current: np.ndarray   # (B, n, 2)
    context: np.ndarray
    target: np.ndarray
    valid: np.ndarray     # (B, n) real raw rows
    mult: np.ndarray      # (B, n) slot multiplicity, 0 on batch padding
    tau: np.ndarray       # (B,)

    @property
    def size(self) -> int:
        return len(self.tau)


def collate(items: Sequence[MixtureBatchItem]) -> Batch:
    n = max(it.n_raw for it in items)
    b = len(items)
    cur, ctx, tgt = (np.zeros((b, n, 2)) for _ in range(3))
    valid = np.zeros((b, n), dtype=bool)
    mult = np.zeros((b, n))
    for i, it in enumerate(items):
        k = it.n_raw
        cur[i, :k], ctx[i, :k], tgt[i, :k] = it.raw_current, it.raw_context, it.raw_target
        valid[i, :k] = True
        mult[i, :k] = it.multiplicity()
    return Batch(cur, ctx, tgt, valid, mult, np.array([it.tau for it in items], dtype=float))


class _Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ConfigError(f"token width {d} not divisible by {heads} heads")
        dh = d // heads
        # one projection per head: numcore has no reshape, so heads never share a tensor
        self.q = [Linear(d, dh, rng) for _ in range(heads)]
        self.k = [Linear(d, dh, rng) for _ in range(heads)]
        self.v = [Linear(d, dh, rng) for _ in range(heads)]
        self.out = Linear(d, d, rng)
        self.scale = 1.0 / np.sqrt(dh)

    def __call__(self, x: Tensor, bias: Tensor) -> Tensor:
        outs = []
        for q, k, v in zip(self.q, self.k, self.v):
            scores = nc.mul(nc.matmul(q(x), k(x), transpose_b=True), self.scale)
            attn = nc.softmax(nc.add(scores, bias))
            outs.append(nc.matmul(attn, v(x)))
        return self.out(nc.concat(outs, axis=-1))


class _Block(Module):
    def __init__(self, d: int, heads: int, ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = _Attention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP([d, ratio * d, d], rng, activation="gelu")

    def __call__(self, x: Tensor, bias: Tensor) -> Tensor:
        x = nc.add(x, self.attn(self.ln1(x), bias))
        return nc.add(x, self.mlp(self.ln2(x)))


class PredictorNet(Module):
    """Forward graph for both architectures; returns scaled deltas (B, n, 2)."""

    def __init__(self, arch: str, d: int, heads: int, blocks: int, ratio: int,
                 context_width: int, rng: np.random.Generator):
        if arch not in ARCHS:
            raise ConfigError(f"unknown predictor arch '{arch}'")
        self.arch = arch
        self.embed = MLP([4, context_width, d], rng, activation="gelu")
        self.tau_embed = Linear(1 + 2 * N_TAU_FREQS, d, rng)
        if arch == "attention":
            self.blocks = [_Block(d, heads, ratio, rng) for _ in range(blocks)]
            self.ln_out = LayerNorm(d)
            self.head = Linear(d, 2, rng, init="zeros")
        else:
            self.post = MLP([2 * d, context_width, d], rng, activation="gelu")
            self.ln_out = LayerNorm(d)
            self.head = Linear(d, 2, rng, init="zeros")

    def __call__(self, feats: np.ndarray, taus: np.ndarray, mult: np.ndarray) -> Tensor:
        b, n, _ = feats.shape
        x = nc.add(self.embed(Tensor(feats)),
                   self.tau_embed(Tensor(np.broadcast_to(taus[:, None, :], (b, n, taus.shape[-1])))))
        if self.arch == "attention":
            with np.errstate(divide="ignore"):
                logm = np.where(mult > 0, np.log(np.maximum(mult, 1e-300)), MASK_BIAS)
            bias = Tensor(np.broadcast_to(logm[:, None, :], (b, n, n)))
            for blk in self.blocks:
                x = blk(x, bias)
        else:
            w = mult / mult.sum(axis=1, keepdims=True)
            pooled = nc.matmul(Tensor(w[:, None, :]), x)             # (B, 1, d)
            spread = nc.matmul(Tensor(np.ones((b, n, 1))), pooled)   # (B, n, d)
            x = self.post(nc.concat([x, spread], axis=-1))
        return self.head(self.ln_out(x))


def corpus_hash(items: Sequence[MixtureBatchItem]) -> str:
    h = hashlib.sha256()
    for it in items:
        h.update(it.episode_id.encode())
        h.update(np.int64(it.t).tobytes())
        for arr in (it.raw_context, it.raw_current, it.raw_target):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def split_by_episode(items: Sequence[MixtureBatchItem], val_ratio: float,
                     rng: np.random.Generator) -> tuple[list, list]:
    """Hold out whole episodes; at least one episode goes each way when possible."""
    episodes = sorted({it.episode_id for it in items})
    n_val = int(round(val_ratio * len(episodes)))
    n_val = min(max(n_val, 1), len(episodes) - 1) if len(episodes) > 1 else 0
    held = set(rng.permutation(episodes)[:n_val].tolist())
    train = [it for it in items if it.episode_id not in held]
    val = [it for it in items if it.episode_id in held]
    return train, val


class MotionPredictor(BaseEstimator):
    """Point-motion regressor with a residual zero-initialized head.

    ``fit`` takes prepared mixture items; ``predict`` returns slot-aligned
    next-frame points of shape (n_items, 300, 2).
    """

    def __init__(self, arch: str = "attention", d_model: int = 64, n_heads: int = 2,
                 n_blocks: int = 2, mlp_ratio: int = 2, context_width: int = 128,
                 epochs: int = 200, batch_size: int = 20, lr: float = 1e-4,
                 weight_decay: float = 0.0, val_ratio: float = 0.1, seed: int = 0,
                 pixel_scale: int = 256, patience: int | None = None,
                 time_budget_s: float | None = None, verbose: bool = False):
        self.arch = arch
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.mlp_ratio = mlp_ratio
        self.context_width = context_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_ratio = val_ratio
        self.seed = seed
        self.pixel_scale = pixel_scale
        self.patience = patience
        self.time_budget_s = time_budget_s
        self.verbose = verbose

    # -- construction ---------------------------------------------------
    def _validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown predictor arch '{self.arch}'")
        if not 0.0 < self.val_ratio < 1.0:
            raise ConfigError("val_ratio must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def _build(self, rng: np.random.Generator) -> PredictorNet:
        return PredictorNet(self.arch, self.d_model, self.n_heads, self.n_blocks,
                            self.mlp_ratio, self.context_width, rng)

    def initialize(self, delta_scale: float = 0.01) -> "MotionPredictor":
        """Fresh untrained model (identity map on points)."""
        self._validate()
        self.net_ = self._build(np.random.default_rng(self.seed))
        self.delta_scale_ = float(delta_scale)
        self.history_ = []
        self.best_val_loss_ = float("nan")
        self.corpus_hash_ = ""
        return self

    # -- forward --------------------------------------------------------
    def _features(self, batch: Batch) -> np.ndarray:
        pos = (batch.current - 0.5) * 2.0
        vel = (batch.current - batch.context) / self.delta_scale_
        return np.concatenate([pos, vel], axis=-1)

    def _forward(self, batch: Batch) -> Tensor:
        try:
            return self.net_(self._features(batch), tau_features(batch.tau), batch.mult)
        except NumericError as exc:
            raise NumericError(f"predictor forward: {exc}") from None

    def _loss(self, batch: Batch) -> Tensor:
        target = (batch.target - batch.current) / self.delta_scale_
        w = np.repeat(batch.valid[..., None].astype(float), 2, axis=-1)
        return nc.mse(self._forward(batch), Tensor(target), weights=w)

    def predict_raw(self, items: Sequence[MixtureBatchItem], batch_size: int = 64) -> list[np.ndarray]:
        """Predicted P_{t+1} per raw row of each item."""
        check_is_fitted(self, "net_")
        out = []
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            batch = collate(chunk)
            pred = batch.current + self._forward(batch).data * self.delta_scale_
            out.extend(pred[j, :it.n_raw] for j, it in enumerate(chunk))
        return out

    def predict(self, items: Sequence[MixtureBatchItem]) -> np.ndarray:
        """Slot-aligned predicted P_{t+1}, shape (n_items, width, 2)."""
        raw = self.predict_raw(items)
        return np.stack([r[it.slot_index] for r, it in zip(raw, items)])

    def mse(self, items: Sequence[MixtureBatchItem], batch_size: int = 64) -> float:
        """Mean squared error over non-pad slots and coordinates (raw units)."""
        return _mean_over_rows(items, self.predict_raw(items, batch_size))

    def score(self, items: Sequence[MixtureBatchItem]) -> float:
        return -self.mse(items)

    # -- training -------------------------------------------------------
    def fit(self, items: Sequence[MixtureBatchItem], corpus_hash_value: str | None = None,
            metrics_path=None) -> "MotionPredictor":
        self._validate()
        items = list(items)
        if not items:
            raise ConfigError("predictor training corpus is empty")
        rng = np.random.default_rng(self.seed)
        train, val = split_by_episode(items, self.val_ratio, rng)
        if not val:
            val = train
        self.initialize(_delta_rms(train))
        self.corpus_hash_ = corpus_hash_value or corpus_hash(items)
        self.train_episodes_ = sorted({it.episode_id for it in train})
        self.val_episodes_ = sorted({it.episode_id for it in val})
        params = self.net_.parameters()
        opt = nc.AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        best_state, self.best_val_loss_ = self.net_.state_dict(), self.mse(val)
        self.initial_train_loss_ = self.mse(train)
        self.history_ = [{"epoch": 0, "train_loss": self.initial_train_loss_,
                          "val_loss": self.best_val_loss_}]
        start = time.perf_counter()
        since_best = 0
        self.stop_reason_ = "epochs"
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(len(train))
            total, count = 0.0, 0
            for i in range(0, len(order), self.batch_size):
                batch = collate([train[j] for j in order[i:i + self.batch_size]])
                self.net_.zero_grad()
                with Tape() as tape:
                    loss = self._loss(batch)
                tape.backward(loss)
                opt.step()
                total += loss.item() * batch.size
                count += batch.size
            val_loss = self.mse(val)
            if not np.isfinite(val_loss):
                raise NumericError(f"validation loss is not finite at epoch {epoch}")
            row = {"epoch": epoch, "train_loss": total / count * self.delta_scale_ ** 2,
                   "val_loss": val_loss}
            self.history_.append(row)
            if val_loss < self.best_val_loss_:
                self.best_val_loss_, best_state = val_loss, self.net_.state_dict()
                since_best = 0
            else:
                since_best += 1
            if self.verbose:
                print(f"epoch {epoch} train {row['train_loss']:.3e} val {val_loss:.3e}", flush=True)
            if self.patience is not None and since_best >= self.patience:
                self.stop_reason_ = "patience"
                break
            if self.time_budget_s is not None and time.perf_counter() - start > self.time_budget_s:
                self.stop_reason_ = "time_budget"
                break
        self.net_.load_state_dict(best_state)
        self.epochs_run_ = len(self.history_) - 1
        if metrics_path is not None:
            self.write_metrics(metrics_path)
        return self

    def write_metrics(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
            w.writeheader()
            for row in self.history_:
                w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
        return path

    # -- persistence ----------------------------------------------------
    def descriptor(self) -> dict:
        return {
            "arch": self.arch,
            "dims": {"d_model": self.d_model, "n_heads": self.n_heads, "n_blocks": self.n_blocks,
                     "mlp_ratio": self.mlp_ratio, "context_width": self.context_width},
            "pixel_scale": self.pixel_scale,
            "delta_scale": self.delta_scale_,
            "corpus_hash": self.corpus_hash_,
            "best_val_loss": self.best_val_loss_,
            "seed": self.seed,
        }

    def save(self, path) -> Path:
        check_is_fitted(self, "net_")
        path = nc.save_checkpoint(path, self.net_.state_dict())
        nc.write_sidecar(path, self.descriptor())
        return path

    @classmethod
    def load(cls, path) -> "MotionPredictor":
        meta = nc.read_sidecar(path)
        model = cls(arch=meta["arch"], pixel_scale=meta["pixel_scale"], seed=meta.get("seed", 0),
                    **meta["dims"])
        model.initialize(meta["delta_scale"])
        model.net_.load_state_dict(nc.load_checkpoint(path))
        model.corpus_hash_ = meta["corpus_hash"]
        model.best_val_loss_ = meta["best_val_loss"]
        return model


def _delta_rms(items: Sequence[MixtureBatchItem]) -> float:
    sq = sum(float(((it.raw_target - it.raw_current) ** 2).sum()) for it in items)
    n = sum(2 * it.n_raw for it in items)
    return max(float(np.sqrt(sq / n)), 1e-4)


def _mean_over_rows(items, preds) -> float:
    sq = sum(float(((p - it.raw_target) ** 2).sum()) for p, it in zip(preds, items))
    return sq / sum(2 * it.n_raw for it in items)


def zero_motion_mse(items: Sequence[MixtureBatchItem]) -> float:
    """MSE of the predictor that outputs P_{t+1} = P_t."""
    return _mean_over_rows(items, [it.raw_current for it in items])


# --- episode inference -----------------------------------------------------------

@dataclass
class PredictionOutput:
    t: int                 # frame position of P_t
    tau: float
    item: MixtureBatchItem
    predicted: np.ndarray  # (n_raw, 2) predicted P_{t+1}

    @property
    def predicted_slots(self) -> np.ndarray:
        return self.predicted[self.item.slot_index]

    @property
    def predicted_deltas(self) -> np.ndarray:
        return self.predicted - self.item.raw_current

    @property
    def tracked_deltas(self) -> np.ndarray:
        return self.item.raw_target - self.item.raw_current


def _window_key(*frames) -> int:
    key = 0
    for f in frames:
        key = zlib.crc32(np.ascontiguousarray(f.points).tobytes(), key)
        key = zlib.crc32(f.visible.tobytes(), key)
    return key


def inference_items(seq: TrackSequence, horizon_T: int, use_masks: bool = True,
                    seed: int = 0, episode_id: str = "") -> list[MixtureBatchItem | None]:
    """One item per consecutive frame pair inside a span; None where unusable.

    At a span start the previous frame is unavailable, so the context equals
    the current frame (zero input velocity).  Background sampling is keyed on
    the content of the three frames, so an item never depends on where its
    window sits in the episode beyond tau.
    """
    items: list[MixtureBatchItem | None] = []
    for t in range(len(seq.frames) - 1):
        if not seq.same_span(t, t + 1):
            items.append(None)
            continue
        prev = seq.frames[t - 1] if t >= 1 and seq.same_span(t - 1, t) else seq.frames[t]
        rng = np.random.default_rng([seed, _window_key(prev, seq.frames[t], seq.frames[t + 1])])
        try:
            items.append(make_item(prev, seq.frames[t], seq.frames[t + 1], t / horizon_T, rng,
                                   compensate=False, use_masks=use_masks,
                                   width=MIXTURE_WIDTH, episode_id=episode_id, t=t))
        except PreprocessingError:
            items.append(None)
    return items


def predict_episode(model: MotionPredictor, seq: TrackSequence, horizon_T: int,
                    use_masks: bool = True, seed: int = 0) -> list[PredictionOutput]:
    """Predictions for every in-span pair (t, t+1); tau = t / horizon_T."""
    items = inference_items(seq, horizon_T, use_masks, seed)
    usable = [it for it in items if it is not None]
    preds = model.predict_raw(usable) if usable else []
    return [PredictionOutput(it.t, it.tau, it, p) for it, p in zip(usable, preds)]
