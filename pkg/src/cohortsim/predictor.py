"""Sequence regressor: a small LSTM with a linear head, trained from scratch.

Input sequences are encoded visit by visit as the masked feature values, an
observed-fraction channel, and a scaled time-to-target channel. The network
is 10 hidden units by default, the head output passes through a logistic so
predictions stay in the normalized score range. Training uses mini-batch
Adam with decoupled weight decay, MSE loss, and validation-based early
stopping with best-epoch parameter restore.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import logistic
from .pipeline import PredictionPair

TIME_SCALE = 10.0  # years mapped to O(1) inputs


class TrainingError(Exception):
    """Loss diverged or training input was unusable."""


@dataclass
class LstmParams:
    """Gate weights stacked row-wise in (input, forget, cell, output) order."""

    W_x: np.ndarray  # (4H, In)
    W_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)
    head_w: np.ndarray  # (H,)
    head_b: np.ndarray  # (1,)

    @property
    def hidden_dim(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[1]

    def copy(self) -> "LstmParams":
        return LstmParams(self.W_x.copy(), self.W_h.copy(), self.b.copy(),
                          self.head_w.copy(), self.head_b.copy())

    def arrays(self):
        return {"W_x": self.W_x, "W_h": self.W_h, "b": self.b,
                "head_w": self.head_w, "head_b": self.head_b}

    @staticmethod
    def init(input_dim: int, hidden_dim: int = 10, rng=None) -> "LstmParams":
        rng = rng or np.random.default_rng(0)
        h4 = 4 * hidden_dim
        scale_x = 1.0 / np.sqrt(input_dim)
        scale_h = 1.0 / np.sqrt(hidden_dim)
        b = np.zeros(h4)
        b[hidden_dim : 2 * hidden_dim] = 1.0  # forget-gate bias
        return LstmParams(
            W_x=rng.uniform(-scale_x, scale_x, (h4, input_dim)),
            W_h=rng.uniform(-scale_h, scale_h, (h4, hidden_dim)),
            b=b,
            head_w=rng.uniform(-scale_h, scale_h, hidden_dim),
            head_b=np.zeros(1),
        )

    def to_json(self) -> dict:
        return {
            "version": 1,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "weights": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.arrays().items()
            },
        }

    @staticmethod
    def from_json(doc: dict) -> "LstmParams":
        w = {
            name: np.array(spec["data"]).reshape(spec["shape"])
            for name, spec in doc["weights"].items()
        }
        return LstmParams(w["W_x"], w["W_h"], w["b"], w["head_w"], w["head_b"])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 20
    hidden_dim: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs,
               self.hidden_dim) <= 0:
            raise ValueError("learning_rate, batch_size, max_epochs, hidden_dim "
                             "must be positive")
        if self.weight_decay < 0 or self.patience < 0:
            raise ValueError("weight_decay and patience must be non-negative")


def encode_pair(pair: PredictionPair, d: int) -> np.ndarray:
    """Encode the input visits as a (T, d + 2) sequence: masked values with
    missing set to 0, the observed fraction, and the scaled years-to-target."""
    rows = []
    for v in pair.input_visits:
        values = np.where(v.mask, v.values, 0.0)
        frac = v.mask.mean()
        dt = (pair.target_age - v.age) / TIME_SCALE
        rows.append(np.concatenate([values, [frac, dt]]))
    return np.stack(rows)


def _forward_cached(params: LstmParams, X: np.ndarray):
    """Run the recurrence on an equal-length batch X of shape (B, T, In)."""
    B, T, _ = X.shape
    H = params.hidden_dim
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(T):
        a = X[:, t] @ params.W_x.T + h @ params.W_h.T + params.b
        i = logistic(a[:, :H])
        f = logistic(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = logistic(a[:, 3 * H :])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        cache.append((h, c, i, f, g, o, c_new))
        h, c = h_new, c_new
    logit = h @ params.head_w + params.head_b[0]
    pred = logistic(logit)
    return pred, (X, cache, h, pred)


def forward(params: LstmParams, sequence: np.ndarray) -> float:
    """Predict the target value from one encoded visit sequence (T, In)."""
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError("sequence must be a non-empty (T, input_dim) array")
    pred, _ = _forward_cached(params, seq[None])
    return float(pred[0])


def _zero_grads(params: LstmParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.arrays().items()}


def loss_and_gradients(params: LstmParams, X: np.ndarray, y: np.ndarray):
    """MSE loss and full-BPTT gradients over an equal-length batch.

    X has shape (B, T, In), y shape (B,). Gradients are returned as a dict
    keyed like LstmParams.arrays().
    """
    B, T, _ = X.shape
    if B == 0:
        raise ValueError("batch must be non-empty")
    H = params.hidden_dim
    pred, (X, cache, h_T, _) = _forward_cached(params, X)
    err = pred - y
    loss = float(np.mean(err**2))

    grads = _zero_grads(params)
    dlogit = (2.0 / B) * err * pred * (1.0 - pred)  # (B,)
    grads["head_w"] += dlogit @ h_T
    grads["head_b"][0] += dlogit.sum()

    dh = dlogit[:, None] * params.head_w[None, :]
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, c_new = cache[t]
        tanh_c = np.tanh(c_new)
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c**2)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g**2),
                do * o * (1.0 - o),
            ],
            axis=1,
        )  # (B, 4H)
        grads["W_x"] += da.T @ X[:, t]
        grads["W_h"] += da.T @ h_prev
        grads["b"] += da.sum(axis=0)
        dh = da @ params.W_h
        dc = dc * f
    return loss, grads


def batch_loss(params: LstmParams, sequences, targets) -> float:
    """Mean squared error over variable-length sequences."""
    preds = np.array([forward(params, s) for s in sequences])
    return float(np.mean((preds - np.asarray(targets)) ** 2))


def _grouped_loss_and_gradients(params, sequences, targets):
    """Handle a variable-length mini-batch by grouping equal lengths and
    averaging the per-group results weighted by group size."""
    by_len = {}
    for seq, tgt in zip(sequences, targets):
        by_len.setdefault(seq.shape[0], ([], []))
        by_len[seq.shape[0]][0].append(seq)
        by_len[seq.shape[0]][1].append(tgt)
    total = len(sequences)
    loss = 0.0
    grads = _zero_grads(params)
    for seqs, tgts in by_len.values():
        w = len(seqs) / total
        l, g = loss_and_gradients(params, np.stack(seqs), np.asarray(tgts, float))
        loss += w * l
        for name in grads:
            grads[name] += w * g[name]
    return loss, grads


class _Adam:
    def __init__(self, params: LstmParams, lr, weight_decay,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = _zero_grads(params)
        self.v = _zero_grads(params)

    def step(self, params: LstmParams, grads: dict):
        self.t += 1
        arrays = params.arrays()
        for name, arr in arrays.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g**2
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            arr -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            arr -= self.lr * self.wd * arr  # decoupled decay



def train(pairs_train, pairs_validation, cfg: TrainConfig, d: int | None = None):
    """Train on prediction pairs with early stopping on validation MSE.

    Returns (best params, history) where history is a list of dicts with
    epoch, train_mse, val_mse. The returned parameters are those of the
    epoch with the lowest validation loss.
    """
    if not pairs_train or not pairs_validation:
        raise ValueError("training and validation sets must be non-empty")
    if d is None:
        d = pairs_train[0].input_visits[0].values.shape[0]
    train_seqs = [encode_pair(p, d) for p in pairs_train]
    train_tgts = np.array([p.target_value for p in pairs_train])
    val_seqs = [encode_pair(p, d) for p in pairs_validation]
    val_tgts = np.array([p.target_value for p in pairs_validation])

    rng = np.random.default_rng(cfg.seed)
    params = LstmParams.init(d + 2, cfg.hidden_dim, rng)
    opt = _Adam(params, cfg.learning_rate, cfg.weight_decay)

    best = params.copy()
    best_val = np.inf
    best_epoch = 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_seqs))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = _grouped_loss_and_gradients(
                params, [train_seqs[i] for i in idx], train_tgts[idx]
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            opt.step(params, grads)
            epoch_loss += loss * len(idx)
        train_mse = epoch_loss / len(order)
        val_mse = batch_loss(params, val_seqs, val_tgts)
        if not np.isfinite(val_mse):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
        if val_mse < best_val:
            best_val = val_mse
            best = params.copy()
            best_epoch = epoch
        if epoch - best_epoch >= cfg.patience:
            break
    return best, history


def history_to_csv(history, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_mse", "val_mse"])
        writer.writeheader()
        writer.writerows(history)
