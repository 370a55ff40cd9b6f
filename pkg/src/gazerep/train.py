"""Adam, the epoch loop, and supervised fine-tuning of the encoder."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .model import Autoencoder, SupervisedTCN, cross_entropy
from .nn import Module

LEARNING_RATE = 5e-4


@dataclass
class AdamState:
    lr: float = LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named_params: Iterable[tuple[str, ad.Tensor]], state: AdamState) -> None:
    """One bias-corrected Adam update from the parameters' ``.grad``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 14
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs batch statistics)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    @classmethod
    def position(cls) -> "TrainConfig":
        return cls(batch_size=256, epochs=14)

    @classmethod
    def velocity(cls) -> "TrainConfig":
        return cls(batch_size=128, epochs=25)


def batch_order(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch; tails shorter than 2 are dropped."""
    idx = np.random.default_rng([cfg.seed, epoch]).permutation(n) if cfg.shuffle else np.arange(n)
    batches = [idx[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    return [b for b in batches if len(b) >= 2]


def destroy_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, (epoch << 32) | step]))


def train_epoch(model: Autoencoder, windows: np.ndarray, cfg: TrainConfig, adam: AdamState, epoch: int) -> float:
    """Run one epoch; return the mean per-window SSE."""
    if len(windows) == 0:
        raise ValueError("empty training set")
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim != 3 or windows.shape[1] != model.config.in_channels:
        raise ValueError(f"expected (N, {model.config.in_channels}, T) windows, got {windows.shape}")
    model.train()
    params = list(model.named_parameters())
    total, seen = 0.0, 0
    for step, idx in enumerate(batch_order(len(windows), cfg, epoch)):
        ad.zero_grads(p for _, p in params)
        loss = model.loss(windows[idx], destroy_rng(cfg.seed, epoch, step))
        loss.backward()
        adam_step(params, adam)
        total += float(loss.item())
        seen += len(idx)
    if seen == 0:
        raise ValueError("no batch of at least 2 windows")
    return total / seen


def fit(model: Autoencoder, windows: np.ndarray, cfg: TrainConfig, adam: AdamState | None = None,
        start_epoch: int = 0, log: Callable[[str], None] | None = None,
        on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Train ``cfg.epochs - start_epoch`` epochs; logs ``epoch,mean_loss,wall_s`` lines."""
    adam = adam if adam is not None else AdamState()
    losses = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        loss = train_epoch(model, windows, cfg, adam, epoch)
        losses.append(loss)
        if log is not None:
            log(f"{epoch + 1},{loss:.9g},{time.perf_counter() - t0:.3f}")
        if on_epoch is not None:
            on_epoch(epoch + 1, loss)
    return losses


def fit_supervised(model: SupervisedTCN, x: np.ndarray, y: np.ndarray, epochs: int = 100, batch_size: int = 16,
                   patience: int = 10, val_fraction: float = 0.2, seed: int = 0, lr: float = LEARNING_RATE,
                   ) -> dict[str, list[float]]:
    """Cross-entropy training with early stopping on a held-out split.

    The best-validation weights are restored at the end. Returns the per-epoch
    train/validation loss history.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(len(x))
    n_val = int(round(val_fraction * len(x))) if val_fraction > 0 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    adam = AdamState(lr=lr)
    params = list(model.named_parameters())
    cfg = TrainConfig(batch_size=batch_size, epochs=epochs, seed=seed)
    history = {"train": [], "val": []}
    best, best_state, bad = np.inf, None, 0
    for epoch in range(epochs):
        model.train()
        total = 0.0
        for idx in batch_order(len(train_idx), cfg, epoch):
            sel = train_idx[idx]
            ad.zero_grads(p for _, p in params)
            loss = cross_entropy(model(x[sel]), y[sel])
            loss.backward()
            adam_step(params, adam)
            total += loss.item() * len(sel)
        history["train"].append(total / max(len(train_idx), 1))
        if n_val:
            model.eval()
            with ad.no_grad():
                val = cross_entropy(model(x[val_idx]), y[val_idx]).item()
            history["val"].append(val)
            if val < best - 1e-12:
                best, bad = val, 0
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            else:
                bad += 1
                if bad >= patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def predict_classes(model: Module, x: np.ndarray) -> np.ndarray:
    model.eval()
    with ad.no_grad():
        return model(np.asarray(x, dtype=np.float32)).data.argmax(axis=1)
