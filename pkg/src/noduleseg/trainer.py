"""Cross-entropy training with momentum SGD, step decay and early stopping."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .boundary_sampler import SampleManifest
from .dbresnet import Checkpoint, DBResNet
from .patch_engine import PatchSource

log = logging.getLogger(__name__)

EPS = 1e-7


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; carries the offending tensor name."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.9
    decay_every: int = 5
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay <= 0 or self.decay_every < 1:
            raise ValueError("learning-rate settings must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and max epochs must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must lie in (0, 1)")


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    train_loss: float = math.nan

    def record(self, val_loss: float) -> bool:
        """Update the early-stopping counters; True when ``val_loss`` is a new best."""
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False


def cross_entropy(labels, predictions, eps: float = EPS):
    """Mean binary cross-entropy of nodule probabilities against 0/1 labels.

    Accepts tensors (differentiable result) or array-likes (float result).
    """
    as_tensor = isinstance(predictions, torch.Tensor)
    p = predictions if as_tensor else torch.as_tensor(np.asarray(predictions, dtype=np.float64))
    y = torch.as_tensor(labels, dtype=p.dtype, device=p.device)
    if p.numel() == 0:
        raise ValueError("cross-entropy of an empty batch")
    p = p.clamp(eps, 1 - eps)
    loss = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
    return loss if as_tensor else float(loss)


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


@torch.no_grad()
def sgd_momentum_step(named_params, optimizer: torch.optim.Optimizer, lr: float) -> None:
    """One ``v <- momentum * v + g; p <- p - lr * v`` step at learning rate ``lr``.

    Raises ``NonFiniteError`` before touching any parameter if a gradient is
    not finite.
    """
    for name, p in named_params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {name} (max |g| = {p.grad.abs().max().item()})")
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)


def split_volumes(volume_ids: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Disjoint (train, validation) volume id lists; at least one of each."""
    ids = sorted(set(volume_ids))
    if len(ids) < 2:
        raise ValueError("need at least two volumes to hold out a validation set")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_val = min(len(ids) - 1, max(1, round(fraction * len(ids))))
    return sorted(perm[n_val:]), sorted(perm[:n_val])


def evaluate_loss(net: DBResNet, manifest: SampleManifest, source: PatchSource, batch_size: int = 128) -> float:
    net.eval()
    entries = manifest.entries
    total, n = 0.0, 0
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(entries), batch_size):
            mv, ms, y = source.batch(entries[i : i + batch_size])
            p = net(torch.as_tensor(mv, dtype=dtype), torch.as_tensor(ms, dtype=dtype))[:, 1]
            total += cross_entropy(torch.as_tensor(y, dtype=dtype), p).item() * len(y)
            n += len(y)
    return total / n


def format_log_line(epoch: int, lr: float, train_loss: float, val_loss: float, seconds: float) -> str:
    return f"epoch={epoch} lr={lr:.8g} train_loss={train_loss:.6f} val_loss={val_loss:.6f} seconds={seconds:.2f}"


def train(
    net: DBResNet,
    manifest: SampleManifest,
    source: PatchSource,
    cfg: TrainConfig = TrainConfig(),
    val_manifest: SampleManifest | None = None,
    on_epoch: Callable[[str], None] | None = None,
) -> Checkpoint:
    """Train ``net`` in place and return the checkpoint with the lowest validation loss.

    Without ``val_manifest`` a ``cfg.val_fraction`` share of the manifest's
    volumes is held out. Training stops after ``cfg.max_epochs`` epochs or
    once ``max(cfg.patience, 1)`` consecutive epochs fail to improve the
    validation loss.
    """
    if val_manifest is None:
        train_ids, val_ids = split_volumes(manifest.volume_ids(), cfg.val_fraction, cfg.seed)
        val_manifest = manifest.subset(val_ids)
        manifest = manifest.subset(train_ids)
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    if len(val_manifest) == 0:
        raise ValueError("validation manifest is empty")
    overlap = set(manifest.volume_ids()) & set(val_manifest.volume_ids())
    if overlap:
        raise ValueError(f"train and validation share volumes: {sorted(overlap)[:3]}")

    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    entries = list(manifest.entries)
    dtype = next(net.parameters()).dtype
    params = list(net.named_parameters())
    optimizer = make_optimizer([p for _, p in params], cfg)
    best_state = copy.deepcopy(net.state_dict())
    best_epoch = 0
    history = []

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        state.epoch = epoch
        lr = lr_at(epoch, cfg)
        net.train()
        order = rng.permutation(len(entries))
        running, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [entries[j] for j in order[i : i + cfg.batch_size]]
            mv, ms, y = source.batch(batch)
            p = net(torch.as_tensor(mv, dtype=dtype), torch.as_tensor(ms, dtype=dtype))[:, 1]
            loss = cross_entropy(torch.as_tensor(y, dtype=dtype), p)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            net.zero_grad(set_to_none=True)
            loss.backward()
            sgd_momentum_step(params, optimizer, lr)
            running += loss.item() * len(batch)
            seen += len(batch)
        state.train_loss = running / seen
        val_loss = evaluate_loss(net, val_manifest, source)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        improved = state.record(val_loss)
        if improved:
            best_state = copy.deepcopy(net.state_dict())
            best_epoch = epoch
        seconds = time.perf_counter() - t0
        history.append({"epoch": epoch, "lr": lr, "train_loss": state.train_loss, "val_loss": val_loss, "seconds": seconds})
        line = format_log_line(epoch, lr, state.train_loss, val_loss, seconds)
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)
        if state.epochs_since_improvement >= max(cfg.patience, 1):
            break

    net.load_state_dict(best_state)
    net.is_trained = True
    net.eval()
    return Checkpoint(
        config=net.cfg,
        state=best_state,
        epoch=best_epoch,
        val_loss=state.best_val_loss,
        seed=cfg.seed,
        history=history,
    )
