"""Frozen two-class severity classifier used to supervise the anchor frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, GroupNorm, Linear, Module, group_count

KL2, KL3 = 0, 1
HALF_TARGET = KL2  # eta = 0.5 frame
THREE_QUARTER_TARGET = KL3  # eta = 0.75 frame


class ConvergenceError(RuntimeError):
    def __init__(self, accuracy: float, threshold: float):
        super().__init__(f"supervisor reached only {accuracy:.3f} validation accuracy (< {threshold})")
        self.accuracy = accuracy


class SupervisorNet(Module):
    """Four stride-2 conv/GroupNorm/swish blocks, global average pool, 2-logit head."""

    def __init__(self, rng: np.random.Generator, channels=(8, 16, 32, 32)):
        self.channels = tuple(channels)
        self.blocks = []
        cin = 1
        for c in self.channels:
            self.blocks.append(_Block(cin, c, rng))
            cin = c
        self.head = Linear(cin, 2, rng)
        self.frozen = False

    def freeze(self) -> "SupervisorNet":
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self.eval()

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for blk in self.blocks:
            h = blk(h)
        return self.head(ad.global_avg_pool(h))


class _Block(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, rng, stride=2)
        self.norm = GroupNorm(group_count(cout, 4), cout)

    def forward(self, x: Tensor) -> Tensor:
        return ad.swish(self.norm(self.conv(x)))


def _batch(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def classify(net: SupervisorNet, image) -> Tensor:
    """Logits (N, 2); class 0 is KL-2-like, class 1 KL-3-like."""
    if net is None:
        raise ValueError("supervisor is not initialized")
    return net(_batch(image))


def predict(net: SupervisorNet, images) -> np.ndarray:
    with ad.no_grad():
        return classify(net, images).data.argmax(axis=1)


def supervision_loss(net: SupervisorNet, frame_half, frame_three_quarter) -> Tensor:
    """CE(frame at eta=0.5 vs KL-2) + CE(frame at eta=0.75 vs KL-3), each averaged over the batch."""
    half = _batch(frame_half)
    tq = _batch(frame_three_quarter)
    ce_half = ad.cross_entropy(classify(net, half), np.full(half.shape[0], HALF_TARGET))
    ce_tq = ad.cross_entropy(classify(net, tq), np.full(tq.shape[0], THREE_QUARTER_TARGET))
    return ad.add(ce_half, ce_tq)


@dataclass
class SupervisorConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-3
    val_fraction: float = 0.3
    min_accuracy: float = 0.8
    seed: int = 0


def pretrain_supervisor(dataset_kl2, dataset_kl3, config: SupervisorConfig | None = None):
    """Train on the two classes, hold out a validation split, then freeze.

    Returns (net, validation accuracy). Raises :class:`ConvergenceError` if the
    held-out accuracy stays below ``config.min_accuracy``.
    """
    from .training import Adam

    config = config or SupervisorConfig()
    a = np.asarray(dataset_kl2, dtype=np.float64)
    b = np.asarray(dataset_kl3, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both classes need at least one image")
    x = np.concatenate([a, b])
    y = np.concatenate([np.full(len(a), KL2), np.full(len(b), KL3)])
    rng = np.random.default_rng([config.seed, 0x50])
    order = rng.permutation(len(x))
    n_val = max(1, int(round(config.val_fraction * len(x))))
    if n_val >= len(x):
        raise ValueError("validation split leaves no training data")
    val_idx, tr_idx = order[:n_val], order[n_val:]

    net = SupervisorNet(np.random.default_rng([config.seed, 0x51]))
    opt = Adam(net.parameters(), lr=config.lr)
    for epoch in range(config.epochs):
        perm = rng.permutation(tr_idx)
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            net.zero_grad()
            with ad.Tape() as tape:
                loss = ad.cross_entropy(classify(net, x[idx]), y[idx])
                tape.backward(loss)
            opt.step()
    net.eval()
    acc = float(np.mean(predict(net, x[val_idx]) == y[val_idx]))
    net.validation_accuracy = acc
    net.freeze()
    if acc < config.min_accuracy:
        raise ConvergenceError(acc, config.min_accuracy)
    return net, acc
