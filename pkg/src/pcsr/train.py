"""Source-domain training of the backbone on clean synthetic data.

Any deterministic recipe that reaches the clean-accuracy target is fine;
this one is Adam with cosine decay over shuffled minibatches, seeded end to
end so identical seeds give byte-identical checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .optim import Adam
from .tensor import Tensor, backward, no_grad
from .vit import VitConfig, VitParams, forward, init_vit


@dataclass
class TrainResult:
    params: VitParams
    clean_accuracy: float
    reached_target: bool
    epochs_run: int
    history: list[tuple[int, float, float]]  # (epoch, train loss, eval accuracy)


def evaluate(params: VitParams, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 accuracy of the source model on normalized images."""
    correct = 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            logits = forward(batch, params).logits.data
            correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / max(len(images), 1)


def train_source(train_images: np.ndarray, train_labels: np.ndarray,
                 eval_images: np.ndarray, eval_labels: np.ndarray,
                 config: VitConfig, epochs: int = 30, lr: float = 1e-3,
                 batch_size: int = 128, seed: int = 0,
                 target_accuracy: float = 0.95, label_smoothing: float = 0.1,
                 log=None) -> TrainResult:
    """Train a fresh backbone on the clean split; deterministic in `seed`.

    Missing the accuracy target is reported through `reached_target`, never
    silently: callers decide whether that is fatal.
    """
    if train_images.ndim != 4 or len(train_images) != len(train_labels):
        raise ContractError("train_source expects [n,3,S,S] images with matching labels")
    params = init_vit(config, seed=seed)
    params.set_requires_grad(True)
    tensors = params.tensors()
    opt = Adam(tensors, lr=lr)
    rng = np.random.default_rng(seed + 1)
    n = len(train_images)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total_steps = max(1, epochs * steps_per_epoch)
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        warmup = max(1, total_steps // 20)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if step < warmup:
                opt.lr = lr * (step + 1) / warmup
            else:
                opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * (step - warmup) / max(1, total_steps - warmup)))
            logits = forward(train_images[idx], params).logits
            loss = T.cross_entropy_logits(logits, train_labels[idx], label_smoothing)
            backward(loss)
            opt.step()
            opt.zero_grad()
            epoch_loss += loss.item() * len(idx)
            step += 1
        acc = evaluate(params, eval_images, eval_labels)
        history.append((epoch, epoch_loss / n, acc))
        if log:
            log(f"epoch {epoch:3d}  loss {epoch_loss / n:.4f}  eval acc {acc:.4f}")
    params.set_requires_grad(False)
    final_acc = evaluate(params, eval_images, eval_labels)
    return TrainResult(
        params=params,
        clean_accuracy=final_acc,
        reached_target=final_acc >= target_accuracy,
        epochs_run=epochs,
        history=history,
    )
