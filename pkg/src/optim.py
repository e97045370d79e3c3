"""Loss, accuracy, gradient descent with momentum and the epoch loop."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import DivergenceError, InvalidArgumentError, ShapeError
from src.io_schemas import OptimizerConfig
from src.nn.network import Network, backward, one_hot
from src.tensor import Tensor, make_rng
from src.utils import EventCallback, emit, lower_median

LOG_CLAMP = 1e-12

# (images [N,1,H,W] or [N,F], integer labels [N])
Arrays = Tuple[np.ndarray, np.ndarray]


def cross_entropy_loss(predictions: Tensor, targets: Tensor) -> float:
    """Mean over the batch of -sum_c y_c log(h_c), log argument clamped."""
    if predictions.shape != targets.shape:
        raise ShapeError(f"predictions {predictions.shape} and targets {targets.shape} differ")
    if predictions.shape[0] == 0:
        raise InvalidArgumentError("cross-entropy of an empty batch")
    logs = np.log(np.maximum(predictions, LOG_CLAMP))
    return float(-np.sum(targets * logs) / predictions.shape[0])


def accuracy(predictions: Tensor, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest class."""
    labels = np.asarray(labels)
    if predictions.shape[0] == 0:
        raise InvalidArgumentError("accuracy of an empty batch")
    if labels.ndim == 2:
        labels = np.argmax(labels, axis=1)
    if labels.shape[0] != predictions.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {predictions.shape[0]} predictions")
    return float(np.mean(np.argmax(predictions, axis=1) == labels))


def _layer_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


def _check_finite(grads: Dict[str, Tensor]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}", layer=_layer_of(name))


def batch_gd_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], alpha: float) -> Dict[str, Tensor]:
    """theta <- theta - alpha * grad, applied to all parameters in place."""
    _check_finite(grads)
    for name, p in params.items():
        p -= alpha * grads[name]
    return params


@dataclass
class Velocity:
    """Momentum buffers, one per parameter."""

    buffers: Dict[str, Tensor]

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> "Velocity":
        return cls({name: np.zeros_like(p) for name, p in params.items()})

    def step(self, params: Dict[str, Tensor], grads: Dict[str, Tensor], alpha: float, mu: float) -> None:
        """v <- mu*v - alpha*grad ; theta <- theta + v."""
        _check_finite(grads)
        for name, p in params.items():
            v = self.buffers[name]
            v *= mu
            v -= alpha * grads[name]
            p += v


def _run_epoch(
    network: Network,
    train: Arrays,
    config: OptimizerConfig,
    velocity: Velocity,
    rng: np.random.Generator,
    epoch: Optional[int] = None,
) -> Tuple[float, float]:
    x, labels = train
    m = x.shape[0]
    if m == 0:
        raise InvalidArgumentError("empty training set")
    batch_size = min(config.batch_size, m)
    order = rng.permutation(m)
    params = network.parameters()
    total_loss = 0.0
    correct = 0
    for batch_index, start in enumerate(range(0, m, batch_size)):
        idx = order[start : start + batch_size]
        xb, yb = x[idx], labels[idx]
        targets = one_hot(yb, network.config.num_classes)
        trace = network.forward(xb, "train", rng)
        loss = cross_entropy_loss(trace.probs, targets)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite loss", epoch=epoch, batch=batch_index)
        grads = backward(network, trace, targets)
        try:
            velocity.step(params, grads, config.alpha, config.mu)
        except DivergenceError as e:
            raise DivergenceError("non-finite gradient", epoch=epoch, batch=batch_index, layer=e.layer) from e
        total_loss += loss * len(idx)
        correct += int(np.sum(np.argmax(trace.probs, axis=1) == yb))
    return total_loss / m, correct / m


def sgd_epoch(
    network: Network,
    train: Arrays,
    config: OptimizerConfig,
    velocity: Velocity,
    rng: np.random.Generator,
    epoch: Optional[int] = None,
) -> Tuple[Network, float]:
    """One shuffled pass of mini-batch SGD with classical momentum.

    The last batch may be smaller. Returns the network (updated in place) and
    the batch-size-weighted mean training loss.
    """
    loss, _ = _run_epoch(network, train, config, velocity, rng, epoch)
    return network, loss


def evaluate(network: Network, data: Arrays, batch_size: int = 500) -> Tuple[float, float]:
    """(loss, accuracy) in eval mode."""
    x, labels = data
    if x.shape[0] == 0:
        raise InvalidArgumentError("cannot evaluate on an empty split")
    probs = network.predict(x, batch_size=batch_size)
    return cross_entropy_loss(probs, one_hot(labels, network.config.num_classes)), accuracy(probs, labels)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.10g}"


@dataclass
class TrainReport:
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    train_accuracies: List[float] = field(default_factory=list)
    test_loss: Optional[float] = None
    test_accuracy: Optional[float] = None
    seed: Optional[int] = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)

    @property
    def final_val_loss(self) -> Optional[float]:
        return self.val_losses[-1] if self.val_losses else None

    @property
    def median_epoch_seconds(self) -> Optional[float]:
        return lower_median(self.epoch_seconds) if self.epoch_seconds else None

    def to_csv(self, include_timing: bool = True) -> str:
        """``epoch,train_loss,val_loss,epoch_seconds`` rows plus a ``test,...`` footer.

        Without timing the seconds columns hold ``-`` so that reruns are
        byte-identical.
        """
        df = pd.DataFrame(
            {
                "epoch": range(1, self.epochs_run + 1),
                "train_loss": [_fmt(v) for v in self.train_losses],
                "val_loss": [_fmt(v) for v in self.val_losses],
                "epoch_seconds": [_fmt(v) if include_timing else "-" for v in self.epoch_seconds],
            }
        )
        buf = io.StringIO()
        df.to_csv(buf, index=False, lineterminator="\n")
        median = _fmt(self.median_epoch_seconds) if include_timing else "-"
        buf.write(f"test,{_fmt(self.test_loss)},{_fmt(self.test_accuracy)},{median}\n")
        return buf.getvalue()


def train(
    network: Network,
    train_set: Arrays,
    val_set: Arrays,
    test_set: Arrays,
    config: OptimizerConfig,
    rng: np.random.Generator,
    seed: Optional[int] = None,
    on_event: Optional[EventCallback] = None,
) -> TrainReport:
    """Runs ``config.epochs`` epochs, validating after each, then tests once.

    On divergence the report so far is attached to the raised error as
    ``partial_report``.
    """
    for name, split in (("training", train_set), ("validation", val_set), ("test", test_set)):
        if split[0].shape[0] == 0:
            raise InvalidArgumentError(f"empty {name} split")
    report = TrainReport(seed=seed)
    velocity = Velocity.zeros_like(network.parameters())
    try:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            train_loss, train_acc = _run_epoch(network, train_set, config, velocity, rng, epoch)
            val_loss, _ = evaluate(network, val_set, config.batch_size)
            if not np.isfinite(val_loss):
                raise DivergenceError("non-finite validation loss", epoch=epoch)
            elapsed = time.perf_counter() - started
            report.train_losses.append(train_loss)
            report.val_losses.append(val_loss)
            report.train_accuracies.append(train_acc)
            report.epoch_seconds.append(elapsed)
            emit(on_event, "epoch_complete", epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                 train_accuracy=train_acc, seconds=elapsed)
    except DivergenceError as e:
        e.partial_report = report
        emit(on_event, "divergence", message=str(e), epoch=e.epoch, batch=e.batch, layer=e.layer)
        raise
    report.test_loss, report.test_accuracy = evaluate(network, test_set, config.batch_size)
    emit(on_event, "train_complete", epochs=report.epochs_run, test_loss=report.test_loss,
         test_accuracy=report.test_accuracy, median_epoch_seconds=report.median_epoch_seconds)
    return report


def grad_check(
    network: Network,
    batch: Arrays,
    epsilon: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Dropout masks are drawn once and frozen so that every loss evaluation
    sees the same sub-network. Parameters are restored afterwards.
    """
    x, labels = batch
    targets = one_hot(labels, network.config.num_classes)
    trace = network.forward(x, "train", rng if rng is not None else make_rng(0))
    masks = trace.masks()
    analytic = backward(network, trace, targets)

    def loss() -> float:
        return cross_entropy_loss(network.forward(x, "train", frozen_masks=masks).probs, targets)

    worst = 0.0
    for name, param in network.parameters().items():
        flat = param.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            plus = loss()
            flat[i] = saved - epsilon
            minus = loss()
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * epsilon)
            a = grad[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
