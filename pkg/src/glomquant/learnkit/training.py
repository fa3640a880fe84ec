"""Toy SimSiam pretraining and the frozen-encoder linear probe.

Vector data has no crops or color jitter; the augmentation analogue here is
additive Gaussian noise plus random coordinate dropout.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, StratificationError, TrainingDivergedError
from ..metrics import balanced_accuracy, confusion_matrix
from ..splits import subsample_fraction
from .losses import FocalLossParams, focal_loss_batch, negative_cosine_full, simsiam_loss
from .optim import CosineSchedule, MomentumSGD
from .toynet import ToyNet

DEFAULT_WEIGHT_DECAY = 1e-4
PROBE_LR = 30.0
PROBE_MOMENTUM = 0.9
PROBE_BATCH = 64


@dataclass(frozen=True)
class AugmentPolicy:
    noise_std: float = 1.0
    dropout: float = 0.5

    def __call__(self, x, rng):
        keep = rng.random(x.shape) >= self.dropout
        return x * keep + rng.normal(0.0, self.noise_std, size=x.shape)


def two_cluster_data(n=400, dim=16, separation=6.0, seed=0):
    """Two isotropic Gaussian clusters ``separation`` standard deviations apart."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, dim)) + np.where(y[:, None] == 1, 0.5, -0.5) * separation * direction
    return x, y


def collapse_statistic(z) -> float:
    """Mean per-dimension std of L2-normalized embeddings (about 1/sqrt(d) when healthy)."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    zn = z / np.maximum(norms, 1e-12)
    return float(zn.std(axis=0).mean())


@dataclass
class TrainResult:
    net: ToyNet
    collapse_per_epoch: list
    log: list = field(default_factory=list)

    @property
    def final_collapse(self) -> float:
        return self.collapse_per_epoch[-1]

    def write_log(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec) + "\n")


def train_toy_simsiam(
    data,
    augment=None,
    schedule=None,
    steps=2000,
    batch_size=64,
    seed=0,
    stop_gradient=True,
    momentum=0.9,
    weight_decay=DEFAULT_WEIGHT_DECAY,
    dims=(32, 16, 16),
    log_every=50,
):
    """Pretrain a :class:`ToyNet` with the symmetric SimSiam objective."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ConfigError("dataset must be a non-empty 2-D array")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    augment = augment or AugmentPolicy()
    schedule = schedule or CosineSchedule(0.05, batch_size, steps)
    rng = np.random.default_rng(seed)
    hidden, embed, pred_hidden = dims
    net = ToyNet(data.shape[1], hidden, embed, pred_hidden, seed=seed)
    opt = MomentumSGD(net.params, momentum=momentum, weight_decay=weight_decay)
    objective = simsiam_loss if stop_gradient else negative_cosine_full
    steps_per_epoch = max(1, math.ceil(len(data) / batch_size))

    collapse, log = [], []
    order = rng.permutation(len(data))
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(data)), 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        x = data[idx]
        x1, x2 = augment(x, rng), augment(x, rng)
        z1, p1, c1 = net.forward(x1)
        z2, p2, c2 = net.forward(x2)
        loss, g = objective(z1, z2, p1, p2)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        grads1 = net.backward(c1, g["p1"], g["z1"] if not stop_gradient else None)
        grads2 = net.backward(c2, g["p2"], g["z2"] if not stop_gradient else None)
        grads = {k: grads1[k] + grads2[k] for k in grads1}
        lr = schedule(step)
        opt.step(grads, lr)
        if not all(np.isfinite(v).all() for v in net.params.values()):
            raise TrainingDivergedError(step)
        last = step == steps - 1
        if (step + 1) % steps_per_epoch == 0 or last:
            collapse.append(collapse_statistic(net.encode(data)))
        if step % log_every == 0 or last:
            log.append(
                {"step": step, "lr": lr, "loss": loss, "collapse_stat": collapse_statistic(z1)}
            )
    return TrainResult(net, collapse, log)


@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def features(self, net, x):
        return (net.encode(x) - self.mean) / self.scale

    def predict(self, net, x):
        return np.argmax(self.features(net, x) @ self.weights + self.bias, axis=1)


@dataclass
class ProbeResult:
    probe: LinearProbe
    balanced_accuracy: float
    n_train: int
    per_class: dict


def linear_probe(
    net,
    x_train,
    y_train,
    x_test,
    y_test,
    fraction=1.0,
    focal=None,
    seed=0,
    epochs=30,
    lr=PROBE_LR,
    momentum=PROBE_MOMENTUM,
    weight_decay=0.0,
    batch_size=PROBE_BATCH,
):
    """Fit a softmax layer on frozen encoder features with focal loss.

    ``lr`` is used as given, without batch-size scaling; it decays with a
    cosine schedule over the run. Features are standardized with statistics
    of the (subsampled) training split.
    """
    focal = focal or FocalLossParams()
    y_train = np.asarray(y_train)
    y_test = np.asarray(y_test)
    classes = sorted(set(y_train.tolist()) | set(y_test.tolist()))
    n_classes = max(classes) + 1
    subset = subsample_fraction(
        [(i, int(c)) for i, c in enumerate(y_train)], fraction, seed=seed, classes=classes
    )
    if subset.missing_classes:
        raise StratificationError(f"no training examples for classes {subset.missing_classes}")
    idx = np.array([i for i, _ in subset.items])
    feats = net.encode(np.asarray(x_train, dtype=np.float64)[idx])
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    f = (feats - mean) / scale
    y = y_train[idx]

    rng = np.random.default_rng(seed)
    params = {"W": np.zeros((f.shape[1], n_classes)), "b": np.zeros(n_classes)}
    opt = MomentumSGD(params, momentum=momentum, weight_decay=weight_decay)
    steps_per_epoch = max(1, math.ceil(len(f) / batch_size))
    # Reference batch size leaves the probe rate unscaled.
    schedule = CosineSchedule(lr, 256, epochs * steps_per_epoch)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(f))
        for s in range(0, len(f), batch_size):
            b = order[s : s + batch_size]
            _, dlogits = focal_loss_batch(f[b] @ params["W"] + params["b"], y[b], focal)
            opt.step({"W": f[b].T @ dlogits, "b": dlogits.sum(axis=0)}, schedule(step))
            step += 1

    probe = LinearProbe(params["W"], params["b"], mean, scale)
    pred = probe.predict(net, np.asarray(x_test, dtype=np.float64))
    cm = confusion_matrix(y_test, pred, n_classes)
    return ProbeResult(probe, balanced_accuracy(cm), len(idx), subset.per_class)
