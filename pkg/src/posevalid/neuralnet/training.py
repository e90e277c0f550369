"""Adam training loop for either stream, with the paired-image augmentation.

All randomness flows from named seeds: init from (seed, stream), epoch
shuffling/augmentation from (seed, epoch), dropout from (seed, epoch, step).
Single-threaded reruns with the same config are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from .layers import softmax, softmax_cross_entropy
from .streams import (
    CloudArch,
    DepthArch,
    NetParams,
    cloud_backward,
    cloud_forward,
    depth_backward,
    depth_forward,
    init_cloud_params,
    init_depth_params,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# augmentation upscales by this ratio before taking a random crop back to
# the input size (236/224)
AUG_RESIZE_RATIO = 236.0 / 224.0


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_decay_every: int = 10  # divide the learning rate by 10 every this many epochs
    epochs: int = 60
    batch: int = 8
    dropout_keep: float = 0.7
    seed: int = 0
    input_size: int = 224
    points: int = 1024

    def __post_init__(self):
        if min(self.lr0, self.epochs, self.batch, self.input_size, self.points) <= 0:
            raise ValueError("all train-config quantities must be positive")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ValueError("dropout_keep must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * 10.0 ** (-(epoch // self.lr_decay_every))

    def to_json(self) -> dict:
        return {
            "lr0": self.lr0, "lr_decay_every": self.lr_decay_every,
            "epochs": self.epochs, "batch": self.batch,
            "dropout_keep": self.dropout_keep, "seed": self.seed,
            "input_size": self.input_size, "points": self.points,
        }


@dataclass(eq=False)
class DepthDataset:
    """Normalized depth-crop pairs: x is (N, S, S, 2), labels are class indices."""

    x: np.ndarray
    y: np.ndarray


@dataclass(eq=False)
class CloudDataset:
    """Canonicalized scene clouds (N, P, 3) against one shared model cloud (P, 3)."""

    scene: np.ndarray
    model: np.ndarray
    y: np.ndarray


def adam_step(net: NetParams, grads: dict, lr: float) -> NetParams:
    """One bias-corrected Adam update over every named parameter."""
    net.t += 1
    b1t = 1.0 - ADAM_BETA1 ** net.t
    b2t = 1.0 - ADAM_BETA2 ** net.t
    for name, p in net.params.items():
        g = grads[name]
        m = net.m[name]
        v = net.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p -= (lr / b1t) * m / (np.sqrt(v / b2t) + ADAM_EPS)
    return net


def bilinear_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """Resize (H, W) or (H, W, C) arrays; sampling matches the rasterizer convention."""
    h, w = img.shape[:2]
    us = (np.arange(out_size) + 0.5) * (w / out_size) - 0.5
    vs = (np.arange(out_size) + 0.5) * (h / out_size) - 0.5
    x0 = np.clip(np.floor(us).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(vs).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(us - x0, 0.0, 1.0).astype(img.dtype)
    fy = np.clip(vs - y0, 0.0, 1.0).astype(img.dtype)
    if img.ndim == 2:
        fx_b, fy_b = fx[None, :], fy[:, None]
    else:
        fx_b, fy_b = fx[None, :, None], fy[:, None, None]
    top = img[y0[:, None], x0[None, :]] * (1 - fx_b) + img[y0[:, None], x1[None, :]] * fx_b
    bot = img[y1[:, None], x0[None, :]] * (1 - fx_b) + img[y1[:, None], x1[None, :]] * fx_b
    return top * (1 - fy_b) + bot * fy_b


def augment_depth_pair(pair: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Upscale-then-random-crop plus a random 90-degree rotation.

    The same crop offset and rotation apply to both images of the pair.
    """
    size = pair.shape[0]
    big = bilinear_resize(pair, max(size + 1, round(size * AUG_RESIZE_RATIO)))
    margin = big.shape[0] - size
    dy = int(rng.integers(0, margin + 1))
    dx = int(rng.integers(0, margin + 1))
    crop = big[dy : dy + size, dx : dx + size]
    k = int(rng.integers(0, 4))
    return np.ascontiguousarray(np.rot90(crop, k)) if k else crop


def _check_two_classes(y: np.ndarray) -> None:
    classes = np.unique(y)
    if len(classes) < 2:
        raise TrainingError(
            f"training set contains a single class ({classes.tolist()}); need both")


def train_stream(dataset, stream: str, cfg: TrainConfig, arch=None, log=None):
    """Train one stream with Adam and the configured schedule.

    Returns (NetParams, history); history holds per-epoch mean loss and
    accuracy on the (augmented) training stream.
    """
    if stream == "depth":
        _check_two_classes(dataset.y)
        arch = arch or DepthArch(input_size=cfg.input_size)
        if arch.input_size != cfg.input_size:
            raise TrainingError(
                f"arch input_size {arch.input_size} != config input_size {cfg.input_size}")
        net = init_depth_params(arch, seed=cfg.seed)
    elif stream == "cloud":
        _check_two_classes(dataset.y)
        arch = arch or CloudArch(n_points=cfg.points)
        if arch.n_points != cfg.points:
            raise TrainingError(
                f"arch n_points {arch.n_points} != config points {cfg.points}")
        net = init_cloud_params(arch, seed=cfg.seed)
    else:
        raise TrainingError(f"unknown stream {stream!r}")

    n = len(dataset.y)
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng((cfg.seed, 1000 + epoch))
        order = rng.permutation(n)
        lr = cfg.lr_at(epoch)
        total_loss = 0.0
        total_correct = 0
        for step, start in enumerate(range(0, n, cfg.batch)):
            idx = order[start : start + cfg.batch]
            yb = dataset.y[idx]
            drop_seed = (cfg.seed, epoch, step)  # default_rng accepts int sequences
            if stream == "depth":
                xb = np.stack([augment_depth_pair(dataset.x[i], rng) for i in idx])
                logits, cache = depth_forward(xb, net, True, drop_seed, cfg.dropout_keep)
                loss, dlogits, probs = softmax_cross_entropy(logits, yb)
                grads = depth_backward(dlogits, net, cache)
            else:
                sb = np.stack([dataset.scene[i][rng.permutation(arch.n_points)] for i in idx])
                mb = np.broadcast_to(dataset.model, (len(idx),) + dataset.model.shape)
                logits, cache = cloud_forward(sb, mb, net, True, drop_seed, cfg.dropout_keep)
                loss, dlogits, probs = softmax_cross_entropy(logits, yb)
                grads = cloud_backward(dlogits, net, cache)
            adam_step(net, grads, lr)
            total_loss += loss * len(idx)
            total_correct += int((probs.argmax(axis=1) == yb).sum())
        entry = {
            "epoch": epoch,
            "lr": lr,
            "loss": total_loss / n,
            "accuracy": total_correct / n,
        }
        history.append(entry)
        if log:
            log(f"epoch {epoch:3d}  lr {lr:.2e}  loss {entry['loss']:.4f}  "
                f"acc {entry['accuracy']:.4f}")
    return net, history


def evaluate_stream(net: NetParams, dataset, batch: int = 64):
    """Eval-mode pass over a dataset: (mean loss, accuracy, class probabilities)."""
    n = len(dataset.y)
    probs_all = np.zeros((n, 2), dtype=np.float64)
    total_loss = 0.0
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        if isinstance(dataset, DepthDataset):
            logits, _ = depth_forward(dataset.x[sl], net, False, 0)
        else:
            mb = np.broadcast_to(dataset.model, (sl.stop - sl.start,) + dataset.model.shape)
            logits, _ = cloud_forward(dataset.scene[sl], mb, net, False, 0)
        loss, _, probs = softmax_cross_entropy(logits, dataset.y[sl])
        total_loss += loss * (sl.stop - sl.start)
        probs_all[sl] = probs
    acc = float((probs_all.argmax(axis=1) == dataset.y).mean())
    return total_loss / n, acc, probs_all
