"""Desk-scale training: synthetic event datasets and a surrogate-gradient BPTT trainer.

The trainer exists so the whole pipeline (train, explain, augment, retrain)
runs on a laptop in seconds.  It uses a rectangular surrogate derivative
``1/(2*width)`` for ``|v - v_threshold| < width``, cross-entropy on
time-averaged logits (soft labels allowed) and Adam.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .augment import event_rpg
from .events import EventStream, to_frames
from .snn import (
    AvgPool2d,
    Conv2d,
    Flatten,
    Linear,
    Network,
    NeuronParams,
    Spiking,
    adjoint,
    forward_batch,
)

__all__ = [
    "PATTERNS",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "render_pattern",
    "generate_dataset",
    "build_mlp",
    "build_convnet",
    "loss_and_grads",
    "train",
    "accuracy",
    "write_log",
]

PATTERNS = ("right_bar", "left_bar", "static_blob", "down_bar", "up_bar")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    classes: int = 2
    canvas: Tuple[int, int] = (16, 16)  # (H, W)
    events_per_sample: int = 300
    patterns: Optional[Tuple[str, ...]] = None
    noise_rate: float = 0.05  # fraction of extra uniformly random events
    train_size: int = 200
    test_size: int = 100
    duration: int = 100_000
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        if self.patterns is None:
            if self.classes > len(PATTERNS):
                raise ValueError(f"at most {len(PATTERNS)} built-in patterns")
            self.patterns = PATTERNS[: self.classes]
        self.patterns = tuple(self.patterns)
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.patterns) != self.classes or len(set(self.patterns)) != self.classes:
            raise ValueError("need one distinct pattern per class")
        unknown = set(self.patterns) - set(PATTERNS)
        if unknown:
            raise ValueError(f"unknown patterns {sorted(unknown)}")
        if min(self.canvas) < 8:
            raise ValueError("canvas sides must be >= 8")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")


def _bar(rng, H, W, n, duration, direction):
    """Bar sweeping along x (``direction`` +1/-1); ON on the leading edge, OFF on the trailing one."""
    bw = max(2, W // 6)
    travel = W // 2
    x_start = int(rng.integers(0, W - bw - travel + 1))
    h = int(rng.integers(H // 2, H + 1))
    y0 = int(rng.integers(0, H - h + 1))
    t = np.sort(rng.integers(0, duration, n))
    shift = travel * t // duration
    pos = x_start + (shift if direction > 0 else travel - shift)
    p = rng.integers(0, 2, n)
    lead = pos + bw - 1 if direction > 0 else pos
    trail = pos if direction > 0 else pos + bw - 1
    x = np.where(p == 1, lead, trail)
    y = rng.integers(y0, y0 + h, n)
    footprint = np.zeros((H, W), dtype=bool)
    footprint[y0:y0 + h, x_start:x_start + travel + bw] = True
    return x, y, t, p, footprint


def _blob(rng, H, W, n, duration):
    r = max(2, min(H, W) // 6)
    cy = int(rng.integers(r, H - r))
    cx = int(rng.integers(r, W - r))
    yy, xx = np.mgrid[0:H, 0:W]
    footprint = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    cells = np.flatnonzero(footprint.ravel())
    pick = cells[rng.integers(0, len(cells), n)]
    return pick % W, pick // W, rng.integers(0, duration, n), rng.integers(0, 2, n), footprint


def render_pattern(pattern: str, spec: SyntheticSpec, rng: np.random.Generator):
    """One sample of ``pattern``.  Returns ``(stream, footprint)``; noise lands anywhere."""
    H, W = spec.canvas
    n = spec.events_per_sample
    if pattern in ("right_bar", "left_bar"):
        x, y, t, p, fp = _bar(rng, H, W, n, spec.duration, 1 if pattern == "right_bar" else -1)
    elif pattern in ("down_bar", "up_bar"):
        # same motion on the transposed canvas
        y, x, t, p, fp = _bar(rng, W, H, n, spec.duration, 1 if pattern == "down_bar" else -1)
        fp = fp.T
    elif pattern == "static_blob":
        x, y, t, p, fp = _blob(rng, H, W, n, spec.duration)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    k = int(round(spec.noise_rate * n))
    if k:
        x = np.concatenate([x, rng.integers(0, W, k)])
        y = np.concatenate([y, rng.integers(0, H, k)])
        t = np.concatenate([t, rng.integers(0, spec.duration, k)])
        p = np.concatenate([p, rng.integers(0, 2, k)])
    return EventStream(x, y, t, p, W, H, spec.duration), fp


def _make_split(spec: SyntheticSpec, size: int, seq: np.random.SeedSequence):
    rng = np.random.default_rng(seq)
    labels = np.arange(size) % spec.classes
    rng.shuffle(labels)
    return [(render_pattern(spec.patterns[c], spec, rng)[0], int(c)) for c in labels]


def generate_dataset(spec: SyntheticSpec):
    """Balanced ``(train, test)`` lists of ``(EventStream, class index)``.

    Deterministic in ``spec.seed``; the two splits use independent child seeds.
    """
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    return _make_split(spec, spec.train_size, train_seq), _make_split(spec, spec.test_size, test_seq)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def _init(rng, shape, fan_in, gain=1.0):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def build_mlp(input_shape, hidden: int, num_classes: int, neuron: NeuronParams = NeuronParams(),
              seed: int = 0, time_steps: Optional[int] = None) -> Network:
    """``flatten -> linear -> spiking -> linear``: the two-layer SNN used by the demos."""
    rng = np.random.default_rng(seed)
    n_in = int(np.prod(input_shape))
    return Network(
        [Flatten(), Linear(_init(rng, (hidden, n_in), n_in, 2.0)), Spiking(neuron),
         Linear(_init(rng, (num_classes, hidden), hidden))],
        tuple(input_shape), num_classes, time_steps,
    )


def build_convnet(input_shape, channels: int, hidden: int, num_classes: int,
                  neuron: NeuronParams = NeuronParams(), seed: int = 0,
                  time_steps: Optional[int] = None) -> Network:
    """``conv3x3 -> spiking -> avgpool2 -> flatten -> linear -> spiking -> linear``."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    # sparse event input and 2x2 pooling starve the hidden layer at gain 2;
    # these gains keep both spiking layers firing at init
    conv = Conv2d(_init(rng, (channels, c, 3, 3), c * 9, 4.0), stride=1, padding=1)
    n_flat = channels * (h // 2) * (w // 2)
    return Network(
        [conv, Spiking(neuron), AvgPool2d(2), Flatten(),
         Linear(_init(rng, (hidden, n_flat), n_flat, 8.0)), Spiking(neuron),
         Linear(_init(rng, (num_classes, hidden), hidden))],
        tuple(input_shape), num_classes, time_steps,
    )


# ---------------------------------------------------------------------------
# BPTT
# ---------------------------------------------------------------------------


def _forward_train(net: Network, x: np.ndarray, width: float, smooth: bool):
    """Forward over ``(T, B, ...)`` keeping what backward needs.

    With ``smooth`` the spike is the hard sigmoid whose derivative is the
    rectangular surrogate, and reset is ``v_pre * (1 - s)``.
    """
    T, B = x.shape[:2]
    cache = []
    for layer in net.layers:
        if isinstance(layer, Spiking):
            c, d = layer.neuron.coefficients
            vth = layer.neuron.v_threshold
            v = np.zeros(x.shape[1:])
            v_pre_all = np.empty_like(x)
            out = np.empty_like(x)
            for t in range(T):
                v_pre = c * v + d * x[t]
                if smooth:
                    s = np.clip((v_pre - vth) / (2.0 * width) + 0.5, 0.0, 1.0)
                else:
                    s = (v_pre >= vth).astype(np.float64)
                v = v_pre * (1.0 - s)
                v_pre_all[t], out[t] = v_pre, s
            cache.append((x, v_pre_all, out))
            x = out
        else:
            cache.append(x)
            y = layer(x.reshape((T * B,) + x.shape[2:]))
            x = y.reshape((T, B) + y.shape[1:])
    return x, cache


def _backward(net: Network, cache, g: np.ndarray, width: float, detach_reset: bool):
    """Gradients of the weights given ``g`` = dLoss/dlogits, shaped ``(T, B, K)``."""
    T, B = g.shape[:2]
    grads = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if isinstance(layer, Spiking):
            x, v_pre_all, s_all = cache[idx]
            c, d = layer.neuron.coefficients
            vth = layer.neuron.v_threshold
            g_in = np.empty_like(x)
            g_vpost = np.zeros(x.shape[1:])
            for t in range(T - 1, -1, -1):
                v_pre, s = v_pre_all[t], s_all[t]
                sg = (np.abs(v_pre - vth) < width) / (2.0 * width)
                dpost = 1.0 - s if detach_reset else 1.0 - s - v_pre * sg
                g_vpre = g[t] * sg + g_vpost * dpost
                g_in[t] = d * g_vpre
                g_vpost = c * g_vpre
            g = g_in
            continue
        x = cache[idx]
        in_shape = x.shape[2:]
        flat_x = x.reshape((T * B,) + in_shape)
        flat_g = g.reshape((T * B,) + g.shape[2:])
        if isinstance(layer, Flatten):
            g = flat_g.reshape(x.shape)
            continue
        if isinstance(layer, (Linear, Conv2d)):
            grads[idx] = layer.weight_grad(flat_x, flat_g)
        g = adjoint(layer, flat_g, layer.weight, in_shape).reshape(x.shape)
    return grads


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_and_grads(net: Network, frames: np.ndarray, labels: np.ndarray, width: float = 0.5,
                   detach_reset: bool = True, smooth: bool = False):
    """Cross-entropy on time-mean logits and its weight gradients.

    ``frames`` is ``(B, T, C, H, W)``, ``labels`` ``(B, K)`` (soft labels allowed).
    Returns ``(loss, grads, logits)`` with one gradient entry per layer
    (``None`` for parameter-free layers).
    """
    x = np.swapaxes(np.asarray(frames, dtype=np.float64), 0, 1)
    logits, cache = _forward_train(net, x, width, smooth)
    T, B = logits.shape[:2]
    z = logits.mean(axis=0)
    logp = _log_softmax(z)
    loss = float(-(labels * logp).sum() / B)
    dz = (np.exp(logp) * labels.sum(axis=1, keepdims=True) - labels) / B
    g = np.broadcast_to(dz / T, logits.shape).copy()
    return loss, _backward(net, cache, g, width, detach_reset), np.swapaxes(logits, 0, 1)


class _Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 5e-3
    surrogate_width: float = 0.5
    time_steps: int = 4
    detach_reset: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.time_steps < 1:
            raise ValueError("epochs, batch_size and time_steps must be positive")
        if self.learning_rate < 0 or self.surrogate_width <= 0:
            raise ValueError("learning_rate must be >= 0 and surrogate_width > 0")


@dataclass
class TrainResult:
    network: Network
    history: List[dict] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def _frames(net: Network, streams: Sequence[EventStream], T: int) -> np.ndarray:
    _, H, W = net.input_shape
    return np.stack([to_frames(s, T, H, W).data for s in streams])


def accuracy(net: Network, samples, time_steps: int) -> float:
    if not samples:
        return float("nan")
    frames = _frames(net, [s for s, _ in samples], time_steps)
    pred = forward_batch(net, frames).mean(axis=1).argmax(axis=1)
    return float(np.mean(pred == np.array([lbl for _, lbl in samples])))


def train(net: Network, dataset, cfg: TrainConfig = TrainConfig(), augmenter=None,
          progress: Optional[Callable[[dict], None]] = None,
          on_batch: Optional[Callable[[int, int, np.ndarray, float], None]] = None) -> TrainResult:
    """Train a copy of ``net`` on ``dataset = (train, test)``.

    ``augmenter`` is an :class:`~eventrpg.augment.AugmentConfig`; when given,
    every batch goes through ``event_rpg`` with the current network and the
    resulting soft labels are used as targets.  ``progress`` receives each
    epoch's history row; ``on_batch(epoch, batch, labels, loss)`` sees every
    optimizer step.
    """
    train_set, test_set = dataset
    K = net.num_classes
    if any(not 0 <= lbl < K for _, lbl in list(train_set) + list(test_set)):
        raise ValueError(f"labels outside the network's {K} classes")
    net = net.copy()
    net.time_steps = cfg.time_steps
    trainable = [l for l in net.layers if isinstance(l, (Linear, Conv2d))]
    opt = _Adam([l.weight for l in trainable], cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    T = cfg.time_steps
    eye = np.eye(K)
    if augmenter is None:
        cached = _frames(net, [s for s, _ in train_set], T)
    result = TrainResult(net)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if augmenter is None:
                frames, labels = cached[idx], eye[[train_set[i][1] for i in idx]]
            else:
                batch = [train_set[i] for i in idx]
                mixed = event_rpg(batch, net, augmenter, seed=_batch_seed(augmenter.seed, epoch, b))
                frames = _frames(net, [m.stream for m in mixed], T)
                labels = np.stack([m.label for m in mixed])
            loss, grads, _ = loss_and_grads(net, frames, labels, cfg.surrogate_width, cfg.detach_reset)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            if on_batch is not None:
                on_batch(epoch, b, labels, loss)
            opt.step([g for g, l in zip(grads, net.layers) if isinstance(l, (Linear, Conv2d))])
            losses.append(loss)
        result.step_losses.extend(losses)
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
               "train_accuracy": accuracy(net, train_set, T),
               "test_accuracy": accuracy(net, test_set, T)}
        result.history.append(row)
        if progress is not None:
            progress(row)
    return result


def write_log(history: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_accuracy", "test_accuracy"],
                           lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
