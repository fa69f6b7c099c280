"""Relevance propagation through spiking networks.

Two modes share the same per-layer rules:

* ``SLTRP`` keeps a time axis.  Linear layers apply the alpha-beta rule at each
  step separately; spiking layers move relevance backwards in time with the
  per-neuron proportion ``gamma[t]`` and conserve each neuron's total.
* ``SLRP`` collapses time.  Linear layers apply the alpha-beta rule once with
  time-summed positive/negative inputs; spiking layers are the identity.

The output layer is initialised contrastively: one pass puts the target
logit on the target class, the other spreads the same mass uniformly over the
remaining classes.  Both passes are propagated; subtraction happens when maps
are formed (see :mod:`eventrpg.saliency`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .snn import (
    AvgPool2d,
    Conv2d,
    Flatten,
    Linear,
    Network,
    NeuronParams,
    Spiking,
    ActivationTrace,
    adjoint,
)

__all__ = [
    "SLTRP",
    "SLRP",
    "RelPropConfig",
    "RelevanceTensor",
    "Relevance",
    "init_relevance",
    "relprop_linear_step",
    "relprop_linear_collapsed",
    "gamma",
    "redistribute_in_time",
    "relprop_spiking_sltrp",
    "relprop_spiking_slrp",
    "propagate",
]

SLTRP = "SLTRP"
SLRP = "SLRP"


def _canonical_mode(mode: str) -> str:
    m = str(mode).upper()
    if m not in (SLTRP, SLRP):
        raise ValueError(f"unknown relevance mode {mode!r}")
    return m


@dataclass(frozen=True)
class RelPropConfig:
    alpha: float = 1.0
    beta: float = 0.0
    epsilon: float = 1e-9
    mode: str = SLRP
    contrastive: bool = True

    def __post_init__(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha} + {self.beta}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        object.__setattr__(self, "mode", _canonical_mode(self.mode))

    @classmethod
    def from_alpha(cls, alpha: float, **kw) -> "RelPropConfig":
        return cls(alpha=alpha, beta=1.0 - alpha, **kw)


@dataclass
class RelevanceTensor:
    """Relevance at one layer boundary; ``values`` has a leading time axis iff ``time_axis``."""

    values: np.ndarray
    time_axis: bool
    layer_index: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"non-finite relevance at boundary {self.layer_index}")

    def total(self) -> float:
        return float(self.values.sum())

    def collapsed(self) -> np.ndarray:
        """Time-summed values (unchanged when there is no time axis)."""
        return self.values.sum(axis=0) if self.time_axis else self.values


@dataclass
class Relevance:
    """Both contrastive passes at every boundary.

    ``target[l]`` / ``contrast[l]`` annotate the input of layer ``l``;
    index ``len(net.layers)`` is the output initialisation.
    """

    target: List[RelevanceTensor]
    contrast: List[RelevanceTensor]
    mode: str
    target_class: int = field(default=0)

    @property
    def input_target(self) -> RelevanceTensor:
        return self.target[0]

    @property
    def input_contrast(self) -> RelevanceTensor:
        return self.contrast[0]


# ---------------------------------------------------------------------------
# output initialisation
# ---------------------------------------------------------------------------


def init_relevance(logits: np.ndarray, target: int, mode: str = SLRP,
                   contrastive: bool = True) -> Tuple[RelevanceTensor, RelevanceTensor]:
    """Contrastive output relevance.

    ``logits`` is ``(T, K)``.  In SLTRP mode each step is initialised from its
    own logits; in SLRP mode from the time-mean logits.  With
    ``contrastive=False`` the contrast pass is all zeros.
    """
    mode = _canonical_mode(mode)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (T, num_classes), got {logits.shape}")
    k = logits.shape[1]
    if not 0 <= target < k:
        raise ValueError(f"target {target} out of range for {k} classes")
    src = logits if mode == SLTRP else logits.mean(axis=0, keepdims=True)
    mass = src[:, target]
    tgt = np.zeros_like(src)
    tgt[:, target] = mass
    con = np.zeros_like(src)
    if contrastive and k > 1:
        others = np.arange(k) != target
        con[:, others] = (mass / (k - 1))[:, None]
    if mode == SLRP:
        tgt, con = tgt[0], con[0]
    n = -1  # boundary index is filled in by ``propagate``
    return RelevanceTensor(tgt, mode == SLTRP, n), RelevanceTensor(con, mode == SLTRP, n)


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------


def _alpha_beta(layer, xp: np.ndarray, xn: np.ndarray, R: np.ndarray, cfg: RelPropConfig):
    """Alpha-beta rule for a batch of ``(positive, negative)`` input parts.

    ``xp``/``xn`` are ``(N, *in_shape)``, ``R`` is ``(N, *out_shape)``.  An
    output whose positive (negative) contribution sum vanishes spreads the
    alpha (beta) share of its relevance uniformly over its receptive field,
    so the layer total is conserved exactly.
    """
    in_shape = xp.shape[1:]
    wp, wn, wc = layer.weight_parts()
    eps = cfg.epsilon
    zp = layer.apply(xp, wp) + layer.apply(xn, wn)
    zn = layer.apply(xn, wp) + layer.apply(xp, wn)
    okp = zp > eps
    okn = zn < -eps
    sp = np.divide(cfg.alpha * R, zp, out=np.zeros_like(zp), where=okp)
    sn = np.divide(cfg.beta * R, zn, out=np.zeros_like(zn), where=okn)
    R_in = (xp * adjoint(layer, sp, wp, in_shape) + xn * adjoint(layer, sp, wn, in_shape)
            + xn * adjoint(layer, sn, wp, in_shape) + xp * adjoint(layer, sn, wn, in_shape))
    spill = np.where(okp, 0.0, cfg.alpha * R) + np.where(okn, 0.0, cfg.beta * R)
    if np.any(spill):
        fan_in = layer.apply(np.ones((1,) + in_shape), wc)
        R_in = R_in + adjoint(layer, spill / fan_in, wc, in_shape)
    return R_in


def _check_linear(layer, x_shape, r_shape, batched: bool):
    if not isinstance(layer, (Linear, Conv2d, AvgPool2d, Flatten)):
        raise TypeError(f"not a linear-kind layer: {type(layer).__name__}")
    in_shape = tuple(x_shape[1:] if batched else x_shape)
    out_shape = tuple(r_shape[1:] if batched else r_shape)
    if tuple(layer.output_shape(in_shape)) != out_shape:
        raise ValueError(f"relevance shape {out_shape} does not match layer output for input {in_shape}")


def _linear_batch(layer, xp, xn, R, cfg):
    if isinstance(layer, Flatten):
        return R.reshape(xp.shape)
    return _alpha_beta(layer, xp, xn, R, cfg)


def relprop_linear_step(layer, x_t: np.ndarray, R_out_t: np.ndarray, cfg: RelPropConfig) -> np.ndarray:
    """Alpha-beta relevance for one time step of a linear/conv/avgpool/flatten layer."""
    x_t = np.asarray(x_t, dtype=np.float64)
    R_out_t = np.asarray(R_out_t, dtype=np.float64)
    _check_linear(layer, x_t.shape, R_out_t.shape, batched=False)
    x = x_t[None]
    return _linear_batch(layer, np.maximum(x, 0.0), np.minimum(x, 0.0), R_out_t[None], cfg)[0]


def relprop_linear_collapsed(layer, x_pos_sum: np.ndarray, x_neg_sum: np.ndarray,
                             R_out: np.ndarray, cfg: RelPropConfig) -> np.ndarray:
    """Alpha-beta relevance with contributions summed over time.

    ``x_pos_sum`` / ``x_neg_sum`` are the time sums of the positive and
    negative parts of the layer input.
    """
    xp = np.asarray(x_pos_sum, dtype=np.float64)
    xn = np.asarray(x_neg_sum, dtype=np.float64)
    R_out = np.asarray(R_out, dtype=np.float64)
    _check_linear(layer, xp.shape, R_out.shape, batched=False)
    return _linear_batch(layer, xp[None], xn[None], R_out[None], cfg)[0]


# ---------------------------------------------------------------------------
# spiking layers
# ---------------------------------------------------------------------------


def gamma(v_prev_pos, v_prev_neg, i_pos, i_neg, params: NeuronParams, cfg: RelPropConfig):
    """Share of a step's relevance handed to the previous step's membrane voltage.

    ``gamma = alpha * cV+ / (cV+ + dI+) + beta * cV- / (cV- + dI-)``; a term
    whose denominator is within ``epsilon`` of zero contributes 0.
    """
    c, d = params.coefficients
    vp = c * np.asarray(v_prev_pos, dtype=np.float64)
    vn = c * np.asarray(v_prev_neg, dtype=np.float64)
    den_p = vp + d * np.asarray(i_pos, dtype=np.float64)
    den_n = vn + d * np.asarray(i_neg, dtype=np.float64)
    pos = np.divide(vp, den_p, out=np.zeros(np.shape(den_p)), where=np.abs(den_p) > cfg.epsilon)
    neg = np.divide(vn, den_n, out=np.zeros(np.shape(den_n)), where=np.abs(den_n) > cfg.epsilon)
    out = cfg.alpha * pos + cfg.beta * neg
    return float(out) if out.ndim == 0 else out


def redistribute_in_time(gam: np.ndarray, R_out: np.ndarray) -> np.ndarray:
    """Iterative time redistribution of a spiking layer's relevance.

    Starting from ``R_in[T] = R_out[T]`` and walking ``t = T .. 1``::

        R_in[t-1] <- gamma[t] * R_in[t] + R_out[t-1]
        R_in[t]   <- (1 - gamma[t]) * R_in[t]

    Both arrays are ``(T, ...)``; the update is elementwise per neuron.
    """
    gam = np.asarray(gam, dtype=np.float64)
    R_out = np.asarray(R_out, dtype=np.float64)
    if gam.shape != R_out.shape:
        raise ValueError(f"gamma {gam.shape} and relevance {R_out.shape} differ in shape")
    R_in = R_out.copy()
    for t in range(R_in.shape[0] - 1, -1, -1):
        carry = gam[t] * R_in[t]
        R_in[t] = R_in[t] - carry
        if t > 0:
            R_in[t - 1] = carry + R_out[t - 1]
    return R_in


def relprop_spiking_sltrp(v_prev: np.ndarray, current: np.ndarray, R_out: np.ndarray,
                          params: NeuronParams, cfg: RelPropConfig) -> np.ndarray:
    """Time-resolved relevance through a spiking layer.

    ``v_prev[t]`` is the post-reset voltage entering step ``t`` (zero at the
    first step) and ``current[t]`` the layer input; all arrays ``(T, ...)``.
    """
    v_prev = np.asarray(v_prev, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    R_out = np.asarray(R_out, dtype=np.float64)
    if not (v_prev.shape == current.shape == R_out.shape):
        raise ValueError(
            f"trace/relevance length mismatch: v {v_prev.shape}, I {current.shape}, R {R_out.shape}"
        )
    gam = gamma(np.maximum(v_prev, 0.0), np.minimum(v_prev, 0.0),
                np.maximum(current, 0.0), np.minimum(current, 0.0), params, cfg)
    gam = np.asarray(gam)
    gam[0] = 0.0  # voltage starts at zero
    return redistribute_in_time(gam, R_out)


def relprop_spiking_slrp(R_out: np.ndarray) -> np.ndarray:
    """Time-collapsed relevance through a spiking layer is unchanged."""
    return R_out


# ---------------------------------------------------------------------------
# full sweep
# ---------------------------------------------------------------------------


def _sweep(net: Network, trace: ActivationTrace, R_init: np.ndarray, cfg: RelPropConfig):
    L = len(net.layers)
    out: List[RelevanceTensor] = [None] * (L + 1)
    time_axis = cfg.mode == SLTRP
    R = R_init
    out[L] = RelevanceTensor(R, time_axis, L)
    for idx in range(L - 1, -1, -1):
        layer = net.layers[idx]
        x = trace.inputs[idx]
        if isinstance(layer, Spiking):
            if time_axis:
                rec = trace.spiking[idx]
                R = relprop_spiking_sltrp(rec.v_prev, rec.current, R, layer.neuron, cfg)
            else:
                R = relprop_spiking_slrp(R)
        elif isinstance(layer, (Linear, Conv2d, AvgPool2d, Flatten)):
            if time_axis:
                R = _linear_batch(layer, np.maximum(x, 0.0), np.minimum(x, 0.0), R, cfg)
            else:
                xp = np.maximum(x, 0.0).sum(axis=0, keepdims=True)
                xn = np.minimum(x, 0.0).sum(axis=0, keepdims=True)
                R = _linear_batch(layer, xp, xn, R[None], cfg)[0]
        else:
            raise TypeError(f"layer {idx}: no relevance rule for {type(layer).__name__}")
        out[idx] = RelevanceTensor(R, time_axis, idx)
    return out


def propagate(net: Network, trace: ActivationTrace, target: int,
              cfg: RelPropConfig = RelPropConfig()) -> Relevance:
    """Propagate both contrastive passes from the logits back to the input.

    Returns relevance at every layer boundary; ``Relevance.target[0]`` is the
    input-layer relevance used for saliency maps.
    """
    r_t, r_c = init_relevance(trace.logits, target, cfg.mode, cfg.contrastive)
    return Relevance(
        _sweep(net, trace, r_t.values, cfg),
        _sweep(net, trace, r_c.values, cfg),
        cfg.mode,
        target,
    )
