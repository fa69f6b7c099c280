"""Saliency maps, CAMs and bounding boxes from relevance tensors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .relprop import Relevance, RelevanceTensor, RelPropConfig, propagate, SLTRP
from .snn import Flatten, Network, forward

__all__ = [
    "SaliencyMap",
    "BoundingBox",
    "normalize",
    "bilinear_resize",
    "saliency_map",
    "cam",
    "relcam",
    "bbox_from_map",
    "default_cam_layer",
    "explain",
    "write_pgm",
    "write_csv",
    "export_map",
]

MAP_KINDS = ("saliency", "cam", "relcam")


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W), normalized to [0, 1]
    raw: np.ndarray
    kind: str = "saliency"
    per_time: Optional[np.ndarray] = None  # (T, H, W), jointly normalized

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box needs w, h >= 1, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.x + other.w <= self.x + self.w
                and other.y + other.h <= self.y + self.h)


def normalize(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1].  A constant map becomes all ones, or all zeros if it is zero."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo > 0:
        return (a - lo) / (hi - lo)
    return np.full_like(a, 1.0 if hi > 0 else 0.0)


def _joint_scale(per_time: np.ndarray) -> np.ndarray:
    peak = per_time.max()
    return per_time / peak if peak > 0 else np.zeros_like(per_time)


def bilinear_resize(a: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes (half-pixel centres, edge clamp)."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[-2:]
    H, W = size
    if (h, w) == (H, W):
        return a.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, H)
    x0, x1, fx = axis(w, W)
    top = a[..., y0, :] * (1 - fy)[:, None] + a[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def _values(r) -> Tuple[np.ndarray, bool]:
    if isinstance(r, RelevanceTensor):
        return np.asarray(r.values, dtype=np.float64), r.time_axis
    arr = np.asarray(r, dtype=np.float64)
    return arr, arr.ndim == 4


def _finish(raw_per_step: np.ndarray, time_axis: bool, kind: str,
            target_hw: Optional[Tuple[int, int]] = None) -> SaliencyMap:
    """ReLU'd per-step (or collapsed) maps -> normalized SaliencyMap."""
    if target_hw is not None:
        raw_per_step = bilinear_resize(raw_per_step, target_hw)
    if time_axis:
        raw = raw_per_step.sum(axis=0)
        per_time = _joint_scale(raw_per_step)
    else:
        raw, per_time = raw_per_step, None
    return SaliencyMap(normalize(raw), raw, kind, per_time)


def saliency_map(R_target_in, R_contrast_in=None, mode: Optional[str] = None) -> SaliencyMap:
    """Input-resolution map ``ReLU(sum_c R_target - sum_c R_contrast)``, min-max normalized.

    Inputs are ``(C, H, W)`` or, with a time axis, ``(T, C, H, W)``.  With a
    time axis the main map is the time sum and ``per_time`` keeps each step.
    """
    rt, time_axis = _values(R_target_in)
    if mode is not None:
        time_axis = str(mode).upper() == SLTRP and rt.ndim == 4
    if R_contrast_in is None:
        rc = np.zeros_like(rt)
    else:
        rc, _ = _values(R_contrast_in)
    if rt.shape != rc.shape:
        raise ValueError(f"target relevance {rt.shape} and contrast {rc.shape} differ")
    if rt.ndim != (4 if time_axis else 3):
        raise ValueError(f"expected input relevance (T?, C, H, W), got {rt.shape}")
    ch = -3
    per_step = np.maximum(rt.sum(axis=ch) - rc.sum(axis=ch), 0.0)
    return _finish(per_step, time_axis, "saliency")


def cam(R_at_layer, target_hw: Tuple[int, int]) -> SaliencyMap:
    """Channel-summed relevance at a spatial layer, ReLU'd, upsampled and normalized."""
    r, time_axis = _values(R_at_layer)
    if r.ndim != (4 if time_axis else 3):
        raise ValueError(f"CAM needs a spatial (C, H, W) layer, got relevance of shape {r.shape}")
    per_step = np.maximum(r.sum(axis=-3), 0.0)
    return _finish(per_step, time_axis, "cam", target_hw)


def relcam(R_at_layer, features_at_layer, target_hw: Tuple[int, int]) -> SaliencyMap:
    """Relevance-weighted feature map.

    Channel weight = spatial mean of that channel's relevance; map =
    ``ReLU(sum_c w_c * A_c)``.  With a time axis, weights and features are
    taken per step; without one, ``features`` may still carry a time axis and
    is then summed over time.
    """
    r, time_axis = _values(R_at_layer)
    a = np.asarray(features_at_layer, dtype=np.float64)
    if not time_axis and a.ndim == r.ndim + 1:
        a = a.sum(axis=0)
    if r.shape != a.shape:
        raise ValueError(f"relevance {r.shape} and features {a.shape} differ in shape")
    if r.ndim != (4 if time_axis else 3):
        raise ValueError(f"RelCAM needs a spatial (C, H, W) layer, got {r.shape}")
    w = r.mean(axis=(-2, -1), keepdims=True)
    per_step = np.maximum((w * a).sum(axis=-3), 0.0)
    return _finish(per_step, time_axis, "relcam", target_hw)


def bbox_from_map(smap: Union[SaliencyMap, np.ndarray], tau: float = 0.25) -> BoundingBox:
    """Tight box around pixels with value >= ``tau * max``; whole canvas if the map is zero."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    v = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    h, w = v.shape
    peak = v.max()
    if not peak > 0:
        return BoundingBox(0, 0, w, h)
    ys, xs = np.nonzero(v >= tau * peak)
    return BoundingBox(int(xs.min()), int(ys.min()),
                       int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def default_cam_layer(net: Network) -> int:
    """Boundary feeding the last fully connected block (input of the last ``Flatten``)."""
    for idx in range(len(net.layers) - 1, -1, -1):
        if isinstance(net.layers[idx], Flatten):
            return idx
    raise ValueError("network has no flatten layer to anchor a CAM")


def explain(net: Network, frames, target: Optional[int] = None, kind: str = "saliency",
            cfg: RelPropConfig = RelPropConfig(), layer: Optional[int] = None,
            relevance: Optional[Relevance] = None) -> SaliencyMap:
    """Forward, propagate and build one map at the network's input resolution.

    ``target`` defaults to the predicted class (argmax of time-mean logits).
    CAM and RelCAM use the contrastive difference ``target - contrast`` at
    ``layer`` (default :func:`default_cam_layer`).
    """
    if kind not in MAP_KINDS:
        raise ValueError(f"unknown map kind {kind!r}")
    logits, trace = forward(net, frames)
    if target is None:
        target = int(np.argmax(logits.mean(axis=0)))
    rel = relevance if relevance is not None else propagate(net, trace, target, cfg)
    if kind == "saliency":
        return saliency_map(rel.input_target, rel.input_contrast)
    idx = default_cam_layer(net) if layer is None else layer
    rt, rc = rel.target[idx], rel.contrast[idx]
    diff = RelevanceTensor(rt.values - rc.values, rt.time_axis, idx)
    hw = net.input_shape[1:]
    if kind == "cam":
        return cam(diff, hw)
    return relcam(diff, trace.inputs[idx], hw)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _to_bytes(values: np.ndarray) -> bytes:
    peak = values.max() if values.size else 0.0
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    return np.floor(scaled * 255.0 + 0.5).astype(np.uint8).tobytes()


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM (P5), max-scaled."""
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(v))


def write_csv(values: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.17g")


def export_map(smap: SaliencyMap, out_dir, stem: str = "map") -> list:
    """Write ``stem.pgm``/``stem.csv`` and, if present, ``stem_t000.pgm`` ... per step."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / f"{stem}.pgm", out / f"{stem}.csv"]
    write_pgm(smap.values, written[0])
    write_csv(smap.values, written[1])
    if smap.per_time is not None:
        for t, frame in enumerate(smap.per_time):
            p = out / f"{stem}_t{t:03d}.pgm"
            write_pgm(frame, p)
            written.append(p)
    return written
