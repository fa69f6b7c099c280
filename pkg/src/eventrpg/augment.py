"""Relevance-guided event augmentation: drop, mix, geometric policies and the combined pipeline."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .events import EventStream, frame_coordinates, to_frames
from .relprop import RelPropConfig
from .saliency import BoundingBox, SaliencyMap, bbox_from_map, explain, normalize
from .snn import Network

__all__ = [
    "GEOMETRIC_POLICIES",
    "DEFAULT_RANGES",
    "DropConfig",
    "PolicyDraw",
    "MixedSample",
    "AugmentConfig",
    "rpg_drop",
    "sample_positions",
    "mix_labels",
    "translate",
    "rpg_mix",
    "geometric",
    "apply_policy",
    "draw_policy",
    "map_to_stream",
    "stream_saliency",
    "event_rpg",
]

GEOMETRIC_POLICIES = ("flip_horizontal", "rotate", "shear_x", "translate_x", "translate_y", "cutout")
DROP_POLICY = "rpg_drop"

# rotate in degrees, shear as x-offset per row, translate as a fraction of the
# canvas side, cutout side as a fraction of the shorter side, rpg_drop theta
DEFAULT_RANGES: Dict[str, Tuple[float, float]] = {
    "flip_horizontal": (0.0, 0.0),
    "rotate": (-30.0, 30.0),
    "shear_x": (-0.3, 0.3),
    "translate_x": (-0.2, 0.2),
    "translate_y": (-0.2, 0.2),
    "cutout": (0.1, 0.3),
    DROP_POLICY: (0.1, 0.9),
}


@dataclass(frozen=True)
class DropConfig:
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")


@dataclass(frozen=True)
class PolicyDraw:
    policy: str
    magnitude: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {"policy": self.policy, "magnitude": self.magnitude, "seed": self.seed}


@dataclass
class MixedSample:
    stream: EventStream
    label: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.float64)
        if np.any(self.label < 0) or not math.isclose(self.label.sum(), 1.0, abs_tol=1e-9):
            raise ValueError(f"label {self.label} is not on the probability simplex")


def _round(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# RPGDrop
# ---------------------------------------------------------------------------


def rpg_drop(stream: EventStream, smap: Union[SaliencyMap, np.ndarray], cfg: DropConfig,
             rng: np.random.Generator) -> EventStream:
    """Drop each event independently with probability ``theta * map[y, x]``."""
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    if values.shape != (stream.height, stream.width):
        raise ValueError(
            f"map of shape {values.shape} does not match stream {stream.height}x{stream.width}"
        )
    p = cfg.theta * values[stream.y, stream.x]
    keep = rng.random(len(stream)) >= p
    return stream.select(keep)


# ---------------------------------------------------------------------------
# RPGMix
# ---------------------------------------------------------------------------


def _overlap_1d(a0, alen, b0, blen):
    return np.maximum(np.minimum(a0 + alen, b0 + blen) - np.maximum(a0, b0), 0)


def sample_positions(box1: BoundingBox, box2: BoundingBox, canvas: Tuple[int, int],
                     rng: np.random.Generator):
    """Place two boxes with minimal overlap.

    ``box1`` goes flush into one of the four canvas corners (uniform);
    ``box2`` goes to a position drawn uniformly among all in-bounds positions
    with the least overlap against it.

    Returns:
        ``(pos1, pos2, overlap)`` with top-left ``(x, y)`` positions.
    """
    W, H = canvas
    for name, b in (("box1", box1), ("box2", box2)):
        if b.w > W or b.h > H:
            raise ValueError(f"{name} {b.w}x{b.h} larger than canvas {W}x{H}")
    corner = int(rng.integers(4))
    x1 = 0 if corner in (0, 2) else W - box1.w
    y1 = 0 if corner in (0, 1) else H - box1.h
    xs = np.arange(W - box2.w + 1)
    ys = np.arange(H - box2.h + 1)
    ox = _overlap_1d(x1, box1.w, xs, box2.w)
    oy = _overlap_1d(y1, box1.h, ys, box2.h)
    grid = np.outer(oy, ox)  # row-major over (y2, x2)
    best = grid.min()
    candidates = np.flatnonzero(grid.ravel() == best)
    k = int(candidates[rng.integers(len(candidates))])
    return (x1, y1), (int(xs[k % len(xs)]), int(ys[k // len(xs)])), int(best)


def mix_labels(L1, L2, box1: BoundingBox, box2: BoundingBox, overlap: int) -> np.ndarray:
    """Area-weighted soft label; the visible part of box 1 excludes the overlap."""
    L1 = np.asarray(L1, dtype=np.float64)
    L2 = np.asarray(L2, dtype=np.float64)
    a1, a2 = box1.area, box2.area
    if not 0 <= overlap <= min(a1, a2):
        raise ValueError(f"overlap {overlap} outside [0, {min(a1, a2)}]")
    return (L1 * (a1 - overlap) + L2 * a2) / (a1 + a2 - overlap)


def translate(stream: EventStream, dx: int, dy: int) -> EventStream:
    """Shift all events; those leaving the canvas are discarded."""
    return stream.with_coordinates(stream.x + int(dx), stream.y + int(dy))


def _merge(a: EventStream, b: EventStream) -> EventStream:
    order = np.argsort(np.concatenate([a.t, b.t]), kind="stable")
    cat = lambda u, v: np.concatenate([u, v])[order]  # noqa: E731
    durations = [d for d in (a.duration, b.duration) if d is not None]
    return EventStream(cat(a.x, b.x), cat(a.y, b.y), cat(a.t, b.t), cat(a.p, b.p),
                       a.width, a.height, max(durations) if len(durations) == 2 else None)


def _as_label(label, num_classes: Optional[int]) -> np.ndarray:
    arr = np.asarray(label)
    if arr.ndim == 0:
        if num_classes is None:
            raise ValueError("integer labels need num_classes")
        out = np.zeros(num_classes)
        out[int(arr)] = 1.0
        return out
    return arr.astype(np.float64)


def rpg_mix(s1: EventStream, L1, s2: EventStream, L2,
            maps: Tuple[SaliencyMap, SaliencyMap], tau: float,
            rng: np.random.Generator) -> MixedSample:
    """Move both streams so their salient boxes barely overlap, then CutMix by the second box.

    The mixed stream keeps ``s2``'s events inside its placed box and ``s1``'s
    events everywhere else; the label follows the box areas.
    """
    if (s1.width, s1.height) != (s2.width, s2.height):
        raise ValueError("streams must share a resolution")
    L1 = np.asarray(L1, dtype=np.float64)
    L2 = np.asarray(L2, dtype=np.float64)
    if L1.shape != L2.shape:
        raise ValueError(f"label vectors differ in class count: {L1.shape} vs {L2.shape}")
    b1, b2 = bbox_from_map(maps[0], tau), bbox_from_map(maps[1], tau)
    if b1.w > s1.width or b1.h > s1.height or b2.w > s2.width or b2.h > s2.height:
        raise ValueError("saliency maps do not match the stream resolution")
    (x1, y1), (x2, y2), overlap = sample_positions(b1, b2, (s1.width, s1.height), rng)
    m1 = translate(s1, x1 - b1.x, y1 - b1.y)
    m2 = translate(s2, x2 - b2.x, y2 - b2.y)
    in_box = lambda s: (s.x >= x2) & (s.x < x2 + b2.w) & (s.y >= y2) & (s.y < y2 + b2.h)  # noqa: E731
    mixed = _merge(m1.select(~in_box(m1)), m2.select(in_box(m2)))
    label = mix_labels(L1, L2, b1, b2, overlap)
    provenance = {
        "boxes": [asdict(b1), asdict(b2)],
        "positions": [[x1, y1], [x2, y2]],
        "overlap": overlap,
    }
    return MixedSample(mixed, label, provenance)


# ---------------------------------------------------------------------------
# geometric policies
# ---------------------------------------------------------------------------


def geometric(stream: EventStream, draw: PolicyDraw) -> EventStream:
    """Apply one geometric policy about the canvas centre; out-of-canvas events are dropped.

    ``rotate`` takes degrees, ``shear_x`` an x-offset per row, ``translate_*``
    a fraction of the canvas side and ``cutout`` a square side as a fraction
    of the shorter canvas side (placed using ``draw.seed``).
    """
    W, H = stream.width, stream.height
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    x = stream.x.astype(np.float64)
    y = stream.y.astype(np.float64)
    m = float(draw.magnitude)
    policy = draw.policy
    if policy == "flip_horizontal":
        return stream.with_coordinates(W - 1 - stream.x, stream.y)
    if policy == "rotate":
        a = math.radians(m)
        dx, dy = x - cx, y - cy
        return stream.with_coordinates(_round(cx + math.cos(a) * dx - math.sin(a) * dy),
                                       _round(cy + math.sin(a) * dx + math.cos(a) * dy))
    if policy == "shear_x":
        return stream.with_coordinates(_round(x + m * (y - cy)), stream.y)
    if policy == "translate_x":
        return translate(stream, int(_round(np.float64(m * W))), 0)
    if policy == "translate_y":
        return translate(stream, 0, int(_round(np.float64(m * H))))
    if policy == "cutout":
        side = int(min(max(1, _round(np.float64(m * min(W, H)))), min(W, H)))
        rng = np.random.default_rng(draw.seed)
        x0 = int(rng.integers(W - side + 1))
        y0 = int(rng.integers(H - side + 1))
        inside = ((stream.x >= x0) & (stream.x < x0 + side)
                  & (stream.y >= y0) & (stream.y < y0 + side))
        return stream.select(~inside)
    raise ValueError(f"unknown policy {policy!r}")


def apply_policy(stream: EventStream, draw: PolicyDraw,
                 smap: Optional[SaliencyMap] = None) -> EventStream:
    if draw.policy == DROP_POLICY:
        if smap is None:
            raise ValueError("rpg_drop needs a saliency map")
        return rpg_drop(stream, smap, DropConfig(draw.magnitude), np.random.default_rng(draw.seed))
    return geometric(stream, draw)


def draw_policy(rng: np.random.Generator, policies: Sequence[str],
                ranges: Dict[str, Tuple[float, float]]) -> PolicyDraw:
    policy = policies[int(rng.integers(len(policies)))]
    lo, hi = ranges[policy]
    magnitude = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return PolicyDraw(policy, magnitude, int(rng.integers(2**31)))


# ---------------------------------------------------------------------------
# EventRPG
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    policies: Tuple[str, ...] = GEOMETRIC_POLICIES + (DROP_POLICY,)
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    tau: float = 0.25
    mix_prob: float = 0.5
    mode: str = "SLRP"
    kind: str = "saliency"
    seed: int = 0
    time_steps: Optional[int] = None
    recompute_after_policy: bool = False
    batch_size: int = 8

    def __post_init__(self):
        self.policies = tuple(self.policies)
        self.ranges = {k: tuple(v) for k, v in {**DEFAULT_RANGES, **self.ranges}.items()}
        unknown = [p for p in self.policies if p not in self.ranges]
        if unknown:
            raise ValueError(f"unknown policies {unknown}")
        if not 0 <= self.mix_prob <= 1:
            raise ValueError("mix_prob must be in [0, 1]")
        if not 0 < self.tau < 1:
            raise ValueError("tau must be in (0, 1)")
        lo, hi = self.ranges[DROP_POLICY]
        if not 0 <= lo <= hi <= 1:
            raise ValueError("rpg_drop theta range must lie in [0, 1]")
        RelPropConfig(mode=self.mode)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if "theta_range" in d:
            d.setdefault("ranges", {})[DROP_POLICY] = d.pop("theta_range")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known - {"model", "weights"}
        if extra:
            raise ValueError(f"unknown augmentation config keys {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, text: str) -> "AugmentConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policies"] = list(self.policies)
        d["ranges"] = {k: list(v) for k, v in sorted(self.ranges.items())}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def map_to_stream(smap: SaliencyMap, stream: EventStream) -> SaliencyMap:
    """Re-index a network-resolution map onto the stream's pixel grid.

    Each sensor pixel takes the value of the frame cell its events are binned into.
    """
    H, W = smap.values.shape
    if (stream.height, stream.width) == (H, W):
        return smap
    grid = EventStream(np.tile(np.arange(stream.width), stream.height),
                       np.repeat(np.arange(stream.height), stream.width),
                       np.zeros(stream.width * stream.height, dtype=np.int64),
                       np.zeros(stream.width * stream.height, dtype=np.int64),
                       stream.width, stream.height)
    xs, ys = frame_coordinates(grid, H, W)
    values = smap.values[ys, xs].reshape(stream.height, stream.width)
    return SaliencyMap(values, values.copy(), smap.kind, None)


def stream_saliency(net: Network, stream: EventStream, target: int, kind: str = "saliency",
                    mode: str = "SLRP", time_steps: Optional[int] = None) -> SaliencyMap:
    """Saliency/CAM of ``stream`` for ``target``, expressed at the stream's resolution."""
    T = time_steps or net.time_steps or 4
    frames = to_frames(stream, T, net.input_shape[1], net.input_shape[2])
    smap = explain(net, frames, target, kind, RelPropConfig(mode=mode))
    return map_to_stream(smap, stream)


def _child_rng(seed: int, index: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(phase)])


def event_rpg(batch: Sequence[Tuple[EventStream, object]], net: Network, cfg: AugmentConfig,
              seed: Optional[int] = None, jobs: int = 1) -> List[MixedSample]:
    """Augment a batch: one random policy per sample, then RPGMix with probability ``mix_prob``.

    Every sample draws from its own generator seeded by ``(seed, index)``,
    so results do not depend on ``jobs``.
    """
    if not batch:
        raise ValueError("batch must not be empty")
    seed = cfg.seed if seed is None else seed
    K = net.num_classes
    labels = [_as_label(lbl, K) for _, lbl in batch]
    targets = [int(np.argmax(lbl)) for lbl in labels]
    streams = [s for s, _ in batch]
    n = len(batch)

    def run(fn, items):
        if jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    saliency = lambda s, tgt: stream_saliency(net, s, tgt, cfg.kind, cfg.mode, cfg.time_steps)  # noqa: E731
    maps = run(lambda i: saliency(streams[i], targets[i]), range(n))

    def policy_phase(i):
        rng = _child_rng(seed, i, 0)
        draw = draw_policy(rng, cfg.policies, cfg.ranges)
        return draw, apply_policy(streams[i], draw, maps[i])

    drawn = run(policy_phase, range(n))
    augmented = [s for _, s in drawn]
    if cfg.recompute_after_policy:
        maps = run(lambda i: saliency(augmented[i], targets[i]), range(n))

    def mix_phase(i):
        rng = _child_rng(seed, i, 1)
        draw, stream = drawn[i]
        provenance = {"source": i, "policy": draw.to_dict(), "seed": int(seed)}
        if rng.random() < cfg.mix_prob:
            j = int(rng.integers(n))
            mixed = rpg_mix(stream, labels[i], augmented[j], labels[j], (maps[i], maps[j]), cfg.tau, rng)
            mixed.provenance = {**provenance, "partner": j, **mixed.provenance}
            return mixed
        return MixedSample(stream, labels[i], provenance)

    return run(mix_phase, range(n))
