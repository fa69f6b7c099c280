"""Average Drop / Average Increase faithfulness of attribution maps."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .events import FrameTensor
from .saliency import SaliencyMap
from .snn import Network, forward_batch

__all__ = ["FaithfulnessReport", "confidence", "faithfulness"]


@dataclass
class FaithfulnessReport:
    average_increase: float
    average_drop: float
    n: int
    per_sample: List[Tuple[float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "original_confidence", "masked_confidence"])
        for i, (y, o) in enumerate(self.per_sample):
            w.writerow([i, repr(y), repr(o)])
        w.writerow(["summary", f"average_increase={self.average_increase!r}",
                    f"average_drop={self.average_drop!r}"])
        return buf.getvalue()


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def confidence(net: Network, frames, target: int) -> float:
    """Softmax probability of ``target`` from time-averaged logits."""
    data = frames.data if isinstance(frames, FrameTensor) else np.asarray(frames, dtype=np.float64)
    logits = forward_batch(net, data[None])[0]
    return float(_softmax(logits.mean(axis=0))[target])


def faithfulness(net: Network, samples: Sequence, maps: Sequence, targets: Sequence[int],
                 jobs: int = 1) -> FaithfulnessReport:
    """Mask each sample's frames by its map and compare target confidence.

    ``A.D. = 100 * mean(max(0, Y - O) / Y)`` and ``A.I. = 100 * mean(O > Y)``
    where ``Y`` is the confidence on the original frames and ``O`` on the
    frames multiplied per pixel by the map (broadcast over time and channels).
    """
    if not (len(samples) == len(maps) == len(targets)):
        raise ValueError(
            f"count mismatch: {len(samples)} samples, {len(maps)} maps, {len(targets)} targets"
        )
    if len(samples) == 0:
        raise ValueError("no samples")

    def one(i):
        s = samples[i]
        data = s.data if isinstance(s, FrameTensor) else np.asarray(s, dtype=np.float64)
        m = maps[i].values if isinstance(maps[i], SaliencyMap) else np.asarray(maps[i], dtype=np.float64)
        if m.shape != data.shape[-2:]:
            raise ValueError(f"sample {i}: map {m.shape} does not match frames {data.shape}")
        return confidence(net, data, targets[i]), confidence(net, data * m, targets[i])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pairs = list(pool.map(one, range(len(samples))))
    else:
        pairs = [one(i) for i in range(len(samples))]
    ys = np.array([p[0] for p in pairs])
    os_ = np.array([p[1] for p in pairs])
    drop = np.divide(np.maximum(ys - os_, 0.0), ys, out=np.zeros_like(ys), where=ys > 0)
    return FaithfulnessReport(
        # fsum keeps the summary independent of sample order
        average_increase=100.0 * math.fsum((os_ > ys).astype(float)) / len(pairs),
        average_drop=100.0 * math.fsum(drop) / len(pairs),
        n=len(pairs),
        per_sample=pairs,
    )
