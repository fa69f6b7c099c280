"""Randomized property suites for the relevance rules and augmentation geometry.

Each suite returns a :class:`SuiteResult` with the worst error seen; the CLI
``selftest`` command and the acceptance tests both run them.  Oracles here
are written independently of the code they check (closed forms, exhaustive
enumeration, binomial bounds).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .augment import DropConfig, mix_labels, rpg_drop, rpg_mix, sample_positions
from .events import EventStream
from .relprop import RelPropConfig, propagate, redistribute_in_time, relprop_spiking_sltrp
from .saliency import BoundingBox, SaliencyMap, saliency_map
from .snn import AvgPool2d, Conv2d, Flatten, Linear, Network, NeuronParams, Spiking, forward

__all__ = [
    "SuiteResult",
    "random_network",
    "random_frames",
    "closed_form_redistribution",
    "prefix_sum_oracle",
    "brute_force_min_overlap",
    "conservation_suite",
    "neuron_conservation_suite",
    "prefix_sum_suite",
    "closed_form_suite",
    "mode_agreement_suite",
    "mix_label_suite",
    "placement_suite",
    "drop_suite",
    "SUITES",
    "run_all",
]


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    cases: int
    seconds: float
    passed: bool
    detail: str = ""

    def line(self, timing: bool = False) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {self.seconds:.2f}s" if timing else ""
        return (f"[{status}] {self.name}: max error {self.max_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.cases} cases{extra}){self.detail}")


def _result(name, err, tol, cases, t0, extra_ok=True, detail=""):
    return SuiteResult(name, float(err), tol, cases, time.perf_counter() - t0,
                       bool(err <= tol and extra_ok), detail)


# ---------------------------------------------------------------------------
# random networks
# ---------------------------------------------------------------------------


def random_network(rng: np.random.Generator, num_classes: Optional[int] = None) -> Network:
    """Random stack of 2-5 weighted/pool/spiking layers (flatten not counted)."""
    C = int(rng.integers(1, 3))
    H = int(rng.integers(4, 9))
    W = int(rng.integers(4, 9))
    K = int(num_classes or rng.integers(2, 5))
    depth = int(rng.integers(2, 6))
    n_spatial = int(rng.integers(0, depth))  # the final linear is always in the dense part
    shape = (C, H, W)
    layers = []
    for _ in range(n_spatial):
        choice = rng.choice(["conv", "pool", "spike"])
        c, h, w = shape
        if choice == "pool" and min(h, w) >= 2:
            layers.append(AvgPool2d(2))
        elif choice == "spike":
            layers.append(Spiking(_random_neuron(rng)))
        else:
            k = int(rng.integers(1, min(3, h, w) + 1))
            pad = int(rng.integers(0, k))
            out_c = int(rng.integers(1, 4))
            layers.append(Conv2d(rng.normal(0.3, 0.6, (out_c, c, k, k)), stride=int(rng.integers(1, 3)),
                                 padding=pad))
        shape = layers[-1].output_shape(shape)
    layers.append(Flatten())
    shape = layers[-1].output_shape(shape)
    for _ in range(depth - n_spatial - 1):
        if rng.random() < 0.5 and not isinstance(layers[-1], Spiking):
            layers.append(Spiking(_random_neuron(rng)))
        else:
            out = int(rng.integers(2, 9))
            layers.append(Linear(rng.normal(0.2, 0.5, (out, shape[0]))))
        shape = layers[-1].output_shape(shape)
    layers.append(Linear(rng.normal(0.0, 0.7, (K, shape[0]))))
    return Network(layers, (C, H, W), K)


def _random_neuron(rng) -> NeuronParams:
    if rng.random() < 0.5:
        return NeuronParams("IF", v_threshold=float(rng.uniform(0.5, 1.5)))
    return NeuronParams("LIF", tau=float(rng.uniform(2.0, 6.0)), dt=1.0,
                        v_threshold=float(rng.uniform(0.3, 1.0)))


def random_frames(rng: np.random.Generator, net: Network, T: int) -> np.ndarray:
    return rng.poisson(0.8, (T,) + net.input_shape).astype(np.float64)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def closed_form_redistribution(gam: np.ndarray, R_out: np.ndarray) -> np.ndarray:
    """``R_in[t] = (1 - g[t]) * (R_out[t] + sum_{i>t} R_out[i] prod_{j=t+1..i} g[j])``, by loops."""
    T = len(R_out)
    out = np.zeros(T)
    for t in range(T):
        acc = R_out[t]
        for i in range(t + 1, T):
            acc += R_out[i] * np.prod(gam[t + 1:i + 1])
        out[t] = (1.0 - gam[t]) * acc
    return out


def prefix_sum_oracle(gam: np.ndarray, R_out: np.ndarray, k: int) -> float:
    """Right-hand side of the prefix identity for the first ``k`` steps."""
    T = len(R_out)
    tail = sum(R_out[i] * np.prod(gam[k:i + 1]) for i in range(k, T))
    return float(np.sum(R_out[:k]) + tail)


def brute_force_min_overlap(w1, h1, w2, h2, W, H) -> int:
    """Least overlap area over every in-bounds placement of both boxes.

    The area is a product of independent x and y overlaps, so the minimum
    over all 2-D placements is the product of the exhaustive 1-D minima.
    """
    def min_1d(a, b, n):
        best = n
        for p in range(n - a + 1):
            for q in range(n - b + 1):
                best = min(best, max(0, min(p + a, q + b) - max(p, q)))
        return best

    return min_1d(w1, w2, W) * min_1d(h1, h2, H)


def _random_sequences(rng, n, t_max=16):
    for _ in range(n):
        T = int(rng.integers(1, t_max + 1))
        gam = rng.uniform(0.0, 1.0, T)
        gam[0] = 0.0
        R = rng.normal(0.0, 1.0, T)
        yield gam, R


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def conservation_suite(n_nets: int = 100, seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    """Layer-boundary relevance totals vs the output total (both modes, alpha in {1, 2})."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, cases = 0.0, 0
    for _ in range(n_nets):
        net = random_network(rng)
        T = int(rng.choice([1, 4, 8]))
        frames = random_frames(rng, net, T)
        logits, trace = forward(net, frames)
        target = int(rng.integers(net.num_classes))
        for mode in ("SLTRP", "SLRP"):
            for alpha in (1.0, 2.0):
                rel = propagate(net, trace, target, RelPropConfig.from_alpha(alpha, mode=mode))
                for passes in (rel.target, rel.contrast):
                    total = passes[-1].total()
                    scale = abs(total)
                    for r in passes:
                        dev = abs(r.total() - total)
                        # exact-zero totals only admit rounding noise
                        worst = max(worst, dev / scale if scale > 1e-12 else dev)
                cases += 1
    return _result("conservation", worst, tol, cases, t0)


def neuron_conservation_suite(n_traces: int = 1000, seed: int = 1, tol: float = 1e-10) -> SuiteResult:
    """Per-neuron time totals through a spiking layer, from simulated neuron traces."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_traces):
        T = int(rng.integers(1, 17))
        params = _random_neuron(rng)
        current = rng.normal(0.4, 0.8, T)
        c, d = params.coefficients
        v, v_prev = 0.0, np.zeros(T)
        for t in range(T):
            v_prev[t] = v
            v_pre = c * v + d * current[t]
            v = 0.0 if v_pre >= params.v_threshold else v_pre
        R_out = rng.normal(0.0, 1.0, T)
        alpha = float(rng.choice([1.0, 2.0, 0.5]))
        R_in = relprop_spiking_sltrp(v_prev, current, R_out, params, RelPropConfig.from_alpha(alpha))
        worst = max(worst, abs(R_in.sum() - R_out.sum()))
    return _result("per-neuron conservation", worst, tol, n_traces, t0)


def prefix_sum_suite(n_seq: int = 1000, seed: int = 2, tol: float = 1e-10) -> SuiteResult:
    """Partial sums of the redistributed relevance against the prefix identity, all k < T."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, cases = 0.0, 0
    for gam, R in _random_sequences(rng, n_seq):
        R_in = redistribute_in_time(gam, R)
        for k in range(1, len(R)):
            worst = max(worst, abs(R_in[:k].sum() - prefix_sum_oracle(gam, R, k)))
            cases += 1
    return _result("prefix-sum identity", worst, tol, cases, t0)


def closed_form_suite(n_seq: int = 1000, seed: int = 2, tol: float = 1e-10) -> SuiteResult:
    """Iterative redistribution against the closed form on the same sequences."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for gam, R in _random_sequences(rng, n_seq):
        worst = max(worst, float(np.max(np.abs(redistribute_in_time(gam, R)
                                               - closed_form_redistribution(gam, R)))))
    return _result("closed form vs iteration", worst, tol, n_seq, t0)


def mode_agreement_suite(n_nets: int = 50, seed: int = 3, tol: float = 1e-9) -> SuiteResult:
    """At T=1 both modes give the same input saliency map."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nets):
        net = random_network(rng)
        frames = random_frames(rng, net, 1)
        _, trace = forward(net, frames)
        target = int(rng.integers(net.num_classes))
        maps = []
        for mode in ("SLTRP", "SLRP"):
            rel = propagate(net, trace, target, RelPropConfig(mode=mode))
            maps.append(saliency_map(rel.input_target, rel.input_contrast))
        worst = max(worst, float(np.max(np.abs(maps[0].values - maps[1].values))),
                    float(np.max(np.abs(maps[0].raw - maps[1].raw))))
    return _result("T=1 mode agreement", worst, tol, n_nets, t0)


def _random_stream(rng, W, H, n):
    return EventStream(rng.integers(0, W, n), rng.integers(0, H, n),
                       np.sort(rng.integers(0, 1000, n)), rng.integers(0, 2, n), W, H)


def _random_map(rng, W, H):
    v = np.zeros((H, W))
    bx, by = int(rng.integers(W)), int(rng.integers(H))
    bw, bh = int(rng.integers(1, W - bx + 1)), int(rng.integers(1, H - by + 1))
    v[by:by + bh, bx:bx + bw] = rng.uniform(0.5, 1.0, (bh, bw))
    if rng.random() < 0.1:
        v[:] = 0.0
    return SaliencyMap(v, v, "saliency")


def mix_label_suite(n_mix: int = 10_000, seed: int = 4) -> SuiteResult:
    """Soft labels of randomized mixes stay on the simplex; the 4x4/2x2 case is exact."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_mix):
        W, H = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        K = int(rng.integers(2, 6))
        L1, L2 = np.eye(K)[rng.integers(K)], np.eye(K)[rng.integers(K)]
        s1 = _random_stream(rng, W, H, int(rng.integers(0, 30)))
        s2 = _random_stream(rng, W, H, int(rng.integers(0, 30)))
        m = rpg_mix(s1, L1, s2, L2, (_random_map(rng, W, H), _random_map(rng, W, H)),
                    float(rng.uniform(0.05, 0.95)), rng)
        lbl = m.label
        worst = max(worst, abs(lbl.sum() - 1.0), float(max(0.0, -lbl.min())))
    exact = mix_labels([1, 0], [0, 1], BoundingBox(0, 0, 4, 4), BoundingBox(0, 0, 2, 2), 0)
    hand_ok = exact.tolist() == [16 / 20, 4 / 20]
    return _result("mixed-label simplex", worst, 1e-12, n_mix, t0, hand_ok,
                   "" if hand_ok else f" hand case gave {exact.tolist()}")


def placement_suite(max_side: int = 16, seed: int = 5, square_only: bool = False) -> SuiteResult:
    """Returned overlap vs the exhaustive minimum for every box pair on every canvas up to ``max_side``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, cases = 0, 0
    sides = range(1, max_side + 1)
    canvases = [(n, n) for n in sides] if square_only else [(w, h) for w in sides for h in sides]
    cache: Dict[tuple, int] = {}

    def min_1d(a, b, n):
        key = (a, b, n)
        if key not in cache:
            cache[key] = brute_force_min_overlap(a, 1, b, 1, n, 1)
        return cache[key]

    for W, H in canvases:
        for w1 in range(1, W + 1):
            for w2 in range(1, W + 1):
                ox = min_1d(w1, w2, W)
                for h1 in range(1, H + 1):
                    b1 = BoundingBox(0, 0, w1, h1)
                    for h2 in range(1, H + 1):
                        (x1, y1), (x2, y2), got = sample_positions(b1, BoundingBox(0, 0, w2, h2), (W, H), rng)
                        want = ox * min_1d(h1, h2, H)
                        actual = (max(0, min(x1 + w1, x2 + w2) - max(x1, x2))
                                  * max(0, min(y1 + h1, y2 + h2) - max(y1, y2)))
                        worst = max(worst, abs(got - want), abs(actual - want))
                        cases += 1
    return _result("placement optimality", worst, 0, cases, t0)


def drop_suite(n_events: int = 10_000, seed: int = 6) -> SuiteResult:
    """Survivor counts within 3 sigma of the binomial mean; zero/one maps exact."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    W = H = 8
    stream = _random_stream(rng, W, H, n_events)
    worst_sigma, ok = 0.0, True
    cases = 0
    for s in (0.1, 0.25, 0.5, 0.75, 1.0):
        for theta in (0.0, 0.2, 0.5, 0.8, 1.0):
            out = rpg_drop(stream, np.full((H, W), s), DropConfig(theta), rng)
            p = 1.0 - theta * s
            sigma = math.sqrt(n_events * p * (1.0 - p))
            dev = abs(len(out) - p * n_events)
            if sigma == 0:
                ok &= dev == 0
            else:
                worst_sigma = max(worst_sigma, dev / sigma)
            cases += 1
    zero = rpg_drop(stream, np.zeros((H, W)), DropConfig(1.0), rng)
    ones = rpg_drop(stream, np.ones((H, W)), DropConfig(1.0), rng)
    ok &= zero == stream and len(ones) == 0
    return _result("rpg_drop statistics (sigmas)", worst_sigma, 3.0, cases + 2, t0, ok)


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "conservation": conservation_suite,
    "neuron_conservation": neuron_conservation_suite,
    "prefix_sum": prefix_sum_suite,
    "closed_form": closed_form_suite,
    "mode_agreement": mode_agreement_suite,
    "mix_labels": mix_label_suite,
    "placement": placement_suite,
    "drop": drop_suite,
}


def run_all(quick: bool = False) -> List[SuiteResult]:
    if quick:
        return [
            conservation_suite(20), neuron_conservation_suite(200), prefix_sum_suite(200),
            closed_form_suite(200), mode_agreement_suite(10), mix_label_suite(1000),
            placement_suite(8), drop_suite(),
        ]
    return [fn() for fn in SUITES.values()]
