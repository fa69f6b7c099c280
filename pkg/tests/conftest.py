import numpy as np
import pytest
from hypothesis import strategies as st

from eventrpg.events import EventStream
from eventrpg.trainer import SyntheticSpec, TrainConfig, build_mlp, generate_dataset, train


@st.composite
def streams(draw, max_side=12, max_events=40):
    W = draw(st.integers(1, max_side))
    H = draw(st.integers(1, max_side))
    n = draw(st.integers(0, max_events))
    ints = lambda hi: st.lists(st.integers(0, hi), min_size=n, max_size=n)  # noqa: E731
    return EventStream(draw(ints(W - 1)), draw(ints(H - 1)), draw(ints(10_000)), draw(ints(1)), W, H)


def random_stream(rng, W=16, H=16, n=200, t_max=100_000):
    return EventStream(rng.integers(0, W, n), rng.integers(0, H, n),
                       np.sort(rng.integers(0, t_max, n)), rng.integers(0, 2, n), W, H)


@pytest.fixture(scope="session")
def toy():
    """Two-class synthetic set and the two-layer SNN trained on it."""
    spec = SyntheticSpec(classes=2, canvas=(16, 16), seed=0)
    data = generate_dataset(spec)
    net = build_mlp((2, 16, 16), 64, 2, seed=0, time_steps=4)
    result = train(net, data, TrainConfig(epochs=20, time_steps=4, seed=0))
    return spec, data, result


def write_dataset(root, samples, csv_every=2):
    """Write ``(stream, label)`` pairs as a labelled directory; every other file as CSV."""
    from eventrpg.events import write_events_file

    root.mkdir(parents=True, exist_ok=True)
    lines = ["file,label"]
    for i, (s, lbl) in enumerate(samples):
        name = f"s{i:03d}{'.csv' if i % csv_every == 0 else '.bin'}"
        write_events_file(s, root / name)
        lines.append(f"{name},{lbl}")
    (root / "labels.csv").write_text("\n".join(lines) + "\n")
    return root


def tree(root):
    """``{relative path: bytes}`` for every file under ``root``."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def workspace(tmp_path_factory, toy):
    """A trained model on disk, a labelled event directory and configs for the CLI."""
    import json

    from eventrpg.snn import save_model_files

    spec, (_, test), result = toy
    root = tmp_path_factory.mktemp("ws")
    save_model_files(result.network, root / "model.json")
    write_dataset(root / "data", test[:12])
    (root / "aug.json").write_text(json.dumps({"model": "model.json", "batch_size": 4, "mix_prob": 0.6}))
    (root / "spec.json").write_text(json.dumps({"classes": 2, "train_size": 60, "test_size": 20, "seed": 3}))
    (root / "train.json").write_text(json.dumps({"epochs": 3, "batch_size": 10, "time_steps": 4,
                                                 "model": {"type": "mlp", "hidden": 16}}))
    (root / "aug_train.json").write_text(json.dumps({"mix_prob": 0.5, "batch_size": 10}))
    return root


ACCEPTANCE = []  # (criterion, passed, detail) filled by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}")
