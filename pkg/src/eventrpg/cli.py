"""``eventrpg`` command line: convert, saliency, augment, eval, train, selftest.

Exit status is 0 on success, 1 when inputs fail validation (bad flags,
missing files, malformed configs or data) and 2 when work fails after
validation, including a failing ``selftest`` suite.  Every input is read and
checked before any output is written.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .augment import AugmentConfig, event_rpg
from .evaluation import faithfulness
from .events import EventStream, read_events_file, to_frames, write_events_file
from .relprop import RelPropConfig
from .saliency import MAP_KINDS, bbox_from_map, explain, export_map
from .snn import Network, NeuronParams, load_model_files, save_model_files
from .trainer import SyntheticSpec, TrainConfig, build_convnet, build_mlp, generate_dataset, train, write_log
from .verify import run_all

__all__ = ["main", "run", "ValidationError"]

SEED_ENV = "EVENTRPG_SEED"
LABELS_FILE = "labels.csv"
EVENT_SUFFIXES = (".csv", ".bin", ".evt")


class ValidationError(Exception):
    """Bad flags, missing files or malformed inputs (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# input helpers; everything here raises ValidationError
# ---------------------------------------------------------------------------


def _existing(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{flag}: no such file or directory: {path}")
    return p


def _read_json(path: str, flag: str) -> dict:
    p = _existing(path, flag)
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{flag} {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{flag} {path}: expected a JSON object")
    return data


def _load_model(path: str, weights: Optional[str] = None, flag: str = "--model") -> Network:
    _existing(path, flag)
    if weights is not None:
        _existing(weights, "--weights")
    else:
        default = Path(path).with_suffix(".bin")
        if not default.exists():
            raise ValidationError(f"{flag}: weights file {default} not found (pass --weights)")
    try:
        return load_model_files(path, weights)
    except (ValueError, OSError) as exc:
        raise ValidationError(f"{flag} {path}: {exc}") from None


def _read_stream(path: Path, flag: str, width=None, height=None) -> EventStream:
    try:
        return read_events_file(path, width, height)
    except (ValueError, OSError) as exc:
        raise ValidationError(f"{flag} {path}: {exc}") from None


def _seed(arg: Optional[int], fallback: int) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return fallback
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={env!r} is not an integer") from None


def _check_out(path: Path, flag: str, inputs: Sequence[Path]) -> None:
    resolved = path.resolve()
    for p in inputs:
        if p.resolve() == resolved:
            raise ValidationError(f"{flag} {path} would overwrite an input")


def _resolve_mode(mode: str) -> str:
    return mode.upper()


def read_dataset(in_dir: str, num_classes: Optional[int] = None, width=None, height=None
                 ) -> Tuple[List[str], List[EventStream], List[np.ndarray]]:
    """Load ``labels.csv`` (``file,label`` or ``file,class_0_weight,...``) and its event files.

    CSV streams carry no sensor size; unless ``width``/``height`` are given
    they share the smallest canvas that holds every file's events.
    """
    root = _existing(in_dir, "--in-dir")
    labels_path = root / LABELS_FILE
    if not labels_path.is_file():
        raise ValidationError(f"--in-dir {in_dir}: missing {LABELS_FILE}")
    with open(labels_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["file"] or len(rows[0]) < 2:
        raise ValidationError(f"{labels_path}: header must start with 'file,'")
    header, rows = rows[0], [r for r in rows[1:] if r]
    if not rows:
        raise ValidationError(f"{labels_path}: no samples")
    soft = header[1] != "label"
    names, streams, labels = [], [], []
    for n, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValidationError(f"{labels_path} line {n}: expected {len(header)} fields")
        name = row[0]
        path = root / name
        if Path(name).is_absolute() or ".." in Path(name).parts or not path.is_file():
            raise ValidationError(f"{labels_path} line {n}: event file {name!r} not found in --in-dir")
        try:
            if soft:
                lbl = np.array([float(v) for v in row[1:]])
            else:
                k = int(row[1])
                if k < 0:
                    raise ValueError("negative class")
                lbl = k
        except ValueError:
            raise ValidationError(f"{labels_path} line {n}: bad label {row[1:]}") from None
        names.append(name)
        streams.append(_read_stream(path, f"{labels_path} line {n}", width, height))
        labels.append(lbl)
    K = num_classes
    if K is None:
        K = len(header) - 1 if soft else max(labels) + 1
    out = []
    for n, lbl in enumerate(labels, start=2):
        if soft:
            if len(lbl) != K or np.any(lbl < 0) or abs(lbl.sum() - 1) > 1e-9:
                raise ValidationError(f"{labels_path} line {n}: label is not a distribution over {K} classes")
            out.append(lbl)
        else:
            if lbl >= K:
                raise ValidationError(f"{labels_path} line {n}: class {lbl} outside 0..{K - 1}")
            out.append(np.eye(K)[lbl])
    if width is None or height is None:
        needs = [s for nm, s in zip(names, streams) if Path(nm).suffix.lower() == ".csv"]
        if needs:
            W = max(s.width for s in streams)
            H = max(s.height for s in streams)
            streams = [EventStream(s.x, s.y, s.t, s.p, W, H) if Path(nm).suffix.lower() == ".csv" else s
                       for nm, s in zip(names, streams)]
    return names, streams, out


def _frames_for(net: Network, stream: EventStream, T: int) -> np.ndarray:
    return to_frames(stream, T, net.input_shape[1], net.input_shape[2]).data


def _time_steps(arg: Optional[int], net: Network) -> int:
    T = arg or net.time_steps or 4
    if T < 1:
        raise ValidationError("--time-steps must be >= 1")
    return T


def _map_threads(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# subcommands: each returns a zero-argument callable doing the work
# ---------------------------------------------------------------------------


def _cmd_convert(a):
    src = _existing(a.input, "--input")
    out = Path(a.out)
    _check_out(out, "--out", [src])
    suffix = out.suffix.lower()
    if suffix not in EVENT_SUFFIXES + (".npy",):
        raise ValidationError(f"--out {a.out}: extension must be one of .csv, .bin, .evt, .npy")
    stream = _read_stream(src, "--input", a.width, a.height)
    if suffix == ".npy" and a.time_steps is None:
        raise ValidationError("--time-steps is required for a frame dump (.npy)")

    def work():
        out.parent.mkdir(parents=True, exist_ok=True)
        if suffix == ".npy":
            frames = to_frames(stream, a.time_steps, a.frame_height, a.frame_width, binarize=a.binarize)
            np.save(out, frames.data)
        else:
            write_events_file(stream, out)
        print(f"wrote {out} ({len(stream)} events)")
    return work


def _cmd_saliency(a):
    net = _load_model(a.model, a.weights)
    src = _existing(a.input, "--input")
    stream = _read_stream(src, "--input", a.width, a.height)
    T = _time_steps(a.time_steps, net)
    if a.target is not None and not 0 <= a.target < net.num_classes:
        raise ValidationError(f"--target {a.target} outside 0..{net.num_classes - 1}")
    out = Path(a.out)
    _check_out(out, "--out", [src, Path(a.model)])

    def work():
        frames = _frames_for(net, stream, T)
        smap = explain(net, frames, a.target, a.kind, RelPropConfig(mode=_resolve_mode(a.mode)))
        written = export_map(smap, out, a.stem)
        box = bbox_from_map(smap, a.tau)
        print(f"wrote {len(written)} files to {out}; box x={box.x} y={box.y} w={box.w} h={box.h}")
    return work


def _augment_config(a) -> Tuple[AugmentConfig, dict]:
    raw = _read_json(a.config, "--config")
    try:
        cfg = AugmentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"--config {a.config}: {exc}") from None
    return cfg, raw


def _model_from_config(a, raw: dict) -> Network:
    if a.model is not None:
        return _load_model(a.model, a.weights)
    if "model" not in raw:
        raise ValidationError("augment needs --model or a 'model' entry in --config")
    base = Path(a.config).parent
    weights = str(base / raw["weights"]) if "weights" in raw else None
    return _load_model(str(base / raw["model"]), weights, flag="--config model")


def _batch_seed(seed: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, batch]).generate_state(1)[0])


def _cmd_augment(a):
    cfg, raw = _augment_config(a)
    net = _model_from_config(a, raw)
    names, streams, labels = read_dataset(a.in_dir, net.num_classes, a.width, a.height)
    seed = _seed(a.seed, cfg.seed)
    out = Path(a.out_dir)
    if out.resolve() == Path(a.in_dir).resolve():
        raise ValidationError("--out-dir must differ from --in-dir")
    digest = cfg.digest()

    def work():
        results = []
        for b, start in enumerate(range(0, len(streams), cfg.batch_size)):
            batch = list(zip(streams[start:start + cfg.batch_size], labels[start:start + cfg.batch_size]))
            mixed = event_rpg(batch, net, cfg, seed=_batch_seed(seed, b), jobs=a.jobs)
            for m in mixed:
                m.provenance = {**m.provenance, "batch": b, "offset": start}
            results.extend(mixed)
        out.mkdir(parents=True, exist_ok=True)
        K = net.num_classes
        with open(out / "manifest.csv", "w", newline="") as mf, open(out / "provenance.jsonl", "w") as pf:
            w = csv.writer(mf, lineterminator="\n")
            w.writerow(["file"] + [f"class_{k}_weight" for k in range(K)])
            for i, m in enumerate(results):
                ext = Path(names[i]).suffix.lower() or ".bin"
                fname = f"aug_{i:05d}{ext}"
                write_events_file(m.stream, out / fname)
                w.writerow([fname] + [repr(float(v)) for v in m.label])
                prov = dict(m.provenance)
                prov["source"] = names[prov["offset"] + prov["source"]]
                if "partner" in prov:
                    prov["partner"] = names[prov["offset"] + prov["partner"]]
                record = {"file": fname, "master_seed": seed, "config_sha256": digest, **prov}
                pf.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
        print(f"wrote {len(results)} samples to {out} (seed {seed}, config {digest[:12]})")
    return work


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable({k: getattr(obj, k) for k in obj.__dataclass_fields__})
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _cmd_eval(a):
    net = _load_model(a.model, a.weights)
    names, streams, labels = read_dataset(a.in_dir, net.num_classes, a.width, a.height)
    T = _time_steps(a.time_steps, net)
    out = Path(a.out) if a.out else None
    if out is not None:
        _check_out(out, "--out", [Path(a.in_dir) / n for n in names] + [Path(a.in_dir) / LABELS_FILE])
    targets = [int(np.argmax(lbl)) for lbl in labels]
    cfg = RelPropConfig(mode=_resolve_mode(a.mode))

    def work():
        frames = [_frames_for(net, s, T) for s in streams]
        maps = _map_threads(lambda i: explain(net, frames[i], targets[i], a.kind, cfg), range(len(frames)), a.jobs)
        report = faithfulness(net, frames, maps, targets, jobs=a.jobs)
        text = report.to_csv()
        if out is None:
            sys.stdout.write(text)
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
            print(f"A.I. {report.average_increase:.2f}  A.D. {report.average_drop:.2f}  (n={report.n}) -> {out}")
    return work


_ARCHS = ("mlp", "convnet")


def _train_inputs(a):
    spec_raw = _read_json(a.spec, "--spec")
    cfg_raw = _read_json(a.config, "--config")
    model_raw = dict(cfg_raw.pop("model", {}))
    try:
        spec = SyntheticSpec(**spec_raw)
        cfg = TrainConfig(**cfg_raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"--spec/--config: {exc}") from None
    arch = model_raw.pop("type", "mlp")
    if arch not in _ARCHS:
        raise ValidationError(f"--config model.type must be one of {_ARCHS}, got {arch!r}")
    try:
        neuron = NeuronParams(**model_raw.pop("neuron", {}))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"--config model.neuron: {exc}") from None
    allowed = {"mlp": {"hidden"}, "convnet": {"hidden", "channels"}}[arch]
    extra = set(model_raw) - allowed
    if extra:
        raise ValidationError(f"--config model: unknown keys {sorted(extra)}")
    aug = None
    if a.augment_config:
        try:
            aug = AugmentConfig.from_dict(_read_json(a.augment_config, "--augment-config"))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"--augment-config {a.augment_config}: {exc}") from None
    return spec, cfg, arch, neuron, model_raw, aug


def _cmd_train(a):
    spec, cfg, arch, neuron, model_kw, aug = _train_inputs(a)
    seed = _seed(a.seed, cfg.seed)
    cfg.seed = seed
    if aug is not None:
        aug.seed = seed
    out = Path(a.out_dir)

    def work():
        train_set, test_set = generate_dataset(spec)
        shape = (2,) + tuple(spec.canvas)
        if arch == "mlp":
            net = build_mlp(shape, model_kw.get("hidden", 64), spec.classes, neuron, seed, cfg.time_steps)
        else:
            net = build_convnet(shape, model_kw.get("channels", 4), model_kw.get("hidden", 32),
                                spec.classes, neuron, seed, cfg.time_steps)
        progress = None
        if not a.quiet:
            progress = lambda r: print(  # noqa: E731
                f"epoch {r['epoch']:3d}  loss {r['loss']:.4f}  test acc {r['test_accuracy']:.3f}")
        result = train(net, (train_set, test_set), cfg, aug, progress)
        out.mkdir(parents=True, exist_ok=True)
        save_model_files(result.network, out / "model.json", out / "model.bin")
        write_log(result.history, out / "train_log.csv")
        print(f"final test accuracy {result.history[-1]['test_accuracy']:.3f}; model in {out}")
    return work


def _cmd_selftest(a):
    def work():
        results = run_all(quick=a.quick)
        for r in results:
            print(r.line(timing=a.timings))
        failed = [r.name for r in results if not r.passed]
        if failed:
            print(f"{len(failed)} suite(s) failed: {', '.join(failed)}")
            return 2
        print(f"all {len(results)} suites passed")
        return 0
    return work


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eventrpg", description="Relevance propagation and relevance-guided augmentation "
                                             "for spiking networks on event data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def geometry(sp):
        sp.add_argument("--width", type=_positive, help="sensor width for CSV input (default: inferred)")
        sp.add_argument("--height", type=_positive, help="sensor height for CSV input (default: inferred)")

    def model(sp, required=True):
        sp.add_argument("--model", required=required, help="model descriptor JSON")
        sp.add_argument("--weights", help="weight blob (default: descriptor path with .bin)")

    def relevance(sp):
        sp.add_argument("--mode", choices=("slrp", "sltrp"), default="slrp", type=str.lower)
        sp.add_argument("--kind", choices=MAP_KINDS, default="saliency")
        sp.add_argument("--time-steps", type=_positive, help="frames per sample (default: model's, else 4)")

    c = sub.add_parser("convert", help="events <-> csv/bin, or events -> frame tensor (.npy)")
    c.add_argument("--input", required=True)
    c.add_argument("--out", required=True, help="output path; extension picks the format")
    geometry(c)
    c.add_argument("--time-steps", type=_positive, help="frames for a .npy dump")
    c.add_argument("--frame-height", type=_positive)
    c.add_argument("--frame-width", type=_positive)
    c.add_argument("--binarize", action="store_true")
    c.set_defaults(handler=_cmd_convert)

    s = sub.add_parser("saliency", help="saliency/CAM map for one event file")
    model(s)
    s.add_argument("--input", required=True)
    relevance(s)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--target", type=int, help="class to explain (default: prediction)")
    s.add_argument("--tau", type=float, default=0.25, help="box threshold reported on stdout")
    s.add_argument("--stem", default="map")
    geometry(s)
    s.set_defaults(handler=_cmd_saliency)

    g = sub.add_parser("augment", help="EventRPG over a labelled directory")
    g.add_argument("--config", required=True, help="augmentation config JSON")
    model(g, required=False)
    g.add_argument("--in-dir", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV}, else config)")
    g.add_argument("--jobs", type=_positive, default=1)
    geometry(g)
    g.set_defaults(handler=_cmd_augment)

    e = sub.add_parser("eval", help="A.I./A.D. faithfulness CSV")
    model(e)
    e.add_argument("--in-dir", required=True)
    relevance(e)
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.add_argument("--jobs", type=_positive, default=1)
    geometry(e)
    e.set_defaults(handler=_cmd_eval)

    t = sub.add_parser("train", help="train on a synthetic dataset")
    t.add_argument("--spec", required=True, help="synthetic dataset spec JSON")
    t.add_argument("--config", required=True, help="training config JSON")
    t.add_argument("--augment-config", help="enable EventRPG with this config")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV}, else config)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(handler=_cmd_train)

    st = sub.add_parser("selftest", help="run the conservation/equivalence property suites")
    st.add_argument("--quick", action="store_true", help="smaller case counts")
    st.add_argument("--timings", action="store_true", help="also print wall-clock time per suite")
    st.set_defaults(handler=_cmd_selftest)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        work = args.handler(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        code = work()
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


def main() -> None:
    sys.exit(run())
