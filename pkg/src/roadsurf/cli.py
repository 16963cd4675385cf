"""``roadsurf`` command line: simulate, train, run, eval, bench.

Configuration is layered: built-in defaults, then an optional JSON file given
with ``--config``, then explicit flags. The config file may hold the sections
``corpus``, ``train``, ``fusion`` and ``roi`` (keyword arguments of the
matching config classes), ``profiles`` (a path or an inline profile mapping),
``scenario`` (a path or an inline scenario) and a top-level ``seed``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .evaluation import (
    Pipeline,
    ablation_velocity,
    bench_latency,
    dump_records,
    evaluate,
    evaluate_streams,
    format_report,
    knn_baseline,
)
from .features import CLASS_NAMES, DatasetFormatError
from .fusion import FusionConfig
from .network import ModelFormatError, TrainConfig, load_model, save_model, train
from .pointcloud import Region, RoiConfig, StreamFormatError, read_frames, write_frames
from .scg import NonFiniteLossError
from .synthgen import (
    Corpus,
    CorpusConfig,
    ScenarioSpec,
    default_profiles,
    default_scenario,
    generate_corpus,
    generate_stream,
    load_profiles,
    load_scenario,
    profiles_from_dict,
)

log = logging.getLogger("roadsurf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REGION_CHOICES = [r.name for r in Region] + ["all"]


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration -------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return raw


def _section(cls, raw: dict, name: str, **overrides):
    """Build a frozen config dataclass from defaults < file section < flags."""
    section = raw.get(name, {}) or {}
    if not isinstance(section, dict):
        raise DataError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise DataError(f"config section '{name}': unknown keys {sorted(unknown)}")
    kw = dict(section)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("classes", "hidden"):
        if key in kw and isinstance(kw[key], list):
            kw[key] = tuple(kw[key])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"config section '{name}': {exc}") from exc


def _seed(args, raw: dict) -> int | None:
    return args.seed if args.seed is not None else raw.get("seed")


def _profiles(raw: dict):
    spec = raw.get("profiles")
    if spec is None:
        return default_profiles()
    try:
        return load_profiles(spec) if isinstance(spec, str) else profiles_from_dict(spec)
    except FileNotFoundError as exc:
        raise DataError(f"profile file not found: {spec}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad profiles: {exc}") from exc


def _scenario(args, raw: dict, seed: int | None) -> ScenarioSpec:
    spec = args.scenario if args.scenario is not None else raw.get("scenario")
    try:
        if spec is None:
            sc = default_scenario(seed or 0)
        elif isinstance(spec, str):
            sc = load_scenario(spec)
        else:
            sc = ScenarioSpec.from_dict(spec)
    except FileNotFoundError as exc:
        raise DataError(f"scenario file not found: {spec}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad scenario: {exc}") from exc
    return replace(sc, seed=seed) if seed is not None else sc


def _fusion_cfg(args, raw: dict) -> FusionConfig:
    return _section(FusionConfig, raw, "fusion", literal_normalizer=True if args.eq11_literal else None)


def _regions(name: str) -> list[Region]:
    return list(Region) if name == "all" else [Region[name]]


def _load_models(model_dir: str) -> dict[Region, Any]:
    d = Path(model_dir)
    if not d.is_dir():
        raise DataError(f"model directory not found: {model_dir}")
    models = {}
    for r in Region:
        path = d / f"{r.name}.rsnm"
        if not path.exists():
            raise DataError(f"missing model file {path}")
        models[r] = load_model(path)
    return models


def _load_corpus(path: str) -> Corpus:
    if not Path(path, "corpus.json").exists():
        raise DataError(f"no corpus at {path}")
    return Corpus.load(path)


def _write_atomic_dir(out: Path, fill) -> None:
    """Populate a temp dir next to ``out`` and move it into place on success."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        fill(tmp)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _write_atomic_file(out: Path, text: str) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, out)


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    raw = _load_config(args.config)
    seed = _seed(args, raw)
    corpus_cfg = _section(CorpusConfig, raw, "corpus", seed=seed)
    roi = _section(RoiConfig, raw, "roi")
    profiles = _profiles(raw)
    scenario = _scenario(args, raw, seed)  # validated before anything is written

    out = Path(args.out)

    def fill(tmp: Path) -> None:
        corpus = generate_corpus(corpus_cfg, profiles, roi)
        corpus.save(tmp)
        if not args.no_stream:
            write_frames(tmp / "stream.jsonl", generate_stream(scenario, profiles, roi))
            (tmp / "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2))
        for name, ds in (("train", corpus.train), ("val", corpus.val)):
            counts = np.bincount(ds.labels, minlength=len(CLASS_NAMES))
            print(f"{name}: " + " ".join(f"{n}={c}" for n, c in zip(CLASS_NAMES, counts)))

    _write_atomic_dir(out, fill)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _load_config(args.config)
    cfg = _section(TrainConfig, raw, "train", rng_seed=_seed(args, raw), max_epochs=args.epochs)
    corpus = _load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in _regions(args.region):
        model = train(corpus.train.for_region(r), corpus.val.for_region(r), cfg, region=r)
        path = out / f"{r.name}.rsnm"
        save_model(model, path)
        best = min(h["val_loss"] for h in model.history)
        print(f"{r.name}: {len(model.history)} epochs, best val loss {best:.5f} -> {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    raw = _load_config(args.config)
    fusion = _fusion_cfg(args, raw)
    roi = _section(RoiConfig, raw, "roi")
    models = _load_models(args.models)
    frames = read_frames(args.stream)
    results = Pipeline(models, fusion, roi).run(frames)
    text = dump_records(results)
    if args.out:
        _write_atomic_file(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    raw = _load_config(args.config)
    fusion = _fusion_cfg(args, raw)
    models = _load_models(args.models)
    corpus = _load_corpus(args.corpus)
    near = [r for r in _regions(args.region) if r.is_near] or [Region.LN, Region.RN]
    report: dict[str, Any] = {}
    csvs: dict[str, str] = {}

    streams = evaluate_streams(Pipeline(models, fusion), corpus.val_streams)
    for r in near:
        key = "twm" if args.baseline == "twm" else "fused"
        cm, rep = streams[r]["raw" if key == "twm" else "final"]
        report.setdefault(r.name, {})[key] = rep.to_dict()
        csvs[f"{r.name}_{key}"] = cm.to_csv()
        print(format_report(f"{r.name} {key}", cm, rep))
        if args.baseline == "knn":
            cm, rep = evaluate(knn_baseline(corpus.train.for_region(r)), corpus.val.for_region(r))
            report[r.name]["knn"] = rep.to_dict()
            csvs[f"{r.name}_knn"] = cm.to_csv()
            print(format_report(f"{r.name} knn", cm, rep))

    if args.ablation == "velocity":
        tcfg = _section(TrainConfig, raw, "train", rng_seed=_seed(args, raw), max_epochs=args.epochs)
        for res in ablation_velocity(corpus, tcfg, near, models):
            report[res.region.name]["ablation_velocity"] = {
                "with": res.with_velocity.accuracy,
                "without": res.without_velocity.accuracy,
                "gap": res.gap,
                "dims": list(res.dims),
            }
            print(f"{res.region.name} velocity ablation: {100 * res.with_velocity.accuracy:.1f}% "
                  f"with vs {100 * res.without_velocity.accuracy:.1f}% without")

    if args.out:
        out = Path(args.out)
        _write_atomic_file(out, json.dumps(report, indent=2) + "\n")
        if args.emit_csv:
            for name, text in csvs.items():
                _write_atomic_file(out.with_name(f"{out.stem}_{name}.csv"), text)
    elif args.emit_csv:
        for name, text in csvs.items():
            print(f"# {name}\n{text}", end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    raw = _load_config(args.config)
    seed = _seed(args, raw)
    fusion = _fusion_cfg(args, raw)
    roi = _section(RoiConfig, raw, "roi")
    models = _load_models(args.models)
    if args.stream:
        frames = read_frames(args.stream)
    else:
        duration = (args.frames + args.warmup) / 10.0
        frames = generate_stream(default_scenario(seed or 0, duration), _profiles(raw), roi)
    rep = bench_latency(Pipeline(models, fusion, roi), frames, args.warmup)
    text = json.dumps(rep.to_dict(), indent=2)
    print(text)
    if args.out:
        _write_atomic_file(Path(args.out), text + "\n")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config file)")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="roadsurf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"roadsurf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a labelled corpus and a demo stream")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--scenario", default=None, help="scenario JSON for the demo stream")
    s.add_argument("--no-stream", action="store_true", help="skip the demo point-cloud stream")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train region networks")
    t.add_argument("--corpus", required=True)
    t.add_argument("--region", choices=REGION_CHOICES, default="all")
    t.add_argument("--out", required=True, help="model directory")
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", parents=[common], help="classify a point-cloud stream frame by frame")
    r.add_argument("--models", required=True)
    r.add_argument("--stream", required=True, help="JSON-lines frame file")
    r.add_argument("--out", default=None, help="JSON-lines output (default stdout)")
    r.add_argument("--eq11-literal", action="store_true", help="use the literal, unclamped weight normaliser")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="score models on the held-out corpus")
    e.add_argument("--models", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--region", choices=REGION_CHOICES, default="all")
    e.add_argument("--baseline", choices=["knn", "twm"], default=None)
    e.add_argument("--ablation", choices=["velocity"], default=None)
    e.add_argument("--epochs", type=int, default=None, help="epochs for the ablation retraining")
    e.add_argument("--emit-csv", action="store_true", help="also write confusion counts as CSV")
    e.add_argument("--out", default=None, help="JSON report path")
    e.add_argument("--eq11-literal", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="per-frame latency of the full pipeline")
    b.add_argument("--models", required=True)
    b.add_argument("--stream", default=None, help="frame file (default: synthetic drive)")
    b.add_argument("--frames", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--out", default=None)
    b.add_argument("--eq11-literal", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"roadsurf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, StreamFormatError, DatasetFormatError, ModelFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"roadsurf: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
