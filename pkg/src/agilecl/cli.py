"""Command line: ``run <config>``, ``report <results...>``, ``dump-latents <checkpoint> <config> <out>``.

Configs are INI files with ``[stream]``, ``[train]`` and ``[experiment]``
sections. ``AGILECL_OUTPUT_DIR`` overrides ``experiment.output_dir``.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import re
import sys
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from agilecl import __version__
from agilecl.metrics import run_metrics
from agilecl.model import load_checkpoint, param_count, save_checkpoint
from agilecl.stream import StreamConfig, make_split_gaussian_stream
from agilecl.train import (METHODS, LossWeights, TrainConfig, method_config, train_stream)

log = logging.getLogger("agilecl")

OUTPUT_ENV = "AGILECL_OUTPUT_DIR"
RESULTS_FORMAT = "agilecl-results/1"
AGGREGATE_FORMAT = "agilecl-aggregate/1"
REPORT_COLUMNS = ("class_il", "task_il", "forgetting", "tradeoff", "ece")
PERCENT_METRICS = {"class_il", "task_il", "forgetting", "stability", "plasticity", "tradeoff",
                   "ece", "confusion_diagonal", "confusion_last_column"}


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending line."""


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[str, ...] = ("agile", "er", "sgd")
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "results"

    def to_dict(self) -> dict:
        return {"stream": self.stream.to_dict(), "train": self.train.to_dict(),
                "experiment": {"methods": list(self.methods), "seeds": list(self.seeds),
                               "output_dir": self.output_dir}}

    def to_ini(self) -> str:
        """Every value spelled out, defaults included."""
        train = self.train.to_dict()
        weights = train.pop("weights")
        train.pop("seed")
        lines = ["[stream]"]
        lines += [f"{k} = {_ini_value(v)}" for k, v in self.stream.to_dict().items()]
        lines += ["", "[train]"]
        lines += [f"{k} = {_ini_value(v)}" for k, v in {**train, **weights}.items()]
        lines += ["", "[experiment]",
                  f"methods = {', '.join(self.methods)}",
                  f"seeds = {', '.join(str(s) for s in self.seeds)}",
                  f"output_dir = {self.output_dir}"]
        return "\n".join(lines) + "\n"


def _ini_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------- config

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = no
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = no
    return where


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    lines = _key_lines(text)

    def loc(section: str, key: str = "") -> str:
        return f"{source}:{lines.get((section, key), 0)}"

    allowed = {"stream", "train", "experiment"}
    for section in parser.sections():
        if section not in allowed:
            raise ConfigError(f"{loc(section)}: unknown section [{section}]")

    stream_defaults = StreamConfig().to_dict()
    train_defaults = TrainConfig().to_dict()
    weight_defaults = train_defaults.pop("weights")
    train_defaults.pop("seed")
    schema = {"stream": stream_defaults, "train": {**train_defaults, **weight_defaults},
              "experiment": {"methods": "", "seeds": "", "output_dir": ""}}
    values: dict[str, dict] = {s: {} for s in allowed}
    for section in allowed & set(parser.sections()):
        for key, raw in parser.items(section):
            if key not in schema[section]:
                raise ConfigError(f"{loc(section, key)}: unknown key {key!r} in [{section}]")
            values[section][key] = _coerce(raw, schema[section][key], loc(section, key))

    weights = {k: values["train"].pop(k) for k in list(values["train"]) if k in weight_defaults}
    try:
        stream = StreamConfig(**values["stream"])
    except ValueError as exc:
        raise ConfigError(f"{loc('stream')}: {exc}") from None
    try:
        train = TrainConfig(weights=LossWeights(**weights), **values["train"])
    except ValueError as exc:
        raise ConfigError(f"{loc('train')}: {exc}") from None

    exp = values["experiment"]
    methods = tuple(m.strip() for m in exp.get("methods", "agile, er, sgd").split(",") if m.strip())
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"{loc('experiment', 'methods')}: unknown method {m!r}; "
                              f"choose from {', '.join(METHODS)}")
    if not methods or len(set(methods)) != len(methods):
        raise ConfigError(f"{loc('experiment', 'methods')}: methods must be non-empty and distinct")
    try:
        seeds = tuple(int(s) for s in exp.get("seeds", "0").split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{loc('experiment', 'seeds')}: seeds must be integers") from None
    if not seeds or len(set(seeds)) != len(seeds) or min(seeds) < 0:
        raise ConfigError(f"{loc('experiment', 'seeds')}: seeds must be distinct non-negative integers")
    return ExperimentConfig(stream, train, methods, seeds, exp.get("output_dir", "results"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}:0: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


def output_dir_for(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


# ------------------------------------------------------------------- run

def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def run_one(cfg: ExperimentConfig, method: str, seed: int, out: Path, stream=None) -> dict:
    """Train one (method, seed) pair and write its results, checkpoint and tables."""
    stream = stream or make_split_gaussian_stream(cfg.stream)
    tcfg = replace(method_config(cfg.train, method), seed=seed)
    model, ema, runlog = train_stream(tcfg, stream)
    inference = ema.model if ema is not None else model
    metrics = run_metrics(inference, stream, runlog.acc_class_il, runlog.acc_task_il,
                          runlog.epoch_trace if ema is not None else None)
    tag = f"{method}-seed{seed}"
    doc = {
        "format": RESULTS_FORMAT,
        "method": method,
        "seed": seed,
        "config": cfg.to_dict(),
        "train_config": tcfg.to_dict(),
        "metrics": metrics["scalars"],
        "param_counts": param_count(model),
        "runlog": runlog.to_dict(),
        "reliability": metrics["reliability"].to_dict(),
        "confusion": metrics["confusion"].counts.tolist(),
    }
    _dump_json(out / f"{tag}.json", doc)
    (out / f"{tag}.confusion.tsv").write_text(metrics["confusion"].to_tsv(), encoding="utf-8")
    (out / f"{tag}.reliability.tsv").write_text(metrics["reliability"].to_tsv(), encoding="utf-8")
    save_checkpoint(out / f"{tag}.ckpt.json", model, ema,
                    {**cfg.to_dict(), "method": method, "seed": seed})
    return doc


def _mean_std(values: list) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def summarize(runs: list[dict]) -> dict:
    """Seed-wise mean and population std of every scalar metric, per method.

    ``summary`` holds the rounded numbers the report prints (percent, 2 dp).
    """
    by_method: dict[str, list[dict]] = {}
    for r in runs:
        by_method.setdefault(r["method"], []).append(r)
    out = {}
    for method, rs in by_method.items():
        keys = list(rs[0]["metrics"])
        stats = {k: _mean_std([r["metrics"][k] for r in rs]) for k in keys}
        summary = {}
        for k in REPORT_COLUMNS:
            s = stats[k]
            scale = 100.0 if k in PERCENT_METRICS else 1.0
            summary[k] = None if s["mean"] is None else {
                "mean": round(scale * s["mean"], 2), "std": round(scale * s["std"], 2)}
        out[method] = {"seeds": [r["seed"] for r in rs], "metrics": stats, "summary": summary,
                       "per_seed": {k: [r["metrics"][k] for r in rs] for k in keys},
                       "param_counts": rs[0]["param_counts"]}
    return out


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> tuple[dict, list[str]]:
    out = Path(out) if out is not None else output_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(cfg.to_ini(), encoding="utf-8")
    stream = make_split_gaussian_stream(cfg.stream)
    runs, failed = [], []
    for method in cfg.methods:
        for seed in cfg.seeds:
            tag = f"{method}-seed{seed}"
            log.info("running %s", tag)
            try:
                runs.append(run_one(cfg, method, seed, out, stream))
            except Exception:
                failed.append(tag)
                (out / f"{tag}.FAILED").write_text(traceback.format_exc(), encoding="utf-8")
                log.error("run %s failed; traceback in %s.FAILED", tag, tag)
    aggregate = {"format": AGGREGATE_FORMAT, "version": __version__, "config": cfg.to_dict(),
                 "methods": summarize(runs), "failed": failed, "complete": not failed}
    _dump_json(out / "aggregate.json", aggregate)
    return aggregate, failed


# ---------------------------------------------------------------- report

def _load_results(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: unreadable results file ({exc})") from None
    if doc.get("format") == AGGREGATE_FORMAT:
        return doc["methods"]
    if doc.get("format") == RESULTS_FORMAT:
        return summarize([doc])
    raise ValueError(f"{path}: not an agilecl results file")


def format_report(methods: dict) -> str:
    header = ["method", "class-il", "task-il", "forgetting", "trade-off", "ece", "seeds"]

    def cell(s, k):
        v = s["summary"][k]
        if v is None:
            return "n/a"
        return f"{v['mean']:.2f} ± {v['std']:.2f}" if k in ("class_il", "task_il") else f"{v['mean']:.2f}"

    order = sorted(methods, key=lambda m: (-methods[m]["summary"]["class_il"]["mean"], m))
    rows = [[m] + [cell(methods[m], k) for k in REPORT_COLUMNS] + [str(len(methods[m]["seeds"]))]
            for m in order]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                              for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header)] + [fmt(r) for r in rows]) + "\n"


def report(paths) -> str:
    merged: dict = {}
    for p in paths:
        for method, entry in _load_results(Path(p)).items():
            if method in merged:
                raise ValueError(f"{p}: method {method!r} appears in more than one results file")
            merged[method] = entry
    return format_report(merged)


# ---------------------------------------------------------- latent dumps

def dump_latents(checkpoint, config, out) -> tuple[Path, Path]:
    """Write ``task, class, z_e*delta_task`` rows for every test sample, plus the deltas."""
    model, ema, _ = load_checkpoint(checkpoint)
    cfg = load_config(config)
    m = ema.model if ema is not None else model
    mc, sc = m.cfg, cfg.stream
    if (mc.input_dim, mc.n_tasks, mc.classes_per_task) != (sc.input_dim, sc.n_tasks,
                                                            sc.classes_per_task):
        raise ValueError(f"checkpoint expects input_dim={mc.input_dim}, tasks={mc.n_tasks}, "
                         f"J={mc.classes_per_task}; config has input_dim={sc.input_dim}, "
                         f"tasks={sc.n_tasks}, J={sc.classes_per_task}")
    if m.attention is None:
        raise ValueError("checkpoint has no task attention; latents are z_e * delta")
    stream = make_split_gaussian_stream(sc)
    x, y = stream.test_set(m.current_task)
    tasks = stream.task_of(y)
    z = m.latent(x, tasks)
    out = Path(out)
    lines = ["task\tclass\t" + "\t".join(f"z{k}" for k in range(z.shape[1]))]
    lines += [f"{t}\t{c}\t" + "\t".join(repr(float(v)) for v in row)
              for t, c, row in zip(tasks, y, z)]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    delta_path = out.with_name(out.name + ".deltas")
    deltas = [p.data[0] for p in m.projections]
    delta_path.write_text("".join(f"{i}\t" + "\t".join(repr(float(v)) for v in d) + "\n"
                                  for i, d in enumerate(deltas)), encoding="utf-8")
    return out, delta_path


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agilecl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"agilecl {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="train every (method, seed) in a config")
    r.add_argument("config")
    p = sub.add_parser("report", help="comparison table from results files")
    p.add_argument("results", nargs="+")
    d = sub.add_parser("dump-latents", help="write z_e*delta latents and the delta vectors")
    d.add_argument("checkpoint")
    d.add_argument("config")
    d.add_argument("out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for stream in (sys.stdout, sys.stderr):
        if hasattr(stream, "reconfigure"):
            stream.reconfigure(encoding="utf-8")
    try:
        if args.verb == "run":
            cfg = load_config(args.config)
            out = output_dir_for(cfg)
            _, failed = run_experiment(cfg, out)
            if failed:
                print(f"agilecl: {len(failed)} run(s) failed: {', '.join(failed)}", file=sys.stderr)
                return 1
            print(f"results written to {out}")
        elif args.verb == "report":
            sys.stdout.write(report(args.results))
        else:
            out, deltas = dump_latents(args.checkpoint, args.config, args.out)
            print(f"latents written to {out} and {deltas}")
    except ConfigError as exc:
        print(f"agilecl: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"agilecl: error: {exc}", file=sys.stderr)
        return 2
    return 0
