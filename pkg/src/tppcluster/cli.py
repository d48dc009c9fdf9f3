"""Command-line entry point: generate, train, evaluate, export-intensity.

Every command takes an optional JSON run configuration (``--config``),
``--set key=value`` overrides with dotted keys for nested sections, and a few
direct flags; flags win over ``--set``, which wins over the file. The fully
resolved configuration is written next to the outputs as
``<command>-config.json`` and can be fed back with ``--config``.

Output files
------------
dataset (generate)      one JSON object per line: id, label (-1 if unknown), T, timestamps
history.tsv (train)     iteration, sizes (comma separated), changed, loglik,
                        classifier_loss, purity, rand_index
timings.tsv (train)     iteration, wall_time
rounds.jsonl (train)    per-round imitation diagnostics: iteration, round, cluster,
                        disc_loss, surrogate_loss, mean_len
labels.tsv (train)      index, key, label of the final partition
checkpoints/iter_KKK/   policy_I.json, disc_I.json, classifier.json
metrics.json (evaluate) requested metrics plus the resolved config
intensity.tsv (export)  source, cluster, bin_center, rate
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import em, metrics, nn, sim
from .gail import disc_header
from .policy import policy_from_checkpoint, policy_header, rollout_batch

log = logging.getLogger("tppcluster")

OUT_ENV = "TPPCLUSTER_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class GenerateConfig:
    specs: list = field(default_factory=lambda: [{"kind": "sine"}, {"kind": "negative-sine"}])
    per_cluster: int = 200
    T: float = 100.0


@dataclass
class EvaluateConfig:
    metrics: list = field(default_factory=lambda: ["purity", "rand_index", "eid"])
    n_generated: int = 400
    labels: str | None = None  # predicted-label file; default: the run's labels.tsv
    consistency_trials: int = 10
    consistency_split: float = 0.5


@dataclass
class ExportConfig:
    n_generated: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    data: str | None = None
    out_dir: str | None = None
    workers: int | None = None
    dt: float = 5.0
    checkpoint: str | None = None  # iteration directory to evaluate; default: the latest
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    em: em.EmConfig = field(default_factory=em.desk_config)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    export: ExportConfig = field(default_factory=ExportConfig)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(out.get(k), dict) and isinstance(v, dict) else v
    return out


def _build(cls, doc: dict, where: str = ""):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {where or 'root'!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys {', '.join(where + k for k in unknown)}")
    kw = {}
    for name, value in doc.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            # partial sections override the section's default instance, not the class defaults
            value = _build(type(default), _merge(asdict(default), value), f"{where}{name}.")
        kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def _set_path(doc: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = dotted.split(".")
    node = doc
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    node[leaf] = value


def resolve_config(args) -> RunConfig:
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), raw)
    for flag in ("seed", "data", "out_dir", "workers"):
        v = getattr(args, flag, None)
        if v is not None:
            doc[flag] = v
    cfg = _build(RunConfig, doc)
    if cfg.out_dir is None:
        cfg.out_dir = os.environ.get(OUT_ENV, "runs")
    if cfg.workers is None:
        cfg.workers = os.cpu_count() or 1
    return cfg


def config_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc.pop("workers")  # does not affect any output
    return doc


def _write_config(cfg: RunConfig, command: str) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}-config.json").write_text(json.dumps(config_dict(cfg), indent=2, sort_keys=True) + "\n")


def _dataset_path(cfg: RunConfig) -> Path:
    return Path(cfg.data) if cfg.data else Path(cfg.out_dir) / "dataset.jsonl"


def _load_dataset(cfg: RunConfig) -> list[sim.EventSequence]:
    path = _dataset_path(cfg)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    data = sim.read_dataset(path)
    if not data:
        raise ConfigError(f"dataset is empty: {path}")
    return data


def _fmt(x) -> str:
    if x is None:
        return "NA"
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ----------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> int:
    g = cfg.generate
    specs = [sim.IntensitySpec.from_dict(s) for s in g.specs]
    data = sim.generate_dataset(specs, g.per_cluster, g.T, cfg.seed)
    path = _dataset_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    sim.write_dataset(path, data)
    _write_config(cfg, "generate")
    counts = np.bincount([s.label for s in data], minlength=len(specs))
    for k, c in enumerate(counts):
        print(f"cluster {k}\t{specs[k].kind}\t{c}")
    print(f"wrote {len(data)} sequences to {path}")
    return 0


def _iter_dir(out: Path, k: int) -> Path:
    return out / "checkpoints" / f"iter_{k:03d}"


def save_state(state: em.MixtureState, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, (p, d) in enumerate(zip(state.policies, state.discriminators)):
        nn.save_checkpoint(p, directory / f"policy_{i}.json", policy_header(p))
        nn.save_checkpoint(d, directory / f"disc_{i}.json", disc_header(d))
    c = state.classifier
    nn.save_checkpoint(c, directory / "classifier.json", {"model": "classifier", **c.config()})


def load_policies(directory: Path):
    files = sorted(directory.glob("policy_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise ConfigError(f"no policy checkpoints in {directory}")
    return [policy_from_checkpoint(nn.read_checkpoint(f)) for f in files]


def load_classifier(directory: Path) -> em.ClassifierModel:
    doc = nn.read_checkpoint(directory / "classifier.json")
    h = doc["header"]
    clf = em.ClassifierModel(h["n_clusters"], h["d"], h["cell"], h["input_scale"])
    nn.load_params_dict(clf, doc)
    return clf


def _latest_checkpoint(cfg: RunConfig) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    dirs = sorted((Path(cfg.out_dir) / "checkpoints").glob("iter_*"))
    if not dirs:
        raise ConfigError(f"no checkpoints under {cfg.out_dir}; run train first")
    return dirs[-1]


HISTORY_HEADER = "iteration\tsizes\tchanged\tloglik\tclassifier_loss\tpurity\trand_index\n"


def cmd_train(cfg: RunConfig) -> int:
    data = _load_dataset(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, "train")
    hist = open(out / "history.tsv", "w")
    timings = open(out / "timings.tsv", "w")
    rounds = open(out / "rounds.jsonl", "w")
    hist.write(HISTORY_HEADER)
    timings.write("iteration\twall_time\n")

    def on_round(k, logs):
        for i in sorted(logs):
            for r in logs[i]:
                rounds.write(json.dumps({"iteration": k, **asdict(r)}) + "\n")

    def on_iter(state, rec: em.IterationRecord):
        save_state(state, _iter_dir(out, rec.iteration))
        hist.write(
            "\t".join(
                [
                    str(rec.iteration),
                    ",".join(map(str, rec.sizes)),
                    _fmt(rec.changed),
                    _fmt(rec.loglik),
                    _fmt(rec.classifier_loss),
                    _fmt(rec.purity),
                    _fmt(rec.rand_index),
                ]
            )
            + "\n"
        )
        timings.write(f"{rec.iteration}\t{rec.wall_time:.3f}\n")
        for fh in (hist, timings, rounds):
            fh.flush()
        cp = "NA" if rec.purity is None else f"{rec.purity:.4f}"
        print(f"iteration {rec.iteration}\tsizes {rec.sizes}\tchanged {rec.changed:.4f}\tpurity {cp}", flush=True)

    try:
        state, history = em.rlpmm(data, cfg.em, cfg.seed, cfg.workers, callback=on_iter, round_callback=on_round)
    finally:
        for fh in (hist, timings, rounds):
            fh.close()
    keys = [em.sequence_key(s) for s in data]
    with open(out / "labels.tsv", "w") as fh:
        fh.write("index\tkey\tlabel\n")
        for j, (key, y) in enumerate(zip(keys, state.labels)):
            fh.write(f"{j}\t{key}\t{int(y)}\n")
    print(f"finished after {history[-1].iteration} iterations; outputs in {out}")
    return 0


def read_labels(path: Path) -> np.ndarray:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].split("\t")[-1] != "label":
        raise ConfigError(f"{path}: expected a tab-separated file whose last column is 'label'")
    return np.array([int(r.split("\t")[-1]) for r in rows[1:] if r.strip()])


def _policy_samples(policies, T: float, n: int, seed: int, tag: int):
    return [
        rollout_batch(p, T, n, np.random.default_rng(np.random.SeedSequence([seed, tag, i]))).sequences
        for i, p in enumerate(policies)
    ]


_EVAL_TAG, _EXPORT_TAG = 0xE7A1, 0xE4B0


def _consistency_runner(cfg: RunConfig):
    def runner(train, test, seed):
        state, _ = em.rlpmm(train, cfg.em, seed, cfg.workers)
        return em.hard_labels(em.classify(state.classifier, test))

    return runner


def cmd_evaluate(cfg: RunConfig) -> int:
    data = _load_dataset(cfg)
    ev = cfg.evaluate
    unknown = set(ev.metrics) - {"purity", "rand_index", "eid", "consistency"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")
    true = [s.label for s in data]
    has_truth = all(t is not None for t in true)
    report: dict = {}
    if {"purity", "rand_index"} & set(ev.metrics):
        labels_path = Path(ev.labels) if ev.labels else Path(cfg.out_dir) / "labels.tsv"
        if not labels_path.exists():
            raise ConfigError(f"label file not found: {labels_path}")
        pred = read_labels(labels_path)
        if pred.size != len(data):
            raise ConfigError(f"{pred.size} labels for {len(data)} sequences")
        if not has_truth:
            raise ConfigError("purity and rand_index need a labelled dataset")
        res = metrics.ClusteringResult(pred, np.array(true))
        if "purity" in ev.metrics:
            report["purity"] = metrics.purity(res)
        if "rand_index" in ev.metrics:
            report["rand_index"] = metrics.rand_index(res)
    if "eid" in ev.metrics:
        if not has_truth:
            raise ConfigError("eid needs a labelled dataset")
        ckpt = _latest_checkpoint(cfg)
        gen = _policy_samples(load_policies(ckpt), data[0].T, ev.n_generated, cfg.seed, _EVAL_TAG)
        per, match = metrics.matched_eid(gen, data, cfg.dt)
        report["eid"] = {"per_class": per.tolist(), "matched_policy": match, "mean": float(per.mean())}
        report["checkpoint"] = str(ckpt)
    if "consistency" in ev.metrics:
        report["consistency"] = metrics.clustering_consistency(
            _consistency_runner(cfg), data, ev.consistency_trials, ev.consistency_split, cfg.seed
        )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, "evaluate")
    doc = {"metrics": report, "config": config_dict(cfg)}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for k, v in report.items():
        print(f"{k}\t{json.dumps(v)}")
    return 0


def cmd_export_intensity(cfg: RunConfig) -> int:
    data = _load_dataset(cfg)
    T = data[0].T
    rows = []
    labels = [s.label for s in data]
    if all(y is not None for y in labels):
        for k in sorted(set(labels)):
            emp = sim.empirical_intensity([s for s in data if s.label == k], cfg.dt, T)
            rows += [("truth", k, c, r) for c, r in zip(emp.centers, emp.rates)]
    ckpt = _latest_checkpoint(cfg)
    gen = _policy_samples(load_policies(ckpt), T, cfg.export.n_generated, cfg.seed, _EXPORT_TAG)
    for i, seqs in enumerate(gen):
        emp = sim.empirical_intensity(seqs, cfg.dt, T)
        rows += [("policy", i, c, r) for c, r in zip(emp.centers, emp.rates)]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, "export-intensity")
    with open(out / "intensity.tsv", "w") as fh:
        fh.write("source\tcluster\tbin_center\trate\n")
        for src, k, c, r in rows:
            fh.write(f"{src}\t{k}\t{_fmt(c)}\t{_fmt(r)}\n")
    print(f"wrote {len(rows)} rows to {out / 'intensity.tsv'}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-intensity": cmd_export_intensity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tppcluster", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted, JSON value)")
        p.add_argument("--seed", type=int)
        p.add_argument("--data", help="dataset file (default: OUT/dataset.jsonl)")
        p.add_argument("--out", dest="out_dir", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--workers", type=int, help="parallel M-step workers (default: all cores)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error\t{args.command}\t{type(exc).__name__}\t{msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
