"""Command-line entry point: ``protonesy {train,eval,count-rs,gradcheck,gen-synth}``.

Exit status: 0 success, 1 invalid input, 2 runtime or budget error,
3 a check did not pass.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import episodic as ep
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import run_suite, sign_flip
from .knowledge import EnumerationLimitError
from .metrics import (
    METRIC_NAMES,
    MetricReport,
    aggregate,
    confusion_csv,
    evaluate,
    metrics_table_csv,
    read_confusion_csv,
    read_metrics_table,
    report_csv,
)
from .semloss import UnsatisfiableKnowledge
from .shortcuts import SearchBudgetExceeded, bundled_task_path, count_optima, load_task_spec
from .tasks import (
    EVEN_ODD_SIZES,
    IdxFormatError,
    build_even_odd,
    build_support,
    find_mnist,
    gen_synthetic,
    load_idx,
    load_synthetic,
    save_synthetic,
)

log = logging.getLogger("protonesy")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
DEFAULT_SEEDS = (0, 128, 256)
TASKS = ("synthetic", "mnist_even_odd")
MODELS = ("sl_pnet", "sl_baseline")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    task: str = "synthetic"
    model: str = "sl_pnet"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out: str = "runs/default"
    data: str | None = None  # directory written by gen-synth
    mnist_dir: str | None = None
    data_seed: int = 0
    labels_per_class: int = 1
    support_classes: tuple[int, ...] | None = None
    synth_d: int = 20
    synth_separation: float = 10.0
    synth_variance: float = 1.0
    synth_sizes: tuple[int, ...] = (1000, 200, 200)
    mnist_sizes: tuple[int, ...] = EVEN_ODD_SIZES
    episode: ep.EpisodeConfig = field(default_factory=ep.EpisodeConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["episode"] = asdict(self.episode)
        d["episode"].pop("seed")
        return d


def _int_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    if s.startswith("[") and s.endswith("]"):
        s = s[1:-1]
    items = [t.strip() for t in s.split(",") if t.strip()]
    return tuple(int(t) for t in items)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_str(s: str):
    return None if s.strip().lower() in ("", "none") else s.strip()


def _opt_int_list(s: str):
    return None if s.strip().lower() in ("", "none", "all") else _int_list(s)


_RUN_KEYS = {
    "task": str, "model": str, "seeds": _int_list, "out": str, "data": _opt_str,
    "mnist_dir": _opt_str, "data_seed": int, "labels_per_class": int,
    "support_classes": _opt_int_list, "synth_d": int, "synth_separation": float,
    "synth_variance": float, "synth_sizes": _int_list, "mnist_sizes": _int_list,
}
_EPISODE_KEYS = {
    "classes_per_episode": int, "support_per_class": int, "query_per_class": int,
    "episodes_per_epoch": int, "epochs": int, "batch_size": int, "w_sl": float,
    "lr": float, "weight_decay": float, "lr_decay": float, "beta1": float, "beta2": float,
    "adam_eps": float, "embed_dim": int, "hidden": _int_list, "p": float,
    "shared_extractor": _bool,
}


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment, lists use ``[a, b]`` or ``a,b``."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def build_run_config(raw: dict[str, str]) -> RunConfig:
    run_kw, ep_kw = {}, {}
    for key, value in raw.items():
        if key in _RUN_KEYS:
            target, conv = run_kw, _RUN_KEYS[key]
        elif key in _EPISODE_KEYS:
            target, conv = ep_kw, _EPISODE_KEYS[key]
        else:
            raise ConfigError(f"config.{key}: unknown key")
        try:
            target[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"config.{key}: {exc}") from None
    cfg = RunConfig(**run_kw)
    try:
        cfg.episode = ep.EpisodeConfig(**ep_kw)
    except ValueError as exc:
        raise ConfigError(f"config.episode: {exc}") from None
    if cfg.task not in TASKS:
        raise ConfigError(f"config.task: expected one of {TASKS}, got {cfg.task!r}")
    if cfg.model not in MODELS:
        raise ConfigError(f"config.model: expected one of {MODELS}, got {cfg.model!r}")
    if not cfg.seeds:
        raise ConfigError("config.seeds: at least one seed is required")
    if cfg.labels_per_class < 1:
        raise ConfigError("config.labels_per_class: must be at least 1")
    if len(cfg.synth_sizes) != 3 or len(cfg.mnist_sizes) != 3:
        raise ConfigError("config.synth_sizes/mnist_sizes: three split sizes are required")
    if cfg.task == "mnist_even_odd" and not cfg.mnist_dir:
        raise ConfigError("config.mnist_dir: required for the mnist_even_odd task")
    for key in ("data", "mnist_dir"):
        path = getattr(cfg, key)
        if path is not None and not Path(path).exists():
            raise ConfigError(f"config.{key}: {path} does not exist")
    return cfg


def _raw_from_args(args) -> dict[str, str]:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"--config: {path} does not exist")
        raw.update(parse_config_text(path.read_text(), str(path)))
    for flag, key in (("task", "task"), ("model", "model"), ("seed", "seeds"), ("out", "out"),
                      ("mnist_dir", "mnist_dir"), ("data", "data")):
        val = getattr(args, flag, None)
        if val is not None:
            raw[key] = val
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return raw


# ---------------------------------------------------------------------------
# Train / eval
# ---------------------------------------------------------------------------


def load_splits(cfg: RunConfig) -> dict:
    if cfg.task == "synthetic":
        if cfg.data:
            return load_synthetic(cfg.data).splits
        return gen_synthetic(h=10, d=cfg.synth_d, separation=cfg.synth_separation,
                             sizes=cfg.synth_sizes, seed=cfg.data_seed,
                             variance=cfg.synth_variance).splits
    files = find_mnist(cfg.mnist_dir)
    train_store = load_idx(*files["train"])
    test_store = load_idx(*files["test"])
    return build_even_odd(train_store, test_store, seed=cfg.data_seed, sizes=cfg.mnist_sizes)


def _episode_cfg(cfg: RunConfig, seed: int) -> ep.EpisodeConfig:
    d = asdict(cfg.episode)
    d["seed"] = seed
    return ep.EpisodeConfig(**d)


def train_seed(cfg: RunConfig, splits: dict, seed: int):
    """Train one seed; returns (result, report, confusion)."""
    ecfg = _episode_cfg(cfg, seed)
    train_ds, test_ds = splits["train"], splits["test"]
    if cfg.model == "sl_pnet":
        support = build_support(train_ds, cfg.labels_per_class, seed=seed, classes=cfg.support_classes)
        result = ep.train(train_ds, support, ecfg, val=splits.get("val"))
    else:
        result = ep.train_baseline(train_ds, ecfg, val=splits.get("val"))
    pred = ep.predict_concepts(result.model, test_ds)
    report, cm = evaluate(pred, test_ds.concepts, test_ds.labels, n_classes=10)
    return result, report, cm


def save_model(path: Path, model, meta: dict) -> None:
    if isinstance(model, ep.PNetModel):
        extractors = {f"head{h}": (s, p) for h, (s, p) in enumerate(zip(model.specs, model.params))}
        meta = {**meta, "kind": "sl_pnet", "group_extractor": list(model.group_extractor),
                "n_classes": model.n_classes}
        save_checkpoint(path, banks={"final": model.bank}, extractors=extractors, meta=meta)
    else:
        meta = {**meta, "kind": "sl_baseline", "n_classes": model.n_classes}
        save_checkpoint(path, extractors={"classifier": (model.spec, model.params)}, meta=meta)


def load_model(path: Path):
    banks, extractors, meta = load_checkpoint(path)
    if meta.get("kind") == "sl_pnet":
        heads = sorted(extractors, key=lambda n: int(n[4:]))
        specs = [extractors[h][0] for h in heads]
        params = [extractors[h][1] for h in heads]
        model = ep.PNetModel(specs, params, tuple(meta["group_extractor"]), meta["n_classes"], banks["final"])
    else:
        spec, params = extractors["classifier"]
        model = ep.BaselineModel(spec, params, meta["n_classes"])
    return model, meta


def _epochs_csv(epochs: list[dict]) -> str:
    cols = ("epoch", "proto_loss", "nesy_loss", "combined")
    lines = [",".join(cols)]
    for rec in epochs:
        lines.append(",".join(str(rec["epoch"]) if c == "epoch" else repr(float(rec[c])) for c in cols))
    return "\n".join(lines) + "\n"


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    splits = load_splits(cfg)
    rows, per_seed = [], {}
    for seed in sorted(set(cfg.seeds)):
        log.info("training %s on %s, seed %d", cfg.model, cfg.task, seed)
        result, report, cm = train_seed(cfg, splits, seed)
        sdir = out / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        (sdir / "report.csv").write_text(report_csv(report))
        (sdir / "confusion.csv").write_text(confusion_csv(cm))
        (sdir / "epochs.csv").write_text(_epochs_csv(result.epochs))
        (sdir / "epochs.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.epochs))
        save_model(sdir / "checkpoint.npz", result.model, {"seed": seed})
        rows.append((seed, report))
        per_seed[str(seed)] = {"epochs": result.epochs, "report": report.to_dict()}
        log.info("seed %d: %s", seed, " ".join(f"{k}={getattr(report, k):.4f}" for k in METRIC_NAMES))
    (out / "metrics.csv").write_text(metrics_table_csv(rows))
    agg = aggregate([r for _, r in rows])
    agg_lines = ["metric,mean,std"] + [f"{k},{m!r},{s!r}" for k, (m, s) in agg.items()]
    (out / "aggregate.csv").write_text("\n".join(agg_lines) + "\n")
    record = {
        "config": cfg.to_dict(),
        "seeds": per_seed,
        "aggregate": {k: {"mean": m, "std": s} for k, (m, s) in agg.items()},
        "wall_clock_s": time.perf_counter() - start,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(_format_table([(str(s), r.as_row()) for s, r in rows], agg))
    return EXIT_OK


def _format_table(rows, agg) -> str:
    lines = ["seed    " + " ".join(f"{k:>8}" for k in METRIC_NAMES)]
    for seed, vals in rows:
        lines.append(f"{seed:<8}" + " ".join(f"{vals[k]:8.4f}" for k in METRIC_NAMES))
    lines.append("mean+-sd " + " ".join(f"{agg[k][0]:.3f}+-{agg[k][1]:.3f}" for k in METRIC_NAMES))
    return "\n".join(lines)


def _report_from_cm_check(row: dict, cm_counts: np.ndarray) -> list[str]:
    problems = []
    total = cm_counts.sum()
    acc = float(np.trace(cm_counts) / total) if total else float("nan")
    if acc != row["acc_c"]:
        problems.append(f"acc_c {row['acc_c']!r} disagrees with confusion matrix ({acc!r})")
    present = cm_counts.sum(axis=1) > 0
    used = cm_counts.sum(axis=0) > 0
    cls = float(1.0 - (used & present).sum() / present.sum())
    if cls != row["cls_c"]:
        problems.append(f"cls_c {row['cls_c']!r} disagrees with confusion matrix ({cls!r})")
    return problems


def cmd_eval(out: Path, reevaluate: bool = False) -> int:
    """Re-read a training directory and check its files agree with each other.

    With ``reevaluate``, also reload each checkpoint, rebuild the test split
    from the recorded config and recompute the metrics.
    """
    run = json.loads((out / "run.json").read_text())
    rows = read_metrics_table((out / "metrics.csv").read_text())
    problems = []
    cfg = None
    if reevaluate:
        raw = {k: _config_value(v) for k, v in run["config"].items() if k != "episode"}
        raw.update({k: _config_value(v) for k, v in run["config"]["episode"].items()})
        cfg = build_run_config(raw)
        splits = load_splits(cfg)
    reports = []
    for row in rows:
        sdir = out / f"seed_{row['seed']}"
        cm = read_confusion_csv((sdir / "confusion.csv").read_text())
        problems += [f"seed {row['seed']}: {p}" for p in _report_from_cm_check(row, cm.counts)]
        reports.append(MetricReport(**{k: row[k] for k in METRIC_NAMES}))
        if reevaluate:
            model, _ = load_model(sdir / "checkpoint.npz")
            test = splits["test"]
            report, _ = evaluate(ep.predict_concepts(model, test), test.concepts, test.labels)
            for k in METRIC_NAMES:
                if getattr(report, k) != row[k]:
                    problems.append(f"seed {row['seed']}: {k} recomputed as {getattr(report, k)!r}, file has {row[k]!r}")
    agg = aggregate(reports)
    print(_format_table([(r["seed"], r) for r in rows], agg))
    for p in problems:
        print(f"MISMATCH {p}")
    return EXIT_CHECK if problems else EXIT_OK


def _config_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# Other commands
# ---------------------------------------------------------------------------


def cmd_count_rs(spec_path, out: Path | None, max_nodes: int, expect: int | None) -> int:
    path = Path(spec_path) if spec_path else bundled_task_path()
    task = load_task_spec(path)
    census = count_optima(task, max_nodes=max_nodes)
    doc = census.to_json(task)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "census.json").write_text(text)
    print(f"optima={census.optima_count} shortcuts={census.shortcut_count} "
          f"identity_is_optimum={census.identity_is_optimum} nodes={census.nodes}")
    if expect is not None and census.shortcut_count != expect:
        print(f"FAIL expected {expect} shortcuts, found {census.shortcut_count}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(seed: int, trials: int, fault: str | None) -> int:
    head = sign_flip() if fault == "sign-flip" else None
    results = run_suite(trials, seed, head) if head else run_suite(trials, seed)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {r.name:<22} trials={len(r.errors)} max_rel_error={r.max_error:.3e} tol={r.tolerance:g}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gen_synth(args) -> int:
    sizes = _int_list(args.sizes)
    if len(sizes) != 3:
        raise ConfigError("--sizes: three split sizes are required")
    params = {"h": 10, "d": args.d, "separation": args.separation, "sizes": list(sizes),
              "seed": args.seed_single, "variance": args.variance}
    try:
        task = gen_synthetic(h=10, d=args.d, separation=args.separation, sizes=sizes,
                             seed=args.seed_single, variance=args.variance)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest = save_synthetic(task, args.out, params)
    print(f"wrote {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors, not argparse's default status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protonesy", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model per seed and write metrics")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--task", choices=TASKS)
    t.add_argument("--model", choices=MODELS)
    t.add_argument("--seed", help="seed or comma-separated seeds (default 0,128,256)")
    t.add_argument("--out")
    t.add_argument("--mnist-dir", dest="mnist_dir")
    t.add_argument("--data", help="synthetic data directory written by gen-synth")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    e = sub.add_parser("eval", help="re-read a training directory")
    e.add_argument("--out", required=True)
    e.add_argument("--reevaluate", action="store_true", help="reload checkpoints and recompute metrics")

    c = sub.add_parser("count-rs", help="count deterministic optima of a task spec")
    c.add_argument("spec", nargs="?", help="task spec JSON (default: bundled mnist_even_odd)")
    c.add_argument("--out")
    c.add_argument("--max-nodes", type=int, default=10**9)
    c.add_argument("--expect", type=int, help="exit 3 unless this many shortcuts are found")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--seed", default="0")
    g.add_argument("--trials", type=int, default=200)
    g.add_argument("--inject-fault", choices=["sign-flip"], help=argparse.SUPPRESS)

    s = sub.add_parser("gen-synth", help="write a synthetic Gaussian pair task")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", dest="seed_single", type=int, default=0)
    s.add_argument("--d", type=int, default=20)
    s.add_argument("--separation", type=float, default=10.0)
    s.add_argument("--variance", type=float, default=1.0)
    s.add_argument("--sizes", default="1000,200,200")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(build_run_config(_raw_from_args(args)))
        if args.command == "eval":
            out = Path(args.out)
            if not (out / "run.json").exists():
                raise ConfigError(f"--out: no run.json in {out}")
            return cmd_eval(out, args.reevaluate)
        if args.command == "count-rs":
            if args.spec and not Path(args.spec).exists():
                raise ConfigError(f"spec: {args.spec} does not exist")
            return cmd_count_rs(args.spec, Path(args.out) if args.out else None, args.max_nodes, args.expect)
        if args.command == "gradcheck":
            if args.trials < 1:
                raise ConfigError("--trials: must be at least 1")
            try:
                seed = _int_list(args.seed)[0]
            except (ValueError, IndexError):
                raise ConfigError(f"--seed: not an integer: {args.seed!r}") from None
            return cmd_gradcheck(seed, args.trials, args.inject_fault)
        if args.command == "gen-synth":
            return cmd_gen_synth(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (json.JSONDecodeError, KeyError, IdxFormatError, UnsatisfiableKnowledge) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SearchBudgetExceeded, EnumerationLimitError, ep.TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
