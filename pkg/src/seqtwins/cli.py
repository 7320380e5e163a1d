"""Command-line entry point: ``seqtwins {prepare,pretrain,finetune,report,...}``.

Options can also come from ``--config file.json`` (keys are the long option
names with dashes replaced by underscores); flags given on the command line
win. Every run writes ``<out>/runs/<run_id>/config.json`` plus per-epoch
checkpoints and appends its rows to ``<out>/metrics.csv``. The run id is a
hash of the merged configuration, so repeating a command reproduces both the
id and the metrics.

Exit status: 0 on success, 2 for configuration or input errors, 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import KINDS, AugmentationSpec
from .data import FORMATS, load_prepared, prepare, save_prepared, subsample_labeled
from .exceptions import ConfigError, ContractError, DataError, SeqTwinsError
from .experiments import subsample_manifest
from .models import ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .training import (
    MetricsWriter,
    TrainConfig,
    export_embeddings,
    finetune_classifier,
    finetune_next_item,
    pretrain_bt,
    pretrain_dual_encoder,
    read_metrics,
)

logger = logging.getLogger("seqtwins")

TASKS = {"favorite_category": "favorite_category", "age": "age_group", "occupation": "occupation", "next_item": None}

DEFAULTS = {
    "prepare": {
        "dataset": "movielens-1m",
        "data_dir": None,
        "out": None,
        "seed": 0,
        "seq_len": 16,
        "min_actions": 10,
        "segmentation": "sliding",
    },
    "pretrain": {
        "data": None,
        "out": None,
        "seed": 0,
        "method": "bt",
        "aug": "segment_mask",
        "p": 0.2,
        "lambd": 10.0,
        "batch_size": 128,
        "epochs": 10,
        "lr": 1e-3,
        "max_sequences": None,
    },
    "finetune": {
        "data": None,
        "out": None,
        "seed": 0,
        "task": "favorite_category",
        "encoder": "fixed",
        "label_fraction": 0.01,
        "init": "scratch",
        "batch_size": 64,
        "epochs": 50,
        "lr": 1e-3,
        "max_sequences": None,
    },
    "report": {"out": None, "metrics": None},
    "export": {"checkpoint": None, "data": None, "out": None},
    "synth": {"out": None, "seed": 0, "users": 600, "items": 800, "min_actions": 20, "max_actions": 200},
}

REPORT_HEADER = ("task", "method", "encoder", "label_fraction", "metric", "best", "final", "epochs", "run_id")


class UsageError(SeqTwinsError, ValueError):
    """Bad command-line input (exit status 2)."""


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="seqtwins", description=__doc__.split("\n")[0])
    top.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = top.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        # SUPPRESS keeps unset flags out of the namespace so config files can fill them
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option values")
        return p

    p = cmd("prepare", "ingest raw logs into sequences, vocabulary and split")
    p.add_argument("--dataset", choices=FORMATS)
    p.add_argument("--data-dir", help="directory with the raw dataset files")
    p.add_argument("--out", help="output directory for the prepared data")
    p.add_argument("--seed", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--min-actions", type=int)
    p.add_argument("--segmentation", choices=("sliding", "chunk"))

    p = cmd("pretrain", "Barlow Twins or dual-encoder pretraining")
    p.add_argument("--data", help="prepared data directory")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=("bt", "de"))
    p.add_argument("--aug", choices=KINDS)
    p.add_argument("--p", type=float)
    p.add_argument("--lambda", dest="lambd", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-sequences", type=int, help="proportional subsample of every split")

    p = cmd("finetune", "downstream classification or next-item fine-tuning")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", help=f"one of {', '.join(TASKS)}")
    p.add_argument("--encoder", choices=("fixed", "trainable"))
    p.add_argument("--label-fraction", type=float)
    p.add_argument("--init", help="checkpoint path or 'scratch'")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-sequences", type=int)

    p = cmd("report", "tabulate best/final metrics of all runs in an output directory")
    p.add_argument("--out", help="run output directory holding metrics.csv")
    p.add_argument("--metrics", help="metrics.csv path (default <out>/metrics.csv)")

    p = cmd("export", "write item embeddings with their categories as CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", help="CSV path")

    p = cmd("synth", "write a synthetic MovieLens-1M-format dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--min-actions", type=int)
    p.add_argument("--max-actions", type=int)
    return top


def _merge(command: str, ns: argparse.Namespace) -> dict:
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    merged = dict(DEFAULTS[command])
    path = getattr(ns, "config", None)
    if path:
        try:
            from_file = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(from_file) - set(merged)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        merged.update(from_file)
    merged.update(given)
    return merged


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} does not exist")
    return p


_PATH_KEYS = ("out", "data", "data_dir", "init", "config")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_id_for(command: str, cfg: dict) -> str:
    """Stable id: hash of the settings and of the input files' contents.

    Paths are left out so the same run in another directory gets the same id.
    """
    key = {k: v for k, v in cfg.items() if k not in _PATH_KEYS}
    if cfg.get("data"):
        key["data"] = [_digest(Path(cfg["data"]) / n) for n in ("split.json", "stats.json", "vocab.json")]
    if cfg.get("init") and cfg["init"] != "scratch":
        key["init"] = _digest(Path(cfg["init"]))
    blob = json.dumps({"command": command, **key}, sort_keys=True, default=str)
    tag = cfg.get("method") or cfg.get("task") or command
    return f"{command}-{tag}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"


def _run_dir(out: Path, run_id: str, cfg: dict, extra: dict) -> Path:
    d = out / "runs" / run_id
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps({"run_id": run_id, **cfg, **extra}, indent=2, sort_keys=True))
    return d


def _checkpointer(run_dir: Path, extra: dict):
    def save(epoch, bundle):
        save_checkpoint(bundle, run_dir / f"epoch{epoch}.npz", extra={**extra, "epoch": epoch})

    return save


def _load_data(cfg: dict):
    _require(cfg, "data", "out")
    data = load_prepared(_existing_dir(cfg["data"], "prepared data directory"))
    if cfg.get("max_sequences"):
        data.manifest = subsample_manifest(data.manifest, int(cfg["max_sequences"]), int(cfg["seed"]))
    return data


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: dict) -> int:
    _require(cfg, "data_dir", "out")
    raw = _existing_dir(cfg["data_dir"], "dataset directory")
    prep = prepare(
        cfg["dataset"], raw, int(cfg["seq_len"]), int(cfg["min_actions"]), int(cfg["seed"]), cfg["segmentation"]
    )
    save_prepared(prep, cfg["out"])
    s = prep.stats
    print(
        f"users={s['n_users']} items={s['n_items']} sequences={s['n_sequences']} "
        f"train={s['n_train']} val={s['n_val']} test={s['n_test']} malformed={s['n_malformed']}"
    )
    return 0


def cmd_pretrain(cfg: dict) -> int:
    if cfg["method"] not in ("bt", "de"):
        raise UsageError(f"unknown method {cfg['method']!r}")
    aug = AugmentationSpec(cfg["aug"], float(cfg["p"]), int(cfg["seed"]))
    data = _load_data(cfg)
    out = Path(cfg["out"])
    run_id = run_id_for("pretrain", cfg)
    store, train = data.store, np.asarray(data.manifest.train)
    model = ModelConfig(n_items=data.vocab.n_items, seq_len=store.seq_len)
    common = dict(
        batch_size=int(cfg["batch_size"]), epochs=int(cfg["epochs"]), learning_rate=float(cfg["lr"]), seed=int(cfg["seed"])
    )
    extra = {"method": cfg["method"]}
    run_dir = _run_dir(out, run_id, cfg, {"model": model.to_json()})
    save = _checkpointer(run_dir, extra)
    if cfg["method"] == "bt":
        config = TrainConfig(phase="bt_pretrain", augmentation=aug, lambd=float(cfg["lambd"]), **common)
        bundle, hist = pretrain_bt(store.items[train], store.real_length[train], config, model, on_epoch=save)
    else:
        config = TrainConfig(phase="de_pretrain", **common)
        ctx, tgt = store.subset(train).next_item_pairs()
        val = store.subset(np.asarray(data.manifest.val)).next_item_pairs()
        bundle, hist = pretrain_dual_encoder(ctx, tgt, config, model, val=val, on_epoch=save)
    save_checkpoint(bundle, run_dir / "final.npz", extra={**extra, "epoch": config.epochs})
    MetricsWriter(out / "metrics.csv").write(run_id, hist, replace=True)
    print(f"{run_id} {run_dir / 'final.npz'}")
    return 0


def _init_bundle(cfg: dict, data) -> tuple:
    model = ModelConfig(n_items=data.vocab.n_items, seq_len=data.store.seq_len)
    if cfg["init"] == "scratch":
        return init_parameters(model, int(cfg["seed"]), ("embedding", "encoder")), "scratch"
    path = Path(cfg["init"])
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    bundle, extra = load_checkpoint(path)
    if bundle.config != model:
        raise UsageError(f"checkpoint model {bundle.config} does not match the data ({model})")
    return bundle, extra.get("method", "ckpt")


def cmd_finetune(cfg: dict) -> int:
    if cfg["task"] not in TASKS:
        raise UsageError(f"unknown task {cfg['task']!r}; expected one of {list(TASKS)}")
    if not 0 < float(cfg["label_fraction"]) <= 1:
        raise UsageError("--label-fraction must be in (0, 1]")
    data = _load_data(cfg)
    start, source = _init_bundle(cfg, data)
    out = Path(cfg["out"])
    run_id = run_id_for("finetune", cfg)
    method = f"{source}_{cfg['encoder']}" if source != "scratch" else "scratch"
    store, m = data.store, data.manifest
    labelled = np.asarray(subsample_labeled(m, float(cfg["label_fraction"]), int(cfg["seed"])))
    val = np.asarray(m.val)
    run_dir = _run_dir(out, run_id, cfg, {"method": method})
    save = _checkpointer(run_dir, {"method": method, "task": cfg["task"]})
    common = dict(
        batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]),
        learning_rate=float(cfg["lr"]),
        seed=int(cfg["seed"]),
        label_fraction=float(cfg["label_fraction"]),
        encoder_mode="trainable" if source == "scratch" else cfg["encoder"],
    )
    label = TASKS[cfg["task"]]
    if label is None:
        config = TrainConfig(phase="finetune_next_item", **common)
        ctx, tgt = store.subset(labelled).next_item_pairs()
        bundle, hist = finetune_next_item(start, ctx, tgt, config, val=store.subset(val).next_item_pairs(), on_epoch=save)
    else:
        if label not in store.labels:
            raise UsageError(f"dataset has no {cfg['task']} labels")
        y = store.labels[label]
        n_classes = max(int(y.max()) + 1, len(data.vocab.label_classes.get(label, [])))
        config = TrainConfig(phase="finetune_classify", **common)
        bundle, hist = finetune_classifier(
            start, (store.items[labelled], y[labelled]), (store.items[val], y[val]), n_classes, config, on_epoch=save
        )
    MetricsWriter(out / "metrics.csv").write(run_id, hist, replace=True)
    print(run_id)
    return 0


def _report_rows(metrics: list[dict], runs_dir: Path) -> list[dict]:
    by_run: dict[str, list[dict]] = {}
    for r in metrics:
        by_run.setdefault(r["run_id"], []).append(r)
    rows = []
    for run_id, recs in by_run.items():
        cfg_path = runs_dir / run_id / "config.json"
        cfg = json.loads(cfg_path.read_text()) if cfg_path.is_file() else {}
        epochs = max(r["epoch"] for r in recs)
        if run_id.startswith("finetune"):
            task, method = cfg.get("task", "?"), cfg.get("method", "?")
            names = sorted({r["metric"] for r in recs if r["split"] == "val" and not r["metric"].startswith(("best_", "final_"))})
            for name in names:
                series = [r["value"] for r in sorted(recs, key=lambda r: r["epoch"]) if r["metric"] == name and r["split"] == "val"]
                rows.append(
                    dict(task=task, method=method, encoder=cfg.get("encoder", ""), label_fraction=cfg.get("label_fraction", ""),
                         metric=name, best=max(series), final=series[-1], epochs=epochs, run_id=run_id)
                )
        else:
            name = "bt_loss" if cfg.get("method", "bt") == "bt" else "contrastive_loss"
            series = [r["value"] for r in sorted(recs, key=lambda r: r["epoch"]) if r["metric"] == name and r["split"] == "train"]
            if series:
                rows.append(
                    dict(task="pretrain", method=cfg.get("method", "?"), encoder="", label_fraction="",
                         metric=name, best=min(series), final=series[-1], epochs=epochs, run_id=run_id)
                )
    rows.sort(key=lambda r: (r["task"], r["method"], str(r["encoder"]), r["metric"], r["run_id"]))
    return rows


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_report(cfg: dict) -> int:
    _require(cfg, "out")
    out = Path(cfg["out"])
    metrics_path = Path(cfg["metrics"]) if cfg.get("metrics") else out / "metrics.csv"
    rows = _report_rows(read_metrics(metrics_path), out / "runs")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    table = [list(REPORT_HEADER)] + [[_fmt(r[k]) for k in REPORT_HEADER] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_HEADER))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table) + "\n"
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export(cfg: dict) -> int:
    _require(cfg, "checkpoint", "data", "out")
    ck = Path(cfg["checkpoint"])
    if not ck.is_file():
        raise UsageError(f"checkpoint {ck} does not exist")
    data = load_prepared(_existing_dir(cfg["data"], "prepared data directory"))
    n = export_embeddings(load_checkpoint(ck)[0], data.vocab, cfg["out"])
    print(f"wrote {n} items to {cfg['out']}")
    return 0


def cmd_synth(cfg: dict) -> int:
    from .synthetic import write_movielens_like

    _require(cfg, "out")
    write_movielens_like(
        cfg["out"], int(cfg["users"]), int(cfg["items"]), int(cfg["min_actions"]), int(cfg["max_actions"]), seed=int(cfg["seed"])
    )
    print(f"wrote synthetic MovieLens-1M files to {cfg['out']}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "report": cmd_report,
    "export": cmd_export,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[ns.command](_merge(ns.command, ns))
    except (UsageError, ConfigError, DataError, ContractError, FileNotFoundError) as exc:
        print(f"seqtwins {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard
        logger.debug("internal error", exc_info=True)
        print(f"seqtwins {ns.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
