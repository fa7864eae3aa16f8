"""Run-level report: per-fold tables, fold average, architecture, curves."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .metrics import EvaluationReport, average_folds


@dataclass
class ReportResult:
    files: list[Path] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def summary_table(fold_docs: list[dict]) -> str:
    """One row per fold plus the arithmetic-mean summary row (CSV)."""
    keys = sorted(set.intersection(*(set(d["aggregate"]) for d in fold_docs)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold"] + keys)
    for d in fold_docs:
        w.writerow([d["fold_id"]] + [_fmt(d["aggregate"][k]) for k in keys])
    mean = average_folds([EvaluationReport(d["task"], aggregate=d["aggregate"]) for d in fold_docs])
    w.writerow(["mean"] + [_fmt(mean[k]) for k in keys])
    return buf.getvalue()


def _plot_curves(logs: dict[int, list[dict]], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    for fold, recs in sorted(logs.items()):
        ep = [r["epoch"] for r in recs]
        ax[0].plot(ep, [r["train_loss"] for r in recs], label=f"fold {fold}")
        ax[1].plot(ep, [r["lr"] for r in recs], label=f"fold {fold}")
    ax[0].set_xlabel("epoch")
    ax[0].set_ylabel("train loss")
    ax[0].set_yscale("log")
    ax[1].set_xlabel("epoch")
    ax[1].set_ylabel("learning rate")
    ax[0].legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(run_dir: str | Path) -> ReportResult:
    run = Path(run_dir)
    reports = run / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    res = ReportResult()

    cfg_file = run / "config" / "config.yaml"
    cfg = yaml.safe_load(cfg_file.read_text()) if cfg_file.exists() else None
    if cfg is None:
        res.missing.append("config/config.yaml")
    expected_hash = (run / "config" / "config_hash.txt").read_text().strip() \
        if (run / "config" / "config_hash.txt").exists() else None

    fold_docs = []
    for p in sorted(reports.glob("fold_*.json"), key=lambda p: int(p.stem.split("_")[1])):
        doc = json.loads(p.read_text())
        if expected_hash and doc.get("config_hash") != expected_hash:
            raise ValueError(f"{p} was produced by config {doc.get('config_hash')}, "
                             f"run is {expected_hash}")
        fold_docs.append(doc)
    if not fold_docs:
        res.missing.append("no fold evaluation reports")
    else:
        if cfg and len(fold_docs) < cfg.get("folds", 10):
            res.missing.append(f"{len(fold_docs)} of {cfg.get('folds', 10)} folds evaluated")
        path = reports / "summary.csv"
        path.write_text(summary_table(fold_docs))
        res.files.append(path)
        text = [f"config hash: {expected_hash}", f"folds evaluated: {len(fold_docs)}"]
        if res.missing:
            text.append("PARTIAL REPORT: " + "; ".join(res.missing))
        path = reports / "summary.txt"
        path.write_text("\n".join(text) + "\n\n" + summary_table(fold_docs))
        res.files.append(path)

    if cfg is not None:
        from .netgraph import NetworkConfig, architecture_report, build_network

        net_doc = dict(cfg["network"])
        path = reports / "architecture.txt"
        path.write_text(architecture_report(build_network(NetworkConfig.from_dict(net_doc))))
        res.files.append(path)

    logs = {}
    for p in sorted((run / "logs").glob("train_fold_*.jsonl")):
        fold = int(p.stem.rsplit("_", 1)[1])
        logs[fold] = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
    if logs:
        path = reports / "training_curves.png"
        _plot_curves(logs, path)
        res.files.append(path)
    else:
        res.missing.append("no training logs")
    return res
