"""Config-driven runs of the baselines and TAP, with JSONL metrics and CSV summaries."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np
import yaml

from ..federation import (AdamW, ClientData, ClientState, post_rng, run_fl, train_steps)
from ..model import (BlockPartition, ClientView, ModelSpec, ParamStore, build_server_model,
                     derive_client_view, forward, per_row_logits, task_loss_batch, Batch)
from ..tap import PersonalState, RoundLedger, run_tap
from .config import ExperimentConfig
from .data import synth_dataset

log = logging.getLogger(__name__)

METRIC_NAMES = {"classification": "accuracy", "reconstruction": "mse",
                "sequence-generation": "token_accuracy"}


class RunNotFound(FileNotFoundError):
    pass


class MetricsSink:
    """Append-only JSONL writer stamping every record with run id and seed."""

    def __init__(self, path: Path, run_id: str, seed: int):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        rec = {"run_id": self.run_id, "seed": self.seed, **record}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_id_for(cfg: ExperimentConfig) -> str:
    return f"{cfg.mode}-seed{cfg.seed}-{cfg.digest()}"


def build_federation(cfg: ExperimentConfig):
    """Server model, partition and one ``ClientState`` per configured client."""
    spec = cfg.model_spec()
    server, partition = build_server_model(spec)
    per_task = {o: synth_dataset(cfg.dataset_spec(o), len(cfg.clients)) for o in spec.tasks}
    states = []
    for cid, (mods, tasks) in enumerate(cfg.clients):
        view = derive_client_view(server, partition, spec, cid, mods, tasks)
        train = {o: per_task[o][cid][0] for o in sorted(tasks)}
        val = {o: per_task[o][cid][1] for o in sorted(tasks)}
        states.append(ClientState(view, ClientData(train, val), AdamW(cfg.weight_decay)))
    return spec, server, partition, states


def evaluate(view: ClientView, data: ClientData) -> dict[str, dict]:
    """Validation loss and task metric per task held by the client."""
    out = {}
    for o in sorted(data.val):
        x, y = data.val[o]
        _, losses = task_loss_batch(view, Batch({o: (x, y)}))
        pred = forward(view, x, None, o)
        kind = view.spec.tasks[o].kind
        if kind == "reconstruction":
            metric = float(np.mean((pred - y) ** 2))
        else:
            logits = per_row_logits(view.spec, o, pred)
            target = per_row_logits(view.spec, o, y)
            metric = float(np.mean(logits.argmax(axis=1) == target.argmax(axis=1)))
        out[o] = {"loss": losses[o], "metric": metric, "metric_name": METRIC_NAMES[kind]}
    return out


def _log_eval(sink, t: int, cid: int, role: str, primary: bool, results: dict) -> None:
    for o, r in results.items():
        sink({"type": "eval", "round": t, "client": cid, "task": o, "role": role,
              "primary": primary, **r})


def run_config(cfg: ExperimentConfig, root: str | Path | None = None) -> str:
    """Execute one configured run; returns the run id (a directory under ``root``)."""
    root = Path(root) if root is not None else cfg.output_dir
    run_id = run_id_for(cfg)
    run_dir = root / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.raw, sort_keys=True))
    sink = MetricsSink(run_dir / "metrics.jsonl", run_id, cfg.seed)
    try:
        _execute(cfg, sink)
    finally:
        sink.close()
    emit_metrics(run_id, root)
    return run_id


def _execute(cfg: ExperimentConfig, sink: MetricsSink) -> None:
    spec, server, partition, states = build_federation(cfg)
    rc = cfg.round_config()
    mode = cfg.mode
    sink({"type": "header", "round": -1, "mode": mode, "config": cfg.raw,
          "num_clients": len(states)})
    personals = None
    if mode in ("tap", "tap-nokd"):
        personals = {s.client: PersonalState.from_view(s.view, AdamW(cfg.weight_decay))
                     for s in states}
        ledger = RoundLedger(margins={(s.client, o): cfg.margin(s.client, o)
                                      for s in states for o in s.view.tasks})
        run_tap(states, personals, server, partition, rc, ledger, cfg.kd_config(), sink)
    else:
        run_fl(states, server, partition, rc, "local" if mode == "local" else "fedavg", sink)
        if mode == "fedavg-post" and cfg.post_iters > 0:
            lr = rc.lr(rc.rounds)
            for s in states:
                losses = train_steps(s.view, s.data, s.optimizer, cfg.post_iters, lr,
                                     rc.batch_size, post_rng(rc.seed, s.client))
                for o, v in losses.items():
                    sink({"type": "post", "round": rc.rounds, "client": s.client, "task": o,
                          "loss": v, "role": "local", "steps": cfg.post_iters})
    sink.flush()
    for s in states:
        _log_eval(sink, rc.rounds, s.client, "local", personals is None, evaluate(s.view, s.data))
        if personals is not None:
            p = personals[s.client]
            _log_eval(sink, rc.rounds, s.client, "personal", True, evaluate(p.model, s.data))


# ---------------------------------------------------------------------------
# summaries


def read_records(run_id: str, root: str | Path = "runs") -> list[dict]:
    path = Path(root) / run_id / "metrics.jsonl"
    if not path.exists():
        raise RunNotFound(f"no run {run_id!r} under {root}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def final_evals(records: list[dict], primary_only: bool = True) -> list[dict]:
    evals = [r for r in records if r["type"] == "eval" and (r["primary"] or not primary_only)]
    if not evals:
        return []
    last = max(r["round"] for r in evals)
    return [r for r in evals if r["round"] == last]


def client_average_loss(records: list[dict], role: str | None = None) -> dict[int, float]:
    """Per-client mean validation loss over its tasks (primary model unless ``role`` given)."""
    evals = final_evals(records, primary_only=role is None)
    if role is not None:
        evals = [r for r in evals if r["role"] == role]
    by_client: dict[int, list[float]] = {}
    for r in evals:
        by_client.setdefault(r["client"], []).append(r["loss"])
    return {c: float(np.mean(v)) for c, v in sorted(by_client.items())}


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.10g}"


def summary_rows(records: list[dict]) -> list[list[str]]:
    header = next((r for r in records if r["type"] == "header"), None)
    tasks_cfg = header["config"]["tasks"] if header else {}
    evals = sorted(final_evals(records), key=lambda r: (r["task"], r["client"]))
    rows = [["client", "task", "kind", "metric_name", "metric", "val_loss"]]
    per_task: dict[str, list[dict]] = {}
    for r in evals:
        kind = tasks_cfg.get(r["task"], {}).get("kind", "")
        rows.append([str(r["client"]), r["task"], kind, r["metric_name"], _fmt(r["metric"]),
                     _fmt(r["loss"])])
        per_task.setdefault(r["task"], []).append(r)
    means: dict[str, tuple[str, float]] = {}
    for o, rs in sorted(per_task.items()):
        kind = tasks_cfg.get(o, {}).get("kind", "")
        metric = np.array([r["metric"] for r in rs])
        loss = np.array([r["loss"] for r in rs])
        rows.append(["mean", o, kind, rs[0]["metric_name"], _fmt(metric.mean()), _fmt(loss.mean())])
        rows.append(["std", o, kind, rs[0]["metric_name"], _fmt(metric.std()), _fmt(loss.std())])
        means[o] = (kind, float(metric.mean()))
    # one average per task family; accuracy and mse do not mix
    for fam in ("classification", "reconstruction", "sequence-generation"):
        vals = [m for k, m in means.values() if k == fam]
        if vals:
            rows.append([f"avg_{fam}", "*", fam, METRIC_NAMES[fam],
                         _fmt(float(np.mean(vals))), ""])
    return rows


def emit_metrics(run_id: str, root: str | Path = "runs") -> Path:
    """Write ``summary.csv`` for a finished run and return its path."""
    records = read_records(run_id, root)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(summary_rows(records))
    path = Path(root) / run_id / "summary.csv"
    path.write_text(buf.getvalue())
    return path
