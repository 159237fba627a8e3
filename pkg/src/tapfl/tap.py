"""Two-stage adaptive personalization.

During FL every client keeps a personalized copy ``X`` of its view that never
leaves the device. After each local round, a task's parameters in ``X`` are
overwritten with the FL-engaged view's when the view's latest training loss
beats the personal model's by more than that task's margin. After FL the view
is fine-tuned locally and distilled into ``X``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph
from .federation import (AdamW, ClientState, MetricsLog, RoundConfig, aggregate_components,
                         broadcast, make_upload, post_rng, round_rng, sample_participants,
                         train_steps)
from .model import (BatchGraph, BlockPartition, ClientView, ParamStore, build_batch_graph,
                    per_row_logits, task_output_node, _Binder)


@dataclass
class RoundLedger:
    """Per-client, per-task histories, margins and replacement indicators."""

    margins: dict[tuple[int, str], float] = field(default_factory=dict)
    h_local: dict[tuple[int, str], float] = field(default_factory=dict)
    h_personal: dict[tuple[int, str], float] = field(default_factory=dict)
    indicators: dict[int, dict[str, int]] = field(default_factory=dict)
    seen: dict[int, set[str]] = field(default_factory=dict)

    def margin(self, client: int, task: str) -> float:
        return self.margins[(client, task)]

    def reset_indicators(self, client: int) -> None:
        self.indicators[client] = {o: 0 for o in self.indicators.get(client, {})}


def update_history(ledger: RoundLedger, client: int, role: str,
                   losses: Mapping[str, float]) -> None:
    """Overwrite the role's history with this round's per-task average losses."""
    if role not in ("local", "personal"):
        raise ValueError(f"unknown role {role!r}")
    table = ledger.h_local if role == "local" else ledger.h_personal
    for o, v in losses.items():
        if not math.isfinite(v):
            raise ValueError(f"non-finite loss for task {o}")
        table[(client, o)] = float(v)
    if role == "local":
        ledger.seen[client] = set(losses)


def compute_indicator(ledger: RoundLedger, client: int, task: str) -> int:
    """1 iff ``h_local + margin < h_personal`` (strict); 0 while a history is missing."""
    key = (client, task)
    if key not in ledger.h_local or key not in ledger.h_personal:
        return 0
    return int(ledger.h_local[key] + ledger.margins[key] < ledger.h_personal[key])


@dataclass
class PersonalState:
    model: ClientView
    optimizer: AdamW = field(default_factory=AdamW)
    replacements: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_view(cls, view: ClientView, optimizer: AdamW | None = None) -> "PersonalState":
        return cls(view.clone(), optimizer or AdamW(), {o: 0 for o in sorted(view.tasks)})


def apply_replacement(personal: PersonalState, view: ClientView, task: str, fire: int) -> bool:
    """Copy the task's blocks from ``view`` into ``personal`` when ``fire`` is 1."""
    if task not in view.tasks:
        raise ValueError(f"client {view.client} has no task {task!r}")
    if not fire:
        return False
    names = view.block_names(view.task_blocks[task])
    for n in names:
        personal.model.store.trainable[n][...] = view.store.trainable[n]
    # stale moments against teleported weights destabilize AdamW
    personal.optimizer.reset(names)
    personal.replacements[task] = personal.replacements.get(task, 0) + 1
    return True


# ---------------------------------------------------------------------------
# distillation


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def distill_loss(teacher: np.ndarray, student: np.ndarray, temperature: float = 1.0) -> float:
    """``T^2 * KL(softmax(teacher/T) || softmax(student/T))``, averaged over rows."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    zt = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    zs = np.atleast_2d(np.asarray(student, dtype=np.float64))
    if zt.shape != zs.shape:
        raise ValueError(f"teacher {zt.shape} and student {zs.shape} differ")
    lt = _log_softmax(zt / temperature)
    ls = _log_softmax(zs / temperature)
    pt = np.exp(lt)
    kl = (pt * lt).sum() - (pt * ls).sum()
    return temperature**2 * float(kl) / zt.shape[0]


def distill_loss_node(g: Graph, teacher: np.ndarray, student: int, temperature: float) -> int:
    """Graph form of :func:`distill_loss`; the teacher enters as a constant."""
    zt = np.atleast_2d(teacher)
    rows = zt.shape[0]
    s = student
    if g.value(s).ndim == 1:
        s = g.reshape(s, (1, g.value(s).shape[0]))
    lt = _log_softmax(zt / temperature)
    pt = np.exp(lt)
    c = temperature**2 / rows
    ls = g.log_softmax(g.scale(s, 1.0 / temperature))
    cross = g.scale(g.sum(g.mul(g.const(pt), ls)), -c)
    return g.add(g.const(np.asarray(c * (pt * lt).sum())), cross)


@dataclass
class KDConfig:
    temperature: float = 1.0
    betas: dict[str, float] = field(default_factory=dict)
    default_beta: float = 2e-3
    post_iters: int = 50

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("KD temperature must be positive")
        if self.post_iters < 0:
            raise ValueError("post_iters must be >= 0")
        if any(b < 0 for b in list(self.betas.values()) + [self.default_beta]):
            raise ValueError("KD weights must be non-negative")

    def beta(self, task: str) -> float:
        return self.betas.get(task, self.default_beta)


def post_objective(student: ClientView, teacher: ClientView, batch, kd: KDConfig,
                   rng: np.random.Generator | None = None) -> BatchGraph:
    """Weighted task losses plus ``beta_o`` times the distillation term per task in the batch."""
    bg = build_batch_graph(student, batch, rng=rng)
    g = bg.graph
    teacher_graph = Graph()
    tbind = _Binder(teacher_graph, teacher.store, detach=True)
    loss = bg.loss
    for o in sorted(bg.outputs):
        beta = kd.beta(o)
        if beta == 0.0:
            continue
        x, _ = batch.parts[o]
        t_out = teacher_graph.value(
            task_output_node(teacher_graph, tbind, teacher.spec, o, teacher_graph.const(x)))
        if student.spec.tasks[o].kind == "reconstruction":
            term = g.mse(bg.outputs[o], g.const(t_out))
        else:
            s_out = bg.outputs[o]
            if student.spec.tasks[o].kind == "sequence-generation":
                rows = per_row_logits(student.spec, o, t_out)
                s_out = g.reshape(s_out, rows.shape)
                t_out = rows
            term = distill_loss_node(g, t_out, s_out, kd.temperature)
        loss = g.add(loss, g.scale(term, beta))
    bg.loss = loss
    return bg


def post_fl_phase(state: ClientState, personal: PersonalState, kd: KDConfig, lr: float,
                  batch_size: int, seed: int) -> dict[str, dict[str, float]]:
    """Fine-tune the view for P iterations, then distill it into the personal model."""
    if kd.post_iters == 0:
        return {"teacher": {}, "student": {}}
    teacher_losses = train_steps(state.view, state.data, state.optimizer, kd.post_iters, lr,
                                 batch_size, post_rng(seed, state.client))
    teacher = state.view

    def objective(view, batch, rng):
        return post_objective(view, teacher, batch, kd, rng)

    student_losses = train_steps(personal.model, state.data, personal.optimizer, kd.post_iters,
                                 lr, batch_size, post_rng(seed, state.client), loss_fn=objective)
    return {"teacher": teacher_losses, "student": student_losses}


# ---------------------------------------------------------------------------
# outer loop


def run_tap(clients: Sequence[ClientState], personals: Mapping[int, PersonalState],
            server: ParamStore, partition: BlockPartition, cfg: RoundConfig,
            ledger: RoundLedger, kd: KDConfig, log_fn: MetricsLog | None = None) -> list[dict]:
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)

    by_id = {c.client: c for c in clients}
    cfg.validate(len(clients))
    for t in range(cfg.rounds):
        lr = cfg.lr(t)
        uploads = []
        for cid in sample_participants(t, list(by_id), cfg):
            state, personal = by_id[cid], personals[cid]
            local = train_steps(state.view, state.data, state.optimizer, cfg.local_iters, lr,
                                cfg.batch_size, round_rng(cfg.seed, cid, t))
            update_history(ledger, cid, "local", local)
            uploads.append(make_upload(state))
            for o in sorted(ledger.seen[cid]):
                fire = compute_indicator(ledger, cid, o)
                ledger.indicators.setdefault(cid, {})[o] = fire
                apply_replacement(personal, state.view, o, fire)
                emit({"type": "replacement", "round": t, "client": cid, "task": o,
                      "h_local": ledger.h_local[(cid, o)],
                      "h_personal": ledger.h_personal.get((cid, o)),
                      "margin": ledger.margins[(cid, o)], "fired": bool(fire)})
            ledger.reset_indicators(cid)
            pers = train_steps(personal.model, state.data, personal.optimizer, cfg.local_iters,
                               lr, cfg.batch_size, round_rng(cfg.seed, cid, t))
            update_history(ledger, cid, "personal", pers)
            for role, losses in (("local", local), ("personal", pers)):
                for o, v in losses.items():
                    emit({"type": "train", "round": t, "client": cid, "task": o,
                          "loss": v, "role": role})
            emit({"type": "counters", "round": t, "client": cid,
                  "replacements": dict(personal.replacements)})
        report = aggregate_components(server, uploads, partition)
        broadcast(server, clients)
        emit({"type": "aggregate", "round": t, "upload_bytes": report.upload_bytes,
              "blocks_touched": len(report.touched)})

    lr = cfg.lr(cfg.rounds)
    for cid in sorted(by_id):
        out = post_fl_phase(by_id[cid], personals[cid], kd, lr, cfg.batch_size, cfg.seed)
        for role, losses in (("local", out["teacher"]), ("personal", out["student"])):
            for o, v in losses.items():
                emit({"type": "post", "round": cfg.rounds, "client": cid, "task": o,
                      "loss": v, "role": role})
    return records
