"""Client sampling, local training, component-wise FedAvg and broadcast."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import NonFiniteError, backward
from .checkpoint import decode_entries, encode_blocks
from .model import Batch, BlockPartition, ClientView, ParamStore, build_batch_graph

log = logging.getLogger(__name__)

MetricsLog = Callable[[dict], None]

# salt values keep the per-purpose random streams apart
_STREAM_SAMPLE = 1
_STREAM_ROUND = 2
_STREAM_POST = 3


class TrainingError(RuntimeError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class WarmupSchedule:
    """Linear warmup from ``initial`` to ``peak`` over ``warmup_rounds``, then flat."""

    initial: float = 1e-4
    peak: float = 3e-4
    warmup_rounds: int = 20

    def __call__(self, t: int) -> float:
        if t >= self.warmup_rounds or self.warmup_rounds <= 0:
            return self.peak
        return self.initial + (self.peak - self.initial) * t / self.warmup_rounds


@dataclass
class RoundConfig:
    clients_per_round: int = 2
    local_iters: int = 20
    rounds: int = 200
    batch_size: int = 128
    lr: Callable[[int], float] = field(default_factory=WarmupSchedule)
    seed: int = 0

    def validate(self, num_clients: int) -> None:
        if not 1 <= self.clients_per_round <= num_clients:
            raise ValueError(f"clients_per_round must lie in [1, {num_clients}]")
        if self.local_iters < 1:
            raise ValueError("local_iters must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class AdamW:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            p -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)

    def reset(self, names: Iterable[str]) -> None:
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)
            self.t.pop(n, None)


class SGD:
    def step(self, params, grads, lr):
        for name, g in grads.items():
            params[name] -= lr * g

    def reset(self, names):
        pass


@dataclass
class ClientData:
    """Per-task train and validation arrays: ``{task: (inputs, targets)}``."""

    train: dict[str, tuple[np.ndarray, np.ndarray]]
    val: dict[str, tuple[np.ndarray, np.ndarray]]

    def __post_init__(self) -> None:
        self._index = [(o, j) for o in sorted(self.train) for j in range(self.train[o][0].shape[0])]

    @property
    def size(self) -> int:
        return len(self._index)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform minibatch without replacement over the pooled tasks."""
        n = min(batch_size, self.size)
        picked = rng.choice(self.size, size=n, replace=False)
        by_task: dict[str, list[int]] = {}
        for k in np.sort(picked):
            o, j = self._index[k]
            by_task.setdefault(o, []).append(j)
        return Batch({o: (self.train[o][0][idx], self.train[o][1][idx]) for o, idx in by_task.items()})

    def validation_batch(self) -> Batch:
        return Batch(dict(self.val))


@dataclass
class ClientState:
    view: ClientView
    data: ClientData
    optimizer: AdamW | SGD = field(default_factory=AdamW)

    @property
    def client(self) -> int:
        return self.view.client

    @property
    def num_samples(self) -> int:
        return self.data.size


def round_rng(seed: int, client: int, t: int, stream: int = _STREAM_ROUND) -> np.random.Generator:
    """Minibatch stream of ``client`` in round ``t``.

    Both of a client's models draw from this same stream in a round, so they
    see identical minibatches.
    """
    return np.random.default_rng([seed, stream, client, t])


def post_rng(seed: int, client: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_POST, client])


def sample_participants(t: int, clients: Sequence[int], cfg: RoundConfig) -> list[int]:
    cfg.validate(len(clients))
    ordered = sorted(clients)
    if cfg.clients_per_round == len(ordered):
        return ordered
    rng = np.random.default_rng([cfg.seed, _STREAM_SAMPLE, t])
    picked = rng.choice(len(ordered), size=cfg.clients_per_round, replace=False)
    return sorted(ordered[k] for k in picked)


def train_steps(view: ClientView, data: ClientData, optimizer, steps: int, lr: float,
                batch_size: int, rng: np.random.Generator,
                loss_fn: Callable | None = None) -> dict[str, float]:
    """Run ``steps`` optimizer steps; return per-task mean training loss over seen tasks.

    ``loss_fn(view, batch, rng) -> BatchGraph`` overrides the plain multi-task loss.
    """
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for _ in range(steps):
        batch = data.sample(batch_size, rng)
        try:
            bg = (loss_fn or _plain_loss)(view, batch, rng)
        except NonFiniteError as exc:
            raise TrainingError(f"client {view.client}: {exc}") from exc
        value = float(bg.graph.value(bg.loss))
        if not math.isfinite(value):
            raise TrainingError(f"client {view.client}: non-finite loss")
        grads = backward(bg.graph, bg.loss)
        named = {name: grads[nid] for name, nid in bg.params.items()}
        for name, g in named.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"client {view.client}: non-finite gradient for {name}")
        optimizer.step(view.store.trainable, named, lr)
        for o, v in bg.task_loss_values().items():
            sums[o] = sums.get(o, 0.0) + v
            counts[o] = counts.get(o, 0) + 1
    return {o: sums[o] / counts[o] for o in sorted(sums)}


def _plain_loss(view, batch, rng):
    return build_batch_graph(view, batch, rng=rng)


def local_train(state: ClientState, tau: int, lr: float, batch_size: int,
                rng: np.random.Generator) -> dict[str, float]:
    """``tau`` steps on the client's FL-engaged view; returns per-task mean losses."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return train_steps(state.view, state.data, state.optimizer, tau, lr, batch_size, rng)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Upload:
    client: int
    num_samples: int
    payload: bytes

    @property
    def nbytes(self) -> int:
        return len(self.payload)


def make_upload(state: ClientState) -> Upload:
    """Serialize exactly the view's trainable blocks."""
    view = state.view
    return Upload(view.client, state.num_samples,
                  encode_blocks(view.store, view.partition, view.blocks))


@dataclass
class BlockReport:
    owners: int = 0
    total_weight: float = 0.0
    weights: dict[int, float] = field(default_factory=dict)
    pre_norm: float = 0.0
    post_norm: float = 0.0

    @property
    def untouched(self) -> bool:
        return self.owners == 0


@dataclass
class AggregationReport:
    blocks: dict[str, BlockReport]
    upload_bytes: int = 0

    @property
    def touched(self) -> list[str]:
        return [b for b, r in self.blocks.items() if not r.untouched]


def _block_norm(store: ParamStore, partition: BlockPartition, block: str) -> float:
    return math.sqrt(sum(float(np.sum(store.trainable[n] ** 2)) for n in partition.blocks[block]))


def aggregate_components(server: ParamStore, uploads: Sequence[Upload],
                         partition: BlockPartition) -> AggregationReport:
    """Per-block weighted mean over the uploaders that own each block.

    Weights are ``|D_i| / sum |D_j|`` over this round's owners of the block.
    Blocks nobody uploaded stay bit-identical.
    """
    contributions: dict[str, list[tuple[int, int, dict[str, np.ndarray]]]] = {}
    for up in sorted(uploads, key=lambda u: u.client):
        if up.num_samples < 1:
            raise AggregationError(f"client {up.client} reports no samples")
        per_block: dict[str, dict[str, np.ndarray]] = {}
        for block, name, arr in decode_entries(up.payload):
            if block not in partition.blocks or name not in partition.blocks[block]:
                raise AggregationError(f"client {up.client} uploaded unknown {block}:{name}")
            if arr.shape != server.trainable[name].shape:
                raise AggregationError(
                    f"client {up.client}: {name} has shape {arr.shape}, "
                    f"server expects {server.trainable[name].shape}")
            per_block.setdefault(block, {})[name] = arr
        for block, tensors in per_block.items():
            if set(tensors) != set(partition.blocks[block]):
                raise AggregationError(f"client {up.client} uploaded a partial block {block}")
            contributions.setdefault(block, []).append((up.client, up.num_samples, tensors))

    report = AggregationReport({b: BlockReport() for b in partition.blocks},
                               upload_bytes=sum(u.nbytes for u in uploads))
    for block in sorted(contributions):
        owners = contributions[block]
        total = sum(n for _, n, _ in owners)
        weights = {cid: n / total for cid, n, _ in owners}
        rep = report.blocks[block]
        rep.owners, rep.total_weight, rep.weights = len(owners), float(total), weights
        rep.pre_norm = _block_norm(server, partition, block)
        for name in partition.blocks[block]:
            acc = np.zeros_like(server.trainable[name])
            for cid, _, tensors in owners:
                acc += weights[cid] * tensors[name]
            server.trainable[name][...] = acc
        rep.post_norm = _block_norm(server, partition, block)
    return report


def broadcast(server: ParamStore, clients: Iterable[ClientState]) -> None:
    """Overwrite every client's owned blocks with the server's current values."""
    for state in clients:
        for name in state.view.store.trainable:
            state.view.store.trainable[name][...] = server.trainable[name]


# ---------------------------------------------------------------------------
# outer loop


def run_fl(clients: Sequence[ClientState], server: ParamStore, partition: BlockPartition,
           cfg: RoundConfig, mode: str = "fedavg", log_fn: MetricsLog | None = None) -> list[dict]:
    """Plain FedAvg (or local-only) training for ``cfg.rounds`` rounds."""
    if mode not in ("local", "fedavg"):
        raise ValueError(f"unknown mode {mode!r}")
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)

    by_id = {c.client: c for c in clients}
    cfg.validate(len(clients))
    for t in range(cfg.rounds):
        lr = cfg.lr(t)
        chosen = sample_participants(t, list(by_id), cfg)
        uploads = []
        for cid in chosen:
            state = by_id[cid]
            rng = round_rng(cfg.seed, cid, t)
            losses = local_train(state, cfg.local_iters, lr, cfg.batch_size, rng)
            for o, v in losses.items():
                emit({"type": "train", "round": t, "client": cid, "task": o,
                      "loss": v, "role": "local"})
            if mode == "fedavg":
                uploads.append(make_upload(state))
        if mode == "fedavg":
            report = aggregate_components(server, uploads, partition)
            broadcast(server, clients)
            emit({"type": "aggregate", "round": t, "upload_bytes": report.upload_bytes,
                  "blocks_touched": len(report.touched)})
        log.debug("round %d done (%s)", t, mode)
    return records
