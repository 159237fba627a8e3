"""Multi-modal multi-task server model carved into disjoint trainable blocks.

Layout of the backbone for a sample of modality ``m`` and task ``o``::

    encoder[m] -> mean(MoTE stack[m], MoTE stack[shared])   experts keyed by o
               -> mean(MoME stack[o], MoME stack[shared])   experts keyed by m
               -> decoder[o]

Every linear map in the encoders and backbone is a frozen base plus a LoRA
pair; decoders are fully trainable. Each LoRA pair (or decoder) is one block of
the partition, so FedAvg, broadcast and replacement all work block by block.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Graph

SHARED = "shared"
TASK_KINDS = ("classification", "reconstruction", "sequence-generation")
MODALITY_KINDS = ("vector-image", "token-text")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModalitySpec:
    kind: str
    input_dim: int = 0
    seq_len: int = 0
    vocab: int = 0

    @property
    def encoder_dim(self) -> int:
        # token sequences enter as flattened one-hot rows
        return self.seq_len * self.vocab if self.kind == "token-text" else self.input_dim


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    modality: str
    num_classes: int = 0


@dataclass
class ModelSpec:
    modalities: dict[str, ModalitySpec]
    tasks: dict[str, TaskSpec]
    d_model: int = 16
    layers_mote: int = 1
    layers_mome: int = 1
    lora_ranks: dict[str, int] = field(
        default_factory=lambda: {"encoder": 8, "mix": 16, "expert": 4})
    lora_alpha: dict[str, float] | None = None
    expert_hidden: int = 32
    base_std: float = 0.02
    lora_dropout: float = 0.0
    head_dropout: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.modalities:
            raise ModelError("at least one modality is required")
        if not self.tasks:
            raise ModelError("at least one task is required")
        for name in list(self.modalities) + list(self.tasks):
            if name == SHARED or "/" in name or "." in name:
                raise ModelError(f"illegal component name {name!r}")
        for m, ms in self.modalities.items():
            if ms.kind not in MODALITY_KINDS:
                raise ModelError(f"modality {m}: unknown kind {ms.kind!r}")
            if ms.encoder_dim < 1:
                raise ModelError(f"modality {m}: input dimension must be positive")
        for o, ts in self.tasks.items():
            if ts.kind not in TASK_KINDS:
                raise ModelError(f"task {o}: unknown kind {ts.kind!r}")
            if ts.modality not in self.modalities:
                raise ModelError(f"task {o}: unknown modality {ts.modality!r}")
            if ts.kind == "classification" and ts.num_classes < 2:
                raise ModelError(f"task {o}: needs at least two classes")
            if ts.kind == "sequence-generation" and self.modalities[ts.modality].kind != "token-text":
                raise ModelError(f"task {o}: sequence generation needs a token modality")
        for kind in ("encoder", "mix", "expert"):
            r = self.lora_ranks.get(kind, 0)
            if not 1 <= r <= self.d_model:
                raise ModelError(f"LoRA rank for {kind} must lie in [1, d_model], got {r}")
        if self.layers_mote < 1 or self.layers_mome < 1:
            raise ModelError("each stack needs at least one layer")
        if not (0.0 <= self.lora_dropout < 1.0 and 0.0 <= self.head_dropout < 1.0):
            raise ModelError("dropout rates must lie in [0, 1)")

    def output_dim(self, task: str) -> int:
        ts = self.tasks[task]
        ms = self.modalities[ts.modality]
        if ts.kind == "classification":
            return ts.num_classes
        return ms.encoder_dim

    def lora_scale(self, kind: str) -> float:
        r = self.lora_ranks[kind]
        alpha = (self.lora_alpha or {}).get(kind, float(r))
        return alpha / r


@dataclass
class ParamStore:
    """Frozen bases and trainable tensors, keyed by parameter name."""

    frozen: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        overlap = set(self.frozen) & set(self.trainable)
        if overlap:
            raise ModelError(f"names both frozen and trainable: {sorted(overlap)[:3]}")
        for arr in self.frozen.values():
            arr.flags.writeable = False

    def get(self, name: str) -> np.ndarray:
        if name in self.trainable:
            return self.trainable[name]
        return self.frozen[name]

    def __contains__(self, name: str) -> bool:
        return name in self.trainable or name in self.frozen

    def restrict(self, trainable: Iterable[str], frozen: Iterable[str]) -> "ParamStore":
        """Deep copy of a subset; frozen arrays are read-only and shared."""
        return ParamStore(
            frozen={n: self.frozen[n] for n in sorted(frozen)},
            trainable={n: self.trainable[n].copy() for n in sorted(trainable)},
        )

    def copy(self) -> "ParamStore":
        return self.restrict(self.trainable, self.frozen)

    def digest(self, names: Iterable[str] | None = None) -> str:
        """sha256 over the raw bytes of the named tensors (default: all trainable)."""
        h = hashlib.sha256()
        for n in sorted(self.trainable if names is None else names):
            arr = np.ascontiguousarray(self.get(n), dtype="<f8")
            h.update(n.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


@dataclass
class BlockPartition:
    blocks: dict[str, tuple[str, ...]]
    block_frozen: dict[str, tuple[str, ...]]
    client_blocks: dict[int, frozenset[str]] = field(default_factory=dict)
    task_blocks: dict[tuple[int, str], frozenset[str]] = field(default_factory=dict)

    def block_of(self) -> dict[str, str]:
        return {name: b for b, names in self.blocks.items() for name in names}

    def names(self, blocks: Iterable[str]) -> set[str]:
        return {n for b in blocks for n in self.blocks[b]}

    def validate(self, trainable_names: Iterable[str]) -> None:
        seen: dict[str, str] = {}
        for b, names in self.blocks.items():
            for n in names:
                if n in seen:
                    raise ModelError(f"parameter {n} in blocks {seen[n]} and {b}")
                seen[n] = b
        if set(seen) != set(trainable_names):
            raise ModelError("blocks do not cover exactly the trainable parameters")
        for (cid, o), tb in self.task_blocks.items():
            if not tb <= self.client_blocks[cid]:
                raise ModelError(f"task blocks of ({cid}, {o}) not within client blocks")
        for cid, cb in self.client_blocks.items():
            if not cb <= set(self.blocks):
                raise ModelError(f"client {cid} owns unknown blocks")

    def register_client(self, spec: ModelSpec, client: int,
                        modalities: Iterable[str], tasks: Iterable[str]) -> None:
        modalities, tasks = set(modalities), set(tasks)
        _check_assignment(spec, modalities, tasks)
        self.client_blocks[client] = frozenset(client_route_blocks(spec, modalities, tasks))
        for o in tasks:
            self.task_blocks[(client, o)] = frozenset(task_replace_blocks(spec, o))


def _check_assignment(spec: ModelSpec, modalities: set[str], tasks: set[str]) -> None:
    if not modalities <= set(spec.modalities):
        raise ModelError(f"unknown modalities {sorted(modalities - set(spec.modalities))}")
    if not tasks <= set(spec.tasks):
        raise ModelError(f"unknown tasks {sorted(tasks - set(spec.tasks))}")
    for o in tasks:
        if spec.tasks[o].modality not in modalities:
            raise ModelError(f"task {o} needs modality {spec.tasks[o].modality}, "
                             f"not held by the client")


# ---------------------------------------------------------------------------
# naming rules


def _mote_layers(spec: ModelSpec):
    return range(spec.layers_mote)


def _mome_layers(spec: ModelSpec):
    return range(spec.layers_mome)


def _pair_blocks(side: str, stack: str, layers, key: str) -> list[str]:
    out = []
    for l in layers:
        out.append(f"{side}/{stack}/{l}/mix")
        out.append(f"{side}/{stack}/{l}/exp/{key}")
        out.append(f"{side}/{stack}/{l}/exp/{SHARED}")
    return out


def route_blocks(spec: ModelSpec, task: str) -> list[str]:
    """Every block on the forward path of ``task``."""
    m = spec.tasks[task].modality
    blocks = [f"enc/{m}"]
    for stack in (m, SHARED):
        blocks += _pair_blocks("mote", stack, _mote_layers(spec), task)
    for stack in (task, SHARED):
        blocks += _pair_blocks("mome", stack, _mome_layers(spec), m)
    blocks.append(f"dec/{task}")
    return blocks


def client_route_blocks(spec: ModelSpec, modalities: Iterable[str], tasks: Iterable[str]) -> set[str]:
    out = {f"enc/{m}" for m in modalities}
    for o in tasks:
        out.update(route_blocks(spec, o))
    return out


def task_replace_blocks(spec: ModelSpec, task: str) -> set[str]:
    """Blocks serving ``task`` alone: its decoder, its MoTE experts, its MoME stack."""
    m = spec.tasks[task].modality
    out = {f"dec/{task}"}
    for stack in (m, SHARED):
        out.update(f"mote/{stack}/{l}/exp/{task}" for l in _mote_layers(spec))
    for l in _mome_layers(spec):
        out.add(f"mome/{task}/{l}/mix")
        for key in (m, SHARED):
            out.add(f"mome/{task}/{l}/exp/{key}")
    return out


def expert_keys(spec: ModelSpec, side: str, stack: str) -> list[str]:
    """Routing keys with an expert in ``stack``; experts no route reaches are not built."""
    if side == "mote":
        keys = [o for o in sorted(spec.tasks) if stack == SHARED or spec.tasks[o].modality == stack]
    else:
        keys = sorted(spec.modalities) if stack == SHARED else [spec.tasks[stack].modality]
    return keys + [SHARED]


def _block_to_prefix(block: str) -> str:
    return block.replace("/", ".")


# ---------------------------------------------------------------------------
# construction


def build_server_model(spec: ModelSpec) -> tuple[ParamStore, BlockPartition]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, h = spec.d_model, spec.expert_hidden
    frozen: dict[str, np.ndarray] = {}
    trainable: dict[str, np.ndarray] = {}
    blocks: dict[str, tuple[str, ...]] = {}
    block_frozen: dict[str, tuple[str, ...]] = {}

    def base(name, shape):
        frozen[name] = rng.normal(0.0, spec.base_std, size=shape)

    def lora(prefix, d_out, d_in, kind):
        r = spec.lora_ranks[kind]
        trainable[f"{prefix}.A"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(r, d_in))
        trainable[f"{prefix}.B"] = np.zeros((d_out, r))
        return [f"{prefix}.A", f"{prefix}.B"]

    for m in sorted(spec.modalities):
        p = f"enc.{m}"
        base(f"{p}.W", (d, spec.modalities[m].encoder_dim))
        blocks[f"enc/{m}"] = tuple(lora(p, d, spec.modalities[m].encoder_dim, "encoder"))
        block_frozen[f"enc/{m}"] = (f"{p}.W",)

    sides = (("mote", sorted(spec.modalities), spec.layers_mote),
             ("mome", sorted(spec.tasks), spec.layers_mome))
    for side, stacks, n_layers in sides:
        for stack in stacks + [SHARED]:
            for l in range(n_layers):
                p = f"{side}.{stack}.{l}"
                frozen[f"{p}.ln.g"] = np.ones(d)
                frozen[f"{p}.ln.b"] = np.zeros(d)
                base(f"{p}.mix.W", (d, d))
                blocks[f"{side}/{stack}/{l}/mix"] = tuple(lora(f"{p}.mix", d, d, "mix"))
                block_frozen[f"{side}/{stack}/{l}/mix"] = (f"{p}.mix.W", f"{p}.ln.g", f"{p}.ln.b")
                for key in expert_keys(spec, side, stack):
                    q = f"{p}.exp.{key}"
                    base(f"{q}.up.W", (h, d))
                    base(f"{q}.down.W", (d, h))
                    names = lora(f"{q}.up", h, d, "expert") + lora(f"{q}.down", d, h, "expert")
                    blocks[f"{side}/{stack}/{l}/exp/{key}"] = tuple(names)
                    block_frozen[f"{side}/{stack}/{l}/exp/{key}"] = (f"{q}.up.W", f"{q}.down.W")

    for o in sorted(spec.tasks):
        p = f"dec.{o}"
        kind = spec.tasks[o].kind
        hidden = max(d // 2, 1) if kind == "classification" else 2 * d
        out = spec.output_dim(o)
        trainable[f"{p}.W1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(hidden, d))
        trainable[f"{p}.b1"] = np.zeros(hidden)
        trainable[f"{p}.W2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(out, hidden))
        trainable[f"{p}.b2"] = np.zeros(out)
        blocks[f"dec/{o}"] = (f"{p}.W1", f"{p}.b1", f"{p}.W2", f"{p}.b2")
        block_frozen[f"dec/{o}"] = ()

    store = ParamStore(frozen=frozen, trainable=trainable)
    partition = BlockPartition(blocks=blocks, block_frozen=block_frozen)
    partition.validate(store.trainable)
    return store, partition


def effective_weight(base: np.ndarray, A: np.ndarray, B: np.ndarray,
                     alpha: float, rank: int) -> np.ndarray:
    """``base + (alpha / rank) * B @ A``."""
    base, A, B = (np.asarray(x, dtype=np.float64) for x in (base, A, B))
    if base.ndim != 2 or A.shape != (rank, base.shape[1]) or B.shape != (base.shape[0], rank):
        raise ModelError(f"LoRA shapes base {base.shape}, A {A.shape}, B {B.shape}, rank {rank}")
    return base + (alpha / rank) * (B @ A)


# ---------------------------------------------------------------------------
# client views


@dataclass
class ClientView:
    client: int
    modalities: frozenset[str]
    tasks: frozenset[str]
    spec: ModelSpec
    store: ParamStore
    blocks: frozenset[str]
    task_blocks: dict[str, frozenset[str]]
    partition: BlockPartition

    @property
    def trainable_names(self) -> set[str]:
        return set(self.store.trainable)

    def block_names(self, blocks: Iterable[str]) -> set[str]:
        return self.partition.names(blocks)

    def clone(self) -> "ClientView":
        return ClientView(self.client, self.modalities, self.tasks, self.spec,
                          self.store.copy(), self.blocks, dict(self.task_blocks), self.partition)


def derive_client_view(store: ParamStore, partition: BlockPartition, spec: ModelSpec,
                       client: int, modalities: Iterable[str], tasks: Iterable[str]) -> ClientView:
    modalities, tasks = frozenset(modalities), frozenset(tasks)
    if client not in partition.client_blocks:
        partition.register_client(spec, client, modalities, tasks)
    else:
        _check_assignment(spec, set(modalities), set(tasks))
    blocks = partition.client_blocks[client]
    trainable = partition.names(blocks)
    frozen = {n for b in blocks for n in partition.block_frozen[b]}
    task_blocks = {o: partition.task_blocks[(client, o)] for o in tasks}
    return ClientView(client, modalities, tasks, spec, store.restrict(trainable, frozen),
                      blocks, task_blocks, partition)


# ---------------------------------------------------------------------------
# forward graphs


class _Binder:
    """Lazily turns store entries into graph leaves."""

    def __init__(self, graph: Graph, store: ParamStore, detach: bool = False):
        self.graph = graph
        self.store = store
        self.detach = detach
        self.nodes: dict[str, int] = {}

    def __call__(self, name: str) -> int:
        nid = self.nodes.get(name)
        if nid is None:
            if name in self.store.trainable and not self.detach:
                nid = self.graph.param(self.store.trainable[name], name=name)
            else:
                nid = self.graph.const(self.store.get(name), name=name)
            self.nodes[name] = nid
        return nid

    @property
    def params(self) -> dict[str, int]:
        return {n: i for n, i in self.nodes.items() if n in self.store.trainable and not self.detach}


def _dropout(g: Graph, x: int, p: float, rng: np.random.Generator | None) -> int:
    if rng is None or p <= 0.0:
        return x
    shape = g.value(x).shape
    mask = (rng.random(shape) >= p) / (1.0 - p)
    return g.mul(x, g.const(mask))


def _lora_linear(g: Graph, bind: _Binder, spec: ModelSpec, prefix: str, x: int, kind: str,
                 rng: np.random.Generator | None) -> int:
    out = g.linear(x, bind(f"{prefix}.W"))
    if f"{prefix}.A" not in bind.store:
        return out
    xd = _dropout(g, x, spec.lora_dropout, rng)
    low = g.linear(g.linear(xd, bind(f"{prefix}.A")), bind(f"{prefix}.B"))
    return g.add(out, g.scale(low, spec.lora_scale(kind)))


def _expert(g, bind, spec, prefix, x, rng):
    hidden = g.gelu(_lora_linear(g, bind, spec, f"{prefix}.up", x, "expert", rng))
    return _lora_linear(g, bind, spec, f"{prefix}.down", hidden, "expert", rng)


def _stack(g, bind, spec, side, stack, n_layers, key, x, rng):
    h = x
    for l in range(n_layers):
        p = f"{side}.{stack}.{l}"
        u = g.layernorm(h, bind(f"{p}.ln.g"), bind(f"{p}.ln.b"))
        v = g.add(h, _lora_linear(g, bind, spec, f"{p}.mix", u, "mix", rng))
        e = g.add(_expert(g, bind, spec, f"{p}.exp.{key}", v, rng),
                  _expert(g, bind, spec, f"{p}.exp.{SHARED}", v, rng))
        h = g.add(v, g.scale(e, 0.5))
    return h


def _mean2(g: Graph, a: int, b: int) -> int:
    return g.scale(g.add(a, b), 0.5)


def _decoder(g, bind, spec, task, x, rng):
    p = f"dec.{task}"
    h = g.linear(x, bind(f"{p}.W1"), bind(f"{p}.b1"))
    h = g.relu(h) if spec.tasks[task].kind != "sequence-generation" else g.gelu(h)
    h = _dropout(g, h, spec.head_dropout, rng)
    return g.linear(h, bind(f"{p}.W2"), bind(f"{p}.b2"))


def task_output_node(g: Graph, bind: _Binder, spec: ModelSpec, task: str, inputs: int,
                     rng: np.random.Generator | None = None) -> int:
    m = spec.tasks[task].modality
    z = _lora_linear(g, bind, spec, f"enc.{m}", inputs, "encoder", rng)
    z = _mean2(g, _stack(g, bind, spec, "mote", m, spec.layers_mote, task, z, rng),
               _stack(g, bind, spec, "mote", SHARED, spec.layers_mote, task, z, rng))
    z = _mean2(g, _stack(g, bind, spec, "mome", task, spec.layers_mome, m, z, rng),
               _stack(g, bind, spec, "mome", SHARED, spec.layers_mome, m, z, rng))
    return _decoder(g, bind, spec, task, z, rng)


def _check_task(view: ClientView, task: str, modality: str | None, inputs: np.ndarray) -> None:
    if task not in view.spec.tasks or task not in view.tasks:
        raise ModelError(f"client {view.client} has no task {task!r}")
    m = view.spec.tasks[task].modality
    if modality is not None and modality != m:
        raise ModelError(f"task {task} takes modality {m}, got {modality!r}")
    width = view.spec.modalities[m].encoder_dim
    if inputs.ndim != 2 or inputs.shape[1] != width:
        raise ModelError(f"task {task}: inputs must be n x {width}, got {inputs.shape}")


def forward(view: ClientView, inputs: np.ndarray, modality: str | None, task: str,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Task output for a batch of encoder inputs (inference unless ``rng`` is given)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    _check_task(view, task, modality, inputs)
    g = Graph()
    bind = _Binder(g, view.store, detach=True)
    return g.value(task_output_node(g, bind, view.spec, task, g.const(inputs), rng)).copy()


# ---------------------------------------------------------------------------
# losses


@dataclass
class Batch:
    """Minibatch grouped by task: ``parts[task] = (inputs, targets)``."""

    parts: dict[str, tuple[np.ndarray, np.ndarray]]

    def __len__(self) -> int:
        return sum(x.shape[0] for x, _ in self.parts.values())

    def counts(self) -> dict[str, int]:
        return {o: x.shape[0] for o, (x, _) in self.parts.items() if x.shape[0] > 0}


def sample_loss_node(g: Graph, spec: ModelSpec, task: str, out: int, targets: np.ndarray) -> int:
    kind = spec.tasks[task].kind
    t = g.const(targets)
    if kind == "classification":
        return g.cross_entropy(out, t)
    if kind == "reconstruction":
        return g.mse(out, t)
    vocab = spec.modalities[spec.tasks[task].modality].vocab
    n = g.value(out).shape[0]
    rows = n * g.value(out).shape[1] // vocab
    return g.cross_entropy(g.reshape(out, (rows, vocab)), g.reshape(t, (rows, vocab)))


def per_row_logits(spec: ModelSpec, task: str, out: np.ndarray) -> np.ndarray:
    """Task output as rows of logits (positions flattened for sequence tasks)."""
    if spec.tasks[task].kind == "sequence-generation":
        vocab = spec.modalities[spec.tasks[task].modality].vocab
        return out.reshape(-1, vocab)
    return out


@dataclass
class BatchGraph:
    graph: Graph
    params: dict[str, int]
    outputs: dict[str, int]
    task_losses: dict[str, int]
    weights: dict[str, float]
    loss: int

    def task_loss_values(self) -> dict[str, float]:
        return {o: float(self.graph.value(n)) for o, n in self.task_losses.items()}


def build_batch_graph(view: ClientView, batch: Batch, rng: np.random.Generator | None = None,
                      detach: bool = False) -> BatchGraph:
    """Graph of the sample-count weighted multi-task loss on ``batch``."""
    counts = batch.counts()
    if not counts:
        raise ModelError("empty minibatch")
    total = sum(counts.values())
    g = Graph()
    bind = _Binder(g, view.store, detach=detach)
    outputs, losses, weights, terms = {}, {}, {}, []
    for o in sorted(counts):
        x, y = batch.parts[o]
        _check_task(view, o, None, x)
        out = task_output_node(g, bind, view.spec, o, g.const(x), rng)
        outputs[o] = out
        losses[o] = sample_loss_node(g, view.spec, o, out, y)
        weights[o] = counts[o] / total
        terms.append(g.scale(losses[o], weights[o]))
    loss = terms[0]
    for t in terms[1:]:
        loss = g.add(loss, t)
    return BatchGraph(g, bind.params, outputs, losses, weights, loss)


def task_loss_batch(view: ClientView, batch: Batch) -> tuple[float, dict[str, float]]:
    """Weighted loss ``sum_o |H_o|/|H| * mean loss_o`` and the per-task means."""
    bg = build_batch_graph(view, batch, detach=True)
    return float(bg.graph.value(bg.loss)), bg.task_loss_values()
