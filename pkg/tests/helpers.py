"""Small models and federations shared by the test modules."""

from __future__ import annotations

import numpy as np

from tapfl.federation import AdamW, ClientData, ClientState
from tapfl.model import (Batch, ModalitySpec, ModelSpec, TaskSpec, build_server_model,
                         derive_client_view)

ACCEPTANCE_LINES: list[str] = []


def tiny_spec(seed: int = 0, d_model: int = 4, **kw) -> ModelSpec:
    return ModelSpec(
        modalities={"img": ModalitySpec("vector-image", input_dim=3),
                    "txt": ModalitySpec("token-text", seq_len=2, vocab=3)},
        tasks={"cls": TaskSpec("classification", "img", 3),
               "rec": TaskSpec("reconstruction", "img"),
               "tcls": TaskSpec("classification", "txt", 2),
               "gen": TaskSpec("sequence-generation", "txt")},
        d_model=d_model, expert_hidden=4, seed=seed,
        **{"lora_ranks": {"encoder": 2, "mix": 2, "expert": 2}, **kw})


def randomize(store, rng, scale=0.5):
    """Move every trainable tensor off its (partly zero) initialization."""
    for arr in store.trainable.values():
        arr[...] = scale * rng.normal(size=arr.shape)


def task_data(spec: ModelSpec, task: str, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    ts = spec.tasks[task]
    ms = spec.modalities[ts.modality]
    if ms.kind == "token-text":
        seq = rng.integers(0, ms.vocab, size=(n, ms.seq_len))
        x = np.eye(ms.vocab)[seq].reshape(n, -1)
    else:
        x = rng.normal(size=(n, ms.input_dim))
    if ts.kind == "classification":
        y = np.eye(ts.num_classes)[rng.integers(0, ts.num_classes, n)]
    elif ts.kind == "reconstruction":
        y = x.copy()
    else:
        nxt = rng.integers(0, ms.vocab, size=(n, ms.seq_len))
        y = np.eye(ms.vocab)[nxt].reshape(n, -1)
    return x, y


def random_batch(spec: ModelSpec, tasks, rng, rows=3) -> Batch:
    return Batch({o: task_data(spec, o, rows, rng) for o in tasks})


ASSIGNMENTS = [
    (["img"], ["cls", "rec"]),
    (["img", "txt"], ["cls", "tcls"]),
    (["txt"], ["tcls", "gen"]),
]


def tiny_federation(seed: int = 0, assignments=ASSIGNMENTS, n_train: int = 24, n_val: int = 8,
                    optimizer=AdamW, sizes=None):
    """Server model plus one ``ClientState`` per assignment with random data."""
    spec = tiny_spec(seed)
    server, partition = build_server_model(spec)
    rng = np.random.default_rng(seed + 100)
    states = []
    for cid, (mods, tasks) in enumerate(assignments):
        view = derive_client_view(server, partition, spec, cid, mods, tasks)
        n = n_train if sizes is None else sizes[cid]
        train = {o: task_data(spec, o, n, rng) for o in sorted(tasks)}
        val = {o: task_data(spec, o, n_val, rng) for o in sorted(tasks)}
        states.append(ClientState(view, ClientData(train, val), optimizer()))
    return spec, server, partition, states
