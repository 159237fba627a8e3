"""Synthetic per-client datasets for the four toy task families.

* vector classification: Gaussian class clusters, per-client skewed label mix and
  per-client shift of the cluster centers
* vector reconstruction: low-rank Gaussian inputs with a per-client affine shift;
  the target is the input
* token classification: one Markov chain per class, perturbed per client
* token generation: a per-client Markov chain; targets are the next tokens

Token inputs are flattened one-hot rows of length ``seq_len * vocab``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SynthDatasetSpec:
    modality: str                  # "vector-image" | "token-text"
    task: str                      # classification | reconstruction | sequence-generation
    input_dim: int = 0
    seq_len: int = 0
    vocab: int = 0
    num_classes: int = 0
    label_skew: float = 0.0        # 0: uniform labels everywhere, 1: dominated by a client-specific mix
    center_shift: float = 0.0      # per-client distribution shift strength
    noise: float = 1.0
    separation: float = 3.0
    latent_dim: int = 3
    samples_per_client: int = 64
    val_samples: int = 64
    seed: int = 0
    class_centers: tuple[tuple[float, ...], ...] | None = None

    def validate(self) -> None:
        if not 0.0 <= self.label_skew <= 1.0:
            raise ValueError("label_skew must lie in [0, 1]")
        if not 0.0 <= self.center_shift <= 10.0:
            raise ValueError("center_shift must lie in [0, 10]")
        if self.samples_per_client < 1 or self.val_samples < 1:
            raise ValueError("sample counts must be positive")
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError("classification needs >= 2 classes")
        if self.modality == "token-text" and (self.seq_len < 1 or self.vocab < 2):
            raise ValueError("token data needs seq_len >= 1 and vocab >= 2")
        if self.modality == "vector-image" and self.input_dim < 1:
            raise ValueError("vector data needs input_dim >= 1")


Split = tuple[np.ndarray, np.ndarray]


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n)[idx]


def _label_mix(rng: np.random.Generator, k: int, skew: float) -> np.ndarray:
    if skew == 0.0:
        return np.full(k, 1.0 / k)
    return (1.0 - skew) / k + skew * rng.dirichlet(np.full(k, 0.5))


def _random_chain(rng: np.random.Generator, v: int, concentration: float = 0.3) -> np.ndarray:
    return rng.dirichlet(np.full(v, concentration), size=v)


def _walk(rng: np.random.Generator, chain: np.ndarray, n: int, length: int) -> np.ndarray:
    v = chain.shape[0]
    seq = np.zeros((n, length), dtype=np.int64)
    seq[:, 0] = rng.integers(0, v, size=n)
    cum = np.cumsum(chain, axis=1)
    for s in range(1, length):
        u = rng.random(n)
        rows = cum[seq[:, s - 1]]
        seq[:, s] = np.minimum((u[:, None] > rows).sum(axis=1), v - 1)
    return seq


def _flat_one_hot(seq: np.ndarray, v: int) -> np.ndarray:
    return _one_hot(seq, v).reshape(seq.shape[0], -1)


def synth_dataset(spec: SynthDatasetSpec, num_clients: int) -> list[tuple[Split, Split]]:
    """``[(train, val), ...]`` per client; identical output for identical specs."""
    spec.validate()
    shared = np.random.default_rng([spec.seed, 0])
    out = []
    if spec.modality == "vector-image" and spec.task == "classification":
        if spec.class_centers is not None:
            centers = np.asarray(spec.class_centers, dtype=np.float64)
        else:
            centers = shared.normal(size=(spec.num_classes, spec.input_dim))
            centers *= spec.separation / np.linalg.norm(centers, axis=1, keepdims=True)
        for i in range(num_clients):
            rng = np.random.default_rng([spec.seed, 1, i])
            mix = _label_mix(rng, spec.num_classes, spec.label_skew)
            shift = spec.center_shift * rng.normal(size=centers.shape) / np.sqrt(spec.input_dim)
            local = centers + shift

            def draw(n, rng=rng, local=local, mix=mix):
                y = rng.choice(spec.num_classes, size=n, p=mix)
                x = local[y] + spec.noise * rng.normal(size=(n, spec.input_dim))
                return x, _one_hot(y, spec.num_classes)

            out.append((draw(spec.samples_per_client), draw(spec.val_samples)))
    elif spec.modality == "vector-image" and spec.task == "reconstruction":
        basis = shared.normal(size=(spec.latent_dim, spec.input_dim)) / np.sqrt(spec.latent_dim)
        for i in range(num_clients):
            rng = np.random.default_rng([spec.seed, 1, i])
            offset = spec.center_shift * rng.normal(size=spec.input_dim)
            mixing = np.eye(spec.latent_dim) + spec.center_shift * 0.5 * rng.normal(
                size=(spec.latent_dim, spec.latent_dim))

            def draw(n, rng=rng, offset=offset, mixing=mixing):
                z = rng.normal(size=(n, spec.latent_dim))
                x = z @ mixing @ basis + offset + 0.1 * spec.noise * rng.normal(size=(n, spec.input_dim))
                return x, x.copy()

            out.append((draw(spec.samples_per_client), draw(spec.val_samples)))
    elif spec.modality == "token-text" and spec.task == "classification":
        chains = [_random_chain(shared, spec.vocab) for _ in range(spec.num_classes)]
        for i in range(num_clients):
            rng = np.random.default_rng([spec.seed, 1, i])
            mix = _label_mix(rng, spec.num_classes, spec.label_skew)
            w = min(spec.center_shift, 1.0)
            local = [(1 - w) * c + w * _random_chain(rng, spec.vocab) for c in chains]

            def draw(n, rng=rng, local=local, mix=mix):
                y = rng.choice(spec.num_classes, size=n, p=mix)
                seq = np.zeros((n, spec.seq_len), dtype=np.int64)
                for c in range(spec.num_classes):
                    rows = np.flatnonzero(y == c)
                    if rows.size:
                        seq[rows] = _walk(rng, local[c], rows.size, spec.seq_len)
                return _flat_one_hot(seq, spec.vocab), _one_hot(y, spec.num_classes)

            out.append((draw(spec.samples_per_client), draw(spec.val_samples)))
    elif spec.modality == "token-text" and spec.task == "sequence-generation":
        base = _random_chain(shared, spec.vocab)
        for i in range(num_clients):
            rng = np.random.default_rng([spec.seed, 1, i])
            w = min(spec.center_shift, 1.0)
            chain = (1 - w) * base + w * _random_chain(rng, spec.vocab)

            def draw(n, rng=rng, chain=chain):
                seq = _walk(rng, chain, n, spec.seq_len + 1)
                return (_flat_one_hot(seq[:, :-1], spec.vocab),
                        _flat_one_hot(seq[:, 1:], spec.vocab))

            out.append((draw(spec.samples_per_client), draw(spec.val_samples)))
    else:
        raise ValueError(f"unsupported pairing {spec.modality}/{spec.task}")
    return out
