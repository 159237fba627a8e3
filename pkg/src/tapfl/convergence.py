"""Synthetic block-structured quadratic federations for checking the server bound.

Client ``i`` owning block ``r`` has the local objective

    g_i(w) = sum_{r owned} 0.5 * (w_r - c_ir)^T Q_r (w_r - c_ir)

with one curvature ``Q_r`` per block shared by all its owners. The global
objective averages each block over its owners, so ``grad_r f = Q_r (w_r - cbar_r)``
and the per-block heterogeneity ``zeta_r^2 = mean_i |Q_r (cbar_r - c_ir)|^2`` does
not depend on ``w``. Stochastic gradients add isotropic Gaussian noise whose
total variance per client is exactly ``sigma^2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Graph


class LearningRateError(ValueError):
    pass


class BoundViolation(AssertionError):
    def __init__(self, message: str, report: "BoundReport"):
        super().__init__(message)
        self.report = report


@dataclass
class QuadraticFederation:
    curvatures: list[np.ndarray]          # Q_r, symmetric PSD
    centers: list[np.ndarray]             # per block: (K_r, d_r) owner centers
    owners: list[list[int]]               # per block: owning client ids
    num_clients: int
    sigma: float = 0.0
    init: list[np.ndarray] = field(default_factory=list)   # starting point per block
    L: float = field(init=False)

    def __post_init__(self) -> None:
        if not (len(self.curvatures) == len(self.centers) == len(self.owners)):
            raise ValueError("curvatures, centers and owners must align per block")
        for r, (q, c, own) in enumerate(zip(self.curvatures, self.centers, self.owners)):
            if not own:
                raise ValueError(f"block {r} has no owner")
            if q.shape != (c.shape[1], c.shape[1]) or c.shape[0] != len(own):
                raise ValueError(f"block {r}: inconsistent shapes")
            if not np.allclose(q, q.T):
                raise ValueError(f"block {r}: curvature not symmetric")
        if not self.init:
            self.init = [np.zeros(c.shape[1]) for c in self.centers]
        self.L = max(power_iteration(q) for q in self.curvatures)

    @property
    def num_blocks(self) -> int:
        return len(self.curvatures)

    @property
    def R(self) -> int:
        return self.num_blocks - 1

    @property
    def dims(self) -> list[int]:
        return [c.shape[1] for c in self.centers]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)])

    @property
    def owner_counts(self) -> list[int]:
        return [len(o) for o in self.owners]

    @property
    def mean_centers(self) -> list[np.ndarray]:
        return [c.mean(axis=0) for c in self.centers]

    @property
    def zeta_sq(self) -> list[float]:
        out = []
        for q, c in zip(self.curvatures, self.centers):
            dev = (c.mean(axis=0) - c) @ q
            out.append(float((dev * dev).sum(axis=1).mean()))
        return out

    @property
    def Z(self) -> float:
        return float(sum(self.zeta_sq))

    @property
    def C_K(self) -> float:
        return float(sum(1.0 / k for k in self.owner_counts))

    def client_blocks(self, client: int) -> list[int]:
        return [r for r, own in enumerate(self.owners) if client in own]

    def split(self, w: np.ndarray) -> list[np.ndarray]:
        off = self.offsets
        return [w[..., off[r]:off[r + 1]] for r in range(self.num_blocks)]

    def initial_point(self) -> np.ndarray:
        return np.concatenate(self.init)

    def minimizer(self) -> np.ndarray:
        return np.concatenate(self.mean_centers)

    def f(self, w: np.ndarray) -> np.ndarray:
        """Global objective; ``w`` may carry leading batch axes."""
        total = 0.0
        for q, c, wr in zip(self.curvatures, self.centers, self.split(w)):
            d = wr[..., None, :] - c
            total = total + 0.5 * np.einsum("...kd,de,...ke->...k", d, q, d).mean(axis=-1)
        return np.asarray(total)

    def grad_f(self, w: np.ndarray) -> np.ndarray:
        parts = [(wr - cbar) @ q for q, cbar, wr in
                 zip(self.curvatures, self.mean_centers, self.split(w))]
        return np.concatenate(parts, axis=-1)

    def grad_client(self, client: int, w: np.ndarray) -> np.ndarray:
        """Gradient of ``g_client`` (zero outside the client's blocks)."""
        parts = []
        for r, (q, c, wr) in enumerate(zip(self.curvatures, self.centers, self.split(w))):
            if client in self.owners[r]:
                parts.append((wr - c[self.owners[r].index(client)]) @ q)
            else:
                parts.append(np.zeros_like(wr))
        return np.concatenate(parts, axis=-1)


def power_iteration(q: np.ndarray, iters: int = 1000, tol: float = 1e-13, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix."""
    v = np.random.default_rng(seed).normal(size=q.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = q @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ q @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def _rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def make_quadratic_federation(R: int, d_r: int, K: int, ownership: Sequence[Sequence[int]] | str = "random",
                              sigma: float = 0.0, seed: int = 0, zeta: float = 0.0,
                              eig_range: tuple[float, float] = (0.5, 1.0),
                              init_scale: float = 2.0) -> QuadraticFederation:
    """Build ``R + 1`` blocks of dimension ``d_r`` shared among ``K`` clients.

    Each block is generated from its own seeded stream, so the first blocks of a
    larger federation equal those of a smaller one. Every block's spectrum spans
    ``eig_range``, which pins ``L`` to its upper end, and every block with more
    than one owner gets heterogeneity exactly ``zeta``.

    ``ownership`` is a per-block list of client ids, ``"all"`` or ``"random"``
    (random subsets of size >= 2 when ``K >= 2``).
    """
    if R < 0 or d_r < 1 or K < 1:
        raise ValueError("need R >= 0, d_r >= 1, K >= 1")
    curv, centers, owners, init = [], [], [], []
    for r in range(R + 1):
        rng = np.random.default_rng([seed, r])
        if ownership == "all":
            own = list(range(K))
        elif ownership == "random":
            size = int(rng.integers(min(2, K), K + 1))
            own = sorted(int(i) for i in rng.choice(K, size=size, replace=False))
        else:
            own = sorted(int(i) for i in ownership[r])
            if not own or any(not 0 <= i < K for i in own):
                raise ValueError(f"block {r}: bad owners {own}")
        lo, hi = eig_range
        eig = np.linspace(hi, lo, d_r) if d_r > 1 else np.array([hi])
        U = _rotation(rng, d_r)
        q = (U * eig) @ U.T
        q = 0.5 * (q + q.T)
        cbar = rng.normal(size=d_r)
        dev = rng.normal(size=(len(own), d_r))
        dev -= dev.mean(axis=0)
        scale = np.sqrt(((dev @ q) ** 2).sum(axis=1).mean())
        if zeta > 0.0 and len(own) < 2:
            raise ValueError(f"block {r} has a single owner, heterogeneity must be 0")
        dev = dev * (zeta / scale) if zeta > 0.0 and scale > 0 else np.zeros_like(dev)
        direction = rng.normal(size=d_r)
        curv.append(q)
        centers.append(cbar + dev)
        owners.append(own)
        init.append(cbar + init_scale * direction / np.linalg.norm(direction))
    return QuadraticFederation(curv, centers, owners, K, sigma, init)


def lr_cap(L: float, tau: int) -> float:
    """Largest step size admitted by the bound's derivation."""
    if L <= 0 or tau < 1:
        raise ValueError("need L > 0 and tau >= 1")
    return min(1.0 / (48 * L * tau), 1.0 / (math.sqrt(8) * L * tau),
               (1.0 / (96 * L**3 * tau**3)) ** (1.0 / 3.0))


def diminishing_schedule(alpha: float, T: int) -> np.ndarray:
    return alpha / (np.arange(T, dtype=np.float64) + 1.0)


@dataclass
class Trajectory:
    etas: np.ndarray        # (T,)
    grad_sq: np.ndarray     # (trials, T): |grad f(W_t)|^2 at round starts
    f: np.ndarray           # (trials, T + 1)
    final: np.ndarray       # (trials, D)


def run_component_fedavg_quadratic(fed: QuadraticFederation, tau: int, etas: Sequence[float],
                                   trials: int = 20, seed: int = 0,
                                   check_cap: bool = True) -> Trajectory:
    """Full-participation component-wise FedAvg with noisy local SGD.

    Every client runs ``tau`` steps of ``w -= eta_t * (grad g_i(w) + noise)``
    over its own blocks, then each block is replaced by the mean over its owners.
    All ``trials`` run side by side with independent noise.
    """
    etas = np.asarray(etas, dtype=np.float64)
    T = etas.size
    if check_cap:
        cap = lr_cap(fed.L, tau)
        worst = int(np.argmax(etas)) if T else 0
        if T and etas[worst] > cap * (1 + 1e-12):
            raise LearningRateError(
                f"eta_{worst} = {etas[worst]:.6g} exceeds the cap {cap:.6g} (L={fed.L:.4g}, tau={tau})")
    rng = np.random.default_rng(seed)
    off = fed.offsets
    D = int(off[-1])
    clients = [i for i in range(fed.num_clients) if fed.client_blocks(i)]
    plans = []
    for i in clients:
        blocks = fed.client_blocks(i)
        idx = np.concatenate([np.arange(off[r], off[r + 1]) for r in blocks])
        Q = np.zeros((idx.size, idx.size))
        c = np.zeros(idx.size)
        pos = 0
        for r in blocks:
            d = fed.dims[r]
            Q[pos:pos + d, pos:pos + d] = fed.curvatures[r]
            c[pos:pos + d] = fed.centers[r][fed.owners[r].index(i)]
            pos += d
        plans.append((idx, Q, c, fed.sigma / math.sqrt(idx.size)))
    counts = np.zeros(D)
    for idx, *_ in plans:
        counts[idx] += 1.0

    W = np.tile(fed.initial_point(), (trials, 1))
    grad_sq = np.zeros((trials, T))
    fvals = np.zeros((trials, T + 1))
    fvals[:, 0] = fed.f(W)
    for t in range(T):
        g = fed.grad_f(W)
        grad_sq[:, t] = (g * g).sum(axis=1)
        eta = etas[t]
        acc = np.zeros_like(W)
        for idx, Q, c, noise_std in plans:
            w = W[:, idx].copy()
            for _ in range(tau):
                step = (w - c) @ Q
                if noise_std > 0.0:
                    step += rng.normal(scale=noise_std, size=w.shape)
                w -= eta * step
            acc[:, idx] += w
        W = acc / counts
        fvals[:, t + 1] = fed.f(W)
    return Trajectory(etas, grad_sq, fvals, W)


# ---------------------------------------------------------------------------
# the bound


@dataclass
class BoundTerms:
    optimality_gap: float
    drift: float
    heterogeneity: float
    noise: float

    @property
    def total(self) -> float:
        return self.optimality_gap + self.drift + self.heterogeneity + self.noise


def bound_rhs(delta_f: float, etas: Sequence[float], tau: int, L: float, sigma: float,
              Z: float, R: int, C_K: float) -> BoundTerms:
    """The four right-hand-side terms of the server convergence bound."""
    etas = np.asarray(etas, dtype=np.float64)
    s1 = float(etas.sum())
    if s1 <= 0.0:
        raise ValueError("sum of step sizes must be positive")
    s2 = float((etas**2).sum())
    s3 = float((etas**3).sum())
    return BoundTerms(
        optimality_gap=8.0 * delta_f / s1,
        drift=16.0 * (Z + (R + 1) * sigma**2 / 3.0) * tau**3 * L**2 * s3 / s1,
        heterogeneity=48.0 * L * tau**2 * Z * s2 / s1,
        noise=16.0 * L * tau * sigma**2 * C_K * s2 / s1,
    )


def weighted_lhs(traj: Trajectory, T: int) -> np.ndarray:
    """Per-trial ``sum_t eta_t |grad f(W_t)|^2 / sum_t eta_t`` over the first ``T`` rounds."""
    e = traj.etas[:T]
    return (traj.grad_sq[:, :T] * e).sum(axis=1) / e.sum()


def step_ratios(alpha: float, T: int) -> tuple[float, float]:
    """``(sum eta^2 / sum eta, sum eta^3 / sum eta)`` for ``eta_t = alpha / (t + 1)``."""
    e = diminishing_schedule(alpha, T)
    s1 = e.sum()
    return float((e**2).sum() / s1), float((e**3).sum() / s1)


@dataclass
class Checkpoint:
    T: int
    lhs_mean: float
    lhs_stderr: float
    lhs_upper: float
    rhs_mean: float
    rhs_worst: float
    terms_worst: dict
    holds: bool


@dataclass
class BoundReport:
    T: int
    tau: int
    R: int
    L: float
    sigma: float
    Z: float
    C_K: float
    alpha: float
    trials: int
    checkpoints: list[Checkpoint]
    rhs_decreasing: bool
    holds: bool
    curves: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("curves")
        return out


def bound_curves(fed: QuadraticFederation, traj: Trajectory, tau: int) -> dict[str, np.ndarray]:
    """LHS and worst-trial RHS of the bound for every horizon ``T' = 1..T``."""
    e = traj.etas
    s1 = np.cumsum(e)
    s2 = np.cumsum(e**2)
    s3 = np.cumsum(e**3)
    lhs = np.cumsum(traj.grad_sq * e, axis=1) / s1
    n = lhs.shape[0]
    lhs_mean = lhs.mean(axis=0)
    lhs_se = lhs.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(lhs_mean)
    delta = traj.f[:, :1] - traj.f[:, 1:]
    L, s, Z, C = fed.L, fed.sigma, fed.Z, fed.C_K
    rest = (16.0 * (Z + fed.num_blocks * s**2 / 3.0) * tau**3 * L**2 * s3
            + 48.0 * L * tau**2 * Z * s2 + 16.0 * L * tau * s**2 * C * s2) / s1
    rhs = 8.0 * delta / s1 + rest
    return {"T": np.arange(1, e.size + 1), "lhs_mean": lhs_mean,
            "lhs_upper": lhs_mean + 2.0 * lhs_se, "rhs_mean": rhs.mean(axis=0),
            "rhs_worst": rhs.min(axis=0)}


def verify_bound(fed: QuadraticFederation, tau: int, T: int, trials: int = 20, seed: int = 0,
                 alpha: float | None = None, strict: bool = True) -> BoundReport:
    """Run the federation with ``eta_t = alpha / (t + 1)`` and check the bound.

    The Monte-Carlo LHS upper confidence (mean + 2 standard errors) must not
    exceed the smallest per-trial RHS at ``T/4``, ``T/2`` and ``T``, and the mean
    RHS must decrease across those horizons.
    """
    cap = lr_cap(fed.L, tau)
    alpha = cap if alpha is None else alpha
    traj = run_component_fedavg_quadratic(fed, tau, diminishing_schedule(alpha, T), trials, seed)
    curves = bound_curves(fed, traj, tau)
    checkpoints = []
    for horizon in sorted({max(1, T // 4), max(1, T // 2), T}):
        lhs = weighted_lhs(traj, horizon)
        se = float(lhs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        deltas = traj.f[:, 0] - traj.f[:, horizon]
        worst = int(np.argmin(deltas))
        terms = bound_rhs(float(deltas[worst]), traj.etas[:horizon], tau, fed.L, fed.sigma,
                          fed.Z, fed.R, fed.C_K)
        rhs_all = [bound_rhs(float(d), traj.etas[:horizon], tau, fed.L, fed.sigma, fed.Z,
                             fed.R, fed.C_K).total for d in deltas]
        upper = float(lhs.mean()) + 2.0 * se
        checkpoints.append(Checkpoint(horizon, float(lhs.mean()), se, upper,
                                      float(np.mean(rhs_all)), terms.total, asdict(terms),
                                      upper <= terms.total))
    rhs_means = [c.rhs_mean for c in checkpoints]
    decreasing = all(b < a for a, b in zip(rhs_means, rhs_means[1:]))
    report = BoundReport(T, tau, fed.R, fed.L, fed.sigma, fed.Z, fed.C_K, alpha, trials,
                         checkpoints, decreasing,
                         all(c.holds for c in checkpoints) and decreasing, curves)
    if strict and not report.holds:
        failed = [c for c in checkpoints if not c.holds]
        raise BoundViolation(f"bound check failed: {failed or 'RHS not decreasing'}", report)
    return report


def f_graph(fed: QuadraticFederation, w: np.ndarray) -> tuple[Graph, int, int]:
    """The global objective as an autodiff graph; returns ``(graph, root, w leaf)``."""
    g = Graph()
    leaf = g.param(np.asarray(w, dtype=np.float64).reshape(1, -1))
    off = fed.offsets
    terms = []
    for r, (q, c) in enumerate(zip(fed.curvatures, fed.centers)):
        wr = g.slice(leaf, int(off[r]), int(off[r + 1]), axis=1)
        for k in range(c.shape[0]):
            d = g.sub(wr, g.const(c[k][None, :]))
            quad = g.sum(g.mul(g.matmul(d, g.const(q)), d))
            terms.append(g.scale(quad, 0.5 / c.shape[0]))
    root = terms[0]
    for t in terms[1:]:
        root = g.add(root, t)
    return g, root, leaf


@dataclass
class GridPoint:
    R: int
    sigma: float
    zeta: float
    tau: int
    report: BoundReport


def bound_grid(Rs: Sequence[int], sigmas: Sequence[float], zetas: Sequence[float],
               taus: Sequence[int], T: int, trials: int = 20, d_r: int = 4, K: int = 4,
               seed: int = 0) -> list[GridPoint]:
    """``verify_bound`` (non-strict) over a full grid of federations.

    The federation for ``(R, sigma, zeta)`` shares its first blocks with every
    smaller ``R`` because blocks are generated from per-block seed streams.
    """
    out = []
    for R in Rs:
        for sigma in sigmas:
            for zeta in zetas:
                fed = make_quadratic_federation(R, d_r, K, "random", sigma=sigma, seed=seed,
                                                zeta=zeta)
                for tau in taus:
                    rep = verify_bound(fed, tau, T, trials, seed, strict=False)
                    out.append(GridPoint(R, float(sigma), float(zeta), int(tau), rep))
    return out


def rhs_increases_with_R(points: Sequence[GridPoint]) -> bool:
    """Final-horizon mean RHS strictly increases with ``R`` at every other fixed setting."""
    groups: dict[tuple, list[tuple[int, float]]] = {}
    for p in points:
        groups.setdefault((p.sigma, p.zeta, p.tau), []).append(
            (p.R, p.report.checkpoints[-1].rhs_mean))
    for series in groups.values():
        vals = [v for _, v in sorted(series)]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            return False
    return True
