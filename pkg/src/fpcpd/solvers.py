"""CP decomposition solvers: ALS, SALS, and the block-parallel SGD family.

The SGD family (plain SGD, PSGD, FP-CPD) shares one per-entry update. For an
entry ``(i, j, k)`` with lookahead rows ``a = A[i] + gamma*vA[i]`` (and
likewise ``b``, ``c``) and residual ``e = X[i,j,k] - sum(a * b * c)``::

    vA[i] <- gamma * vA[i] + (1 - gamma) * e * b * c
    A[i]  <- A[i] + eta * vA[i] + eta * noise * z - eta * l1 * sign(A[i])

with ``z`` standard normal. ``e * b * c`` is the residual-form direction, i.e.
the negative gradient of ``0.5 * loss``, hence the plus sign.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels
from .blocks import Block, BlockPlan, Entry, build_plan
from .tensor import FactorModel, khatri_rao, loss, unfold

__all__ = [
    "SolverConfig",
    "TraceRecord",
    "FitResult",
    "DivergenceError",
    "mode_gradient",
    "init_factors",
    "als_fit",
    "sals_fit",
    "sgd_fit",
    "psgd_fit",
    "fpcpd_fit",
    "make_entry_update",
    "corcondia",
    "epochs_to_target",
    "write_trace_csv",
    "read_trace_csv",
    "SOLVERS",
]

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3
STOP_WINDOW = 3
RIDGE = 1e-12


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, eta: float, loss_value: float):
        self.epoch = epoch
        self.eta = eta
        self.loss = loss_value
        super().__init__(f"diverged at epoch {epoch} (eta={eta:g}, loss={loss_value:g})")


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}

# config-file key -> SolverConfig attribute
CONFIG_KEYS = {
    "rank": "rank",
    "eta": "eta",
    "eta_decay": "eta_decay",
    "gamma": "gamma",
    "noise": "noise",
    "beta": "beta",
    "epochs": "epochs",
    "tol": "tol",
    "seed": "seed",
    "threads": "threads",
    "deterministic": "deterministic",
    "nag_lookahead": "nag_lookahead",
    "batch_fraction": "batch_fraction",
}


@dataclass
class SolverConfig:
    """Hyperparameters shared by all solvers.

    ``eta`` is the initial step; epoch ``t`` (0-based) uses
    ``eta / (1 + t * eta_decay)`` and scales ``noise`` by the same factor.
    """

    rank: int = 5
    eta: float = 1e-3
    eta_decay: float = 0.0
    gamma: float = 0.9
    noise: float = 1e-4
    beta: float = 0.0
    epochs: int = 200
    tol: float = 1e-6
    seed: int = 0
    threads: int = 1
    deterministic: bool = True
    nag_lookahead: bool = True
    batch_fraction: float = 0.1

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ValueError("rank must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.noise < 0 or self.beta < 0 or self.eta_decay < 0:
            raise ValueError("noise, beta and eta_decay must be >= 0")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if int(self.threads) < 1:
            raise ValueError("threads must be >= 1")
        if int(self.seed) < 0:
            raise ValueError("seed must be >= 0")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must lie in (0, 1]")
        self.rank = int(self.rank)
        self.epochs = int(self.epochs)
        self.threads = int(self.threads)
        self.seed = int(self.seed)

    def replace(self, **changes) -> "SolverConfig":
        d = asdict(self)
        d.update(changes)
        return SolverConfig(**d)

    def step_size(self, epoch: int) -> float:
        return self.eta / (1.0 + epoch * self.eta_decay)

    @classmethod
    def from_mapping(cls, mapping) -> "SolverConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            if key not in CONFIG_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            attr = CONFIG_KEYS[key]
            kw[attr] = _coerce(raw, kinds[attr], key)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "SolverConfig":
        return cls.from_mapping(read_kv_file(path))

    def to_mapping(self) -> dict:
        return {key: getattr(self, attr) for key, attr in CONFIG_KEYS.items()}

    def to_file(self, path) -> None:
        write_kv_file(path, self.to_mapping())


def _coerce(raw, kind, key):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if kind in ("bool", bool):
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    try:
        if kind in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ValueError(f"{key}: bad value {raw!r}") from None


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_kv_file(path, mapping) -> None:
    lines = []
    for k, v in mapping.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


class TraceRecord(NamedTuple):
    epoch: int
    seconds: float
    rmse: float
    loss: float


class FitResult(NamedTuple):
    model: FactorModel
    trace: list[TraceRecord]


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TraceRecord._fields)
        for rec in trace:
            w.writerow([rec.epoch, repr(rec.seconds), repr(rec.rmse), repr(rec.loss)])


def read_trace_csv(path) -> list[TraceRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != list(TraceRecord._fields):
        raise ValueError(f"{path}: expected header {','.join(TraceRecord._fields)}")
    return [TraceRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def epochs_to_target(trace, target: float) -> float:
    """First epoch whose rmse is at or below ``target``; ``inf`` if never reached."""
    for rec in trace:
        if rec.rmse <= target:
            return rec.epoch
    return math.inf


# --------------------------------------------------------------------------- gradients


_OTHERS = {1: (2, 1), 2: (2, 0), 3: (1, 0)}


def mode_gradient(t, f: FactorModel, mode: int, restriction=None) -> np.ndarray:
    """Residual-form descent direction for the mode-``mode`` factor.

    Without ``restriction`` this is ``unfold(X - [[A,B,C]], mode) @ KR`` with
    ``KR`` the Khatri-Rao product of the other two factors (``C, B`` for mode 1,
    ``C, A`` for mode 2, ``B, A`` for mode 3). With a block (or an ``(n, 3)``
    entry array) only those entries' residuals contribute.
    """
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    X = np.asarray(t)
    if X.shape != f.dims:
        raise ValueError(f"tensor dims {X.shape} do not match factor dims {f.dims}")
    facs = f.factors
    if restriction is None:
        res = X - np.einsum("ir,jr,kr->ijk", *facs, optimize=True)
        p, q = _OTHERS[mode]
        return unfold(res, mode) @ khatri_rao(facs[p], facs[q])
    ent = restriction.as_array() if isinstance(restriction, Block) else np.asarray(restriction, dtype=np.int64)
    ent = ent.reshape(-1, 3)
    rows = [facs[ax][ent[:, ax]] for ax in range(3)]
    e = X[ent[:, 0], ent[:, 1], ent[:, 2]] - np.sum(rows[0] * rows[1] * rows[2], axis=1)
    ax = mode - 1
    p, q = [n for n in range(3) if n != ax]
    out = np.zeros_like(facs[ax])
    np.add.at(out, ent[:, ax], e[:, None] * rows[p] * rows[q])
    return out


# --------------------------------------------------------------------------- common


def init_factors(dims, cfg: SolverConfig) -> FactorModel:
    """Uniform [0, 1) factors from the config seed (a stream separate from the data generator's)."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    return FactorModel.random(dims, cfg.rank, rng)


def _start_model(t, cfg, init):
    dims = tuple(np.shape(t))
    if init is None:
        return init_factors(dims, cfg)
    if init.dims != dims:
        raise ValueError(f"initial factors {init.dims} do not match tensor {dims}")
    if init.rank != cfg.rank:
        raise ValueError(f"initial rank {init.rank} != config rank {cfg.rank}")
    return init.copy()


def _converged(losses, tol) -> bool:
    if losses[-1] == 0.0:
        return True
    if len(losses) <= STOP_WINDOW:
        return False
    recent = losses[-(STOP_WINDOW + 1):]
    for a, b in zip(recent[:-1], recent[1:]):
        if abs(a - b) >= tol * max(abs(a), np.finfo(float).tiny):
            return False
    return True


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``M @ gram = rhs`` for ``M`` with relative ridge damping on ``gram``."""
    R = gram.shape[0]
    tr = float(np.trace(gram))
    lam = RIDGE * tr / R if tr > 0 else 1.0
    return np.linalg.solve(gram + lam * np.eye(R), rhs.T).T


# --------------------------------------------------------------------------- ALS


def _als_sweep(X, f: FactorModel) -> None:
    A, B, C = f.A, f.B, f.C
    A = _ridge_solve((C.T @ C) * (B.T @ B), unfold(X, 1) @ khatri_rao(C, B))
    B = _ridge_solve((C.T @ C) * (A.T @ A), unfold(X, 2) @ khatri_rao(C, A))
    C = _ridge_solve((B.T @ B) * (A.T @ A), unfold(X, 3) @ khatri_rao(B, A))
    f.A, f.B, f.C = A, B, C


def als_fit(t, cfg: SolverConfig, init: FactorModel | None = None) -> FitResult:
    """Alternating least squares: solve for A, then B, then C each outer iteration."""
    X = np.asarray(t)
    f = _start_model(t, cfg, init)
    n = X.size
    trace, losses = [], []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        _als_sweep(X, f)
        L = loss(X, f)
        losses.append(L)
        trace.append(TraceRecord(epoch, time.perf_counter() - start, math.sqrt(L / n), L))
        if _converged(losses, cfg.tol):
            break
    return FitResult(f, trace)


# --------------------------------------------------------------------------- SALS


def _rowwise_ls(rows: np.ndarray, Z: np.ndarray, x: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Per-row ridge least squares of ``x`` on features ``Z`` grouped by ``rows``."""
    n_rows, R = current.shape
    order = np.argsort(rows, kind="stable")
    rows, Z, x = rows[order], Z[order], x[order]
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    grams = np.add.reduceat(Z[:, :, None] * Z[:, None, :], starts, axis=0)
    rhs = np.add.reduceat(Z * x[:, None], starts, axis=0)
    out = current.copy()
    for g, b, r in zip(grams, rhs, rows[starts]):
        out[r] = _ridge_solve(g, b[None, :])[0]
    return out


def sals_fit(t, cfg: SolverConfig, init: FactorModel | None = None) -> FitResult:
    """Sampled ALS: per mode, a row-wise closed-form solve on a random subset of entries.

    Each epoch cycles modes 1, 2, 3, drawing a fresh sample of
    ``batch_fraction`` of all entries per mode solve. With ``batch_fraction == 1``
    an epoch is exactly one ALS sweep.
    """
    X = np.asarray(t)
    f = _start_model(t, cfg, init)
    dims = X.shape
    N = X.size
    m = max(1, int(round(cfg.batch_fraction * N)))
    full = m >= N
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    all_idx = np.arange(N)
    trace, losses = [], []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        for ax in range(3):
            flat = all_idx if full else rng.choice(N, size=m, replace=False)
            ijk = np.unravel_index(flat, dims, order="F")
            x = X[ijk]
            facs = [f.A, f.B, f.C]
            p, q = [n for n in range(3) if n != ax]
            Z = facs[p][ijk[p]] * facs[q][ijk[q]]
            new = _rowwise_ls(ijk[ax], Z, x, facs[ax])
            if ax == 0:
                f.A = new
            elif ax == 1:
                f.B = new
            else:
                f.C = new
        L = loss(X, f)
        losses.append(L)
        trace.append(TraceRecord(epoch, time.perf_counter() - start, math.sqrt(L / N), L))
        if _converged(losses, cfg.tol):
            break
    return FitResult(f, trace)


# --------------------------------------------------------------------------- SGD family


def _sgd_loop(t, cfg: SolverConfig, plan, init, gamma, noise, beta, lookahead) -> FitResult:
    X = np.asarray(t)
    dims = X.shape
    if plan is None:
        plan = build_plan(dims)
    elif tuple(plan.dims) != dims:
        raise ValueError(f"plan built for {plan.dims}, tensor is {dims}")
    f = _start_model(t, cfg, init)
    N = X.size
    L0 = loss(X, f)
    # A zero starting loss gives no scale to compare against; only non-finite values count then.
    limit = DIVERGENCE_FACTOR * L0 if L0 > 0 else math.inf
    order = np.arange(plan.d, dtype=np.int64)
    shuffler = None if cfg.deterministic else np.random.default_rng()
    trace, losses = [], []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        eta_t = cfg.step_size(epoch - 1)
        noise_t = noise * eta_t / cfg.eta
        if shuffler is not None:
            order = shuffler.permutation(plan.d).astype(np.int64)
        _kernels.run_epoch(X, f, plan, order, eta_t, gamma, noise_t, beta, lookahead,
                           cfg.seed, epoch, threads=cfg.threads)
        L = loss(X, f)
        if not math.isfinite(L) or L > limit or not f.is_finite():
            raise DivergenceError(epoch, eta_t, L)
        losses.append(L)
        trace.append(TraceRecord(epoch, time.perf_counter() - start, math.sqrt(L / N), L))
        if _converged(losses, cfg.tol):
            break
    return FitResult(f, trace)


def fpcpd_fit(t, cfg: SolverConfig, plan: BlockPlan | None = None, init: FactorModel | None = None) -> FitResult:
    """Block-parallel SGD with Nesterov momentum, Gaussian perturbation and L1 shrinkage.

    Blocks are visited in plan order; the entries of each block are updated
    concurrently on ``cfg.threads`` threads. Raises :class:`DivergenceError`
    when the loss exceeds 1000x its initial value or factors go non-finite.
    """
    return _sgd_loop(t, cfg, plan, init, cfg.gamma, cfg.noise, cfg.beta, cfg.nag_lookahead)


def psgd_fit(t, cfg: SolverConfig, plan: BlockPlan | None = None, init: FactorModel | None = None) -> FitResult:
    """Perturbed SGD: the FP-CPD loop without momentum (``gamma = 0``)."""
    return _sgd_loop(t, cfg, plan, init, 0.0, cfg.noise, cfg.beta, False)


def sgd_fit(t, cfg: SolverConfig, plan: BlockPlan | None = None, init: FactorModel | None = None) -> FitResult:
    """Plain SGD: no momentum, no perturbation, no L1."""
    return _sgd_loop(t, cfg, plan, init, 0.0, 0.0, 0.0, False)


def make_entry_update(X, f: FactorModel, plan: BlockPlan, cfg: SolverConfig, epoch: int,
                      gamma=None, noise=None, beta=None, lookahead=None):
    """Pure-Python form of the compiled entry update, for use with ``run_block_parallel``.

    Mirrors the kernel's arithmetic operation by operation; it exists as an
    independent reference executor for tests and debugging.
    """
    X = np.asarray(X)
    gamma = cfg.gamma if gamma is None else gamma
    noise = cfg.noise if noise is None else noise
    beta = cfg.beta if beta is None else beta
    lookahead = cfg.nag_lookahead if lookahead is None else lookahead
    eta = cfg.step_size(epoch - 1)
    noise = noise * eta / cfg.eta
    R = f.rank
    ent = plan.entries
    flat = np.ravel_multi_index(ent.T, plan.dims)
    position = np.empty(ent.shape[0], dtype=np.int64)
    position[flat] = np.arange(ent.shape[0])
    shift = gamma if lookahead else 0.0
    A, B, C, vA, vB, vC = f.A, f.B, f.C, f.velA, f.velB, f.velC

    def update(entry: Entry):
        i, j, k = entry
        pos = int(position[np.ravel_multi_index((i, j, k), plan.dims)])
        e = float(X[i, j, k])
        for r in range(R):
            e -= (A[i, r] + shift * vA[i, r]) * (B[j, r] + shift * vB[j, r]) * (C[k, r] + shift * vC[k, r])
        z = _kernels.gaussian_draws(np.uint64(cfg.seed), np.int64(epoch), np.int64(pos), 3 * R) if noise else None
        for r in range(R):
            la = A[i, r] + shift * vA[i, r]
            lb = B[j, r] + shift * vB[j, r]
            lc = C[k, r] + shift * vC[k, r]
            va = gamma * vA[i, r] + (1.0 - gamma) * (e * lb * lc)
            vb = gamma * vB[j, r] + (1.0 - gamma) * (e * la * lc)
            vc = gamma * vC[k, r] + (1.0 - gamma) * (e * la * lb)
            vA[i, r], vB[j, r], vC[k, r] = va, vb, vc
            a = A[i, r] + eta * va
            b = B[j, r] + eta * vb
            c = C[k, r] + eta * vc
            if noise:
                a += eta * noise * z[r]
                b += eta * noise * z[R + r]
                c += eta * noise * z[2 * R + r]
            if beta:
                a -= eta * beta * np.sign(A[i, r])
                b -= eta * beta * np.sign(B[j, r])
                c -= eta * beta * np.sign(C[k, r])
            A[i, r], B[j, r], C[k, r] = a, b, c

    return update


SOLVERS = {
    "fpcpd": fpcpd_fit,
    "psgd": psgd_fit,
    "sgd": sgd_fit,
    "sals": sals_fit,
    "als": als_fit,
}


def run_solver(name: str, t, cfg: SolverConfig, plan=None, init=None) -> FitResult:
    if name not in SOLVERS:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}")
    fn = SOLVERS[name]
    if name in ("als", "sals"):
        return fn(t, cfg, init=init)
    return fn(t, cfg, plan=plan, init=init)


# --------------------------------------------------------------------------- CORCONDIA


class CorcondiaResult(NamedTuple):
    value: float
    damped: bool


def _damped_pinv(M: np.ndarray) -> tuple[np.ndarray, bool]:
    R = M.shape[1]
    if M.shape[0] >= R and np.linalg.matrix_rank(M) == R:
        return np.linalg.pinv(M), False
    G = M.T @ M
    tr = float(np.trace(G))
    lam = 1e-10 * tr / R if tr > 0 else 1.0
    return np.linalg.solve(G + lam * np.eye(R), M.T), True


def corcondia(t, f: FactorModel, return_info: bool = False):
    """Core consistency of a CP fit, in percent.

    Fits the least-squares Tucker core of ``X`` against the bases ``A, B, C``
    and compares it with the superdiagonal of ones:
    ``100 * (1 - sum((G - T)**2) / R)``. Rank-deficient factors fall back to a
    damped pseudo-inverse; ``return_info=True`` reports whether that happened.
    """
    X = np.asarray(t)
    if X.shape != f.dims:
        raise ValueError(f"tensor dims {X.shape} do not match factor dims {f.dims}")
    R = f.rank
    pinvs, damped = [], False
    for M in f.factors:
        P, d = _damped_pinv(M)
        pinvs.append(P)
        damped |= d
    G = np.einsum("ijk,pi,qj,sk->pqs", X, *pinvs, optimize=True)
    T = np.zeros((R, R, R))
    T[np.arange(R), np.arange(R), np.arange(R)] = 1.0
    value = float(100.0 * (1.0 - np.sum((G - T) ** 2) / R))
    if return_info:
        return CorcondiaResult(value, damped)
    return value


def select_rank(t, ranks, cfg: SolverConfig, threshold: float = 80.0) -> tuple[int, dict[int, float]]:
    """Largest rank in ``ranks`` whose ALS fit keeps CORCONDIA at or above ``threshold``."""
    scores = {}
    best = min(ranks)
    for R in sorted(ranks):
        fit = als_fit(t, cfg.replace(rank=R))
        scores[R] = corcondia(t, fit.model)
        if scores[R] >= threshold:
            best = R
    return best, scores
