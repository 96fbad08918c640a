"""Stochastic and deterministic iterations for the regularized least-squares
functional J(x) = (1/2n) ||A x - y||^2.

Three methods share one batched core: plain stochastic gradient steps,
a variance-reduced double loop with full-gradient anchors, and deterministic
full-gradient descent.  All inner products go through ``einsum`` reductions,
which are bitwise independent of the batch size; with data generated by
``problems.exact_data`` this makes x0 = x_dag with exact data a bitwise fixed
point of every method.

Update arithmetic (fixed, relied on by replay tests):
    stochastic:     d = einsum(rows, X) - y[idx];  X = X - (c0*d)[:,None]*rows
    anchored:       d = einsum(rows, X - Xa);      X = X - c0*(d[:,None]*rows + G)
    full gradient:  resid = einsum(X, A) - y;      G = einsum(resid, A) / n
    descent:        X = X - (c0*n)*G

One epoch is n stochastic-gradient evaluations: n plain stochastic steps,
n*M/(n+M) anchored inner steps (each anchor adds a full-gradient's worth of
work), or a single descent step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import ProblemInstance
from .rng import IndexStream
from .spectral import stability_step_bound

_CHUNK = 4096  # iterations per index-stream draw
DIVERGENCE_FACTOR = 1e12

METHODS = ("sgd", "svrg", "landweber")


class DivergenceError(RuntimeError):
    """An iterate left the divergence guard region."""


@dataclass(frozen=True)
class SolverConfig:
    method: str
    c0: float
    max_epochs: float
    M: int = 1
    seed: int = 0
    checkpoint_every: float = 1.0
    record_residual: bool = True
    allow_large_step: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choices: {METHODS}")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not self.max_epochs > 0:
            raise ValueError("max_epochs must be positive")
        if self.M < 1:
            raise ValueError("inner loop length M must be >= 1")
        if not self.checkpoint_every > 0:
            raise ValueError("checkpoint_every must be positive")


@dataclass(frozen=True)
class EpochAccounting:
    """Cost bookkeeping: an epoch is n stochastic-gradient evaluations."""

    method: str
    n: int
    M: int = 1

    @property
    def units_per_iteration(self) -> float:
        if self.method == "sgd":
            return 1.0
        if self.method == "svrg":
            return (self.n + self.M) / self.M
        if self.method == "landweber":
            return float(self.n)
        raise ValueError(f"unknown method {self.method!r}")

    @property
    def iterations_per_epoch(self) -> float:
        return self.n / self.units_per_iteration

    def epochs(self, iterations) -> np.ndarray:
        return np.asarray(iterations, dtype=np.float64) / self.iterations_per_epoch

    def iterations(self, epochs: float) -> int:
        return max(1, int(round(epochs * self.iterations_per_epoch)))


@dataclass(frozen=True)
class Trajectory:
    method: str
    epochs: np.ndarray
    iterations: np.ndarray
    error_sq: np.ndarray
    residual_sq: np.ndarray | None
    meta: dict

    def __len__(self) -> int:
        return self.epochs.size


def checkpoint_iterations(acct: EpochAccounting, cfg: SolverConfig, total: int
                          ) -> np.ndarray:
    stride = max(1, round(cfg.checkpoint_every * acct.iterations_per_epoch))
    marks = set(range(0, total + 1, stride))
    if cfg.method == "svrg":
        marks.update(range(0, total + 1, cfg.M))  # anchor states
    marks.add(0)
    marks.add(total)
    return np.array(sorted(marks), dtype=np.int64)


def step_stability_bound(inst: ProblemInstance, method: str) -> float:
    if method == "landweber":
        return 1.0 / (inst.n * inst.gram.norm)
    return stability_step_bound(inst.a, inst.gram)


def step_is_admissible(inst: ProblemInstance, cfg: SolverConfig) -> bool:
    return cfg.c0 <= step_stability_bound(inst, cfg.method) * (1 + 1e-9)


def _validate_step(inst: ProblemInstance, cfg: SolverConfig) -> None:
    if not step_is_admissible(inst, cfg) and not cfg.allow_large_step:
        bound = step_stability_bound(inst, cfg.method)
        raise ValueError(
            f"step c0={cfg.c0:.6g} exceeds the stability bound {bound:.6g} for "
            f"{cfg.method}; pass allow_large_step to run anyway")


class _Recorder:
    """Collects per-checkpoint statistics from the batched iterate matrix."""

    def __init__(self, inst: ProblemInstance, y: np.ndarray, cp: np.ndarray,
                 runs: int, *, want_residual: bool, sum_iterates: bool = False,
                 centers: np.ndarray | None = None):
        self.inst, self.y, self.cp = inst, y, cp
        c = cp.size
        self.error_sq = np.empty((runs, c))
        self.residual_sq = np.empty((runs, c)) if want_residual else None
        self.sum_x = np.zeros((c, inst.m)) if sum_iterates else None
        self.centers = centers
        self.centered_sq = np.empty((runs, c)) if centers is not None else None

    def record(self, j: int, x: np.ndarray) -> np.ndarray:
        diff = x - self.inst.x_dag
        err = np.einsum("rm,rm->r", diff, diff)
        self.error_sq[:, j] = err
        if self.residual_sq is not None:
            resid = np.einsum("rm,nm->rn", x, self.inst.a) - self.y
            self.residual_sq[:, j] = np.einsum("rn,rn->r", resid, resid)
        if self.sum_x is not None:
            self.sum_x[j] += x.sum(axis=0)
        if self.centered_sq is not None:
            d = x - self.centers[j]
            self.centered_sq[:, j] = np.einsum("rm,rm->r", d, d)
        return err


def _divergence_limit(inst: ProblemInstance) -> float:
    init = float(np.sum((inst.x0 - inst.x_dag) ** 2))
    ref = init if init > 0 else 1.0 + float(np.sum(inst.x_dag**2))
    return DIVERGENCE_FACTOR * ref


def run_batch(inst: ProblemInstance, y: np.ndarray, cfg: SolverConfig,
              subkeys, recorder: _Recorder) -> np.ndarray:
    """Advance all runs in lockstep, recording at recorder.cp.  Returns a
    boolean mask of runs that tripped the divergence guard (they keep
    iterating; their records past the trip point are not meaningful)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (inst.n,):
        raise ValueError("data vector shape does not match the instance")
    _validate_step(inst, cfg)

    a = inst.a
    n = inst.n
    runs = len(subkeys)
    total = int(recorder.cp[-1])
    limit = _divergence_limit(inst)
    diverged = np.zeros(runs, dtype=bool)

    x = np.tile(inst.x0, (runs, 1))
    cp = recorder.cp
    next_cp = 0
    if cp[0] == 0:
        recorder.record(0, x)
        next_cp = 1

    if cfg.method == "landweber":
        scale = cfg.c0 * n
        for t in range(1, total + 1):
            resid = np.einsum("rm,nm->rn", x, a) - y
            grad = np.einsum("rn,nm->rm", resid, a) / n
            x = x - scale * grad
            if next_cp < cp.size and t == cp[next_cp]:
                err = recorder.record(next_cp, x)
                next_cp += 1
                diverged |= ~np.isfinite(err) | (err > limit)
        return diverged

    streams = [IndexStream(cfg.seed, n, subkey=k) for k in subkeys]
    c0 = cfg.c0
    anchor = None
    grad = None
    t = 0
    while t < total:
        width = min(_CHUNK, total - t)
        idx = np.empty((runs, width), dtype=np.int64)
        for r, stream in enumerate(streams):
            idx[r] = stream.block(t, width)
        for step in range(width):
            i = idx[:, step]
            rows = a[i]
            if cfg.method == "svrg":
                if t % cfg.M == 0:
                    anchor = x.copy()
                    resid = np.einsum("rm,nm->rn", anchor, a) - y
                    grad = np.einsum("rn,nm->rm", resid, a) / n
                d = np.einsum("rm,rm->r", rows, x - anchor)
                x = x - c0 * (d[:, None] * rows + grad)
            else:
                d = np.einsum("rm,rm->r", rows, x) - y[i]
                x = x - (c0 * d)[:, None] * rows
            t += 1
            if next_cp < cp.size and t == cp[next_cp]:
                err = recorder.record(next_cp, x)
                next_cp += 1
                diverged |= ~np.isfinite(err) | (err > limit)
    return diverged


def _metadata(inst: ProblemInstance, cfg: SolverConfig, acct: EpochAccounting,
              run: int, admissible: bool) -> dict:
    return {
        "method": cfg.method, "problem": inst.name, "n": inst.n, "m": inst.m,
        "nu": inst.nu, "c0": cfg.c0, "M": cfg.M, "seed": cfg.seed, "run": run,
        "max_epochs": cfg.max_epochs, "checkpoint_every": cfg.checkpoint_every,
        "iterations_per_epoch": acct.iterations_per_epoch,
        "step_admissible": admissible,
    }


def solve(inst: ProblemInstance, y: np.ndarray, cfg: SolverConfig,
          run: int = 0) -> Trajectory:
    """One seeded trajectory; raises DivergenceError if the guard trips."""
    acct = EpochAccounting(cfg.method, inst.n, cfg.M)
    total = acct.iterations(cfg.max_epochs)
    cp = checkpoint_iterations(acct, cfg, total)
    rec = _Recorder(inst, y, cp, 1, want_residual=cfg.record_residual)
    admissible = step_is_admissible(inst, cfg)
    diverged = run_batch(inst, y, cfg, [run], rec)
    if diverged[0]:
        raise DivergenceError(
            f"{cfg.method} with step c0={cfg.c0:.6g} left the guard region "
            f"(error above {DIVERGENCE_FACTOR:.0e} times its initial size)")
    return Trajectory(
        method=cfg.method, epochs=acct.epochs(cp), iterations=cp,
        error_sq=rec.error_sq[0],
        residual_sq=None if rec.residual_sq is None else rec.residual_sq[0],
        meta=_metadata(inst, cfg, acct, run, admissible))


def sgd_run(inst, y, cfg: SolverConfig, run: int = 0) -> Trajectory:
    if cfg.method != "sgd":
        raise ValueError("config method must be 'sgd'")
    return solve(inst, y, cfg, run)


def svrg_run(inst, y, cfg: SolverConfig, run: int = 0) -> Trajectory:
    if cfg.method != "svrg":
        raise ValueError("config method must be 'svrg'")
    return solve(inst, y, cfg, run)


def landweber_run(inst, y, cfg: SolverConfig) -> Trajectory:
    if cfg.method != "landweber":
        raise ValueError("config method must be 'landweber'")
    return solve(inst, y, cfg)


def oracle_stop(traj: Trajectory) -> tuple[float, float]:
    """Epoch and squared error of the best recorded checkpoint (first on ties)."""
    j = int(np.argmin(traj.error_sq))
    return float(traj.epochs[j]), float(traj.error_sq[j])


def trajectory_rows(traj: Trajectory):
    resid = traj.residual_sq
    for j in range(len(traj)):
        yield (float(traj.epochs[j]), float(traj.error_sq[j]),
               float("nan") if resid is None else float(resid[j]))


def write_trajectory(traj: Trajectory, csv_path, meta_path=None) -> None:
    from . import fileio
    fileio.write_csv(csv_path, ["epoch", "error_sq", "residual_sq"],
                     trajectory_rows(traj))
    if meta_path is not None:
        fileio.dump_json({"schema": fileio.SCHEMA_VERSION,
                          "kind": "trajectory_meta", **traj.meta}, meta_path)
