"""Exact and sampled moment analysis of the stochastic iterations.

The iterations draw one row index per inner step, uniformly and independently,
so the law of the iterate after K outer loops of length M is a finite sum over
n**(K*M) equally likely index paths.  This module evaluates that law three
ways, which cross-check each other:

* brute force: enumerate every path (budget permitting) and average,
  reusing the solver update arithmetic step for step;
* closed forms: the mean iterate and the second-moment decompositions into a
  deterministic head term plus per-epoch fluctuation terms, each evaluated by
  enumeration over the epoch's own digits only;
* epoch propagation: exact first/second moments pushed through the epoch
  transition map, enumerating the n**M single-epoch digit combinations once.

Conventions used throughout: K counts completed outer loops, so the final
iterate is x_{KM} and per-epoch sums run over j = 0..K-1; inner step t of the
global path consumes digit t (base-n little-endian digits of the path id);
shifted coordinates u = x - (x_dag + B^+ zeta) center the iterate at the noisy
limit point.  Weight matrices R1 are words over powers of B and of the
propagator; the shift R2 is either 0 or B^+ zeta.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .problems import ProblemInstance, noise_functional
from .rng import IndexStream
from .solvers import EpochAccounting, SolverConfig, _Recorder, checkpoint_iterations, \
    run_batch
from .spectral import GramOperator, Propagator

ENUM_BUDGET = 10**7
_BLOCK = 8192


# ---------------------------------------------------------------------------
# weight-operator language

_TOKEN = re.compile(r"^(I|B|M0)(?:\^([-0-9./]+))?$")


def _parse_number(text: str) -> float:
    if "/" in text:
        num, den = text.split("/")
        return float(num) / float(den)
    return float(text)


def operator_word_weights(gram: GramOperator, c0: float, spec: str) -> np.ndarray:
    """Eigenvalue weights of a word like 'I', 'B', 'M0^2', '2*B^1/2 M0^3'."""
    weights = np.ones(gram.m)
    prop = Propagator(gram, c0)
    for token in spec.replace("*", " ").split():
        match = _TOKEN.match(token)
        if match:
            name, power = match.group(1), match.group(2)
            p = 1.0 if power is None else _parse_number(power)
            if name == "B":
                weights = weights * gram.power_weights(p)
            elif name == "M0":
                weights = weights * prop.power_weights(p)
            continue
        try:
            weights = weights * _parse_number(token)
        except ValueError:
            raise ValueError(f"cannot parse operator token {token!r}") from None
    return weights


def operator_word_matrix(gram: GramOperator, c0: float, spec) -> np.ndarray:
    if isinstance(spec, np.ndarray):
        return spec
    return gram.filter_matrix(operator_word_weights(gram, c0, spec))


def shift_vector(inst: ProblemInstance, y: np.ndarray, spec) -> np.ndarray:
    """R2 in {'0', 'Binv_zeta'} (or an explicit vector)."""
    if isinstance(spec, np.ndarray):
        return spec
    if spec in ("0", "zero", 0):
        return np.zeros(inst.m)
    if spec == "Binv_zeta":
        return inst.gram.pinv_apply(noise_functional(inst, y))
    raise ValueError(f"unknown shift spec {spec!r}")


# ---------------------------------------------------------------------------
# path enumeration

def path_count(n: int, M: int, K: int, budget: int = ENUM_BUDGET) -> int:
    total = n ** (K * M)
    if total > budget:
        raise ValueError(
            f"enumeration needs n^(K*M) = {n}^{K * M} = {total} paths, over the "
            f"budget of {budget}")
    return total


def _digit(ids: np.ndarray, n: int, t: int) -> np.ndarray:
    return (ids // n**t) % n


def _iterate_paths(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                   steps: int, method: str, ids: np.ndarray,
                   stop_states: list[int] | None = None) -> dict[int, np.ndarray]:
    """Advance one block of paths `steps` inner steps; return the iterate
    matrix after each step count listed in stop_states (default: just the
    final one).  Arithmetic matches solvers.run_batch exactly."""
    a, n = inst.a, inst.n
    x = np.tile(inst.x0, (ids.size, 1))
    wanted = sorted(set([steps] if stop_states is None else stop_states))
    out = {}
    if 0 in wanted:
        out[0] = x.copy()
    anchor = grad = None
    for t in range(steps):
        i = _digit(ids, n, t)
        rows = a[i]
        if method == "svrg":
            if t % M == 0:
                anchor = x.copy()
                resid = np.einsum("rm,nm->rn", anchor, a) - y
                grad = np.einsum("rn,nm->rm", resid, a) / n
            d = np.einsum("rm,rm->r", rows, x - anchor)
            x = x - c0 * (d[:, None] * rows + grad)
        elif method == "sgd":
            d = np.einsum("rm,rm->r", rows, x) - y[i]
            x = x - (c0 * d)[:, None] * rows
        else:
            raise ValueError(f"enumeration supports sgd and svrg, not {method!r}")
        if t + 1 in wanted:
            out[t + 1] = x.copy()
    return out


def _block_ranges(total: int):
    for start in range(0, total, _BLOCK):
        yield np.arange(start, min(start + _BLOCK, total), dtype=np.int64)


@dataclass(frozen=True)
class ExactMoments:
    mean: np.ndarray
    second_moment_trace: float
    variance_trace: float
    path_count: int


def enumerate_exact_moments(inst: ProblemInstance, y: np.ndarray, c0: float,
                            M: int, K: int, method: str,
                            budget: int = ENUM_BUDGET) -> ExactMoments:
    """Exact mean/second moment of x_{KM} by full path enumeration."""
    y = np.asarray(y, dtype=np.float64)
    total = path_count(inst.n, M, K, budget)
    steps = K * M

    sums, sq = [], []
    for ids in _block_ranges(total):
        x = _iterate_paths(inst, y, c0, M, steps, method, ids)[steps]
        sums.append(x.sum(axis=0))
        sq.append(np.einsum("rm,rm->r", x, x).sum())
    mean = np.add.reduce(np.stack(sums), axis=0) / total
    second = float(np.add.reduce(np.array(sq)) / total)

    var_parts = []
    for ids in _block_ranges(total):
        x = _iterate_paths(inst, y, c0, M, steps, method, ids)[steps]
        d = x - mean
        var_parts.append(np.einsum("rm,rm->r", d, d).sum())
    variance = float(np.add.reduce(np.array(var_parts)) / total)
    return ExactMoments(mean=mean, second_moment_trace=second,
                        variance_trace=variance, path_count=total)


def enumerate_weighted_second_moment(inst: ProblemInstance, y: np.ndarray,
                                     c0: float, M: int, K: int, method: str,
                                     r1="I", r2="0",
                                     budget: int = ENUM_BUDGET) -> float:
    """E || R1 (x_KM - x_dag - B^+ zeta) + R2 ||^2 by full path enumeration."""
    y = np.asarray(y, dtype=np.float64)
    total = path_count(inst.n, M, K, budget)
    steps = K * M
    r1m = operator_word_matrix(inst.gram, c0, r1)
    r2v = shift_vector(inst, y, r2)
    x_ref = inst.x_dag + inst.gram.pinv_apply(noise_functional(inst, y))

    parts = []
    for ids in _block_ranges(total):
        x = _iterate_paths(inst, y, c0, M, steps, method, ids)[steps]
        v = (x - x_ref) @ r1m.T + r2v
        parts.append(np.einsum("rm,rm->r", v, v).sum())
    return float(np.add.reduce(np.array(parts)) / total)


# ---------------------------------------------------------------------------
# closed-form mean

def closed_form_mean(gram: GramOperator, e0: np.ndarray, zeta: np.ndarray,
                     c0: float, M: int, K: int,
                     x_dag: np.ndarray | None = None) -> np.ndarray:
    """Mean iterate after K outer loops: identical for both stochastic methods.

    In error coordinates the mean is M0^(KM) e0 + (I - M0^(KM)) B^+ zeta,
    evaluated as spectral filters.  Pass x_dag to get iterate coordinates.
    """
    power = K * M
    lam = gram.eigenvalues
    mu = 1.0 - c0 * lam
    if mu.min() < -1e-12:
        raise ValueError("step too large: propagator spectrum leaves [0, 1]")
    head = gram.filter_apply(mu**power, e0)
    keep = lam > gram.cutoff
    w = np.zeros_like(lam)
    with np.errstate(divide="ignore"):
        grow = -np.expm1(power * np.log1p(-np.clip(c0 * lam[keep], None, 1.0)))
    w[keep] = grow / lam[keep]
    tail = gram.filter_apply(w, zeta)
    mean_err = head + tail
    return mean_err if x_dag is None else x_dag + mean_err


# ---------------------------------------------------------------------------
# per-epoch operator kit (explicit matrices; valid on any instance)

class _EpochKit:
    """Precomputed per-digit matrices for one instance and step size."""

    def __init__(self, inst: ProblemInstance, y: np.ndarray, c0: float, M: int):
        self.inst, self.c0, self.M = inst, float(c0), int(M)
        a = inst.a
        self.b = inst.gram.matrix
        self.m0 = np.eye(inst.m) - c0 * self.b
        self.m0_pows = [np.linalg.matrix_power(self.m0, i) for i in range(M + 1)]
        # c0 * sum_{t<i} M0^t, the exact polynomial form of (I - M0^i) B^+
        acc = np.zeros((inst.m, inst.m))
        self.stepsum = [acc.copy()]
        for i in range(M):
            acc = acc + c0 * self.m0_pows[i]
            self.stepsum.append(acc.copy())
        xi = np.asarray(y, dtype=np.float64) - inst.y_dag
        self.zeta = noise_functional(inst, y)
        self.zeta_k = a * xi[:, None]  # row k: a_k * xi_k
        self.outer = a[:, :, None] * a[:, None, :]  # row k: a_k a_k^T

    def p_mat(self, k) -> np.ndarray:
        return np.eye(self.inst.m) - self.c0 * self.outer[k]

    def n_mat(self, k) -> np.ndarray:
        return self.b - self.outer[k]

    def suffix_products(self, digits: np.ndarray) -> list[np.ndarray]:
        """suf[i] = P_{d[M-1]} ... P_{d[i]} for one epoch's digits (suf[M] = I)."""
        M, m = self.M, self.inst.m
        suf = [None] * (M + 1)
        suf[M] = np.eye(m)
        for i in range(M - 1, -1, -1):
            suf[i] = suf[i + 1] @ self.p_mat(digits[i])
        return suf

    def h_mats(self, digits: np.ndarray) -> list[np.ndarray]:
        """H_i = (P_{d[M-1]} ... P_{d[i+1]}) N_{d[i]} for i = 0..M-1."""
        suf = self.suffix_products(digits)
        return [suf[i + 1] @ self.n_mat(digits[i]) for i in range(self.M)]

    def l_mat(self, digits: np.ndarray) -> np.ndarray:
        """L = c0 sum_{i=1}^{M-1} H_i (I - M0^i) B^+ via the polynomial form."""
        h = self.h_mats(digits)
        out = np.zeros((self.inst.m, self.inst.m))
        for i in range(1, self.M):
            out += self.c0 * (h[i] @ self.stepsum[i])
        return out


# ---------------------------------------------------------------------------
# variance decompositions evaluated term by term

@dataclass(frozen=True)
class VarianceDecomposition:
    """head + sum(epoch_terms) equals the weighted second moment exactly.

    split_main / split_noise report, per outer loop, the two classical
    sub-families of the plain stochastic method's fluctuation: the per-step
    terms and the delayed noise echoes.  Splitting them into separate mean
    squares drops their covariance, which is nonzero in general, so
    split_main + split_noise may differ from epoch_terms; the gap is the
    summed covariance.  For the anchored method the split is exact and
    split_noise is zero.
    """

    method: str
    head: float
    epoch_terms: np.ndarray
    split_main: np.ndarray
    split_noise: np.ndarray

    @property
    def total(self) -> float:
        return float(self.head + self.epoch_terms.sum())

    @property
    def split_covariance(self) -> np.ndarray:
        return self.epoch_terms - self.split_main - self.split_noise


def _head_term(inst, y, c0, M, K, r1m, r2v) -> float:
    bz = inst.gram.pinv_apply(noise_functional(inst, y))
    u0 = inst.x0 - inst.x_dag - bz
    m0 = np.eye(inst.m) - c0 * inst.gram.matrix
    head_vec = r1m @ (np.linalg.matrix_power(m0, K * M) @ u0) + r2v
    return float(head_vec @ head_vec)


def _require_preconditioned(inst: ProblemInstance) -> None:
    from .problems import is_preconditioned
    if not is_preconditioned(inst):
        raise ValueError(
            "decomposition terms assume mutually orthogonal rows; "
            "apply precondition() first")


def svrg_variance_terms(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                        K: int, r1="I", r2="0",
                        budget: int = ENUM_BUDGET) -> VarianceDecomposition:
    """Second-moment split for the anchored method: deterministic head plus one
    fluctuation term per outer loop, each evaluated by enumerating exactly the
    digits it depends on."""
    _require_preconditioned(inst)
    y = np.asarray(y, dtype=np.float64)
    path_count(inst.n, M, K, budget)
    gram = inst.gram
    r1m = operator_word_matrix(gram, c0, r1)
    r2v = shift_vector(inst, y, r2)
    kit = _EpochKit(inst, y, c0, M)
    x_ref = inst.x_dag + gram.pinv_apply(kit.zeta)
    n = inst.n

    head = _head_term(inst, y, c0, M, K, r1m, r2v)
    terms = np.zeros(K)
    for j in range(K):
        pre = r1m @ np.linalg.matrix_power(kit.m0, (K - 1 - j) * M)
        total = n ** ((j + 1) * M)
        if total > budget:
            raise ValueError("per-term enumeration exceeds the path budget")
        acc = []
        for ids in _block_ranges(total):
            u = _iterate_paths(inst, y, c0, M, j * M, "svrg", ids)[j * M] - x_ref
            block = np.zeros(ids.size)
            for i in range(1, M):
                w = u @ (kit.stepsum[i] @ kit.b).T  # (I - M0^i) u, polynomial form
                k = j * M + i
                rows = inst.a[_digit(ids, n, k)]
                w = w @ kit.b.T - rows * np.einsum("rm,rm->r", rows, w)[:, None]
                for l in range(k + 1, j * M + M):
                    rows_l = inst.a[_digit(ids, n, l)]
                    w = w - kit.c0 * rows_l * np.einsum("rm,rm->r", rows_l, w)[:, None]
                v = w @ pre.T
                block += np.einsum("rm,rm->r", v, v)
            acc.append(block.sum())
        terms[j] = c0**2 * np.add.reduce(np.array(acc)) / total
    return VarianceDecomposition(method="svrg", head=head, epoch_terms=terms,
                                 split_main=terms.copy(),
                                 split_noise=np.zeros(K))


def sgd_variance_terms(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                       K: int, r1="I", r2="0",
                       budget: int = ENUM_BUDGET) -> VarianceDecomposition:
    """Second-moment split for the plain stochastic method.

    The fluctuation of one outer loop is grouped by the inner step whose drawn
    index introduces it: the group for step i holds the step's own term plus
    every later echo of its noise through the partial products.  Groups are
    mutually uncorrelated, so head + sum over groups reproduces the enumerated
    second moment to machine precision; the split_* fields report the two
    sub-families separately (their covariance is not zero in general).
    """
    _require_preconditioned(inst)
    y = np.asarray(y, dtype=np.float64)
    path_count(inst.n, M, K, budget)
    gram = inst.gram
    r1m = operator_word_matrix(gram, c0, r1)
    r2v = shift_vector(inst, y, r2)
    kit = _EpochKit(inst, y, c0, M)
    bz = gram.pinv_apply(kit.zeta)
    x_ref = inst.x_dag + bz
    n = inst.n

    head = _head_term(inst, y, c0, M, K, r1m, r2v)
    exact = np.zeros(K)
    main = np.zeros(K)
    noise = np.zeros(K)
    for j in range(K):
        pre = r1m @ np.linalg.matrix_power(kit.m0, (K - 1 - j) * M)
        total = n ** ((j + 1) * M)
        if total > budget:
            raise ValueError("per-term enumeration exceeds the path budget")
        acc_e, acc_m, acc_n = [], [], []
        for ids in _block_ranges(total):
            u = _iterate_paths(inst, y, c0, M, j * M, "sgd", ids)[j * M] - x_ref
            digits = [_digit(ids, n, j * M + i) for i in range(M)]
            rows_at = [inst.a[d] for d in digits]
            block_e = np.zeros(ids.size)
            block_m = np.zeros(ids.size)
            block_n = np.zeros(ids.size)
            for i in range(M):
                # own term: H_{jM+i} (M0^i u + B^+ zeta) + M0^(M-i-1) noise gap
                w = u @ kit.m0_pows[i].T + bz
                rows = rows_at[i]
                w = w @ kit.b.T - rows * np.einsum("rm,rm->r", rows, w)[:, None]
                for l in range(i + 1, M):
                    rl = rows_at[l]
                    w = w - kit.c0 * rl * np.einsum("rm,rm->r", rl, w)[:, None]
                gap = kit.zeta_k[digits[i]] - kit.zeta
                own = c0 * (w + gap @ kit.m0_pows[M - i - 1].T)
                v = own @ pre.T
                block_m += np.einsum("rm,rm->r", v, v)
                # echoes: H_{jM+i+t+1} M0^t applied to the same noise gap
                group = own
                for t in range(M - i - 1):
                    w2 = gap @ kit.m0_pows[t].T
                    rt = rows_at[i + t + 1]
                    w2 = w2 @ kit.b.T - rt * np.einsum("rm,rm->r", rt, w2)[:, None]
                    for l in range(i + t + 2, M):
                        rl = rows_at[l]
                        w2 = w2 - kit.c0 * rl * np.einsum("rm,rm->r", rl,
                                                          w2)[:, None]
                    echo = c0**2 * w2
                    v = echo @ pre.T
                    block_n += np.einsum("rm,rm->r", v, v)
                    group = group + echo
                v = group @ pre.T
                block_e += np.einsum("rm,rm->r", v, v)
            acc_e.append(block_e.sum())
            acc_m.append(block_m.sum())
            acc_n.append(block_n.sum())
        exact[j] = np.add.reduce(np.array(acc_e)) / total
        main[j] = np.add.reduce(np.array(acc_m)) / total
        noise[j] = np.add.reduce(np.array(acc_n)) / total
    return VarianceDecomposition(method="sgd", head=head, epoch_terms=exact,
                                 split_main=main, split_noise=noise)


# ---------------------------------------------------------------------------
# exact epoch propagation (first and second moments, no sampling)

EPOCH_COMBO_BUDGET = 10**6


def _epoch_digit_combos(n: int, M: int) -> np.ndarray:
    count = n**M
    if count > EPOCH_COMBO_BUDGET:
        raise ValueError("single-epoch digit space exceeds the budget")
    ids = np.arange(count)
    return np.stack([(ids // n**t) % n for t in range(M)], axis=1)


def epoch_transitions(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                      method: str) -> tuple[np.ndarray, np.ndarray]:
    """All n^M per-epoch affine maps u -> T u + v in shifted coordinates."""
    y = np.asarray(y, dtype=np.float64)
    kit = _EpochKit(inst, y, c0, M)
    combos = _epoch_digit_combos(inst.n, M)
    m = inst.m
    count = combos.shape[0]
    if count * m * m > 2 * 10**8:
        raise ValueError("epoch transition stack would not fit the budget")
    t_stack = np.empty((count, m, m))
    v_stack = np.zeros((count, m))
    bz = inst.gram.pinv_apply(kit.zeta)
    for c, digits in enumerate(combos):
        suf = kit.suffix_products(digits)
        if method == "svrg":
            h = [suf[i + 1] @ kit.n_mat(digits[i]) for i in range(M)]
            l_mat = np.zeros((m, m))
            for i in range(1, M):
                l_mat += kit.c0 * (h[i] @ kit.stepsum[i])
            t_stack[c] = kit.m0_pows[M] - l_mat @ kit.b
        elif method == "sgd":
            t_full = suf[1] @ kit.p_mat(digits[0])
            w = np.zeros(m)
            for i in range(M):
                w += kit.c0 * (suf[i + 1] @ kit.zeta_k[digits[i]])
            t_stack[c] = t_full
            v_stack[c] = (t_full - np.eye(m)) @ bz + w
        else:
            raise ValueError(f"unknown method {method!r}")
    return t_stack, v_stack


def exact_final_moments(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                        K: int, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and second-moment matrix of u_K = x_{KM} - x_dag - B^+ zeta."""
    y = np.asarray(y, dtype=np.float64)
    t_stack, v_stack = epoch_transitions(inst, y, c0, M, method)
    count = t_stack.shape[0]
    bz = inst.gram.pinv_apply(noise_functional(inst, y))
    mu = inst.x0 - inst.x_dag - bz
    s = np.outer(mu, mu)
    for _ in range(K):
        tmu = t_stack @ mu
        s_next = np.einsum("cij,jk,clk->il", t_stack, s, t_stack) / count
        s_next += (tmu[:, :, None] * v_stack[:, None, :]).sum(axis=0) / count
        s_next += (v_stack[:, :, None] * tmu[:, None, :]).sum(axis=0) / count
        s_next += (v_stack[:, :, None] * v_stack[:, None, :]).sum(axis=0) / count
        mu = (tmu.sum(axis=0) + v_stack.sum(axis=0)) / count
        s = s_next
    return mu, s


def exact_weighted_second_moment(inst: ProblemInstance, y: np.ndarray, c0: float,
                                 M: int, K: int, method: str, r1="I",
                                 r2="0") -> float:
    """E || R1 u_K + R2 ||^2 via exact epoch propagation (no sampling)."""
    y = np.asarray(y, dtype=np.float64)
    mu, s = exact_final_moments(inst, y, c0, M, K, method)
    r1m = operator_word_matrix(inst.gram, c0, r1)
    r2v = shift_vector(inst, y, r2)
    quad = float(np.einsum("ij,jk,ik->", r1m, s, r1m))
    return quad + 2.0 * float(r2v @ (r1m @ mu)) + float(r2v @ r2v)


# ---------------------------------------------------------------------------
# ordering of the two methods' weighted second moments

@dataclass(frozen=True)
class VarianceComparison:
    svrg_value: float
    sgd_value: float
    mode: str            # enumeration | propagation | monte-carlo
    margin: float        # sgd - svrg; positive favors the anchored method
    ordered: bool
    condition_ok: bool   # comparison-side step/size condition; warning only
    stderr: float = 0.0


def variance_compare(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                     K: int, r1="I", r2="0", runs: int | None = None,
                     seed: int = 0, tol: float = 1e-12) -> VarianceComparison:
    """Compare E||R1 u_K + R2||^2 between the two stochastic methods.

    Small path spaces are enumerated outright; mid-size ones use exact epoch
    propagation; otherwise `runs` Monte Carlo trajectories decide, with a
    3-standard-error margin.  The ordering is guaranteed only under the
    comparison condition, so condition_ok=False marks the result as merely
    empirical; the comparison is still computed.
    """
    _require_preconditioned(inst)
    condition_ok = condition_report(inst, c0, M).compare_ok
    n = inst.n
    if n ** (K * M) <= 10**5:
        svrg = enumerate_weighted_second_moment(inst, y, c0, M, K, "svrg", r1, r2)
        sgd = enumerate_weighted_second_moment(inst, y, c0, M, K, "sgd", r1, r2)
        mode, stderr = "enumeration", 0.0
    elif n**M <= EPOCH_COMBO_BUDGET and n**M * inst.m**2 <= 2 * 10**8:
        svrg = exact_weighted_second_moment(inst, y, c0, M, K, "svrg", r1, r2)
        sgd = exact_weighted_second_moment(inst, y, c0, M, K, "sgd", r1, r2)
        mode, stderr = "propagation", 0.0
    else:
        if not runs or runs < 2:
            raise ValueError("instance too large for exact evaluation; pass runs")
        svrg, se1 = _mc_weighted_second_moment(inst, y, c0, M, K, "svrg", r1, r2,
                                               runs, seed)
        sgd, se2 = _mc_weighted_second_moment(inst, y, c0, M, K, "sgd", r1, r2,
                                              runs, seed + 1)
        mode, stderr = "monte-carlo", float(np.hypot(se1, se2))
    margin = sgd - svrg
    ordered = bool(svrg <= sgd + tol + 3.0 * stderr)
    return VarianceComparison(svrg_value=float(svrg), sgd_value=float(sgd),
                              mode=mode, margin=float(margin), ordered=ordered,
                              condition_ok=condition_ok, stderr=stderr)


def _mc_weighted_second_moment(inst, y, c0, M, K, method, r1, r2, runs, seed
                               ) -> tuple[float, float]:
    r1m = operator_word_matrix(inst.gram, c0, r1)
    r2v = shift_vector(inst, y, r2)
    x_ref = inst.x_dag + inst.gram.pinv_apply(noise_functional(inst, y))
    a, n = inst.a, inst.n
    x = np.tile(inst.x0, (runs, 1))
    anchor = grad = None
    streams = [IndexStream(seed, n, subkey=r) for r in range(runs)]
    idx = np.empty((runs, K * M), dtype=np.int64)
    for r, stream in enumerate(streams):
        idx[r] = stream.block(0, K * M)
    for t in range(K * M):
        rows = a[idx[:, t]]
        if method == "svrg":
            if t % M == 0:
                anchor = x.copy()
                resid = np.einsum("rm,nm->rn", anchor, a) - y
                grad = np.einsum("rn,nm->rm", resid, a) / n
            d = np.einsum("rm,rm->r", rows, x - anchor)
            x = x - c0 * (d[:, None] * rows + grad)
        else:
            d = np.einsum("rm,rm->r", rows, x) - y[idx[:, t]]
            x = x - (c0 * d)[:, None] * rows
    v = (x - x_ref) @ r1m.T + r2v
    vals = np.einsum("rm,rm->r", v, v)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(runs))


# ---------------------------------------------------------------------------
# per-path identity checks

@dataclass(frozen=True)
class RecursionReport:
    max_epoch_deviation: float
    max_telescope_deviation: float
    max_anchor_deviation: float


def recursion_check(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                    K: int, seed: int = 0) -> RecursionReport:
    """Follow one seeded index path and verify, per outer loop, the closed
    epoch recursion, the telescoping identity for the partial products, and
    the first-step identity after each anchor.  Valid on any instance."""
    y = np.asarray(y, dtype=np.float64)
    kit = _EpochKit(inst, y, c0, M)
    digits = IndexStream(seed, inst.n).block(0, K * M)
    a, n = inst.a, inst.n
    m = inst.m

    x = inst.x0.copy()
    dev_epoch = dev_tel = dev_anchor = 0.0
    for k in range(K):
        e_start = x - inst.x_dag
        epoch_digits = digits[k * M:(k + 1) * M]
        anchor = x.copy()
        resid = np.einsum("rm,nm->rn", anchor[None], a)[0] - y
        grad = np.einsum("n,nm->m", resid, a) / n
        for i in range(M):
            rows = a[epoch_digits[i]]
            d = rows @ (x - anchor)
            x = x - c0 * (d * rows + grad)
            if i == 0:
                predicted = kit.m0 @ e_start + c0 * kit.zeta
                got = x - inst.x_dag
                dev_anchor = max(dev_anchor, _rel(got - predicted, got))
        e_end = x - inst.x_dag
        l_mat = kit.l_mat(epoch_digits)
        predicted = (kit.m0_pows[M] - l_mat @ kit.b) @ e_start \
            + (kit.stepsum[M] + l_mat) @ kit.zeta
        dev_epoch = max(dev_epoch, _rel(e_end - predicted, e_end))

        suf = kit.suffix_products(epoch_digits)
        h = kit.h_mats(epoch_digits)
        for i in range(1, M):
            lhs = suf[i]  # product of P over positions i..M-1 of this epoch
            rhs = kit.m0_pows[M - i].copy()
            for l in range(M - i):
                rhs += c0 * (h[i + l] @ kit.m0_pows[l])
            dev_tel = max(dev_tel, _rel(lhs - rhs, lhs))
    return RecursionReport(max_epoch_deviation=dev_epoch,
                           max_telescope_deviation=dev_tel,
                           max_anchor_deviation=dev_anchor)


def _rel(diff, ref) -> float:
    return float(np.linalg.norm(diff) / (1.0 + np.linalg.norm(ref)))


@dataclass(frozen=True)
class OrthogonalityReport:
    max_cross: float
    scale: float
    pair_count: int


def orthogonality_check(inst: ProblemInstance, y: np.ndarray, c0: float, M: int,
                        K: int, method: str = "svrg",
                        budget: int = ENUM_BUDGET) -> OrthogonalityReport:
    """Cross moments E< H_{jM+i} e_jM , H_{j'M+i'} e_j'M > over all paths for
    all distinct index pairs; they should vanish identically."""
    y = np.asarray(y, dtype=np.float64)
    total = path_count(inst.n, M, K, budget)
    kit = _EpochKit(inst, y, c0, M)
    n = inst.n
    labels = [(j, i) for j in range(K) for i in range(M)]

    cross_sums = {}
    diag_sums = {}
    for ids in _block_ranges(total):
        states = _iterate_paths(inst, y, c0, M, K * M, method, ids,
                                stop_states=[j * M for j in range(K)])
        hvecs = []
        for (j, i) in labels:
            e = states[j * M] - inst.x_dag
            k = j * M + i
            rows = inst.a[_digit(ids, n, k)]
            w = e @ kit.b.T - rows * np.einsum("rm,rm->r", rows, e)[:, None]
            for l in range(k + 1, j * M + M):
                rows_l = inst.a[_digit(ids, n, l)]
                w = w - kit.c0 * rows_l * np.einsum("rm,rm->r", rows_l, w)[:, None]
            hvecs.append(w)
        for p in range(len(labels)):
            diag_sums[p] = diag_sums.get(p, 0.0) + float(
                np.einsum("rm,rm->", hvecs[p], hvecs[p]))
            for q in range(p + 1, len(labels)):
                cross_sums[(p, q)] = cross_sums.get((p, q), 0.0) + float(
                    np.einsum("rm,rm->", hvecs[p], hvecs[q]))
    scale = max(diag_sums.values()) / total if diag_sums else 0.0
    max_cross = max((abs(v) for v in cross_sums.values()), default=0.0) / total
    return OrthogonalityReport(max_cross=max_cross, scale=scale,
                               pair_count=len(cross_sums))


# ---------------------------------------------------------------------------
# sampled moments on top of the batched solvers

@dataclass(frozen=True)
class MomentReport:
    method: str
    epochs: np.ndarray
    iterations: np.ndarray
    mean_iterate: np.ndarray
    bias_sq: np.ndarray
    variance: np.ndarray
    mse: np.ndarray
    mse_stderr: np.ndarray
    residual_mse: np.ndarray | None
    run_count: int
    excluded_runs: tuple


def mc_moments(inst: ProblemInstance, y: np.ndarray, cfg: SolverConfig,
               runs: int, include_residual: bool = False) -> MomentReport:
    """Sample moments over independently seeded runs at the checkpoint grid.

    Two deterministic passes: the first accumulates the mean curve, per-run
    errors, and divergence flags; the second replays the same trajectories to
    measure spread around the realized mean without storing iterate history.
    Diverged runs are excluded and reported.
    """
    if runs < 2:
        raise ValueError("need at least two runs for sample moments")
    y = np.asarray(y, dtype=np.float64)
    acct = EpochAccounting(cfg.method, inst.n, cfg.M)
    total = acct.iterations(cfg.max_epochs)
    cp = checkpoint_iterations(acct, cfg, total)

    subkeys = list(range(runs))
    rec = _Recorder(inst, y, cp, len(subkeys), want_residual=include_residual,
                    sum_iterates=True)
    diverged = run_batch(inst, y, cfg, subkeys, rec)
    excluded = tuple(int(r) for r in np.nonzero(diverged)[0])
    if excluded:
        subkeys = [r for r in range(runs) if r not in excluded]
        if len(subkeys) < 2:
            raise ValueError("fewer than two runs survived the divergence guard")
        rec = _Recorder(inst, y, cp, len(subkeys), want_residual=include_residual,
                        sum_iterates=True)
        run_batch(inst, y, cfg, subkeys, rec)
    count = len(subkeys)
    mean_x = rec.sum_x / count

    rec2 = _Recorder(inst, y, cp, count, want_residual=False, centers=mean_x)
    run_batch(inst, y, cfg, subkeys, rec2)

    diff = mean_x - inst.x_dag
    bias_sq = np.einsum("cm,cm->c", diff, diff)
    variance = rec2.centered_sq.mean(axis=0)
    mse = rec.error_sq.mean(axis=0)
    stderr = rec.error_sq.std(axis=0, ddof=1) / math.sqrt(count)
    resid = None if rec.residual_sq is None else rec.residual_sq.mean(axis=0)
    return MomentReport(method=cfg.method, epochs=acct.epochs(cp), iterations=cp,
                        mean_iterate=mean_x, bias_sq=bias_sq, variance=variance,
                        mse=mse, mse_stderr=stderr, residual_mse=resid,
                        run_count=count, excluded_runs=excluded)


@dataclass(frozen=True)
class ErrorCurves:
    method: str
    epochs: np.ndarray
    iterations: np.ndarray
    error_sq: np.ndarray        # runs x checkpoints
    residual_sq: np.ndarray | None
    excluded_runs: tuple


def error_curves(inst: ProblemInstance, y: np.ndarray, cfg: SolverConfig,
                 runs: int, include_residual: bool = False) -> ErrorCurves:
    """Per-run error curves at the checkpoint grid (single pass)."""
    if runs < 1:
        raise ValueError("need at least one run")
    y = np.asarray(y, dtype=np.float64)
    acct = EpochAccounting(cfg.method, inst.n, cfg.M)
    total = acct.iterations(cfg.max_epochs)
    cp = checkpoint_iterations(acct, cfg, total)
    subkeys = list(range(runs))
    rec = _Recorder(inst, y, cp, len(subkeys), want_residual=include_residual)
    diverged = run_batch(inst, y, cfg, subkeys, rec)
    excluded = tuple(int(r) for r in np.nonzero(diverged)[0])
    if excluded:
        subkeys = [r for r in range(runs) if r not in excluded]
        if not subkeys:
            raise ValueError("no runs survived the divergence guard")
        rec = _Recorder(inst, y, cp, len(subkeys), want_residual=include_residual)
        run_batch(inst, y, cfg, subkeys, rec)
    return ErrorCurves(method=cfg.method, epochs=acct.epochs(cp), iterations=cp,
                       error_sq=rec.error_sq, residual_sq=rec.residual_sq,
                       excluded_runs=excluded)


def stopping_stats(curves: ErrorCurves) -> tuple[float, float, float]:
    """Mean optimal-stopping epoch, mean error there, and its standard error,
    with the optimum taken per run (first index on ties)."""
    best = np.argmin(curves.error_sq, axis=1)
    kstars = curves.epochs[best]
    errs = np.sqrt(curves.error_sq[np.arange(best.size), best])
    se = errs.std(ddof=1) / math.sqrt(best.size) if best.size > 1 else 0.0
    return float(kstars.mean()), float(errs.mean()), float(se)


# ---------------------------------------------------------------------------
# constants, conditions, and convergence bounds

@dataclass(frozen=True)
class ConditionReport:
    n: int
    M: int
    c0: float
    norm_b: float
    c_star: float
    contraction_factor: float      # (1 - c0 ||B||)^(-M)
    inner_drift_sum: float         # sum_{i<M} (1 - (1 - c0||B||)^i)^2
    contraction_factor_sq: float   # (1 - c0 ||B||)^(-2(M-1))
    rate_lhs: float
    rate_rhs: float
    rate_ok: bool
    compare_lhs_step: float
    compare_rhs_step: float
    compare_lhs_size: float
    compare_rhs_size: float
    compare_ok: bool
    step_times_norm: float         # c0 ||B|| M, the rate-side small parameter
    step_times_norm_compare: float  # c0 ||B|| (M-1), the comparison-side one


def condition_report(inst: ProblemInstance, c0: float, M: int,
                     c_star: float = 2.0) -> ConditionReport:
    if c_star <= 1:
        raise ValueError("c_star must exceed 1")
    norm_b = inst.gram.norm
    n = inst.n
    x = c0 * norm_b
    if not 0 < x < 1:
        raise ValueError("need 0 < c0 ||B|| < 1 for the condition constants")
    c_b = (1.0 - x) ** (-M)
    c_bm = float(sum((1.0 - (1.0 - x) ** i) ** 2 for i in range(1, M)))
    c_bp = (1.0 - x) ** (-2 * (M - 1))
    rate_lhs = (4.0 + 2.0 * (M * x) ** 2) * n * M ** (-2.0) * c_b * c_bm
    rate_rhs = 1.0 - 1.0 / c_star
    cmp_l1 = (M - 1) ** 2 * x**2
    cmp_r1 = 1.0 / (2.0 * c_bp)
    cmp_l2 = float((M + 1) ** 2)
    cmp_r2 = (n - 1) / (2.0 * c_bp)
    return ConditionReport(
        n=n, M=M, c0=c0, norm_b=norm_b, c_star=c_star,
        contraction_factor=c_b, inner_drift_sum=c_bm, contraction_factor_sq=c_bp,
        rate_lhs=rate_lhs, rate_rhs=rate_rhs, rate_ok=rate_lhs <= rate_rhs,
        compare_lhs_step=cmp_l1, compare_rhs_step=cmp_r1,
        compare_lhs_size=cmp_l2, compare_rhs_size=cmp_r2,
        compare_ok=(cmp_l1 <= cmp_r1) and (cmp_l2 <= cmp_r2),
        step_times_norm=x * M, step_times_norm_compare=x * (M - 1))


def theorem_bound(norm_b: float, n: int, c0: float, M: int, K: int, nu: float,
                  norm_w: float, delta_bar: float, c_star: float = 2.0) -> float:
    """Upper bound on E||x_KM - x_dag||^2 after K outer loops under the rate
    condition, for a source representation of order nu and noise delta_bar."""
    if K < 1:
        raise ValueError("need K >= 1")
    x = c0 * norm_b
    if not 0 < x < 1:
        raise ValueError("need 0 < c0 ||B|| < 1")
    c_b = (1.0 - x) ** (-M)
    c_dd = (3.0 + 2.0 * (M * x) ** 2) * n * M * c_b * c0**2 * norm_b
    c_nu = nu**nu * (M * c0) ** (-nu)
    approx = (2.0 + 2.0 ** (2 * nu) * norm_b * c_dd * c_star) \
        * c_nu**2 * float(K) ** (-2 * nu) * norm_w**2
    noise = (2.0 * M * c0 + c_dd * c_star) * K * delta_bar**2
    return float(approx + noise)


def residual_bound(n: int, c0: float, M: int, K: int, nu: float, norm_w: float,
                   delta_bar: float, c_star: float = 2.0) -> float:
    """Upper bound on E||A x_KM - y||^2 for the anchored method."""
    if K < 1:
        raise ValueError("need K >= 1")
    s = nu + 0.5
    c_s = s**s * (M * c0) ** (-s)
    approx = 2.0 ** (2 * nu + 2) * c_s**2 * n * c_star \
        * float(K) ** (-(2 * nu + 1)) * norm_w**2
    noise = 2.0 * n * c_star * delta_bar**2
    return float(approx + noise)


def rate_fit(deltas, values) -> tuple[float, float]:
    """Least-squares slope and intercept of log(values) against log(deltas)."""
    deltas = np.asarray(deltas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if deltas.size != values.size or deltas.size < 2:
        raise ValueError("need matching arrays with at least two points")
    if np.any(deltas <= 0) or np.any(values <= 0):
        raise ValueError("rate fit needs positive data")
    slope, intercept = np.polyfit(np.log(deltas), np.log(values), 1)
    return float(slope), float(intercept)
