"""Importance-driven per-layer bit allocation under an average bit budget.

Each layer gets a score ``S`` (mean of ``|W_ij| * A_j`` where ``A`` is the RMS
input activation per channel). Bits are then chosen from a candidate set to
minimize ``sum_l S_l * 2^-b_l`` subject to ``sum_l b_l p_l / sum_l p_l <= B_avg``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .errors import ContractError, InfeasibleError

LN2 = float(np.log(2.0))
FEASIBILITY_TOL = 1e-9
ORACLE_LIMIT = 10**6


@dataclass(frozen=True)
class LayerImportance:
    layer_id: str
    A: np.ndarray
    S: float
    p: int


def channel_importance(activations) -> np.ndarray:
    """Per-input-channel RMS importance ``A_j``.

    ``activations`` is ``(M, N, C_in)`` (samples, tokens, channels) or
    ``(M, C_in)`` for token-free dense layers.
    """
    X = np.asarray(activations, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ContractError("activations must be (M, N, C_in) or (M, C_in)")
    if X.shape[0] == 0:
        raise ContractError("empty calibration batch")
    if not np.all(np.isfinite(X)):
        raise ContractError("activations must be finite")
    return np.sqrt(np.einsum("mnj,mnj->j", X, X) / X.shape[0])


def layer_score(W, A) -> float:
    W = np.asarray(W, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if W.ndim != 2 or A.shape != (W.shape[1],):
        raise ContractError(f"importance vector of length {A.size} does not match W {W.shape}")
    return float(np.mean(np.abs(W) * A))


@dataclass
class AllocationProblem:
    S: np.ndarray
    p: np.ndarray
    B: Sequence[int] = (4, 8)
    B_avg: float = 5.0
    lam: float = 1.0
    layer_ids: Optional[List[str]] = None

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64).ravel()
        self.p = np.asarray(self.p, dtype=np.float64).ravel()
        self.B = tuple(sorted({int(b) for b in self.B}))
        if not self.B:
            raise ContractError("candidate bit set is empty")
        if self.S.shape != self.p.shape or self.S.size == 0:
            raise ContractError("S and p must be non-empty and of equal length")
        if np.any(self.S < 0) or not np.all(np.isfinite(self.S)):
            raise ContractError("scores must be finite and nonnegative")
        if np.any(self.p <= 0):
            raise ContractError("parameter counts must be positive")
        if not self.B[0] <= self.B_avg <= self.B[-1]:
            raise ContractError("B_avg must lie within [min(B), max(B)]")
        if not self.lam > 0:
            raise ContractError("penalty coefficient must be positive")
        if self.layer_ids is None:
            self.layer_ids = [str(i) for i in range(self.S.size)]

    @property
    def n_layers(self):
        return self.S.size

    def objective(self, bits) -> float:
        return float(np.sum(self.S * np.exp2(-np.asarray(bits, dtype=np.float64))))

    def average_bits(self, bits) -> float:
        return float(np.dot(np.asarray(bits, dtype=np.float64), self.p) / self.p.sum())

    def feasible(self, bits) -> bool:
        return np.dot(bits, self.p) <= self.B_avg * self.p.sum() * (1 + FEASIBILITY_TOL)


@dataclass
class BitAssignment:
    problem: AllocationProblem
    bits: np.ndarray
    relaxed: Optional[np.ndarray] = None
    steps: int = 0

    @property
    def assigned_bits(self):
        return [int(b) for b in self.bits]

    @property
    def average_bits(self):
        return self.problem.average_bits(self.bits)

    @property
    def objective(self):
        return self.problem.objective(self.bits)

    def to_text(self) -> str:
        pr = self.problem
        lines = [
            f"{lid} {float(s)!r} {int(p)} {int(b)}" for lid, s, p, b in zip(pr.layer_ids, pr.S, pr.p, self.bits)
        ]
        return "\n".join(lines) + "\n"


def read_assignment(text: str) -> List[tuple]:
    """Parse ``layer_id S p bits`` lines back into tuples."""
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        lid, s, p, b = line.split()
        rows.append((lid, float(s), int(p), int(b)))
    return rows


def loss_hor(problem: AllocationProblem, b_hat, S=None):
    """Relaxed allocation loss on a bit tensor ``b_hat`` of shape ``(L,)``."""
    S = problem.S if S is None else S
    b = b_hat if isinstance(b_hat, ad.Tensor) else ad.Tensor(b_hat)
    err = ad.tsum(ad.mul(ad.Tensor(S), ad.exp(ad.mul(b, -LN2))))
    avg = ad.tsum(ad.mul(b, ad.Tensor(problem.p / problem.p.sum())))
    excess = ad.relu(ad.sub(avg, problem.B_avg))
    return ad.add(err, ad.mul(ad.tpow(excess, 2), problem.lam))


def _relaxed_loss_and_grad(S, w, B_avg, lam, b):
    e = S * np.exp2(-b)
    excess = max(0.0, float(np.dot(w, b)) - B_avg)
    loss = float(e.sum()) + lam * excess * excess
    grad = -LN2 * e + 2.0 * lam * excess * w
    return loss, grad


def _relax(problem, S, lr=5.0, max_steps=5000, tol=1e-9):
    lo, hi = problem.B[0], problem.B[-1]
    L = problem.n_layers
    if L == 1:
        b = np.array([float(problem.B_avg)])
    else:
        b = lo + (hi - lo) * (rankdata(S) - 1) / (L - 1)
    w = problem.p / problem.p.sum()
    prev, _ = _relaxed_loss_and_grad(S, w, problem.B_avg, problem.lam, b)
    step = 0
    for step in range(1, max_steps + 1):
        _, g = _relaxed_loss_and_grad(S, w, problem.B_avg, problem.lam, b)
        b = np.clip(b - lr * g, lo, hi)
        loss, _ = _relaxed_loss_and_grad(S, w, problem.B_avg, problem.lam, b)
        if abs(prev - loss) < tol:
            break
        prev = loss
    return b, step


def _nearest(B, b_hat):
    cand = np.asarray(B, dtype=np.float64)
    # argmin returns the first minimum, so ties resolve to the lower candidate
    return cand[np.argmin(np.abs(b_hat[:, None] - cand[None, :]), axis=1)]


def _cost(problem, bits):
    return np.dot(bits, problem.p)


def _repair(problem, bits, S, fixed=None):
    """Demote greedily until the budget holds; layer ``fixed`` is never touched."""
    B = problem.B
    budget = problem.B_avg * problem.p.sum() * (1 + FEASIBILITY_TOL)
    bits = bits.copy()
    while _cost(problem, bits) > budget:
        best, best_rate = None, np.inf
        for l in range(problem.n_layers):
            k = B.index(int(bits[l]))
            if k == 0 or l == fixed:
                continue
            lower = B[k - 1]
            increase = S[l] * (2.0**-lower - 2.0 ** -bits[l])
            rate = increase / ((bits[l] - lower) * problem.p[l])
            if rate < best_rate:
                best, best_rate = (l, lower), rate
        if best is None:
            raise InfeasibleError("every layer is at min(B) and the budget is still exceeded")
        bits[best[0]] = best[1]
    return bits


def _promote(problem, bits, S, fixed=None):
    """Spend remaining slack on the promotions with the best gain per bit-parameter."""
    B = problem.B
    budget = problem.B_avg * problem.p.sum() * (1 + FEASIBILITY_TOL)
    bits = bits.copy()
    while True:
        used = _cost(problem, bits)
        best, best_rate = None, 0.0
        for l in range(problem.n_layers):
            if l == fixed:
                continue
            k = B.index(int(bits[l]))
            for upper in B[k + 1 :]:
                extra = (upper - bits[l]) * problem.p[l]
                if used + extra > budget:
                    continue
                rate = S[l] * (2.0 ** -bits[l] - 2.0**-upper) / extra
                if rate > best_rate:
                    best, best_rate = (l, upper), rate
        if best is None:
            return bits
        bits[best[0]] = best[1]


def _local_search(problem, bits, S):
    """Feasible single and pairwise moves until no move lowers the objective."""
    B = problem.B
    budget = problem.B_avg * problem.p.sum() * (1 + FEASIBILITY_TOL)
    L = problem.n_layers
    bits = bits.copy()

    def gain(l, new):
        return S[l] * (2.0 ** -bits[l] - 2.0**-new)

    improved = True
    while improved:
        improved = False
        used = _cost(problem, bits)
        best, best_gain = None, 1e-15
        for i in range(L):
            for bi in B:
                if bi == bits[i]:
                    continue
                di = (bi - bits[i]) * problem.p[i]
                if used + di <= budget and gain(i, bi) > best_gain:
                    best, best_gain = ((i, bi),), gain(i, bi)
                for j in range(i + 1, L):
                    for bj in B:
                        if bj == bits[j]:
                            continue
                        dj = (bj - bits[j]) * problem.p[j]
                        g = gain(i, bi) + gain(j, bj)
                        if used + di + dj <= budget and g > best_gain:
                            best, best_gain = ((i, bi), (j, bj)), g
        if best is not None:
            for l, b in best:
                bits[l] = b
            improved = True
    return bits


def _refill_search(problem, bits, S):
    """Pin one layer to another candidate, then re-run repair and promotion on the rest."""
    best_obj = float(np.dot(S, np.exp2(-bits)))
    improved = True
    while improved:
        improved = False
        for l in range(problem.n_layers):
            for b in problem.B:
                if b == bits[l]:
                    continue
                trial = bits.copy()
                trial[l] = b
                try:
                    trial = _repair(problem, trial, S, fixed=l)
                except InfeasibleError:
                    continue
                trial = _promote(problem, trial, S, fixed=l)
                obj = float(np.dot(S, np.exp2(-trial)))
                if obj < best_obj * (1 - 1e-12):
                    bits, best_obj, improved = trial, obj, True
    return bits


def optimize_allocation(problem: AllocationProblem, lr=5.0, max_steps=5000) -> BitAssignment:
    """Relaxed projected descent, nearest-candidate rounding, then budget repair.

    The relaxed stage runs on ``S / max(S)`` so a positive rescaling of the
    scores does not change the result. After the greedy demotion that restores
    feasibility, leftover budget is spent by greedy promotion, then a pairwise
    local search and a pin-and-refill search polish the result. Every step
    keeps the assignment feasible.
    """
    S = problem.S / problem.S.max() if problem.S.max() > 0 else problem.S
    relaxed, steps = _relax(problem, S, lr=lr, max_steps=max_steps)
    bits = _nearest(problem.B, relaxed)
    if problem.B[0] * problem.p.sum() > problem.B_avg * problem.p.sum() * (1 + FEASIBILITY_TOL):
        raise InfeasibleError("budget is below min(B) for every layer")
    bits = _repair(problem, bits, S)
    bits = _promote(problem, bits, S)
    bits = _local_search(problem, bits, S)
    bits = _refill_search(problem, bits, S)
    bits = _local_search(problem, bits, S)
    if not problem.feasible(bits):
        raise InfeasibleError("allocation could not be made feasible")
    return BitAssignment(problem, bits.astype(np.int64), relaxed, steps)


def enumerate_oracle(problem: AllocationProblem) -> BitAssignment:
    """Exact minimizer by exhaustive search; ties go to the lexicographically smallest vector."""
    L, nb = problem.n_layers, len(problem.B)
    if nb**L > ORACLE_LIMIT:
        raise ContractError(f"search space {nb}^{L} exceeds {ORACLE_LIMIT}")
    # itertools.product yields vectors in lexicographic order of sorted B
    grid = np.array(list(itertools.product(problem.B, repeat=L)), dtype=np.float64)
    feasible = grid @ problem.p <= problem.B_avg * problem.p.sum() * (1 + FEASIBILITY_TOL)
    if not feasible.any():
        raise InfeasibleError("no assignment satisfies the budget")
    obj = np.exp2(-grid) @ problem.S
    obj[~feasible] = np.inf
    best = int(np.argmin(obj))  # first minimum is the lexicographically smallest
    return BitAssignment(problem, grid[best].astype(np.int64))
