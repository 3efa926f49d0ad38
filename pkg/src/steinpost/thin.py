"""Discrepancy-minimising selection of representative states.

The myopic algorithm greedily appends, at each iteration, the candidate
state minimising

    k_P(x_i, x_i) / 2  +  sum_{previously selected x} k_P(x, x_i),

which is equivalent to minimising the discrepancy of the uniform measure
on the selections extended by one point.  Interaction sums are cached so
the whole run costs O(N M d) kernel work for M selections from N states.

The non-myopic variant selects ``s`` states at once from a random
mini-batch of ``B`` candidates by solving a cardinality-constrained
integer quadratic programme over multiplicity vectors; an exhaustive
enumerator handles small instances exactly and a greedy-plus-swap local
search handles the rest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb, sqrt
from typing import Optional

import numpy as np

from .chain import ChainOutput, with_gradients
from .errors import ValidationError
from .stein import SteinKernelConfig, kernel_to_json, stein_diag, stein_gram, stein_kernel_matrix

__all__ = [
    "ThinningResult",
    "IqpInstance",
    "stein_thin",
    "stein_thin_nonmyopic",
    "solve_iqp",
    "EXHAUSTIVE_CAP",
]

# combinations_with_replacement count above which exhaustive enumeration is refused
EXHAUSTIVE_CAP = 200_000


@dataclass(frozen=True)
class ThinningResult:
    """Selected chain indices plus the per-iteration discrepancy trace.

    ``selected`` may contain repeats (a state can be picked more than
    once); ``ksd_trace[j]`` is the discrepancy of the uniform measure on
    everything selected up to and including iteration ``j``.
    """

    selected: np.ndarray
    ksd_trace: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "selected", np.asarray(self.selected, dtype=int))
        object.__setattr__(self, "ksd_trace", np.asarray(self.ksd_trace, dtype=float))
        if np.any(self.ksd_trace < 0):
            raise ValidationError("ksd_trace entries must be nonnegative")


@dataclass(frozen=True)
class IqpInstance:
    """One batch subproblem: minimise 0.5 v' K v + c' v over multiplicities v, sum(v) = s."""

    gram: np.ndarray
    linear: np.ndarray
    cardinality: int

    def __post_init__(self):
        gram = np.asarray(self.gram, dtype=float)
        linear = np.asarray(self.linear, dtype=float)
        if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
            raise ValidationError(f"gram must be square, got shape {gram.shape}")
        if not np.allclose(gram, gram.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(gram).max())):
            raise ValidationError("gram must be symmetric")
        if linear.shape != (gram.shape[0],):
            raise ValidationError("linear term must match the batch size")
        if self.cardinality < 1:
            raise ValidationError(f"cardinality must be >= 1, got {self.cardinality}")
        object.__setattr__(self, "gram", gram)
        object.__setattr__(self, "linear", linear)

    @property
    def batch_size(self) -> int:
        return self.gram.shape[0]

    def objective(self, v: np.ndarray) -> float:
        v = np.asarray(v, dtype=float)
        return float(0.5 * v @ self.gram @ v + self.linear @ v)


def _solve_iqp_exhaustive(inst: IqpInstance) -> np.ndarray:
    b, s = inst.batch_size, inst.cardinality
    n_multisets = comb(b + s - 1, s)
    if n_multisets > EXHAUSTIVE_CAP:
        raise ValidationError(
            f"exhaustive enumeration of {n_multisets} multisets exceeds the cap "
            f"{EXHAUSTIVE_CAP}; use the heuristic mode"
        )
    best_obj = np.inf
    best_combo = None
    for combo in itertools.combinations_with_replacement(range(b), s):
        idx = list(combo)
        obj = 0.5 * float(inst.gram[np.ix_(idx, idx)].sum()) + float(inst.linear[idx].sum())
        if obj < best_obj:
            best_obj = obj
            best_combo = combo
    v = np.zeros(b, dtype=int)
    for i in best_combo:
        v[i] += 1
    return v


def _solve_iqp_heuristic(inst: IqpInstance) -> np.ndarray:
    """Greedy construction followed by single-unit swap descent."""
    gram, linear = inst.gram, inst.linear
    b, s = inst.batch_size, inst.cardinality
    v = np.zeros(b, dtype=int)
    kv = np.zeros(b)  # gram @ v, kept incrementally
    for _ in range(s):
        # marginal cost of adding one unit at i: 0.5*K_ii + (K v)_i + c_i
        i = int(np.argmin(0.5 * np.diag(gram) + kv + linear))
        v[i] += 1
        kv += gram[:, i]
    diag = np.diag(gram)
    for _ in range(10 * b * s):
        improved = False
        for i in range(b):
            if v[i] == 0:
                continue
            # moving one unit i -> j changes the objective by
            # (Kv)_j - (Kv)_i + 0.5*(K_ii + K_jj) - K_ij + c_j - c_i
            delta = kv - kv[i] + 0.5 * (diag[i] + diag) - gram[:, i] + linear - linear[i]
            delta[i] = np.inf
            j = int(np.argmin(delta))
            if delta[j] < 0.0:
                v[i] -= 1
                v[j] += 1
                kv += gram[:, j] - gram[:, i]
                improved = True
        if not improved:
            break
    return v


def solve_iqp(inst: IqpInstance, mode: str = "auto") -> np.ndarray:
    """Multiplicity vector minimising the batch objective under sum(v) = s.

    Modes: ``exhaustive`` enumerates every multiset (refused above
    :data:`EXHAUSTIVE_CAP`), ``heuristic`` runs greedy + swap descent,
    ``auto`` picks exhaustive whenever the enumeration fits the cap.
    Ties resolve to the lexicographically smallest multiset.
    """
    if mode == "auto":
        n_multisets = comb(inst.batch_size + inst.cardinality - 1, inst.cardinality)
        mode = "exhaustive" if n_multisets <= EXHAUSTIVE_CAP else "heuristic"
    if mode == "exhaustive":
        return _solve_iqp_exhaustive(inst)
    if mode == "heuristic":
        return _solve_iqp_heuristic(inst)
    raise ValidationError(f"unknown IQP mode {mode!r}")


def stein_thin(chain: ChainOutput, cfg: SteinKernelConfig, m: int) -> ThinningResult:
    """Greedy selection of ``m`` representative states (repeats allowed).

    Ties in the per-iteration argmin break to the lowest index.  Kernel
    rows for already-selected states are cached, so repeat selections are
    free.
    """
    if m < 1:
        raise ValidationError(f"number of selections m must be >= 1, got {m}")
    chain = with_gradients(chain, cfg.target)
    pts, grads = chain.states, chain.grads
    n = len(chain)

    diag = stein_diag(cfg, pts, grads)
    running = np.zeros(n)  # sum over selected states x of k_P(x, .)
    selected = np.empty(m, dtype=int)
    trace = np.empty(m)
    quad_sum = 0.0  # sum of k_P over all ordered pairs of selections
    row_cache: dict[int, np.ndarray] = {}
    for j in range(m):
        idx = int(np.argmin(0.5 * diag + running))
        row = row_cache.get(idx)
        if row is None:
            row = stein_kernel_matrix(cfg, pts[idx : idx + 1], grads[idx : idx + 1], pts, grads)[0]
            row_cache[idx] = row
        quad_sum += 2.0 * running[idx] + diag[idx]
        running = running + row
        selected[j] = idx
        trace[j] = sqrt(max(quad_sum, 0.0)) / (j + 1)
    return ThinningResult(
        selected=selected,
        ksd_trace=trace,
        config={"mode": "myopic", "m": int(m), "kernel": kernel_to_json(cfg.base)},
    )


def stein_thin_nonmyopic(
    chain: ChainOutput,
    cfg: SteinKernelConfig,
    n_iters: int,
    horizon: int,
    batch_size: Optional[int] = None,
    seed: int = 0,
    solver: str = "auto",
) -> ThinningResult:
    """Select ``horizon`` states per iteration from a fresh random mini-batch.

    Batches are drawn uniformly without replacement (seeded); when the
    batch covers the whole chain it is taken in index order, which makes
    ``horizon=1, batch_size=N`` coincide with :func:`stein_thin`.  The
    default batch size is ``10 * horizon`` (capped at N).  The batch
    subproblem is a cardinality-constrained integer quadratic programme
    handed to :func:`solve_iqp`.
    """
    s = int(horizon)
    if n_iters < 1:
        raise ValidationError(f"n_iters must be >= 1, got {n_iters}")
    if s < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    chain = with_gradients(chain, cfg.target)
    pts, grads = chain.states, chain.grads
    n = len(chain)
    b = int(batch_size) if batch_size is not None else min(n, 10 * s)
    if not 1 <= b <= n:
        raise ValidationError(f"batch_size must lie in [1, N={n}], got {b}")

    rng = np.random.default_rng(seed)
    selected: list[int] = []
    trace = np.empty(n_iters)
    quad_sum = 0.0
    for j in range(n_iters):
        batch = np.arange(n) if b == n else np.sort(rng.choice(n, size=b, replace=False))
        batch_pts, batch_grads = pts[batch], grads[batch]
        gram = stein_gram(cfg, batch_pts, batch_grads)
        linear = np.zeros(b)
        for g_idx in selected:  # chronological accumulation, one row per pick
            linear = linear + stein_kernel_matrix(
                cfg, pts[g_idx : g_idx + 1], grads[g_idx : g_idx + 1], batch_pts, batch_grads
            )[0]
        inst = IqpInstance(gram=gram, linear=linear, cardinality=s)
        v = solve_iqp(inst, mode=solver)
        quad_sum += 2.0 * float(linear @ v) + float(v @ gram @ v)
        for pos in np.nonzero(v)[0]:
            selected.extend([int(batch[pos])] * int(v[pos]))
        trace[j] = sqrt(max(quad_sum, 0.0)) / ((j + 1) * s)
    return ThinningResult(
        selected=np.asarray(selected, dtype=int),
        ksd_trace=trace,
        config={
            "mode": "nonmyopic",
            "n_iters": int(n_iters),
            "horizon": s,
            "batch_size": b,
            "seed": int(seed),
            "solver": solver,
            "kernel": kernel_to_json(cfg.base),
        },
    )
