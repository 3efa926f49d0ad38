"""MCMC output, toy samplers, and classical post-processing.

Holds the chain data model plus the standard toolkit applied before any
kernel-based machinery: Gelman-Rubin style convergence checks on multiple
chains, effective sample size from the autocorrelation sequence, burn-in
selection by thresholding the convergence statistic on growing prefixes,
and fixed-frequency thinning with a lag chosen from the autocorrelations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DegenerateSeriesError, NumericalError, ValidationError
from .model import TargetModel, eval_gradients

__all__ = [
    "ChainOutput",
    "WeightedSupport",
    "DiagnosticReport",
    "LagSelection",
    "rwmh_sample",
    "mala_sample",
    "remove_burn_in",
    "fixed_thin",
    "autocorrelation",
    "select_thinning_lag",
    "ess",
    "r_hat",
    "burn_in_from_rhat",
    "rhat_checkpoints",
    "with_gradients",
    "save_chain_csv",
    "load_chain_csv",
]


@dataclass(frozen=True)
class ChainOutput:
    """States of one MCMC realisation, with optional per-state score values.

    Attributes:
        states: ``(N, d)`` array; row ``n`` is the state after step ``n+1``.
        grads: Optional ``(N, d)`` array of ``grad log p`` at each state.
        initial_state: The (non-random) starting point, kept separate from
            the states themselves.
        meta: Sampler name, seed, acceptance rate, and similar provenance.
    """

    states: np.ndarray
    grads: Optional[np.ndarray] = None
    initial_state: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        object.__setattr__(self, "states", states)
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValidationError(f"states must be a non-empty (N, d) array, got {states.shape}")
        if not np.all(np.isfinite(states)):
            raise ValidationError("states contain non-finite values")
        if self.grads is not None:
            grads = np.asarray(self.grads, dtype=float)
            if grads.ndim == 1:
                grads = grads[:, None]
            if grads.shape != states.shape:
                raise ValidationError(
                    f"grads shape {grads.shape} does not match states shape {states.shape}"
                )
            if not np.all(np.isfinite(grads)):
                raise ValidationError("grads contain non-finite values")
            object.__setattr__(self, "grads", grads)
        if self.initial_state is not None:
            object.__setattr__(
                self, "initial_state", np.atleast_1d(np.asarray(self.initial_state, dtype=float))
            )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class WeightedSupport:
    """Index sequence and weights defining a discrete re-weighted subsample.

    ``indices`` are 0-based positions into a chain's states; weights are
    real and must sum to one (within 1e-12).  Repeated indices are allowed.
    """

    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        w = np.asarray(self.weights, dtype=float)
        if idx.ndim != 1 or idx.size < 1:
            raise ValidationError("indices must be a non-empty 1-d integer array")
        if w.shape != idx.shape:
            raise ValidationError("weights must align with indices")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights must sum to 1 within 1e-12, got {w.sum()!r}")
        if np.any(idx < 0):
            raise ValidationError("indices must be nonnegative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, indices: Sequence[int]) -> "WeightedSupport":
        idx = np.asarray(indices, dtype=int)
        return cls(indices=idx, weights=np.full(idx.size, 1.0 / idx.size))

    def __len__(self) -> int:
        return self.indices.size

    def validate_against(self, n_states: int) -> None:
        if np.any(self.indices >= n_states):
            raise ValidationError(
                f"support index {int(self.indices.max())} out of range for chain of length {n_states}"
            )


class LagSelection(NamedTuple):
    lag: int
    saturated: bool


@dataclass(frozen=True)
class DiagnosticReport:
    """Per-coordinate convergence summary for one or more chains.

    ``suggested_burn_in`` is None when no prefix passed the convergence
    threshold (not converged).
    """

    r_hat: Optional[np.ndarray]
    ess: np.ndarray
    suggested_burn_in: Optional[int]
    thinning_lag: int
    lag_saturated: bool = False

    def __post_init__(self):
        if self.r_hat is not None and np.any(np.asarray(self.r_hat) < 0):
            raise ValidationError("r_hat entries must be nonnegative")
        if np.any(np.asarray(self.ess) <= 0):
            raise ValidationError("ess entries must be positive")
        if self.thinning_lag < 1:
            raise ValidationError("thinning_lag must be >= 1")


# ---------------------------------------------------------------------------
# Toy samplers
# ---------------------------------------------------------------------------

def _check_start(target: TargetModel, x0: np.ndarray) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (target.dim,):
        raise ValidationError(f"x0 shape {x0.shape} does not match target dim {target.dim}")
    lp0 = float(target.log_density(x0))
    if not np.isfinite(lp0):
        raise ValidationError(f"log-density is not finite at x0={x0.tolist()}")
    return x0


def rwmh_sample(
    target: TargetModel,
    x0: Sequence[float],
    n_steps: int,
    proposal_scale: float,
    seed: int,
) -> ChainOutput:
    """Random walk Metropolis-Hastings with an isotropic Gaussian proposal.

    Scores are evaluated at every retained state as a by-product so the
    kernel machinery downstream never has to recompute them.  Deterministic
    for a fixed seed.
    """
    if target.log_density is None:
        raise ValidationError("rwmh_sample requires target.log_density")
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    if proposal_scale <= 0:
        raise ValidationError(f"proposal_scale must be positive, got {proposal_scale}")
    x0 = _check_start(target, x0)
    rng = np.random.default_rng(seed)
    d = target.dim

    states = np.empty((n_steps, d))
    grads = np.empty((n_steps, d))
    x = x0.copy()
    lp = float(target.log_density(x))
    gx = np.asarray(target.grad_log_density(x), dtype=float)
    accepts = 0
    for n in range(n_steps):
        prop = x + proposal_scale * rng.standard_normal(d)
        lp_prop = float(target.log_density(prop))
        if np.log(rng.uniform()) < lp_prop - lp:
            x, lp = prop, lp_prop
            gx = np.asarray(target.grad_log_density(x), dtype=float)
            accepts += 1
        states[n] = x
        grads[n] = gx
    return ChainOutput(
        states=states,
        grads=grads,
        initial_state=x0,
        meta={
            "sampler": "rwmh",
            "seed": int(seed),
            "proposal_scale": float(proposal_scale),
            "acceptance_rate": accepts / n_steps,
            "target": target.name,
        },
    )


def mala_sample(
    target: TargetModel,
    x0: Sequence[float],
    n_steps: int,
    step_size: float,
    seed: int,
) -> ChainOutput:
    """Metropolis-adjusted Langevin: drift by the score, then correct.

    Proposal ``y ~ N(x + (eps^2/2) u(x), eps^2 I)`` with the usual
    Metropolis-Hastings accept/reject; the gradients computed for the
    drift are stored on the output.
    """
    if target.log_density is None or target.grad_log_density is None:
        raise ValidationError("mala_sample requires both log_density and grad_log_density")
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    if step_size <= 0:
        raise ValidationError(f"step_size must be positive, got {step_size}")
    x0 = _check_start(target, x0)
    rng = np.random.default_rng(seed)
    d = target.dim
    eps2 = step_size**2

    def log_q(to, frm, g_frm):
        mean = frm + 0.5 * eps2 * g_frm
        return -float(np.sum((to - mean) ** 2)) / (2.0 * eps2)

    states = np.empty((n_steps, d))
    grads = np.empty((n_steps, d))
    x = x0.copy()
    lp = float(target.log_density(x))
    gx = np.asarray(target.grad_log_density(x), dtype=float)
    accepts = 0
    for n in range(n_steps):
        prop = x + 0.5 * eps2 * gx + step_size * rng.standard_normal(d)
        lp_prop = float(target.log_density(prop))
        g_prop = np.asarray(target.grad_log_density(prop), dtype=float)
        log_alpha = lp_prop - lp + log_q(x, prop, g_prop) - log_q(prop, x, gx)
        if np.log(rng.uniform()) < log_alpha:
            x, lp, gx = prop, lp_prop, g_prop
            accepts += 1
        states[n] = x
        grads[n] = gx
    return ChainOutput(
        states=states,
        grads=grads,
        initial_state=x0,
        meta={
            "sampler": "mala",
            "seed": int(seed),
            "step_size": float(step_size),
            "acceptance_rate": accepts / n_steps,
            "target": target.name,
        },
    )


# ---------------------------------------------------------------------------
# Burn-in and fixed-frequency thinning
# ---------------------------------------------------------------------------

def remove_burn_in(chain: ChainOutput, b: int) -> ChainOutput:
    """Drop the first ``b`` states (and matching grads); the input is untouched."""
    n = len(chain)
    if b < 0:
        raise ValidationError(f"burn-in must be nonnegative, got {b}")
    if b >= n:
        raise ValidationError(f"burn-in {b} leaves an empty chain (N={n})")
    return replace(
        chain,
        states=chain.states[b:].copy(),
        grads=None if chain.grads is None else chain.grads[b:].copy(),
    )


def fixed_thin(chain: ChainOutput, k: int) -> ChainOutput:
    """Keep every ``k``-th state starting from the first; length ceil(N/k)."""
    if k < 1:
        raise ValidationError(f"thinning stride must be >= 1, got {k}")
    return replace(
        chain,
        states=chain.states[::k].copy(),
        grads=None if chain.grads is None else chain.grads[::k].copy(),
    )


# ---------------------------------------------------------------------------
# Autocorrelation, ESS, lag selection
# ---------------------------------------------------------------------------

def autocorrelation(series: Sequence[float], max_lag: int) -> np.ndarray:
    """Sample autocorrelations rho_0..rho_max_lag (biased normalisation).

    ``rho_t`` is the lag-``t`` autocovariance with 1/N normalisation divided
    by the lag-0 autocovariance, so ``rho_0 == 1`` always.  Computed via FFT.

    Raises:
        DegenerateSeriesError: For a constant series.
        ValidationError: If ``N < 2`` or ``max_lag >= N``.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValidationError(f"series must have at least 2 points, got {n}")
    if not 0 <= max_lag < n:
        raise ValidationError(f"max_lag must be in [0, N), got {max_lag} for N={n}")
    x = x - x.mean()
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / n
    if acov[0] <= 0 or not np.isfinite(acov[0]):
        raise DegenerateSeriesError("series has zero variance")
    rho = acov / acov[0]
    rho[0] = 1.0
    return rho


def select_thinning_lag(
    chain: ChainOutput, threshold: float = 0.1, max_lag: Optional[int] = None
) -> LagSelection:
    """Smallest lag at which every coordinate's |autocorrelation| drops below a threshold.

    Returns the maximum over coordinates of the per-coordinate first
    sub-threshold lag; if some coordinate never passes within ``max_lag``
    the result saturates at ``max_lag`` with ``saturated=True``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    n = len(chain)
    if max_lag is None:
        max_lag = min(n - 1, 1000)
    if not 1 <= max_lag < n:
        raise ValidationError(f"max_lag must be in [1, N), got {max_lag}")
    lag = 1
    saturated = False
    for j in range(chain.dim):
        rho = autocorrelation(chain.states[:, j], max_lag)
        below = np.nonzero(np.abs(rho[1:]) < threshold)[0]
        if below.size == 0:
            lag = max(lag, max_lag)
            saturated = True
        else:
            lag = max(lag, int(below[0]) + 1)
    return LagSelection(lag=lag, saturated=saturated)


def _ess_1d(x: np.ndarray) -> float:
    """ESS of one coordinate via Geyer's initial-positive-sequence truncation."""
    n = x.size
    rho = autocorrelation(x, n - 1)
    n_pairs = rho.size // 2
    gammas = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    nonpos = np.nonzero(gammas <= 0)[0]
    m_stop = int(nonpos[0]) if nonpos.size else n_pairs
    tau = 2.0 * float(np.sum(gammas[:m_stop])) - 1.0
    # tau < 1 (anticorrelated chains) would imply ESS > N; clamp to the budget
    tau = max(tau, 1.0)
    return n / tau


def ess(chain: ChainOutput) -> np.ndarray:
    """Per-coordinate effective sample size ``N / (1 + 2 sum_t rho_t)``.

    The autocorrelation sum is truncated before the first consecutive lag
    pair whose summed autocorrelation is non-positive.

    Raises:
        DegenerateSeriesError: Naming the first constant coordinate.
        ValidationError: If the chain is shorter than 10 states.
    """
    n = len(chain)
    if n < 10:
        raise ValidationError(f"ess needs at least 10 states, got {n}")
    out = np.empty(chain.dim)
    for j in range(chain.dim):
        try:
            out[j] = _ess_1d(chain.states[:, j])
        except DegenerateSeriesError as exc:
            raise DegenerateSeriesError(f"coordinate {j} is degenerate: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Multi-chain convergence diagnostics
# ---------------------------------------------------------------------------

def _stacked_states(chains: Sequence[ChainOutput]) -> np.ndarray:
    if len(chains) < 2:
        raise ValidationError(f"need at least 2 chains, got {len(chains)}")
    shapes = {c.states.shape for c in chains}
    if len(shapes) != 1:
        raise ValidationError(f"all chains must share one shape, got {sorted(shapes)}")
    n = len(chains[0])
    if n < 2:
        raise ValidationError(f"chains must have at least 2 states, got N={n}")
    return np.stack([c.states for c in chains])  # (L, N, d)


def r_hat(chains: Sequence[ChainOutput]) -> np.ndarray:
    """Per-coordinate convergence statistic sqrt(sigma_hat^2 / s^2).

    ``s^2`` is the mean of the within-chain sample variances and
    ``sigma_hat^2 = (N-1)/N * s^2 + B`` where ``B`` is the sample variance
    of the chain means; the statistic tends to 1 as chains converge.

    Raises:
        NumericalError: If every within-chain variance is zero for some
            coordinate.
    """
    arr = _stacked_states(chains)
    _, n, _ = arr.shape
    means = arr.mean(axis=1)  # (L, d)
    within = arr.var(axis=1, ddof=1).mean(axis=0)  # (d,)
    if np.any(within == 0):
        j = int(np.nonzero(within == 0)[0][0])
        raise NumericalError(f"within-chain variance is zero for coordinate {j}")
    between = means.var(axis=0, ddof=1)  # (d,)
    sigma2 = (n - 1) / n * within + between
    return np.sqrt(sigma2 / within)


def rhat_checkpoints(n: int, n_checkpoints: int = 20) -> np.ndarray:
    """Logarithmically spaced prefix lengths used for burn-in search.

    The grid floors at max(10, N/50) so the variance estimates entering the
    statistic are never computed from a handful of states, and always ends
    at N itself.
    """
    if n < 2:
        raise ValidationError(f"need N >= 2, got {n}")
    lo = min(max(10, n // 50), n)
    lo = max(lo, 2)
    pts = np.unique(np.round(np.logspace(np.log10(lo), np.log10(n), n_checkpoints)).astype(int))
    return pts[(pts >= 2) & (pts <= n)]


def burn_in_from_rhat(
    chains: Sequence[ChainOutput], delta: float = 0.01, n_checkpoints: int = 20
) -> Optional[int]:
    """Smallest checkpoint prefix length at which max-coordinate R-hat < 1 + delta.

    The statistic is evaluated on growing prefixes at ~20 log-spaced
    checkpoints; the first passing prefix length is returned as the burn-in
    to discard.  Returns None when no prefix qualifies (not converged).
    """
    if delta <= 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    arr = _stacked_states(chains)
    n = arr.shape[1]
    for checkpoint in rhat_checkpoints(n, n_checkpoints):
        prefix = [replace(c, states=c.states[:checkpoint], grads=None) for c in chains]
        try:
            stat = r_hat(prefix)
        except NumericalError:
            continue
        if float(stat.max()) < 1.0 + delta:
            return int(checkpoint)
    return None


# ---------------------------------------------------------------------------
# Gradients and CSV interchange
# ---------------------------------------------------------------------------

def with_gradients(chain: ChainOutput, target: Optional[TargetModel] = None) -> ChainOutput:
    """Return a chain whose ``grads`` are filled, computing them if needed.

    Raises:
        ValidationError: If gradients are missing and no target is supplied.
    """
    if chain.grads is not None:
        return chain
    if target is None:
        raise ValidationError("chain has no gradients and no target was supplied to compute them")
    return replace(chain, grads=eval_gradients(target, chain.states))


def save_chain_csv(chain: ChainOutput, path: str) -> None:
    """Write states (and grads, when present) as ``x1..xd[,g1..gd]`` CSV."""
    d = chain.dim
    cols = [f"x{i + 1}" for i in range(d)]
    data = chain.states
    if chain.grads is not None:
        cols += [f"g{i + 1}" for i in range(d)]
        data = np.hstack([chain.states, chain.grads])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def load_chain_csv(path: str) -> ChainOutput:
    """Read a chain CSV produced by :func:`save_chain_csv` (grads optional)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise ValidationError(f"{path}: empty file")
        names = [h.strip() for h in header.split(",")]
        try:
            body = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"{path}: malformed CSV body: {exc}") from exc
    x_cols = [i for i, h in enumerate(names) if h.startswith("x")]
    g_cols = [i for i, h in enumerate(names) if h.startswith("g")]
    if not x_cols:
        raise ValidationError(f"{path}: no x columns in header {names}")
    if g_cols and len(g_cols) != len(x_cols):
        raise ValidationError(f"{path}: {len(g_cols)} gradient columns for {len(x_cols)} states")
    states = body[:, x_cols]
    grads = body[:, g_cols] if g_cols else None
    return ChainOutput(states=states, grads=grads, meta={"source": str(path)})
