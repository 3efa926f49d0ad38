"""Base kernels, the Stein-modified kernel, Gram assembly, and discrepancy.

Both supported base kernels are radial, ``k(x, y) = phi(||x - y||^2)``:

    imq:       phi(t) = (c^2 + t / lambda^2)^beta,  -1 < beta < 0
    gaussian:  phi(t) = exp(-t / lambda^2)

The Stein-modified kernel couples a base kernel with the target score
``u = grad log p``:

    k_P(x, y) = div_x div_y k + grad_x k . u(y) + grad_y k . u(x)
                + k(x, y) u(x) . u(y)

Functions in the image of the corresponding operator integrate to zero
under the target, so the weighted quadratic form of k_P over a discrete
support measures its discrepancy from the target using only score
evaluations.  All evaluation paths share one set of phi derivatives, are
fully vectorised, and are deterministic regardless of BLAS threading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .chain import ChainOutput, WeightedSupport, with_gradients
from .errors import NumericalError, ValidationError
from .model import TargetModel

__all__ = [
    "BaseKernelConfig",
    "SteinKernelConfig",
    "BaseKernelDerivs",
    "base_kernel_derivs",
    "stein_kernel_eval",
    "stein_kernel_matrix",
    "stein_diag",
    "stein_gram",
    "ksd",
    "median_heuristic",
    "kernel_from_json",
    "kernel_to_json",
]

_FAMILIES = {"imq", "gaussian"}
_ALIASES = {"inverse-multiquadric": "imq", "rbf": "gaussian"}


@dataclass(frozen=True)
class BaseKernelConfig:
    """Radial base kernel family and parameters.

    ``c`` and ``beta`` apply to the inverse-multiquadric family only; the
    defaults (c=1, beta=-1/2, lengthscale=1) give the kernel for which
    driving the discrepancy to zero controls weak convergence.
    """

    family: str = "imq"
    lengthscale: float = 1.0
    c: float = 1.0
    beta: float = -0.5

    def __post_init__(self):
        fam = _ALIASES.get(self.family, self.family)
        object.__setattr__(self, "family", fam)
        if fam not in _FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}; use 'imq' or 'gaussian'")
        if not self.lengthscale > 0:
            raise ValidationError(f"lengthscale must be positive, got {self.lengthscale}")
        if fam == "imq":
            if not self.c > 0:
                raise ValidationError(f"imq offset c must be positive, got {self.c}")
            if not -1.0 < self.beta < 0.0:
                raise ValidationError(f"imq exponent beta must lie in (-1, 0), got {self.beta}")


@dataclass(frozen=True)
class SteinKernelConfig:
    """Base kernel paired with the target whose score enters k_P.

    ``target`` may be None when every operation will be handed chains or
    arrays that already carry score evaluations.
    """

    base: BaseKernelConfig
    target: Optional[TargetModel]


def _phi(cfg: BaseKernelConfig, t: np.ndarray):
    """phi(t), phi'(t), phi''(t) for t = squared distance (array-safe)."""
    lam2 = cfg.lengthscale**2
    if cfg.family == "gaussian":
        v = np.exp(-t / lam2)
        return v, -v / lam2, v / lam2**2
    base = cfg.c**2 + t / lam2
    v = base**cfg.beta
    dv = (cfg.beta / lam2) * base ** (cfg.beta - 1.0)
    d2v = (cfg.beta * (cfg.beta - 1.0) / lam2**2) * base ** (cfg.beta - 2.0)
    return v, dv, d2v


class BaseKernelDerivs(NamedTuple):
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    div: float  # div_x div_y k  = sum_i d^2 k / dx_i dy_i


def base_kernel_derivs(cfg: BaseKernelConfig, x, y) -> BaseKernelDerivs:
    """Closed-form kernel value and derivatives at a single pair.

    For radial kernels ``grad_y k = -grad_x k`` and

        grad_x k       = 2 phi'(r^2) (x - y)
        div_x div_y k  = -4 r^2 phi''(r^2) - 2 d phi'(r^2)
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ValidationError(f"x and y must share a shape, got {x.shape} vs {y.shape}")
    d = x.shape[0]
    diff = x - y
    r2 = float(diff @ diff)
    v, dv, d2v = _phi(cfg, np.asarray(r2))
    grad_x = 2.0 * float(dv) * diff
    return BaseKernelDerivs(
        value=float(v),
        grad_x=grad_x,
        grad_y=-grad_x,
        div=float(-4.0 * r2 * d2v - 2.0 * d * dv),
    )


def stein_kernel_eval(cfg: SteinKernelConfig, x, y, ux, uy) -> float:
    """k_P at one pair, given the caller's score evaluations ux, uy."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    ux = np.atleast_1d(np.asarray(ux, dtype=float))
    uy = np.atleast_1d(np.asarray(uy, dtype=float))
    if not x.shape == y.shape == ux.shape == uy.shape:
        raise ValidationError("x, y, ux, uy must all share one shape")
    kd = base_kernel_derivs(cfg.base, x, y)
    return float(kd.div + kd.grad_x @ uy + kd.grad_y @ ux + kd.value * (ux @ uy))


def stein_kernel_matrix(
    cfg: SteinKernelConfig,
    x: np.ndarray,
    grads_x: np.ndarray,
    y: np.ndarray,
    grads_y: np.ndarray,
) -> np.ndarray:
    """Cross matrix ``K[i, j] = k_P(x_i, y_j)``, vectorised.

    Expects ``x: (n, d)``, ``y: (m, d)`` with matching score arrays.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    ux = np.atleast_2d(np.asarray(grads_x, dtype=float))
    uy = np.atleast_2d(np.asarray(grads_y, dtype=float))
    if x.shape != ux.shape or y.shape != uy.shape or x.shape[1] != y.shape[1]:
        raise ValidationError("points and gradients must align and share the dimension")
    d = x.shape[1]
    x_sq = np.einsum("ij,ij->i", x, x)
    y_sq = np.einsum("ij,ij->i", y, y)
    r2 = np.maximum(x_sq[:, None] + y_sq[None, :] - 2.0 * (x @ y.T), 0.0)
    v, dv, d2v = _phi(cfg.base, r2)
    # (x_i - y_j).(u(y_j) - u(x_i)) without forming the (n, m, d) tensor
    cross = (
        x @ uy.T
        + ux @ y.T
        - np.einsum("ij,ij->i", x, ux)[:, None]
        - np.einsum("ij,ij->i", y, uy)[None, :]
    )
    return -4.0 * r2 * d2v - 2.0 * d * dv + 2.0 * dv * cross + v * (ux @ uy.T)


def stein_diag(cfg: SteinKernelConfig, points: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Diagonal values ``k_P(x_i, x_i)``; at r = 0 only two terms survive."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    d = points.shape[1]
    v0, dv0, _ = _phi(cfg.base, np.asarray(0.0))
    return -2.0 * d * float(dv0) + float(v0) * np.einsum("ij,ij->i", grads, grads)


def stein_gram(cfg: SteinKernelConfig, points: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Symmetric Gram matrix of k_P over one point set.

    The upper triangle is mirrored so symmetry is exact, and the diagonal
    uses the closed form at zero distance.

    Raises:
        NumericalError: Naming the first offending pair if any entry is
            non-finite.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    if points.shape != grads.shape:
        raise ValidationError(
            f"points shape {points.shape} does not match grads shape {grads.shape}"
        )
    gram = stein_kernel_matrix(cfg, points, grads, points, grads)
    gram = np.triu(gram, 1)
    gram = gram + gram.T
    np.fill_diagonal(gram, stein_diag(cfg, points, grads))
    if not np.all(np.isfinite(gram)):
        i, j = np.argwhere(~np.isfinite(gram))[0]
        raise NumericalError(f"non-finite Stein kernel value at point pair ({int(i)}, {int(j)})")
    return gram


def ksd(cfg: SteinKernelConfig, support: WeightedSupport, chain: ChainOutput) -> float:
    """Discrepancy of the weighted support from the target.

    Evaluates ``sqrt(sum_ij w_i w_j k_P(x_i, x_j))`` over the supported
    states, with tiny negative round-off in the quadratic form clamped to
    zero before the square root.  Gradients come from the chain when
    present, otherwise from the target's score function.
    """
    support.validate_against(len(chain))
    chain = with_gradients(chain, cfg.target)
    pts = chain.states[support.indices]
    grads = chain.grads[support.indices]
    gram = stein_gram(cfg, pts, grads)
    w = support.weights
    return float(np.sqrt(max(0.0, float(w @ gram @ w))))


def median_heuristic(points: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise distance over (a subsample of) the points.

    A standard automatic lengthscale; subsamples uniformly without
    replacement above ``max_points``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n < 2:
        raise ValidationError("median_heuristic needs at least 2 points")
    if n > max_points:
        keep = np.random.default_rng(seed).choice(n, max_points, replace=False)
        points = points[np.sort(keep)]
        n = max_points
    sq = np.einsum("ij,ij->i", points, points)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (points @ points.T), 0.0)
    med = float(np.median(np.sqrt(d2[np.triu_indices(n, 1)])))
    if med <= 0:
        raise NumericalError("median pairwise distance is zero (all points identical?)")
    return med


def kernel_from_json(doc, points: Optional[np.ndarray] = None) -> BaseKernelConfig:
    """Build a base kernel from ``{"family":..., "lengthscale":..., "c":..., "beta":...}``.

    ``"lengthscale": "median"`` resolves the median heuristic against
    ``points`` (required in that case).  Accepts a dict, JSON string, or
    file path.
    """
    if isinstance(doc, (str, bytes)):
        text = str(doc)
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
        else:
            with open(text, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("kernel document must be a JSON object")
    kwargs = {k: doc[k] for k in ("family", "lengthscale", "c", "beta") if k in doc}
    if kwargs.get("lengthscale") == "median":
        if points is None:
            raise ValidationError("'median' lengthscale requires data points to resolve against")
        kwargs["lengthscale"] = median_heuristic(points)
    return BaseKernelConfig(**kwargs)


def kernel_to_json(cfg: BaseKernelConfig) -> dict:
    out = {"family": cfg.family, "lengthscale": cfg.lengthscale}
    if cfg.family == "imq":
        out.update(c=cfg.c, beta=cfg.beta)
    return out
