"""Target distributions represented through their log-density gradients.

A :class:`TargetModel` bundles the dimension, the score function
``u(x) = grad log p(x)`` and, when available, the log-density itself
(defined up to an additive constant).  The score is the only quantity the
downstream kernel and control-variate machinery requires; the log-density
is needed only by samplers and for finite-difference checks.

Built-in constructors cover Gaussian and Gaussian-mixture targets, which
double as analytic test fixtures: their gradients are exact, so they can
be validated against finite differences via :func:`grad_check`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "TargetModel",
    "GaussianMixtureSpec",
    "gaussian_target",
    "mixture_target",
    "benchmark_mixture",
    "grad_check",
    "target_from_json",
    "eval_gradients",
]


@dataclass(frozen=True)
class TargetModel:
    """A target distribution known through its score function.

    Attributes:
        dim: Dimension ``d`` of the state space.
        grad_log_density: Map ``x -> grad log p(x)``.  Accepts a single
            point of shape ``(d,)``; the built-in targets also accept
            batches of shape ``(n, d)``.
        log_density: Optional map ``x -> log p(x)`` up to an additive
            constant.  Required by Metropolis-type samplers and by
            :func:`grad_check`, not by the kernel machinery.
        name: Human-readable label used in reports and manifests.
    """

    dim: int
    grad_log_density: Callable[[np.ndarray], np.ndarray]
    log_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValidationError(f"dim must be a positive integer, got {self.dim}")
        if self.grad_log_density is None:
            raise ValidationError("grad_log_density is required")


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Parameters of a Gaussian mixture: weights, means, covariances.

    Component weights must be nonnegative and sum to one; all components
    must share a dimension and every covariance must admit a Cholesky
    factorisation.
    """

    component_weights: Sequence[float]
    means: Sequence[Sequence[float]]
    covariances: Sequence[Sequence[Sequence[float]]]

    def __post_init__(self):
        w = np.asarray(self.component_weights, dtype=float)
        if w.size == 0:
            raise ValidationError("mixture needs at least one component")
        if np.any(w < 0):
            raise ValidationError("component weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(
                f"component weights must sum to 1 within 1e-12, got {w.sum()!r}"
            )
        if not (len(self.means) == len(self.covariances) == w.size):
            raise ValidationError("weights, means and covariances must align")
        dims = {np.asarray(m, dtype=float).shape for m in self.means}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValidationError("all component means must be vectors of one dimension")

    @property
    def dim(self) -> int:
        return len(np.asarray(self.means[0], dtype=float))


def _validate_spd(cov: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Return the Cholesky factor of ``cov``, rejecting non-SPD input."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValidationError(f"{what} must be a square matrix, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ValidationError(f"{what} must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(
            f"{what} is not positive definite (Cholesky factorisation failed)"
        ) from exc


def gaussian_target(mean: Sequence[float], cov: Sequence[Sequence[float]]) -> TargetModel:
    """Gaussian target with exact log-density and score.

    The score is ``u(x) = -cov^{-1} (x - mean)``.

    Args:
        mean: Mean vector of length ``d``.
        cov: Symmetric positive-definite ``d x d`` covariance.

    Raises:
        ValidationError: If ``cov`` is not symmetric positive definite.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    d = mean.shape[0]
    chol = _validate_spd(cov)
    if cov.shape != (d, d):
        raise ValidationError(f"cov shape {cov.shape} does not match mean length {d}")
    precision = np.linalg.inv(cov)
    precision = 0.5 * (precision + precision.T)
    log_norm = 0.5 * d * np.log(2.0 * np.pi) + np.sum(np.log(np.diag(chol)))

    def log_density(x):
        x = np.asarray(x, dtype=float)
        diff = x - mean
        quad = np.einsum("...i,ij,...j->...", diff, precision, diff)
        return -0.5 * quad - log_norm

    def grad_log_density(x):
        x = np.asarray(x, dtype=float)
        return -(x - mean) @ precision

    return TargetModel(
        dim=d,
        grad_log_density=grad_log_density,
        log_density=log_density,
        name=f"gaussian(d={d})",
    )


def mixture_target(spec: GaussianMixtureSpec) -> TargetModel:
    """Gaussian mixture target with log-sum-exp stabilised evaluations.

    The score is the responsibility-weighted combination of component
    scores; responsibilities are computed in log space so that points far
    out in one component's tail do not underflow.

    Args:
        spec: Validated mixture parameters.
    """
    w = np.asarray(spec.component_weights, dtype=float)
    means = np.asarray(spec.means, dtype=float)
    d = spec.dim
    precisions, log_norms = [], []
    for k, cov in enumerate(spec.covariances):
        chol = _validate_spd(np.asarray(cov, dtype=float), what=f"covariance[{k}]")
        prec = np.linalg.inv(np.asarray(cov, dtype=float))
        precisions.append(0.5 * (prec + prec.T))
        log_norms.append(0.5 * d * np.log(2.0 * np.pi) + np.sum(np.log(np.diag(chol))))
    precisions = np.asarray(precisions)
    log_norms = np.asarray(log_norms)
    log_w = np.log(np.where(w > 0, w, 1e-300))

    def _component_logpdfs(x):
        # x: (..., d) -> (..., K)
        diff = x[..., None, :] - means  # (..., K, d)
        quad = np.einsum("...ki,kij,...kj->...k", diff, precisions, diff)
        return log_w - 0.5 * quad - log_norms

    def log_density(x):
        x = np.asarray(x, dtype=float)
        lp = _component_logpdfs(x)
        m = np.max(lp, axis=-1)
        return m + np.log(np.sum(np.exp(lp - m[..., None]), axis=-1))

    def grad_log_density(x):
        x = np.asarray(x, dtype=float)
        lp = _component_logpdfs(x)
        m = np.max(lp, axis=-1, keepdims=True)
        resp = np.exp(lp - m)
        resp /= np.sum(resp, axis=-1, keepdims=True)
        diff = x[..., None, :] - means
        comp_grads = -np.einsum("...ki,kij->...kj", diff, precisions)
        return np.einsum("...k,...kj->...j", resp, comp_grads)

    return TargetModel(
        dim=d,
        grad_log_density=grad_log_density,
        log_density=log_density,
        name=f"mixture(K={w.size}, d={d})",
    )


def benchmark_mixture() -> TargetModel:
    """Default bivariate benchmark: equal-weight Gaussians at (-1.5, 0) and (1.5, 0).

    A reproducible two-mode stand-in used by the bench command and the
    thinning experiments; covariances are identity.
    """
    spec = GaussianMixtureSpec(
        component_weights=(0.5, 0.5),
        means=((-1.5, 0.0), (1.5, 0.0)),
        covariances=(np.eye(2), np.eye(2)),
    )
    model = mixture_target(spec)
    return TargetModel(
        dim=model.dim,
        grad_log_density=model.grad_log_density,
        log_density=model.log_density,
        name="benchmark-mixture",
    )


def grad_check(model: TargetModel, x: Sequence[float], h: float) -> float:
    """Max-abs discrepancy between central differences and the model score.

    Args:
        model: Target with ``log_density`` present.
        x: Point of shape ``(d,)``.
        h: Positive finite-difference step.

    Returns:
        ``max_i |(log p(x + h e_i) - log p(x - h e_i)) / 2h - u_i(x)|``.

    Raises:
        ValidationError: If ``h <= 0`` or the model has no log-density.
    """
    if h <= 0:
        raise ValidationError(f"step size h must be positive, got {h}")
    if model.log_density is None:
        raise ValidationError("grad_check unsupported: model has no log_density")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad = np.asarray(model.grad_log_density(x), dtype=float)
    fd = np.empty_like(x)
    for i in range(x.shape[0]):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (model.log_density(xp) - model.log_density(xm)) / (2.0 * h)
    return float(np.max(np.abs(fd - grad)))


def eval_gradients(model: TargetModel, points: np.ndarray) -> np.ndarray:
    """Evaluate the score at many points, tolerating non-batched callables."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    try:
        grads = np.asarray(model.grad_log_density(points), dtype=float)
        if grads.shape == points.shape:
            return grads
    except Exception:
        pass
    return np.stack([np.asarray(model.grad_log_density(x), dtype=float) for x in points])


def target_from_json(doc) -> TargetModel:
    """Build a target from a JSON document (dict, JSON string, or file path).

    Schema::

        {"type": "gaussian", "mean": [...], "cov": [[...]]}
        {"type": "mixture",
         "components": [{"weight": w, "mean": [...], "cov": [[...]]}, ...]}
    """
    if isinstance(doc, (str, bytes)):
        text = str(doc)
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
        else:
            with open(text, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
    if not isinstance(doc, dict) or "type" not in doc:
        raise ValidationError("target document must be an object with a 'type' key")
    kind = doc["type"]
    if kind == "gaussian":
        try:
            return gaussian_target(doc["mean"], doc["cov"])
        except KeyError as exc:
            raise ValidationError(f"gaussian target missing key: {exc}") from exc
    if kind == "mixture":
        comps = doc.get("components")
        if not comps:
            raise ValidationError("mixture target needs a non-empty 'components' list")
        try:
            spec = GaussianMixtureSpec(
                component_weights=[c["weight"] for c in comps],
                means=[c["mean"] for c in comps],
                covariances=[c["cov"] for c in comps],
            )
        except KeyError as exc:
            raise ValidationError(f"mixture component missing key: {exc}") from exc
        return mixture_target(spec)
    raise ValidationError(f"unknown target type {kind!r} (expected 'gaussian' or 'mixture')")
