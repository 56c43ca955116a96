"""Prototype head: centroids, distance softmax, zero-shot centroids and gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

LABELLED = "labelled"
ZERO_SHOT = "zero_shot"
MISSING = "missing"

DEFAULT_P = 0.99


class MissingCentroidError(ValueError):
    pass


@dataclass
class CentroidBank:
    """Per-group centroid matrices ``(h_i, m_i)`` with a status per row."""

    centroids: list[np.ndarray]
    status: list[list[str]] = field(default_factory=list)

    @classmethod
    def empty(cls, sizes: Sequence[int], dims: Sequence[int]) -> "CentroidBank":
        if len(sizes) != len(dims):
            raise ValueError("one embedding dimension per group is required")
        return cls(
            centroids=[np.zeros((h, m)) for h, m in zip(sizes, dims)],
            status=[[MISSING] * h for h in sizes],
        )

    @property
    def k(self) -> int:
        return len(self.centroids)

    def copy(self) -> "CentroidBank":
        return CentroidBank([c.copy() for c in self.centroids], [list(s) for s in self.status])

    def dim(self, group: int) -> int:
        return self.centroids[group].shape[1]

    def labelled(self, group: int) -> list[int]:
        return [c for c, s in enumerate(self.status[group]) if s == LABELLED]

    def missing(self, group: int) -> list[int]:
        return [c for c, s in enumerate(self.status[group]) if s != LABELLED]

    def set_centroid(self, group: int, cls: int, vec, status: str = LABELLED) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim(group),):
            raise ValueError(f"centroid of shape {vec.shape} for dimension {self.dim(group)}")
        self.centroids[group][cls] = vec
        self.status[group][cls] = status

    def complete(self, group: int) -> np.ndarray:
        """The group's centroid matrix, refusing if any class lacks a centroid."""
        holes = [c for c, s in enumerate(self.status[group]) if s == MISSING]
        if holes:
            raise MissingCentroidError(f"group {group} has no centroid for classes {holes}")
        return self.centroids[group]


def compute_centroids(support_embeddings: Mapping[int, object]) -> dict[int, np.ndarray]:
    """Mean support embedding for each class."""
    out = {}
    dim = None
    for cls, emb in support_embeddings.items():
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        if emb.shape[0] == 0 or emb.size == 0:
            raise ValueError(f"class {cls} has an empty support set")
        if dim is None:
            dim = emb.shape[1]
        elif emb.shape[1] != dim:
            raise ValueError(f"class {cls} embeddings have dimension {emb.shape[1]}, expected {dim}")
        out[cls] = emb.mean(axis=0)
    return out


def squared_distances(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = z[..., None, :] - centroids
    return np.einsum("...cm,...cm->...c", diff, diff)


def softmax_neg(d2: np.ndarray) -> np.ndarray:
    logits = -d2
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def distance_softmax(z, bank: CentroidBank, group: int) -> np.ndarray:
    """Class probabilities from negative squared distances to the group's centroids.

    ``z`` is a single embedding or a batch ``(n, m)``.
    """
    cents = bank.complete(group)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cents.shape[1]:
        raise ValueError(f"embedding dimension {z.shape[-1]} does not match {cents.shape[1]}")
    return softmax_neg(squared_distances(z, cents))


def center_of_belief(bank: CentroidBank, group: int, y) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) @ bank.complete(group)


def head_backward(z, bank: CentroidBank, group: int, grad_y, y=None):
    """Backpropagate ``dL/dy`` through the distance softmax.

    Returns ``(grad_z, grad_centroids)``. The embedding gradient is
    ``2 sum_c g_c y_c (c_c - sum_c' y_c' c_c')``; the centroid gradient is
    ``2 y_c (g_c - sum_c' g_c' y_c') (z - c_c)`` per class. Batched inputs
    return a per-example centroid gradient of shape ``(n, h, m)``.
    """
    cents = bank.complete(group)
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(grad_y, dtype=np.float64)
    if g.shape[-1] != cents.shape[0] or z.shape[-1] != cents.shape[1]:
        raise ValueError("shape mismatch between embedding, upstream gradient and centroids")
    if y is None:
        y = softmax_neg(squared_distances(z, cents))
    cob = y @ cents
    gy = g * y
    grad_z = 2.0 * (gy @ cents - gy.sum(axis=-1, keepdims=True) * cob)
    gbar = (gy).sum(axis=-1, keepdims=True)
    weight = 2.0 * y * (g - gbar)
    grad_c = weight[..., None] * (z[..., None, :] - cents)
    return grad_z, grad_c


# ---------------------------------------------------------------------------
# Chi-squared quantile
# ---------------------------------------------------------------------------


def _gammainc_lower(a: float, x: float) -> float:
    """Regularised lower incomplete gamma P(a, x)."""
    if x <= 0.0:
        return 0.0
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = 1.0 / a
        total = term
        ap = a
        for _ in range(100000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-17:
                break
        return min(1.0, total * math.exp(log_prefix))
    return 1.0 - _gammainc_upper_cf(a, x, log_prefix)


def _gammainc_upper_cf(a: float, x: float, log_prefix: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 100000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(log_prefix) * h


def chi2_cdf(x: float, m: int) -> float:
    return _gammainc_lower(m / 2.0, x / 2.0)


def chi2_quantile(m: int, p: float) -> float:
    """Lower-tail ``p`` quantile of the chi-squared distribution with ``m`` dof."""
    if not (isinstance(m, (int, np.integer)) and 1 <= m <= 4096):
        raise ValueError(f"degrees of freedom must be an integer in [1, 4096], got {m!r}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p!r}")
    a = m / 2.0
    lo, hi = 0.0, float(m) + 10.0
    while chi2_cdf(hi, m) < p:
        lo, hi = hi, 2.0 * hi
    # Wilson-Hilferty start, then safeguarded Newton
    zq = _norm_ppf(p)
    x = m * (1.0 - 2.0 / (9.0 * m) + zq * math.sqrt(2.0 / (9.0 * m))) ** 3
    if not lo < x < hi:
        x = 0.5 * (lo + hi)
    log_norm = math.lgamma(a) + a * math.log(2.0)
    for _ in range(200):
        f = chi2_cdf(x, m) - p
        if f < 0:
            lo = x
        else:
            hi = x
        dens = math.exp((a - 1.0) * math.log(x) - x / 2.0 - log_norm) if x > 0 else 0.0
        step_ok = False
        if dens > 0:
            nx = x - f / dens
            if lo < nx < hi:
                step_ok = True
        if not step_ok:
            nx = 0.5 * (lo + hi)
        if abs(nx - x) <= 1e-13 * max(1.0, abs(x)):
            return nx
        x = nx
    return x


def _norm_ppf(p: float) -> float:
    # bisection on erf is plenty for a starting point
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2.0)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Zero-shot centroids
# ---------------------------------------------------------------------------


def zero_shot_scale(bank: CentroidBank, group: int, p: float = DEFAULT_P) -> tuple[np.ndarray, float]:
    """Mean of the labelled centroids and the per-coordinate Gaussian std."""
    known = bank.labelled(group)
    if len(known) < 2:
        raise ValueError(f"group {group} needs at least two labelled centroids, has {len(known)}")
    cents = bank.centroids[group][known]
    mu = cents.mean(axis=0)
    radius2 = float(np.max(np.sum((cents - mu) ** 2, axis=1)))
    m = cents.shape[1]
    return mu, math.sqrt(radius2 / chi2_quantile(m, p))


def init_unlabelled_centroids(bank: CentroidBank, group: int, p: float = DEFAULT_P, rng_seed=0) -> CentroidBank:
    """Sample centroids for the group's unlabelled classes around the labelled mean.

    Each draw lands inside the ball spanned by the farthest labelled centroid
    with probability ``p``. Returns a new bank; the input is not modified.
    """
    mu, std = zero_shot_scale(bank, group, p)
    rng = np.random.default_rng(rng_seed)
    out = bank.copy()
    for cls in bank.missing(group):
        out.set_centroid(group, cls, mu + std * rng.standard_normal(mu.shape[0]), status=ZERO_SHOT)
    return out
