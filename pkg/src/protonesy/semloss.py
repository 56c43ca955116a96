"""Semantic loss over enumerated models, with its closed-form output gradient.

Each atom ``c`` is an independent Bernoulli with mean ``y_c``; the loss is
the negative log probability that a draw satisfies the knowledge.  The
gradient with respect to ``y_c`` is

    (y_c - E[Y_c | nu |= K]) / (y_c (1 - y_c))

and is evaluated from that expression directly, never by differentiating
the enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .knowledge import Atom, ModelSet

CLAMP_EPS = 1e-7
LOGSUMEXP_THRESHOLD = 64


class UnsatisfiableKnowledge(ValueError):
    """The knowledge admits no model, so the loss is undefined."""


@dataclass(frozen=True)
class SemLossResult:
    loss: float
    wmc: float
    grad_y: np.ndarray
    cond_exp: np.ndarray


def clamp_probs(y, eps: float = CLAMP_EPS) -> np.ndarray:
    return np.clip(np.asarray(y, dtype=np.float64), eps, 1.0 - eps)


def _model_matrix(models) -> np.ndarray:
    a = models.assignments if isinstance(models, ModelSet) else np.asarray(models, dtype=bool)
    if a.ndim != 2 or a.shape[0] == 0:
        raise UnsatisfiableKnowledge("knowledge has no satisfying assignment")
    return a


def _model_log_weights(y: np.ndarray, a: np.ndarray) -> np.ndarray:
    """log p(nu | y) for each model row; ``y`` may carry leading batch axes."""
    af = a.astype(np.float64)
    return np.log(y) @ af.T + np.log1p(-y) @ (1.0 - af).T


def _log_wmc_and_posterior(logw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_models = logw.shape[-1]
    if n_models > LOGSUMEXP_THRESHOLD:
        top = logw.max(axis=-1, keepdims=True)
        shifted = np.exp(logw - top)
        total = shifted.sum(axis=-1, keepdims=True)
        log_wmc = (top + np.log(total))[..., 0]
        post = shifted / total
    else:
        w = np.exp(logw)
        total = w.sum(axis=-1, keepdims=True)
        log_wmc = np.log(total[..., 0])
        post = w / total
    return log_wmc, post


def semantic_loss_batch(y: np.ndarray, models, eps: float = CLAMP_EPS):
    """Loss, gradient and conditional expectations for a batch sharing one model set.

    ``y`` has shape ``(batch, n_atoms)``. Returns ``(loss, grad_y, cond_exp)``
    with shapes ``(batch,)``, ``(batch, n_atoms)`` and ``(batch, n_atoms)``.
    """
    a = _model_matrix(models)
    y = clamp_probs(y, eps)
    if y.shape[-1] != a.shape[1]:
        raise ValueError(f"{y.shape[-1]} probabilities for {a.shape[1]} atoms")
    log_wmc, post = _log_wmc_and_posterior(_model_log_weights(y, a))
    cond = np.clip(post @ a.astype(np.float64), 0.0, 1.0)  # posterior weights can sum to 1 + ulp
    grad = (y - cond) / (y * (1.0 - y))
    return -log_wmc, grad, cond


def semantic_loss(y, models, eps: float = CLAMP_EPS) -> SemLossResult:
    """Semantic loss of the flat probability vector ``y`` under ``models``."""
    y = np.asarray(y, dtype=np.float64)
    loss, grad, cond = semantic_loss_batch(y[None, :], models, eps)
    loss = max(float(loss[0]), 0.0)
    return SemLossResult(loss=loss, wmc=float(np.exp(-loss)), grad_y=grad[0], cond_exp=cond[0])


def conditional_expectation(y, models, atom, eps: float = CLAMP_EPS) -> float:
    """E[Y_atom | nu |= K] under independent Bernoulli atoms.

    ``atom`` is a flat atom index, or an :class:`Atom` resolved through the
    model set's concept space.
    """
    if isinstance(atom, Atom):
        atom = models.space.index(atom.group, atom.cls)
    return float(semantic_loss(y, models, eps).cond_exp[atom])


def semloss_grad_outputs(y, models, eps: float = CLAMP_EPS) -> np.ndarray:
    return semantic_loss(y, models, eps).grad_y
