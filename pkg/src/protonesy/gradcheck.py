"""Finite-difference verification of the analytic gradients.

Each check draws a random instance, compares an analytic gradient with a
central difference, and returns the relative error
``||a - b|| / max(||a||, ||b||, floor)``. A suite runs many trials and
reports the worst error per check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import backbone as bb
from .knowledge import FREE, ONE_HOT, ConceptSpace, ModelSet, all_assignments
from .prototypes import CentroidBank, distance_softmax, head_backward
from .semloss import semantic_loss_batch, semloss_grad_outputs

FD_STEP = 1e-4
ERR_FLOOR = 1e-4  # below this norm, errors are effectively absolute
FD_TOL = 1e-6
CLOSED_FORM_TOL = 1e-10

HeadFn = Callable  # same signature as prototypes.head_backward


def rel_error(a, b, floor: float = ERR_FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f(x)
        flat[i] = keep - step
        down = f(x)
        flat[i] = keep
        flat[i] = keep + step / 2
        up2 = f(x)
        flat[i] = keep - step / 2
        down2 = f(x)
        flat[i] = keep
        # Richardson extrapolation cancels the step^2 error term
        gflat[i] = (4 * (up2 - down2) / step - (up - down) / (2 * step)) / 3
    return out


def sign_flip(head: HeadFn = head_backward) -> HeadFn:
    """A deliberately broken head backward pass, for harness sanity tests."""

    def broken(z, bank, group, grad_y, y=None):
        gz, gc = head(z, bank, group, grad_y, y)
        return -gz, gc

    return broken


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------


@dataclass
class HeadInstance:
    bank: CentroidBank
    zs: list[np.ndarray]
    weights: list[np.ndarray]  # upstream loss L(y) = sum a.y + 0.5 b.y^2 per group

    @property
    def k(self) -> int:
        return self.bank.k


def random_bank(rng: np.random.Generator, sizes, m: int, scale: float = 0.7) -> CentroidBank:
    bank = CentroidBank.empty(sizes, [m] * len(sizes))
    for g, h in enumerate(sizes):
        for c in range(h):
            bank.set_centroid(g, c, scale * rng.standard_normal(m))
    return bank


def random_head_instance(rng: np.random.Generator, max_k: int = 3, max_h: int = 6, max_m: int = 8) -> HeadInstance:
    k = int(rng.integers(1, max_k + 1))
    sizes = [int(rng.integers(2, max_h + 1)) for _ in range(k)]
    m = int(rng.integers(1, max_m + 1))
    bank = random_bank(rng, sizes, m)
    zs = [0.7 * rng.standard_normal(m) for _ in range(k)]
    weights = [rng.standard_normal((2, h)) for h in sizes]
    return HeadInstance(bank, zs, weights)


def random_one_hot_models(rng: np.random.Generator, space: ConceptSpace) -> ModelSet:
    rows = all_assignments(space, ONE_HOT)
    keep = rng.random(len(rows)) < rng.uniform(0.2, 0.8)
    keep[rng.integers(len(rows))] = True
    return ModelSet(space, ONE_HOT, rows[keep])


def random_free_models(rng: np.random.Generator, n: int) -> ModelSet:
    space = ConceptSpace((n,))
    rows = all_assignments(space, FREE)
    keep = rng.random(len(rows)) < rng.uniform(0.1, 0.9)
    keep[rng.integers(len(rows))] = True
    return ModelSet(space, FREE, rows[keep])


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------


def _sl(y, models) -> float:
    return float(semantic_loss_batch(np.asarray(y)[None, :], models)[0][0])


def _upstream(w: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    return float(w[0] @ y + 0.5 * w[1] @ (y * y)), w[0] + w[1] * y


def check_head(rng: np.random.Generator, head: HeadFn = head_backward) -> float:
    """Embedding and centroid gradients of a smooth loss of the distance softmax."""
    inst = random_head_instance(rng)
    worst = 0.0
    for g in range(inst.k):
        w = inst.weights[g]
        y = distance_softmax(inst.zs[g], inst.bank, g)
        gz, gc = head(inst.zs[g], inst.bank, g, _upstream(w, y)[1])

        def loss_z(z):
            return _upstream(w, distance_softmax(z, inst.bank, g))[0]

        def loss_c(c):
            b = inst.bank.copy()
            b.centroids[g] = c
            return _upstream(w, distance_softmax(inst.zs[g], b, g))[0]

        worst = max(worst, rel_error(gz, central_diff(loss_z, inst.zs[g])))
        worst = max(worst, rel_error(gc, central_diff(loss_c, inst.bank.centroids[g])))
    return worst


def check_semloss(rng: np.random.Generator, max_atoms: int = 8) -> float:
    """Closed-form output gradient of the semantic loss."""
    n = int(rng.integers(2, max_atoms + 1))
    models = random_free_models(rng, n)
    y = rng.uniform(0.05, 0.95, n)
    grad = semloss_grad_outputs(y, models)
    fd = central_diff(lambda v: _sl(v, models), y)
    return rel_error(grad, fd)


def check_backbone(rng: np.random.Generator) -> float:
    """Parameter and input gradients of a tiny MLP under a random linear loss."""
    while True:
        spec = bb.MlpSpec(int(rng.integers(1, 5)), (int(rng.integers(2, 6)),), int(rng.integers(1, 4)),
                          seed=int(rng.integers(2**31)))
        params = bb.init_params(spec)
        x = rng.standard_normal((3, spec.input_dim))
        r = rng.standard_normal((3, spec.output_dim))
        z, tape = bb.forward(spec, params, x)
        # a difference step across a ReLU kink measures the kink, not the gradient
        if min(np.abs(a).min() for a in tape.preacts) > 10 * FD_STEP:
            break
    grads, gx = bb.backward(spec, params, tape, r)
    worst = rel_error(gx, central_diff(lambda v: float(np.sum(r * bb.forward(spec, params, v)[0])), x))
    for slot, analytic in (("weights", grads.weights), ("biases", grads.biases)):
        for i, g in enumerate(analytic):
            def loss(p, slot=slot, i=i):
                q = params.copy()
                getattr(q, slot)[i] = p
                return float(np.sum(r * bb.forward(spec, q, x)[0]))

            worst = max(worst, rel_error(g, central_diff(loss, getattr(params, slot)[i])))
    return worst


@dataclass
class ComposedInstance:
    bank: CentroidBank
    zs: list[np.ndarray]
    models: ModelSet


def random_composed_instance(rng: np.random.Generator, margin: float = 1e-5) -> ComposedInstance:
    """Random instance whose probabilities stay ``margin`` away from 0 and 1.

    Outside that range the loss clamps its input and the closed form no
    longer describes it.
    """
    while True:
        inst = random_head_instance(rng)
        sizes = [c.shape[0] for c in inst.bank.centroids]
        out = ComposedInstance(inst.bank, inst.zs, random_one_hot_models(rng, ConceptSpace(sizes)))
        y = _probs(out, out.zs)
        if y.min() > margin and y.max() < 1 - margin:
            return out


def _probs(inst: ComposedInstance, zs) -> np.ndarray:
    return np.concatenate([distance_softmax(z, inst.bank, g) for g, z in enumerate(zs)])


def closed_form_embedding_grads(inst: ComposedInstance) -> list[np.ndarray]:
    """Embedding gradients of the composed loss, computed directly from the models.

    Uses ``2 sum_c [(y_c - E[Y_c | K]) / (y_c (1 - y_c))] y_c (c_c - cob)``,
    with the conditional expectation taken by explicit summation over models.
    """
    y = _probs(inst, inst.zs)
    a = inst.models.assignments.astype(np.float64)
    w = np.prod(np.where(a > 0, y, 1.0 - y), axis=1)
    expect = (w @ a) / w.sum()
    coeff = (y - expect) / (y * (1.0 - y))
    out = []
    for g, z in enumerate(inst.zs):
        sl = inst.models.space.group_slice(g)
        cents = inst.bank.centroids[g]
        yg = y[sl]
        cob = yg @ cents
        out.append(2.0 * ((coeff[sl] * yg)[:, None] * (cents - cob)).sum(axis=0))
    return out


def pipeline_embedding_grads(inst: ComposedInstance, head: HeadFn = head_backward) -> list[np.ndarray]:
    y = _probs(inst, inst.zs)
    gy = semloss_grad_outputs(y, inst.models)
    out = []
    for g, z in enumerate(inst.zs):
        sl = inst.models.space.group_slice(g)
        out.append(head(z, inst.bank, g, gy[sl], y[sl])[0])
    return out


def check_composed(rng: np.random.Generator, head: HeadFn = head_backward) -> tuple[float, float]:
    """Returns (closed form vs pipeline error, pipeline vs finite difference error)."""
    inst = random_composed_instance(rng)
    closed = closed_form_embedding_grads(inst)
    piped = pipeline_embedding_grads(inst, head)
    e_closed = max(rel_error(a, b) for a, b in zip(closed, piped))
    e_fd = 0.0
    for g in range(len(inst.zs)):
        def loss(z, g=g):
            zs = list(inst.zs)
            zs[g] = z
            return _sl(_probs(inst, zs), inst.models)

        e_fd = max(e_fd, rel_error(piped[g], central_diff(loss, inst.zs[g])))
    return e_closed, e_fd


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    tolerance: float
    errors: list[float] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tolerance for e in self.errors)


def run_suite(trials: int = 200, seed: int = 0, head: HeadFn = head_backward) -> list[CheckResult]:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    res = {
        "head": CheckResult("head", FD_TOL),
        "semloss": CheckResult("semloss", FD_TOL),
        "backbone": CheckResult("backbone", FD_TOL),
        "composed_closed_form": CheckResult("composed_closed_form", CLOSED_FORM_TOL),
        "composed_fd": CheckResult("composed_fd", FD_TOL),
    }
    for _ in range(trials):
        res["head"].errors.append(check_head(rng, head))
        res["semloss"].errors.append(check_semloss(rng))
        res["backbone"].errors.append(check_backbone(rng))
        closed, fd = check_composed(rng, head)
        res["composed_closed_form"].errors.append(closed)
        res["composed_fd"].errors.append(fd)
    return list(res.values())
