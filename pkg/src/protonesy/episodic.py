"""Episodic training of prototypical extractors under semantic loss.

One optimizer step per episode. Each episode:

1. samples support (and, when available, query) images for the labelled
   classes of every extractor and averages their embeddings into centroids;
2. samples centroids for classes without labels around the labelled mean;
3. scores queries with the prototypical negative log-likelihood;
4. scores a round-robin batch of weakly labelled pairs with semantic loss;
5. backpropagates ``proto + w_sl * nesy`` through centroids, embeddings and
   extractor weights.

The baseline trains a plain softmax classifier with semantic loss alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import backbone as bb
from .knowledge import ONE_HOT, SUM_SPACE, ModelSet, enumerate_models, sum_knowledge
from .metrics import evaluate
from .prototypes import (
    LABELLED,
    CentroidBank,
    distance_softmax,
    head_backward,
    init_unlabelled_centroids,
    softmax_neg,
)
from .semloss import semantic_loss_batch
from .tasks import PairDataset, SupportIndex

log = logging.getLogger(__name__)

KnowledgeProvider = Callable[[int], ModelSet]

FINAL_BANK_STREAM = 2**31 - 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpisodeConfig:
    classes_per_episode: int = 0  # 0 selects every labelled class
    support_per_class: int = 1
    query_per_class: int = 0
    episodes_per_epoch: int = 100
    epochs: int = 10
    batch_size: int = 32
    w_sl: float = 10.0
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    embed_dim: int = 64
    hidden: tuple[int, ...] = (256,)
    p: float = 0.99
    shared_extractor: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.support_per_class < 1:
            raise ValueError("support_per_class must be at least 1")
        if self.query_per_class < 0 or self.classes_per_episode < 0:
            raise ValueError("query_per_class and classes_per_episode must be non-negative")
        for name in ("episodes_per_epoch", "batch_size", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.w_sl < 0 or self.lr <= 0:
            raise ValueError("epochs and w_sl must be non-negative and lr positive")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")


@dataclass
class Episode:
    classes: list[int]
    support_ids: dict[int, list[int]]
    query_ids: dict[int, list[int]]


@dataclass
class EpisodeLoss:
    proto_loss: float
    nesy_loss: float
    combined: float


def sample_episode(support: SupportIndex, cfg: EpisodeConfig, episode_seed) -> Episode:
    """Draw episode classes, then disjoint supports and queries per labelled class.

    Every labelled class gets supports so that the full distance softmax is
    defined; only the selected classes contribute queries.
    """
    rng = np.random.default_rng(episode_seed)
    labelled = support.classes
    l = cfg.classes_per_episode or len(labelled)
    if l > len(labelled):
        raise ValueError(f"{l} classes per episode but only {len(labelled)} are labelled")
    chosen = sorted(int(c) for c in rng.choice(labelled, size=l, replace=False))
    chosen_set = set(chosen)
    sup, qry = {}, {}
    for c in labelled:
        pool = np.asarray(support.ids[c])
        order = rng.permutation(len(pool))
        s = min(cfg.support_per_class, len(pool))
        if s < cfg.support_per_class:
            log.info("class %d has %d labelled images, fewer than %d supports", c, len(pool), cfg.support_per_class)
        sup[c] = [int(i) for i in pool[order[:s]]]
        q = 0
        if c in chosen_set and cfg.query_per_class > 0:
            q = min(cfg.query_per_class, len(pool) - s)
            if q < cfg.query_per_class:
                log.debug("class %d: only %d query images available", c, q)
        qry[c] = [int(i) for i in pool[order[s:s + q]]] if c in chosen_set else []
    return Episode(chosen, sup, qry)


def proto_query_loss(z, bank: CentroidBank, group: int, true_class: int):
    """Prototypical negative log-likelihood of ``true_class`` and its gradients.

    Equals ``||z - c_true||^2 + log sum_c exp(-||z - c_c||^2)``.
    """
    cents = bank.complete(group)
    z = np.asarray(z, dtype=np.float64)
    d2 = np.sum((z - cents) ** 2, axis=-1)
    top = np.max(-d2)
    loss = float(d2[true_class] + top + math.log(np.sum(np.exp(-d2 - top))))
    y = softmax_neg(d2)
    g = np.zeros_like(y)
    g[true_class] = -1.0 / y[true_class]
    grad_z, grad_c = head_backward(z, bank, group, g, y=y)
    return loss, grad_z, grad_c


def _proto_batch(zq: np.ndarray, cents: np.ndarray, truth: np.ndarray):
    # batched form of proto_query_loss, using the log-softmax gradient directly
    d2 = np.sum((zq[:, None, :] - cents) ** 2, axis=-1)
    y = softmax_neg(d2)
    top = np.max(-d2, axis=1)
    losses = d2[np.arange(len(truth)), truth] + top + np.log(np.sum(np.exp(-d2 - top[:, None]), axis=1))
    g_logit = y.copy()  # d(-log y_t)/d(-d2_c) = y_c - [c == t]
    g_logit[np.arange(len(truth)), truth] -= 1.0
    grad_z = -2.0 * (g_logit[:, :, None] * (zq[:, None, :] - cents)).sum(axis=1)
    grad_c = 2.0 * (g_logit[:, :, None] * (zq[:, None, :] - cents)).sum(axis=0)
    return losses, grad_z, grad_c


@lru_cache(maxsize=None)
def sum_models(label: int) -> ModelSet:
    return enumerate_models(sum_knowledge(int(label)), SUM_SPACE, ONE_HOT)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class PNetModel:
    specs: list[bb.MlpSpec]
    params: list[bb.ParamState]
    group_extractor: tuple[int, ...]
    n_classes: int = 10
    bank: CentroidBank | None = None

    @property
    def k(self) -> int:
        return len(self.group_extractor)

    def embed(self, head: int, x):
        return bb.forward(self.specs[head], self.params[head], x)


@dataclass
class BaselineModel:
    spec: bb.MlpSpec
    params: bb.ParamState
    n_classes: int = 10


def new_pnet(input_dim: int, cfg: EpisodeConfig, k: int = 2, n_classes: int = 10) -> PNetModel:
    heads = 1 if cfg.shared_extractor else k
    specs = [bb.MlpSpec(input_dim, cfg.hidden, cfg.embed_dim, seed=_seed_int(cfg.seed, 1000 + h)) for h in range(heads)]
    params = [bb.init_params(s) for s in specs]
    mapping = tuple(0 if cfg.shared_extractor else i for i in range(k))
    return PNetModel(specs, params, mapping, n_classes)


def new_baseline(input_dim: int, cfg: EpisodeConfig, n_classes: int = 10) -> BaselineModel:
    spec = bb.MlpSpec(input_dim, cfg.hidden, n_classes, seed=_seed_int(cfg.seed, 1000))
    return BaselineModel(spec, bb.init_params(spec), n_classes)


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _pair_images(dataset: PairDataset, idx: np.ndarray, group: int) -> np.ndarray:
    ids = dataset.left[idx] if group == 0 else dataset.right[idx]
    return dataset.images[ids]


def build_bank(model: PNetModel, dataset: PairDataset, supports: Sequence[SupportIndex],
               support_ids: Sequence[dict[int, list[int]]], p: float, zero_shot_seed):
    """Centroids from the given support ids, plus zero-shot draws for unlabelled classes.

    Returns the bank and, per head, the support embedding tape and row layout
    needed to push centroid gradients back into the extractor.
    """
    heads = len(model.specs)
    bank = CentroidBank.empty([model.n_classes] * heads, [s.output_dim for s in model.specs])
    traces = []
    for h in range(heads):
        rows, layout = [], {}
        for c in sorted(support_ids[h]):
            ids = support_ids[h][c]
            layout[c] = (len(rows), len(rows) + len(ids))
            rows.extend(ids)
        z, tape = model.embed(h, dataset.images[np.asarray(rows, dtype=np.int64)])
        for c, (a, b) in layout.items():
            bank.set_centroid(h, c, z[a:b].mean(axis=0), LABELLED)
        if bank.missing(h):
            bank = init_unlabelled_centroids(bank, h, p, rng_seed=np.random.SeedSequence([*zero_shot_seed, h]))
        traces.append((z, tape, layout))
    return bank, traces


def _labels_models(knowledge: KnowledgeProvider, labels: np.ndarray) -> dict[int, ModelSet]:
    return {int(y): knowledge(int(y)) for y in np.unique(labels)}


@dataclass
class NesyResult:
    loss: float
    losses: np.ndarray
    param_grads: list[bb.Grads]
    centroid_grads: list[np.ndarray]


def nesy_batch_loss(dataset: PairDataset, idx: np.ndarray, model: PNetModel, bank: CentroidBank,
                    knowledge: KnowledgeProvider = sum_models, scale: float = 1.0) -> NesyResult:
    """Batch-mean semantic loss of pairs ``idx`` and its gradients.

    Gradients are those of ``scale * loss``: concept probabilities come from
    the distance softmax, the output gradient from the semantic-loss closed
    form, then flow through the head into embeddings and extractor weights.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n = len(idx)
    heads = len(model.specs)
    zs, tapes, ys = [], [], []
    for g in range(model.k):
        h = model.group_extractor[g]
        z, tape = model.embed(h, _pair_images(dataset, idx, g))
        zs.append(z)
        tapes.append(tape)
        ys.append(distance_softmax(z, bank, h))
    y_all = np.concatenate(ys, axis=1)
    labels = dataset.labels[idx]
    losses = np.zeros(n)
    grad_y = np.zeros_like(y_all)
    for lab, models in _labels_models(knowledge, labels).items():
        mask = labels == lab
        losses[mask], grad_y[mask], _ = semantic_loss_batch(y_all[mask], models)
    grad_y *= scale / n
    param_grads = [bb.zero_grads(p) for p in model.params]
    cgrads = [np.zeros_like(bank.centroids[h]) for h in range(heads)]
    off = 0
    for g in range(model.k):
        h = model.group_extractor[g]
        width = ys[g].shape[1]
        gz, gc = head_backward(zs[g], bank, h, grad_y[:, off:off + width], y=ys[g])
        off += width
        cgrads[h] += gc.sum(axis=0)
        pg, _ = bb.backward(model.specs[h], model.params[h], tapes[g], gz)
        param_grads[h] = param_grads[h] + pg
    return NesyResult(float(losses.mean()), losses, param_grads, cgrads)


class _RoundRobin:
    def __init__(self, n: int, seed):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(n)
        self.pos = 0

    def take(self, b: int) -> np.ndarray:
        out = []
        while len(out) < b:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(b - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + step])
            self.pos += step
        return np.asarray(out, dtype=np.int64)


@dataclass
class TrainResult:
    model: object
    epochs: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def _check_finite(loss: EpisodeLoss, episode: int) -> None:
    if not all(math.isfinite(v) for v in (loss.proto_loss, loss.nesy_loss, loss.combined)):
        raise TrainingDiverged(f"non-finite loss at episode {episode}: {loss}")


def _epoch_summary(epoch: int, losses: list[EpisodeLoss], model, val: PairDataset | None) -> dict:
    rec = {
        "epoch": epoch,
        "proto_loss": float(np.mean([l.proto_loss for l in losses])),
        "nesy_loss": float(np.mean([l.nesy_loss for l in losses])),
        "combined": float(np.mean([l.combined for l in losses])),
    }
    if val is not None and len(val):
        report, _ = evaluate(predict_concepts(model, val), val.concepts, val.labels, model.n_classes)
        rec["val_acc_c"] = report.acc_c
        rec["val_f1_c"] = report.f1_c
    return rec


def train(dataset: PairDataset, supports, cfg: EpisodeConfig,
          knowledge: KnowledgeProvider = sum_models, val: PairDataset | None = None) -> TrainResult:
    """Train a prototypical model on ``dataset`` with labelled ``supports``.

    ``supports`` is one :class:`SupportIndex` (shared by every extractor) or
    one per extractor.
    """
    model = new_pnet(dataset.images.shape[1], cfg)
    heads = len(model.specs)
    if isinstance(supports, SupportIndex):
        supports = [supports] * heads
    if len(supports) != heads:
        raise ValueError(f"{len(supports)} support indices for {heads} extractors")
    for s in supports:
        if len(s.classes) < 2:
            raise ValueError("every extractor needs at least two labelled classes")
    stream = _RoundRobin(len(dataset), np.random.SeedSequence([cfg.seed, 7]))
    result = TrainResult(model, [], asdict(cfg))
    t = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay**epoch
        losses = []
        for _ in range(cfg.episodes_per_epoch):
            ep_loss = _pnet_episode(model, dataset, supports, cfg, knowledge, stream, t, lr)
            _check_finite(ep_loss, t)
            losses.append(ep_loss)
            t += 1
        if val is not None:
            model.bank = final_bank(model, dataset, supports, cfg)
        result.epochs.append(_epoch_summary(epoch, losses, model, val))
    model.bank = final_bank(model, dataset, supports, cfg)
    return result


def _pnet_episode(model: PNetModel, dataset: PairDataset, supports, cfg: EpisodeConfig,
                  knowledge: KnowledgeProvider, stream: _RoundRobin, t: int, lr: float) -> EpisodeLoss:
    heads = len(model.specs)
    episodes = [sample_episode(supports[h], cfg, np.random.SeedSequence([cfg.seed, t, h])) for h in range(heads)]
    bank, traces = build_bank(model, dataset, supports, [e.support_ids for e in episodes], cfg.p,
                              zero_shot_seed=(cfg.seed, t))
    cgrads = [np.zeros_like(c) for c in bank.centroids]
    grads = [bb.zero_grads(p) for p in model.params]

    proto = 0.0
    for h, ep in enumerate(episodes):
        qids = [(c, i) for c in ep.classes for i in ep.query_ids[c]]
        if not qids:
            continue
        l = len(ep.classes)
        q = max(cfg.query_per_class, 1)
        truth = np.array([c for c, _ in qids])
        zq, tape = model.embed(h, dataset.images[np.array([i for _, i in qids])])
        losses, gz, gc = _proto_batch(zq, bank.centroids[h], truth)
        w = 1.0 / (l * q)
        proto += w * float(losses.sum())
        pg, _ = bb.backward(model.specs[h], model.params[h], tape, w * gz)
        grads[h] = grads[h] + pg
        cgrads[h] += w * gc

    idx = stream.take(cfg.batch_size)
    if cfg.w_sl > 0:
        nesy = nesy_batch_loss(dataset, idx, model, bank, knowledge, scale=cfg.w_sl)
        for h in range(heads):
            grads[h] = grads[h] + nesy.param_grads[h]
            cgrads[h] += nesy.centroid_grads[h]
        nesy_loss = nesy.loss
    else:
        nesy_loss = _nesy_value(dataset, idx, model, bank, knowledge)

    # centroid gradients flow back to the support embeddings that produced them
    for h, (z, tape, layout) in enumerate(traces):
        gz = np.zeros_like(z)
        for c, (a, b) in layout.items():
            gz[a:b] = cgrads[h][c] / (b - a)
        pg, _ = bb.backward(model.specs[h], model.params[h], tape, gz)
        grads[h] = grads[h] + pg

    for h in range(heads):
        model.params[h] = bb.adam_step(model.params[h], grads[h], lr, cfg.beta1, cfg.beta2,
                                       cfg.adam_eps, cfg.weight_decay)
    return EpisodeLoss(proto, nesy_loss, proto + cfg.w_sl * nesy_loss)


def _nesy_value(dataset, idx, model: PNetModel, bank, knowledge) -> float:
    ys = [distance_softmax(model.embed(model.group_extractor[g], _pair_images(dataset, idx, g))[0],
                           bank, model.group_extractor[g]) for g in range(model.k)]
    y_all = np.concatenate(ys, axis=1)
    labels = dataset.labels[idx]
    losses = np.zeros(len(idx))
    for lab, models in _labels_models(knowledge, labels).items():
        mask = labels == lab
        losses[mask] = semantic_loss_batch(y_all[mask], models)[0]
    return float(losses.mean())


def final_bank(model: PNetModel, dataset: PairDataset, supports, cfg: EpisodeConfig) -> CentroidBank:
    """Centroids from every labelled image, with a fixed zero-shot draw."""
    bank, _ = build_bank(model, dataset, supports, [s.ids for s in supports], cfg.p,
                         zero_shot_seed=(cfg.seed, FINAL_BANK_STREAM))
    return bank


# ---------------------------------------------------------------------------
# Semantic-loss-only baseline
# ---------------------------------------------------------------------------


def train_baseline(dataset: PairDataset, cfg: EpisodeConfig, knowledge: KnowledgeProvider = sum_models,
                   val: PairDataset | None = None) -> TrainResult:
    """Softmax digit classifier trained only through semantic loss on sum labels."""
    model = new_baseline(dataset.images.shape[1], cfg)
    stream = _RoundRobin(len(dataset), np.random.SeedSequence([cfg.seed, 7]))
    result = TrainResult(model, [], asdict(cfg))
    weight = cfg.w_sl if cfg.w_sl > 0 else 1.0
    t = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay**epoch
        losses = []
        for _ in range(cfg.episodes_per_epoch):
            idx = stream.take(cfg.batch_size)
            loss, grads = _baseline_step(model, dataset, idx, knowledge, weight)
            ep = EpisodeLoss(0.0, loss, weight * loss)
            _check_finite(ep, t)
            model.params = bb.adam_step(model.params, grads, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                                        cfg.weight_decay)
            losses.append(ep)
            t += 1
        result.epochs.append(_epoch_summary(epoch, losses, model, val))
    return result


def _baseline_step(model: BaselineModel, dataset: PairDataset, idx, knowledge, weight: float):
    n = len(idx)
    outs = []
    for g in (0, 1):
        logits, tape = bb.forward(model.spec, model.params, _pair_images(dataset, idx, g))
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        outs.append((e / e.sum(axis=1, keepdims=True), tape))
    y_all = np.concatenate([o[0] for o in outs], axis=1)
    labels = dataset.labels[idx]
    losses = np.zeros(n)
    grad_y = np.zeros_like(y_all)
    for lab, models in _labels_models(knowledge, labels).items():
        mask = labels == lab
        losses[mask], grad_y[mask], _ = semantic_loss_batch(y_all[mask], models)
    grad_y *= weight / n
    grads = bb.zero_grads(model.params)
    width = model.n_classes
    for g, (y, tape) in enumerate(outs):
        gy = grad_y[:, g * width:(g + 1) * width]
        glogit = y * (gy - (gy * y).sum(axis=1, keepdims=True))
        pg, _ = bb.backward(model.spec, model.params, tape, glogit)
        grads = grads + pg
    return float(losses.mean()), grads


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def concept_probs(model, dataset: PairDataset, group: int) -> np.ndarray:
    x = _pair_images(dataset, np.arange(len(dataset)), group)
    if isinstance(model, PNetModel):
        h = model.group_extractor[group]
        z, _ = model.embed(h, x)
        return distance_softmax(z, model.bank, h)
    logits, _ = bb.forward(model.spec, model.params, x)
    return softmax_neg(-logits)


def predict_concepts(model, dataset: PairDataset) -> np.ndarray:
    return np.stack([concept_probs(model, dataset, g).argmax(axis=1) for g in (0, 1)], axis=1)
