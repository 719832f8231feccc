"""Class-label active-learning baseline: a multiclass classifier trained on
class-annotated images, margin-sampling uncertainty plus k-means diversity,
with every annotated image charged log2(C) bits.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from . import model as modelmod
from .data import Dataset
from .engine import (_RNG_INITIAL_SET, _RNG_MODEL, _RNG_SELECT, _RNG_TRAIN,
                     annotation_cost_bits, child_rng)
from .evaluation import HistoryRow, map_at_k
from .data import select_seed_images
from .kmeans import kmeans


@dataclass
class TcalConfig:
    pair_bits_per_iteration: int
    budget_bits: float = 400.0
    iterations_max: int = 5
    seed: int = 0
    learning_rate: float = 1e-3
    epochs_per_iteration: int = 30
    initial_epochs: int | None = None
    batch_size: int = 64
    seed_fraction: float = 0.05
    rounding: str = "exact"
    uncertain_pool_multiplier: int = 4
    retrain_from_scratch: bool = False

    def __post_init__(self):
        if self.rounding not in ("exact", "paper"):
            raise ValueError("rounding must be 'exact' or 'paper'")
        if self.pair_bits_per_iteration < 1:
            raise ValueError("pair_bits_per_iteration must be positive")


def images_per_iteration(pair_bits: int, num_classes: int,
                         rounding: str = "exact") -> int:
    """How many class annotations cost about the same as `pair_bits` pair
    annotations. 'paper' mode divides by the floored bit width instead of
    the exact log2."""
    if rounding == "exact":
        n = round(pair_bits / math.log2(num_classes))
    elif rounding == "paper":
        n = round(pair_bits / math.floor(math.log2(num_classes)))
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    return max(int(n), 1)


class ClassifierModel:
    """Encoder (same family as the similarity model's) plus a linear softmax
    head. Retrieval reuses the encoder output as the embedding."""

    def __init__(self, feature_dim: int, num_classes: int,
                 rng: np.random.Generator,
                 encoder_hidden: list[int] | None = None,
                 embedding_dim: int = 32, learning_rate: float = 1e-3):
        hidden = [64, 32] if encoder_hidden is None else list(encoder_hidden)
        self.encoder = nn.make_mlp([feature_dim] + hidden + [embedding_dim],
                                   rng)
        self.head = nn.make_mlp([embedding_dim, num_classes], rng)
        self.num_classes = num_classes
        self.adam = nn.AdamState.for_params(self.parameters(), learning_rate)

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.head.parameters()

    def embed_many(self, features: np.ndarray) -> np.ndarray:
        out, _ = nn.forward(self.encoder, features)
        return out

    def embed(self, features) -> np.ndarray:
        out, _ = nn.forward(self.encoder, features)
        return out

    def logits(self, features: np.ndarray) -> np.ndarray:
        emb = self.embed_many(features)
        out, _ = nn.forward(self.head, emb)
        return out

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def margin_score(probabilities: np.ndarray) -> float:
    """Gap between the two largest class probabilities; lower means more
    uncertain."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValueError("need a probability vector over at least 2 classes")
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def margin_scores(probabilities: np.ndarray) -> np.ndarray:
    top2 = np.partition(probabilities, -2, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def cross_entropy_and_grads(clf: ClassifierModel, x: np.ndarray,
                            y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy plus exact gradients for all parameters."""
    emb, tape_e = nn.forward(clf.encoder, x)
    logits, tape_h = nn.forward(clf.head, emb)
    probs = softmax(logits)
    n = x.shape[0]
    nll = -np.log(np.clip(probs[np.arange(n), y], 1e-300, None))
    loss = float(np.mean(nll))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    demb, grads_h = nn.backward(clf.head, tape_h, dlogits)
    _, grads_e = nn.backward(clf.encoder, tape_e, demb)
    return loss, grads_e + grads_h


def train_classifier(clf: ClassifierModel, x: np.ndarray, y: np.ndarray,
                     epochs: int, batch_size: int,
                     rng: np.random.Generator) -> list[float]:
    trace = []
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = cross_entropy_and_grads(clf, x[idx], y[idx])
            if not np.isfinite(loss):
                raise modelmod.NonFiniteLossError("non-finite classifier loss")
            nn.adam_step(clf.parameters(), grads, clf.adam)
            total += loss * len(idx)
        trace.append(total / n)
    return trace


def tcal_select(clf: ClassifierModel, dataset: Dataset,
                unlabeled_ids: list[int], n_images: int,
                rng: np.random.Generator,
                pool_multiplier: int = 4) -> list[int]:
    """Margin-sampling uncertainty then k-means diversity over encoder
    embeddings; one image (the most uncertain) per cluster."""
    if not unlabeled_ids:
        return []
    ids = np.array(sorted(unlabeled_ids), dtype=np.int64)
    if n_images >= len(ids):
        warnings.warn(
            f"pool holds only {len(ids)} images, requested {n_images}",
            RuntimeWarning, stacklevel=2)
        return [int(i) for i in ids]
    feats = dataset.features_for([int(i) for i in ids])
    emb = clf.embed_many(feats)
    margins = margin_scores(softmax_from_embeddings(clf, emb))

    pool = min(pool_multiplier * n_images, len(ids))
    order = np.lexsort((ids, margins))[:pool]
    sub_ids = ids[order]
    sub_margins = margins[order]
    sub_emb = emb[order]

    result = kmeans(sub_emb, n_images, rng)
    chosen: list[int] = []
    chosen_mask = np.zeros(len(sub_ids), dtype=bool)
    for c in range(n_images):
        members = np.flatnonzero(result.assignments == c)
        if not len(members):
            continue
        best = min(members, key=lambda i: (sub_margins[i], sub_ids[i]))
        chosen.append(best)
        chosen_mask[best] = True
    deficit = n_images - len(chosen)
    if deficit > 0:
        rest = [i for i in range(len(sub_ids)) if not chosen_mask[i]]
        rest.sort(key=lambda i: (sub_margins[i], sub_ids[i]))
        chosen.extend(rest[:deficit])
    return sorted(int(sub_ids[i]) for i in chosen)


def softmax_from_embeddings(clf: ClassifierModel,
                            embeddings: np.ndarray) -> np.ndarray:
    logits, _ = nn.forward(clf.head, embeddings)
    return softmax(logits)


def run_tcal_experiment(dataset: Dataset, config: TcalConfig) -> dict:
    """Run the baseline and return {'history': [...], 'model': classifier}.

    The initial annotation is the same seed-image draw the pair pipeline
    uses, charged log2(C) bits per image; each iteration annotates
    round(pair_bits / log2 C) more images so both methods spend comparable
    bits per round.
    """
    num_classes = dataset.num_classes
    seeds = select_seed_images(dataset, config.seed_fraction,
                               child_rng(config.seed, _RNG_INITIAL_SET))
    labeled_ids = sorted(seeds)
    train_ids = dataset.ids("train")

    clf = ClassifierModel(dataset.dim, num_classes,
                          child_rng(config.seed, _RNG_MODEL),
                          learning_rate=config.learning_rate)
    bits = annotation_cost_bits(len(labeled_ids), "class_label", num_classes)
    initial_bits = bits
    history: list[HistoryRow] = []

    def train_and_eval(iteration: int) -> None:
        nonlocal clf
        if config.retrain_from_scratch:
            clf = ClassifierModel(dataset.dim, num_classes,
                                  child_rng(config.seed, _RNG_MODEL, iteration),
                                  learning_rate=config.learning_rate)
        epochs = config.epochs_per_iteration
        if iteration == 0 and config.initial_epochs is not None:
            epochs = config.initial_epochs
        x = dataset.features_for(labeled_ids)
        y = dataset.classes_for(labeled_ids)
        train_classifier(clf, x, y, epochs, config.batch_size,
                         child_rng(config.seed, _RNG_TRAIN, iteration))
        history.append(HistoryRow(
            iteration=iteration, bits=bits,
            map_at_5=map_at_k(clf, dataset, k=5),
            labeled_pairs=len(labeled_ids), transitive_pairs=0))

    train_and_eval(0)
    n_per_iter = images_per_iteration(config.pair_bits_per_iteration,
                                      num_classes, config.rounding)
    iteration = 0
    while (iteration < config.iterations_max
           and bits - initial_bits < config.budget_bits):
        iteration += 1
        unlabeled = [i for i in train_ids if i not in set(labeled_ids)]
        selected = tcal_select(clf, dataset, unlabeled, n_per_iter,
                               child_rng(config.seed, _RNG_SELECT, iteration),
                               config.uncertain_pool_multiplier)
        labeled_ids = sorted(set(labeled_ids) | set(selected))
        bits += annotation_cost_bits(len(selected), "class_label", num_classes)
        train_and_eval(iteration)
    return {"history": history, "model": clf, "labeled_ids": labeled_ids}
