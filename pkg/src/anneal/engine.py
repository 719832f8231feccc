"""The active-learning loop: uncertainty scoring over the unlabeled pair
pool, k-means diversity selection, oracle querying, zero-cost transitive
label expansion, bit accounting, and experiment orchestration.

The candidate pool is every unordered train-split pair not yet labeled. It
is never materialized: pairs are scored in streamed blocks and only the
best candidates are kept, so the O(n^2) universe stays off the heap.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data as datamod
from . import model as modelmod
from .data import (Dataset, LabeledPair, LabeledSet, Pair, canonicalize,
                   DISSIMILAR, SIMILAR)
from .evaluation import HistoryRow, map_at_k
from .kmeans import kmeans

logger = logging.getLogger(__name__)

STRATEGIES = ("anneal", "anneal-u", "random")

# rng domains, combined with the experiment seed and iteration number
_RNG_MODEL = 0
_RNG_INITIAL_SET = 1
_RNG_TRAIN = 2
_RNG_SELECT = 3


def child_rng(seed: int, domain: int, iteration: int = 0) -> np.random.Generator:
    """Deterministic per-purpose generator; stateless across restarts."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(domain, iteration)))


class OracleError(RuntimeError):
    """The oracle failed or timed out; the current iteration must abort."""


class Oracle:
    """Label source for train-split pairs."""

    provenance = "simulated"

    def label(self, pair: Pair) -> int:
        raise NotImplementedError

    def label_pairs(self, pairs: Sequence[Pair]) -> list[int]:
        """All-or-nothing batch labeling; may raise OracleError."""
        return [self.label(p) for p in pairs]


class SimulatedOracle(Oracle):
    """Answers from the hidden class labels: same class means similar."""

    provenance = "simulated"

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self._train = set(dataset.ids("train"))

    def label(self, pair: Pair) -> int:
        assert pair.a in self._train and pair.b in self._train, \
            f"pair {pair} crosses out of the train split"
        same = (self._dataset.by_id[pair.a].oracle_class
                == self._dataset.by_id[pair.b].oracle_class)
        return SIMILAR if same else DISSIMILAR


@dataclass
class ALConfig:
    k: int
    strategy: str = "anneal"
    uncertain_pool_multiplier: int = 4
    budget_bits: float = 400.0
    iterations_max: int = 5
    seed: int = 0
    epochs_per_iteration: int = 30
    initial_epochs: int | None = None
    batch_size: int = 64
    seed_fraction: float = 0.05
    per_seed_similar: int = 4
    per_seed_dissimilar: int = 4
    retrain_from_scratch: bool = False
    scoring_block_size: int = 65536
    jobs: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.uncertain_pool_multiplier < 2:
            raise ValueError("uncertain_pool_multiplier must be >= 2 so the "
                             "uncertain pool is larger than the selection")
        if self.budget_bits < 0:
            raise ValueError("budget_bits must be non-negative")
        if self.iterations_max < 0:
            raise ValueError("iterations_max must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.seed_fraction <= 1.0:
            raise ValueError("seed_fraction must lie in (0, 1]")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    @property
    def h(self) -> int:
        """Size of the uncertain pool handed to diversity clustering."""
        return self.uncertain_pool_multiplier * self.k


@dataclass
class ALState:
    model: modelmod.SiameseModel
    labeled: LabeledSet
    iteration: int = 0
    bits_spent: float = 0.0
    initial_bits: float = 0.0
    history: list[HistoryRow] = field(default_factory=list)


def uncertainty_score(y_hat: float) -> float:
    """Distance of the similarity probability from 0.5; lower is more
    uncertain."""
    return abs(y_hat - 0.5)


def annotation_cost_bits(n_items: int, mode: str, num_classes: int = 2) -> float:
    """Pair annotations cost one bit each; class labels cost log2(C)."""
    if mode == "pair":
        return float(n_items)
    if mode == "class_label":
        if num_classes < 2:
            raise ValueError("class_label mode needs at least 2 classes")
        return n_items * math.log2(num_classes)
    raise ValueError(f"unknown annotation mode {mode!r}")


# -- candidate streaming ---------------------------------------------------

def _pair_keys(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a.astype(np.int64) << 32) | b.astype(np.int64)


def _candidate_blocks(train_ids: np.ndarray, labeled_keys: np.ndarray,
                      block_size: int):
    """Yield (a_ids, b_ids) arrays of unlabeled canonical train pairs, in
    global canonical order."""
    n = len(train_ids)
    buf_a: list[np.ndarray] = []
    buf_b: list[np.ndarray] = []
    buffered = 0
    for i in range(n - 1):
        a = np.full(n - 1 - i, train_ids[i], dtype=np.int64)
        b = train_ids[i + 1:].astype(np.int64)
        keys = _pair_keys(a, b)
        if len(labeled_keys):
            pos = np.searchsorted(labeled_keys, keys)
            pos = np.minimum(pos, len(labeled_keys) - 1)
            fresh = labeled_keys[pos] != keys
        else:
            fresh = np.ones(len(keys), dtype=bool)
        if fresh.any():
            buf_a.append(a[fresh])
            buf_b.append(b[fresh])
            buffered += int(fresh.sum())
        if buffered >= block_size:
            yield np.concatenate(buf_a), np.concatenate(buf_b)
            buf_a, buf_b, buffered = [], [], 0
    if buffered:
        yield np.concatenate(buf_a), np.concatenate(buf_b)


class EmbeddingIndex:
    """Train-split encoder embeddings for one model state, id addressable."""

    def __init__(self, model: modelmod.SiameseModel, dataset: Dataset):
        self.ids = np.array(dataset.ids("train"), dtype=np.int64)
        self.embeddings = model.embed_many(dataset.features_for(self.ids))
        self.model = model

    def rows_for(self, ids: np.ndarray) -> np.ndarray:
        return self.embeddings[np.searchsorted(self.ids, ids)]

    def classifier_probability(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """y_hat for canonical pairs given by parallel id arrays."""
        u = np.concatenate([self.rows_for(a), self.rows_for(b)], axis=1)
        from . import nn
        out, _ = nn.forward(self.model.classifier, u)
        return np.clip(out[:, 0], modelmod.PROB_EPS, 1.0 - modelmod.PROB_EPS)

    def pair_representation_many(self, a: np.ndarray, b: np.ndarray
                                 ) -> np.ndarray:
        return np.concatenate([self.rows_for(a), self.rows_for(b)], axis=1)


def pair_representation(pair: Pair, model: modelmod.SiameseModel,
                        dataset: Dataset) -> np.ndarray:
    """Concatenated canonical-order embeddings used as the clustering space."""
    fa = model.embed(dataset.by_id[pair.a].features)
    fb = model.embed(dataset.by_id[pair.b].features)
    return np.concatenate([fa, fb])


@dataclass(frozen=True)
class ScoredPair:
    pair: Pair
    score: float


def select_uncertain(dataset: Dataset, model: modelmod.SiameseModel,
                     labeled: LabeledSet, h: int,
                     block_size: int = 65536, jobs: int = 1,
                     index: EmbeddingIndex | None = None) -> list[ScoredPair]:
    """The h most uncertain unlabeled pairs, ties broken by canonical key.

    Equal to a full-sort oracle's bottom h; scoring may fan out over worker
    threads per block with a deterministic merge.
    """
    if index is None:
        index = EmbeddingIndex(model, dataset)
    train_ids = index.ids
    labeled_keys = labeled.pair_keys()

    def score_block(block):
        a, b = block
        y_hat = index.classifier_probability(a, b)
        score = np.abs(y_hat - 0.5)
        # prune under the full (score, key) order: a plain score partition
        # could drop tied pairs that the canonical tie-break keeps
        keep = np.lexsort((b, a, score))[:min(h, len(score))]
        return score[keep], a[keep], b[keep]

    blocks = list(_candidate_blocks(train_ids, labeled_keys, block_size))
    if jobs > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(score_block, blocks))
    else:
        partials = [score_block(b) for b in blocks]

    if not partials:
        return []
    scores = np.concatenate([p[0] for p in partials])
    a_ids = np.concatenate([p[1] for p in partials])
    b_ids = np.concatenate([p[2] for p in partials])
    order = np.lexsort((b_ids, a_ids, scores))[:h]
    if len(order) < h:
        warnings.warn(
            f"unlabeled pool holds only {len(order)} pairs, requested {h}",
            RuntimeWarning, stacklevel=2)
    return [ScoredPair(Pair(int(a_ids[i]), int(b_ids[i])), float(scores[i]))
            for i in order]


def cluster_diversity(candidates: Sequence[ScoredPair], k: int,
                      rng: np.random.Generator,
                      index: EmbeddingIndex) -> list[ScoredPair]:
    """Cluster the uncertain pool and keep the most uncertain pair of each
    cluster; empty-cluster deficits are backfilled by global uncertainty."""
    if len(candidates) < k:
        warnings.warn(
            f"only {len(candidates)} uncertain pairs for k={k}; returning all",
            RuntimeWarning, stacklevel=2)
        return sorted(candidates, key=lambda sp: sp.pair)
    a = np.array([sp.pair.a for sp in candidates], dtype=np.int64)
    b = np.array([sp.pair.b for sp in candidates], dtype=np.int64)
    reps = index.pair_representation_many(a, b)
    result = kmeans(reps, k, rng)

    chosen: list[int] = []
    chosen_mask = np.zeros(len(candidates), dtype=bool)
    for c in range(k):
        members = np.flatnonzero(result.assignments == c)
        if not len(members):
            continue
        best = min(members,
                   key=lambda i: (candidates[i].score, candidates[i].pair))
        chosen.append(best)
        chosen_mask[best] = True
    deficit = k - len(chosen)
    if deficit > 0:
        rest = [i for i in range(len(candidates)) if not chosen_mask[i]]
        rest.sort(key=lambda i: (candidates[i].score, candidates[i].pair))
        chosen.extend(rest[:deficit])
    return sorted((candidates[i] for i in chosen), key=lambda sp: sp.pair)


def select_random(dataset: Dataset, labeled: LabeledSet, k: int,
                  rng: np.random.Generator) -> list[Pair]:
    """k uniform unlabeled train pairs, drawn without materializing the pool."""
    train_ids = np.array(dataset.ids("train"), dtype=np.int64)
    n = len(train_ids)
    total = n * (n - 1) // 2
    free = total - len(labeled)  # labeled pairs are train pairs by invariant
    if free < k:
        warnings.warn(f"unlabeled pool holds only {free} pairs, requested {k}",
                      RuntimeWarning, stacklevel=2)
        k = max(free, 0)
    # row r of the triangle starts at offset r*n - r*(r+1)/2 - r - 1 pairs in
    row_starts = np.cumsum(np.concatenate([[0], np.arange(n - 1, 0, -1)]))
    picked: dict[Pair, None] = {}
    while len(picked) < k:
        t = int(rng.integers(total))
        i = int(np.searchsorted(row_starts, t, side="right")) - 1
        j = i + 1 + (t - int(row_starts[i]))
        pair = Pair(int(train_ids[i]), int(train_ids[j]))
        if pair in labeled or pair in picked:
            continue
        picked[pair] = None
    return sorted(picked)


# -- transitive expansion ---------------------------------------------------

def transitive_expand(labeled: LabeledSet) -> list[LabeledPair]:
    """One-step zero-cost expansion: for two labeled pairs sharing an image,
    similar+similar derives a similar outer pair and similar+dissimilar a
    dissimilar one. Derived pairs never derive further within the call;
    pairs already labeled are skipped and contradictions are dropped.
    """
    items = labeled.items()
    if len(items) < 2:
        return []
    a = np.array([lp.pair.a for lp in items], dtype=np.int64)
    b = np.array([lp.pair.b for lp in items], dtype=np.int64)
    lab = np.array([lp.label for lp in items], dtype=np.int64)

    # both directions so every image sees its full neighborhood
    src = np.concatenate([a, b])
    dst = np.concatenate([b, a])
    lab2 = np.concatenate([lab, lab])
    order = np.argsort(src, kind="stable")
    src, dst, lab2 = src[order], dst[order], lab2[order]

    out_lo: list[np.ndarray] = []
    out_hi: list[np.ndarray] = []
    out_lab: list[np.ndarray] = []
    starts = np.flatnonzero(np.concatenate([[True], src[1:] != src[:-1]]))
    bounds = np.concatenate([starts, [len(src)]])
    for gi in range(len(starts)):
        lo, hi = bounds[gi], bounds[gi + 1]
        deg = hi - lo
        if deg < 2:
            continue
        nbr = dst[lo:hi]
        nl = lab2[lo:hi]
        iu, ju = np.triu_indices(deg, k=1)
        l1, l2 = nl[iu], nl[ju]
        useful = (l1 | l2).astype(bool)  # skip dissimilar+dissimilar
        if not useful.any():
            continue
        x, y = nbr[iu[useful]], nbr[ju[useful]]
        out_lo.append(np.minimum(x, y))
        out_hi.append(np.maximum(x, y))
        out_lab.append((l1[useful] & l2[useful]))
    if not out_lo:
        return []
    lo = np.concatenate(out_lo)
    hi = np.concatenate(out_hi)
    labels = np.concatenate(out_lab)
    keys = _pair_keys(lo, hi)

    # drop pairs already in T
    existing = labeled.pair_keys()
    pos = np.searchsorted(existing, keys)
    pos = np.minimum(pos, max(len(existing) - 1, 0))
    fresh = existing[pos] != keys if len(existing) else np.ones_like(keys, bool)
    keys, lo, hi, labels = keys[fresh], lo[fresh], hi[fresh], labels[fresh]
    if not len(keys):
        return []

    # dedupe and drop contradictory derivations
    combo = np.unique(np.stack([keys, labels], axis=1), axis=0)
    uniq, counts = np.unique(combo[:, 0], return_counts=True)
    conflicted = set(uniq[counts > 1].tolist())
    if conflicted:
        logger.info("dropping %d contradictory transitive derivations",
                    len(conflicted))
    derived = []
    for key, label in combo:
        if int(key) in conflicted:
            continue
        derived.append(LabeledPair(Pair(int(key) >> 32, int(key) & 0xFFFFFFFF),
                                   int(label), "transitive"))
    derived.sort(key=lambda lp: lp.pair)
    return derived


# -- the loop ---------------------------------------------------------------

def _assert_train_pairs(dataset: Dataset, pairs: Sequence[Pair]) -> None:
    train = set(dataset.ids("train"))
    for p in pairs:
        assert p.a in train and p.b in train, \
            f"pair {p} crosses out of the train split"


def _train(state: ALState, dataset: Dataset, config: ALConfig,
           iteration: int, model_config: modelmod.ModelConfig) -> None:
    if config.retrain_from_scratch:
        state.model = modelmod.SiameseModel(
            model_config, child_rng(config.seed, _RNG_MODEL, iteration))
    epochs = config.epochs_per_iteration
    if iteration == 0 and config.initial_epochs is not None:
        epochs = config.initial_epochs
    modelmod.train_epochs(state.model, dataset, state.labeled.items(), epochs,
                          config.batch_size,
                          child_rng(config.seed, _RNG_TRAIN, iteration))


def select_pairs(state: ALState, dataset: Dataset, config: ALConfig,
                 iteration: int) -> list[Pair]:
    """Pick the next batch of query pairs according to the strategy."""
    rng = child_rng(config.seed, _RNG_SELECT, iteration)
    if config.strategy == "random":
        return select_random(dataset, state.labeled, config.k, rng)
    index = EmbeddingIndex(state.model, dataset)
    if config.strategy == "anneal-u":
        scored = select_uncertain(dataset, state.model, state.labeled,
                                  config.k, config.scoring_block_size,
                                  config.jobs, index)
        return [sp.pair for sp in sorted(scored, key=lambda sp: sp.pair)]
    scored = select_uncertain(dataset, state.model, state.labeled, config.h,
                              config.scoring_block_size, config.jobs, index)
    diverse = cluster_diversity(scored, config.k, rng, index)
    return [sp.pair for sp in diverse]


def run_iteration(state: ALState, dataset: Dataset, config: ALConfig,
                  oracle: Oracle,
                  model_config: modelmod.ModelConfig) -> ALState:
    """One AL round: select, annotate, expand, retrain, evaluate.

    State mutates only after the oracle answered every query, so an oracle
    failure leaves the experiment unchanged.
    """
    iteration = state.iteration + 1
    selected = select_pairs(state, dataset, config, iteration)
    _assert_train_pairs(dataset, selected)
    labels = oracle.label_pairs(selected)

    for pair, label in zip(selected, labels):
        state.labeled.add(LabeledPair(pair, label, oracle.provenance))
    state.bits_spent += annotation_cost_bits(len(selected), "pair")

    derived = transitive_expand(state.labeled)
    added = 0
    for lp in derived:
        added += state.labeled.add(lp)

    _train(state, dataset, config, iteration, model_config)
    state.iteration = iteration
    state.history.append(HistoryRow(
        iteration=iteration, bits=state.bits_spent,
        map_at_5=map_at_k(state.model, dataset, k=5),
        labeled_pairs=len(state.labeled), transitive_pairs=added))
    return state


def run_experiment(dataset: Dataset, config: ALConfig,
                   model_config: modelmod.ModelConfig,
                   oracle: Oracle | None = None,
                   on_iteration=None,
                   resume_state: ALState | None = None) -> ALState:
    """Full run: initial set, iteration-0 training and evaluation, then AL
    rounds until the selection budget or the iteration cap is reached.

    ``budget_bits`` limits the bits spent on AL queries; the initial set's
    cost is reported in ``bits_spent`` but does not count against it.
    ``on_iteration(state)`` fires after every history row, letting callers
    flush partial results. ``resume_state`` continues an earlier run instead
    of building the initial set.
    """
    if oracle is None:
        oracle = SimulatedOracle(dataset)
    if resume_state is not None:
        state = resume_state
    else:
        labeled, _seeds = datamod.build_initial_set(
            dataset, config.seed_fraction, config.per_seed_similar,
            config.per_seed_dissimilar,
            child_rng(config.seed, _RNG_INITIAL_SET))
        model = modelmod.SiameseModel(model_config,
                                      child_rng(config.seed, _RNG_MODEL))
        state = ALState(model=model, labeled=labeled)
        state.initial_bits = annotation_cost_bits(len(labeled), "pair")
        state.bits_spent = state.initial_bits

        _train(state, dataset, config, 0, model_config)
        state.history.append(HistoryRow(
            iteration=0, bits=state.bits_spent,
            map_at_5=map_at_k(state.model, dataset, k=5),
            labeled_pairs=len(state.labeled), transitive_pairs=0))
        if on_iteration is not None:
            on_iteration(state)

    while (state.iteration < config.iterations_max
           and state.bits_spent - state.initial_bits < config.budget_bits):
        run_iteration(state, dataset, config, oracle, model_config)
        if on_iteration is not None:
            on_iteration(state)
    return state
