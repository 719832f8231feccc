"""Pairwise similarity model: a weight-shared encoder feeding (a) a
similarity head whose outputs are compared by cosine under a margin-based
contrastive loss and (b) a binary classifier over the concatenated pair
features under binary cross-entropy. Both losses are blended by a balance
factor and trained end-to-end with Adam.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import data as datamod
from . import nn

PROB_EPS = 1e-12


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries the offending batch info."""


@dataclass
class ModelConfig:
    feature_dim: int
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 32])
    embedding_dim: int = 32
    g_dims: list[int] = field(default_factory=lambda: [32, 32, 32])
    bc_hidden: list[int] = field(default_factory=lambda: [32, 32])
    margin: float = 0.1
    beta: float = 0.1
    learning_rate: float = 1e-4

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 0.0 <= self.margin <= 2.0:
            raise ValueError("margin must lie in [0, 2]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if len(self.g_dims) != 3:
            raise ValueError("the similarity head is three dense layers")
        if len(self.bc_hidden) != 2:
            raise ValueError("the classifier is three dense layers "
                             "(two hidden plus the sigmoid output)")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass(frozen=True)
class PairPrediction:
    """s is the cosine similarity of the head outputs; y_hat the classifier's
    similarity probability, clamped into the open interval (0, 1)."""

    s: float
    y_hat: float


class SiameseModel:
    """Encoder (shared weights), similarity head, binary classifier, and one
    Adam state across all parameters. Single writer during training."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        enc_dims = ([config.feature_dim] + list(config.encoder_hidden)
                    + [config.embedding_dim])
        self.encoder = nn.make_mlp(enc_dims, rng)
        self.g_head = nn.make_mlp([config.embedding_dim] + list(config.g_dims),
                                  rng)
        self.classifier = nn.make_mlp(
            [2 * config.embedding_dim] + list(config.bc_hidden) + [1],
            rng, final_activation="sigmoid")
        self.config = config
        self.adam = nn.AdamState.for_params(self.parameters(),
                                            config.learning_rate)

    @classmethod
    def from_parts(cls, encoder: nn.Mlp, g_head: nn.Mlp, classifier: nn.Mlp,
                   margin: float = 0.1, beta: float = 0.1,
                   learning_rate: float = 1e-4) -> "SiameseModel":
        """Assemble from pre-built networks of any shape (mainly for tests);
        skips the default-architecture validation."""
        if g_head.in_dim != encoder.out_dim:
            raise nn.ShapeError("similarity head input must match embedding")
        if classifier.in_dim != 2 * encoder.out_dim:
            raise nn.ShapeError("classifier input must be twice the embedding")
        model = object.__new__(cls)
        model.encoder = encoder
        model.g_head = g_head
        model.classifier = classifier
        config = object.__new__(ModelConfig)
        config.feature_dim = encoder.in_dim
        config.encoder_hidden = [l.out_dim for l in encoder.layers[:-1]]
        config.embedding_dim = encoder.out_dim
        config.g_dims = [l.out_dim for l in g_head.layers]
        config.bc_hidden = [l.out_dim for l in classifier.layers[:-1]]
        config.margin = margin
        config.beta = beta
        config.learning_rate = learning_rate
        model.config = config
        model.adam = nn.AdamState.for_params(model.parameters(), learning_rate)
        return model

    def parameters(self) -> list[np.ndarray]:
        return (self.encoder.parameters() + self.g_head.parameters()
                + self.classifier.parameters())

    # -- inference ---------------------------------------------------------

    def embed(self, image_features) -> np.ndarray:
        out, _ = nn.forward(self.encoder, image_features)
        return out

    def embed_many(self, features: np.ndarray) -> np.ndarray:
        out, _ = nn.forward(self.encoder, features)
        return out

    def predict_pairs(self, x1: np.ndarray, x2: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized (s, y_hat) over row-aligned pair batches."""
        f1 = self.embed_many(x1)
        f2 = self.embed_many(x2)
        return self.score_embedded(f1, f2)

    def score_embedded(self, f1: np.ndarray, f2: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
        """(s, y_hat) from precomputed embeddings, canonical order."""
        g1, _ = nn.forward(self.g_head, f1)
        g2, _ = nn.forward(self.g_head, f2)
        s = nn.rowwise_cosine(g1, g2)
        logits_in = np.concatenate([f1, f2], axis=1)
        y_hat, _ = nn.forward(self.classifier, logits_in)
        y_hat = np.clip(y_hat[:, 0], PROB_EPS, 1.0 - PROB_EPS)
        return s, y_hat

    def predict_pair(self, x1, x2) -> PairPrediction:
        s, y_hat = self.predict_pairs(np.asarray(x1, dtype=np.float64)[None, :],
                                      np.asarray(x2, dtype=np.float64)[None, :])
        return PairPrediction(s=float(s[0]), y_hat=float(y_hat[0]))


# -- losses ---------------------------------------------------------------

def contrastive_loss(s: float, y: int, margin: float) -> float:
    """1 - s for similar pairs, hinge max(0, s - margin) for dissimilar."""
    if y == datamod.SIMILAR:
        return 1.0 - s
    return max(0.0, s - margin)


def bce_loss(y_hat: float, y: int) -> float:
    y_hat = min(max(y_hat, PROB_EPS), 1.0 - PROB_EPS)
    return -(y * np.log(y_hat) + (1 - y) * np.log(1.0 - y_hat))


def combined_loss(l_cl: float, l_bce: float, beta: float) -> float:
    return (1.0 - beta) * l_cl + beta * l_bce


def _batch_losses(s: np.ndarray, y_hat: np.ndarray, y: np.ndarray,
                  margin: float) -> tuple[np.ndarray, np.ndarray]:
    cl = np.where(y == 1, 1.0 - s, np.maximum(0.0, s - margin))
    yc = np.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    bce = -(y * np.log(yc) + (1 - y) * np.log(1.0 - yc))
    return cl, bce


def batch_loss_and_grads(model: SiameseModel, x1: np.ndarray, x2: np.ndarray,
                         y: np.ndarray
                         ) -> tuple[float, list[np.ndarray]]:
    """Mean combined loss over a pair batch plus exact parameter gradients.

    The gradient list mirrors model.parameters(): encoder params receive the
    sum of both branch contributions (weight sharing), then the similarity
    head, then the classifier.
    """
    cfg = model.config
    n = x1.shape[0]

    f1, tape_e1 = nn.forward(model.encoder, x1)
    f2, tape_e2 = nn.forward(model.encoder, x2)
    g1, tape_g1 = nn.forward(model.g_head, f1)
    g2, tape_g2 = nn.forward(model.g_head, f2)
    u = np.concatenate([f1, f2], axis=1)
    y_hat, tape_bc = nn.forward(model.classifier, u)
    y_hat = y_hat[:, 0]

    n1 = np.linalg.norm(g1, axis=1)
    n2 = np.linalg.norm(g2, axis=1)
    denom = n1 * n2
    ok = denom > 0.0
    s = np.zeros(n)
    s[ok] = np.einsum("ij,ij->i", g1[ok], g2[ok]) / denom[ok]
    s = np.clip(s, -1.0, 1.0)

    cl, bce = _batch_losses(s, y_hat, y, cfg.margin)
    loss = float(np.mean((1.0 - cfg.beta) * cl + cfg.beta * bce))

    # d(mean loss)/ds per pair: -1 for similar, hinge indicator for dissimilar.
    dcl_ds = np.where(y == 1, -1.0, (s > cfg.margin).astype(np.float64))
    ds_scale = (1.0 - cfg.beta) / n * dcl_ds
    dg1 = np.zeros_like(g1)
    dg2 = np.zeros_like(g2)
    if np.any(ok):
        inv = np.zeros(n)
        inv[ok] = 1.0 / denom[ok]
        inv1 = np.zeros(n)
        inv1[ok] = 1.0 / np.square(n1[ok])
        inv2 = np.zeros(n)
        inv2[ok] = 1.0 / np.square(n2[ok])
        dg1 = ds_scale[:, None] * (g2 * inv[:, None] - g1 * (s * inv1)[:, None])
        dg2 = ds_scale[:, None] * (g1 * inv[:, None] - g2 * (s * inv2)[:, None])
    df1_g, grads_g1 = nn.backward(model.g_head, tape_g1, dg1)
    df2_g, grads_g2 = nn.backward(model.g_head, tape_g2, dg2)
    grads_g = [a + b for a, b in zip(grads_g1, grads_g2)]

    # BCE gradient through the clamped probability; the sigmoid derivative in
    # the generic backward cancels the denominator wherever the clamp is
    # inactive, and saturation degrades to a zero (never NaN) gradient.
    yc = np.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    dbce = cfg.beta / n * (yc - y) / (yc * (1.0 - yc))
    du, grads_bc = nn.backward(model.classifier, tape_bc, dbce[:, None])

    e = cfg.embedding_dim
    df1 = df1_g + du[:, :e]
    df2 = df2_g + du[:, e:]
    _, grads_e1 = nn.backward(model.encoder, tape_e1, df1)
    _, grads_e2 = nn.backward(model.encoder, tape_e2, df2)
    grads_e = [a + b for a, b in zip(grads_e1, grads_e2)]

    return loss, grads_e + grads_g + grads_bc


def batch_loss(model: SiameseModel, x1: np.ndarray, x2: np.ndarray,
               y: np.ndarray) -> float:
    """Forward-only mean combined loss (the finite-difference target)."""
    s, y_hat = model.predict_pairs(x1, x2)
    cl, bce = _batch_losses(s, y_hat, y, model.config.margin)
    return float(np.mean((1.0 - model.config.beta) * cl
                         + model.config.beta * bce))


def train_epochs(model: SiameseModel, dataset: datamod.Dataset,
                 labeled: Sequence[datamod.LabeledPair], epochs: int,
                 batch_size: int, rng: np.random.Generator) -> list[float]:
    """Adam on the mean combined loss over class-balanced batches.

    Returns the mean loss per epoch. Aborts on a non-finite loss.
    """
    if not labeled:
        raise ValueError("cannot train on an empty labeled set")
    feats = dataset.feature_matrix
    trace = []
    for epoch in range(epochs):
        pairs = datamod.oversample_epoch(labeled, rng)
        a_rows = dataset.rows_for([lp.pair.a for lp in pairs])
        b_rows = dataset.rows_for([lp.pair.b for lp in pairs])
        y_all = np.array([lp.label for lp in pairs], dtype=np.float64)
        total = 0.0
        for start in range(0, len(pairs), batch_size):
            sl = slice(start, start + batch_size)
            x1 = feats[a_rows[sl]]
            x2 = feats[b_rows[sl]]
            y = y_all[sl]
            loss, grads = batch_loss_and_grads(model, x1, x2, y)
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch starting with "
                    f"pair {pairs[start].pair}")
            nn.adam_step(model.parameters(), grads, model.adam)
            total += loss * len(y)
        trace.append(total / len(pairs))
    return trace


# -- checkpointing --------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: SiameseModel, path) -> None:
    """Lossless float64 dump of all parameters, Adam state, and config."""
    arrays: dict[str, np.ndarray] = {
        "version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "config_json": np.frombuffer(model.config.to_json().encode(),
                                     dtype=np.uint8),
        "adam_step": np.array(model.adam.step, dtype=np.int64),
    }
    for name, mlp in (("enc", model.encoder), ("g", model.g_head),
                      ("bc", model.classifier)):
        for i, layer in enumerate(mlp.layers):
            arrays[f"{name}_w{i}"] = layer.weights
            arrays[f"{name}_b{i}"] = layer.bias
    for i, (m, v) in enumerate(zip(model.adam.m, model.adam.v)):
        arrays[f"adam_m{i}"] = m
        arrays[f"adam_v{i}"] = v
    for key, arr in arrays.items():
        if key not in ("version", "config_json", "adam_step") and \
                not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to checkpoint non-finite array {key}")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> SiameseModel:
    with np.load(path) as blob:
        version = int(blob["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_json(bytes(blob["config_json"]).decode())
        model = SiameseModel(config, np.random.default_rng(0))
        for name, mlp in (("enc", model.encoder), ("g", model.g_head),
                          ("bc", model.classifier)):
            for i, layer in enumerate(mlp.layers):
                w = blob[f"{name}_w{i}"]
                b = blob[f"{name}_b{i}"]
                if w.shape != layer.weights.shape:
                    raise ValueError(f"checkpoint shape mismatch at {name}_w{i}")
                layer.weights[...] = w
                layer.bias[...] = b
        model.adam.step = int(blob["adam_step"])
        for i in range(len(model.adam.m)):
            model.adam.m[i][...] = blob[f"adam_m{i}"]
            model.adam.v[i][...] = blob[f"adam_v{i}"]
    return model
