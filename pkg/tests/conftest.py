"""Shared helpers for gradient checking.

Central finite differences are only a valid oracle away from the loss
surface's non-smooth points: relu kinks, the dissimilar-pair hinge at the
margin, the cosine singularity at zero-norm head outputs, and probability
clamping. Test cases are drawn from a seeded stream and redrawn until they
sit clear of those boundaries; the margin is 10x the difference step.
"""
import numpy as np

from anneal import model, nn

FD_STEP = 1e-4
KINK_TOL = 1e-3


def _tapes_clear_of_kinks(mlp, x):
    out, tape = nn.forward(mlp, x)
    for layer, rec in zip(mlp.layers, tape):
        if layer.activation == "relu":
            if np.any(np.abs(rec.z) < KINK_TOL):
                return None
            if not np.any(rec.z > KINK_TOL):  # all-dead layer: degenerate case
                return None
        if layer.activation == "sigmoid" and np.any(np.abs(rec.z) > 20.0):
            return None
    return out


def fd_case_is_smooth(m, x1, x2, y):
    """True when the combined loss is differentiable and well-conditioned
    for central differences in a KINK_TOL neighborhood of the parameters.

    Besides the non-smooth points, small head-output norms are rejected:
    the cosine's higher derivatives grow like 1/norm^3, which inflates the
    finite-difference truncation error beyond the comparison tolerance.
    """
    f1 = _tapes_clear_of_kinks(m.encoder, x1)
    f2 = _tapes_clear_of_kinks(m.encoder, x2)
    if f1 is None or f2 is None:
        return False
    g1 = _tapes_clear_of_kinks(m.g_head, f1)
    g2 = _tapes_clear_of_kinks(m.g_head, f2)
    if g1 is None or g2 is None:
        return False
    n1 = np.linalg.norm(g1, axis=1)
    n2 = np.linalg.norm(g2, axis=1)
    if np.any(n1 < 0.5) or np.any(n2 < 0.5):
        return False
    s = np.einsum("ij,ij->i", g1, g2) / (n1 * n2)
    if np.any(np.abs(s) > 0.95):
        return False
    if np.any((y == 0) & (np.abs(s - m.config.margin) < KINK_TOL)):
        return False
    u = np.concatenate([f1, f2], axis=1)
    if _tapes_clear_of_kinks(m.classifier, u) is None:
        return False
    return True


def draw_gradient_case(seed, feature_dim=4, batch=4, beta=0.3,
                       dims=(5, 3, 4, 4), max_tries=400):
    """Deterministic (model, x1, x2, y) with a smooth loss neighborhood.

    dims = (encoder hidden, embedding, g hidden, bc hidden); all <= 8.
    The head weights are scaled up so its outputs sit clear of the cosine
    singularity where finite differences lose accuracy.
    """
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(77,)))
    enc_h, emb, g_h, bc_h = dims
    for _ in range(max_tries):
        encoder = nn.make_mlp([feature_dim, enc_h, emb], rng)
        g_head = nn.make_mlp([emb, g_h, emb], rng)
        for layer in g_head.layers:
            layer.weights *= 2.5
        classifier = nn.make_mlp([2 * emb, bc_h, 1], rng,
                                 final_activation="sigmoid")
        m = model.SiameseModel.from_parts(encoder, g_head, classifier,
                                          beta=beta)
        x1 = 2.0 * rng.standard_normal((batch, feature_dim))
        x2 = 2.0 * rng.standard_normal((batch, feature_dim))
        y = rng.integers(0, 2, size=batch).astype(np.float64)
        if fd_case_is_smooth(m, x1, x2, y):
            return m, x1, x2, y
    raise RuntimeError(f"no smooth gradient-check case found for seed {seed}")


def assert_grads_match(analytic, numeric, rel=1e-4, small=1e-6):
    """Relative comparison, absolute below the `small` floor."""
    for g, f in zip(analytic, numeric):
        mask = np.abs(g) >= small
        scale = np.maximum(np.abs(f), small)
        np.testing.assert_array_less(
            np.abs(g - f)[mask] / scale[mask], rel + np.zeros(mask.sum()))
        np.testing.assert_array_less(
            np.abs(g - f)[~mask], small + np.zeros((~mask).sum()))
