"""Response head: a three-layer MLP over [representation, query, context, user side].

The two hidden layers use ReLU, the scalar output goes through a sigmoid and
is clamped away from exact 0/1 so downstream log-losses stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .memory import glorot_uniform
from .numerics import as_f64, relu, sigmoid

PROB_FLOOR = 1e-12
PROB_CEIL = 1.0 - 1e-12

MLP_TENSORS = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class PredictorMlp:
    """Three affine layers; hidden widths default to (200, 80), output width 1."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray  # (hidden2,)
    b3: np.ndarray  # (1,)

    @classmethod
    def init(
        cls,
        input_dim: int,
        rng: np.random.Generator,
        hidden: tuple[int, int] = (200, 80),
    ) -> "PredictorMlp":
        if input_dim < 1:
            raise ShapeError(f"predictor input width must be >= 1, got {input_dim}")
        h1, h2 = hidden
        if h1 < 1 or h2 < 1:
            raise ShapeError(f"predictor hidden widths must be >= 1, got {hidden}")
        return cls(
            w1=glorot_uniform(rng, h1, input_dim),
            b1=np.zeros(h1),
            w2=glorot_uniform(rng, h2, h1),
            b2=np.zeros(h2),
            w3=glorot_uniform(rng, 1, h2)[0],
            b3=np.zeros(1),
        )

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in MLP_TENSORS}


def predict(
    mlp: PredictorMlp,
    representation: np.ndarray,
    query: np.ndarray,
    context: np.ndarray,
    user_side: np.ndarray,
) -> float:
    """Single-sample response probability, clamped to [PROB_FLOOR, PROB_CEIL]."""
    x = np.concatenate(
        [as_f64(representation), as_f64(query), as_f64(context), as_f64(user_side)]
    )
    if x.shape[0] != mlp.input_dim:
        raise ShapeError(
            f"predict: assembled input width {x.shape[0]} does not match "
            f"predictor input width {mlp.input_dim}"
        )
    a1 = relu(mlp.w1 @ x + mlp.b1)
    a2 = relu(mlp.w2 @ a1 + mlp.b2)
    logit = float(mlp.w3 @ a2 + mlp.b3[0])
    return float(np.clip(sigmoid(logit), PROB_FLOOR, PROB_CEIL))


def forward_batch(mlp: PredictorMlp, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Batched probabilities for rows of x; returns (probs, cache)."""
    if x.shape[1] != mlp.input_dim:
        raise ShapeError(
            f"forward_batch: input width {x.shape[1]} does not match "
            f"predictor input width {mlp.input_dim}"
        )
    a1 = relu(x @ mlp.w1.T + mlp.b1)
    a2 = relu(a1 @ mlp.w2.T + mlp.b2)
    raw = sigmoid(a2 @ mlp.w3 + mlp.b3[0])
    probs = np.clip(raw, PROB_FLOOR, PROB_CEIL)
    return probs, (x, a1, a2, raw)


def backward_batch(
    mlp: PredictorMlp, cache: tuple, d_logit: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop from the pre-sigmoid logit gradient; returns (grads, d_input)."""
    x, a1, a2, _ = cache
    g_w3 = a2.T @ d_logit
    g_b3 = np.array([d_logit.sum()])
    d_a2 = d_logit[:, None] * mlp.w3[None, :]
    d_p2 = d_a2 * (a2 > 0.0)
    g_w2 = d_p2.T @ a1
    g_b2 = d_p2.sum(axis=0)
    d_a1 = d_p2 @ mlp.w2
    d_p1 = d_a1 * (a1 > 0.0)
    g_w1 = d_p1.T @ x
    g_b1 = d_p1.sum(axis=0)
    d_x = d_p1 @ mlp.w1
    grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}
    return grads, d_x


def logit_grad(labels: np.ndarray, raw_probs: np.ndarray) -> np.ndarray:
    """d(cross entropy)/d(logit) per sample, honoring the output clamp.

    Where the raw sigmoid output lies inside the clamp the derivative is the
    classic (p - y); where the clamp binds the output is locally constant and
    the derivative is exactly zero.
    """
    inside = (raw_probs > PROB_FLOOR) & (raw_probs < PROB_CEIL)
    return np.where(inside, raw_probs - labels, 0.0)


def cross_entropy(label: float, prob: float) -> float:
    """Binary cross entropy -[y log p + (1-y) log(1-p)]; p must lie in (0, 1)."""
    if label not in (0, 1):
        raise ValueError(f"cross_entropy: label must be 0 or 1, got {label!r}")
    if not 0.0 < prob < 1.0:
        raise ValueError(f"cross_entropy: probability must lie strictly in (0, 1), got {prob}")
    return float(-(label * np.log(prob) + (1.0 - label) * np.log(1.0 - prob)))


def cross_entropy_batch(labels: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Vectorized cross entropy; inputs assumed already clamped inside (0, 1)."""
    return -(labels * np.log(probs) + (1.0 - labels) * np.log1p(-probs))


def l2_penalty(tensors) -> float:
    """Sum of squared entries over an iterable of parameter tensors."""
    total = 0.0
    for t in tensors:
        flat = t.reshape(-1)
        total += float(flat @ flat)
    return total


def total_loss(
    data_losses,
    cov_losses,
    tensors,
    cov_weight: float,
    l2_weight: float,
) -> float:
    """Full training objective for one batch.

    Sum of per-sample cross entropies, plus cov_weight times the batch-mean
    covariance penalty, plus l2_weight / 2 times the squared norm of every
    trainable tensor (embeddings included).
    """
    data_losses = as_f64(data_losses)
    cov_losses = as_f64(cov_losses)
    if data_losses.size == 0:
        raise ShapeError("total_loss: empty batch")
    loss = float(data_losses.sum())
    if cov_losses.size:
        loss += cov_weight * float(cov_losses.mean())
    loss += 0.5 * l2_weight * l2_penalty(tensors)
    return loss
