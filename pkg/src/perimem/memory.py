"""Layered periodic memory: slots on per-layer clocks, attention read, covariance penalty.

A memory pool holds one slot (a float64 vector of size slot_dim) per layer.
Layer j has a clock period t_j; at global step i exactly the layers with
i mod t_j == 0 rewrite their slot through a gated recurrent cell. Layer 1
consumes the raw event vector, layer j > 1 consumes the current-step value of
slot j-1, so information cascades upward at ever coarser timescales. A query
vector reads the pool through a small energy network whose scores are
softmax-normalized into attention weights over slots.

Forward functions here come in two flavors: single-sample (used by the online
store) and batched over samples with cached intermediates (used by training
and its hand-written backward pass).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError, ShapeError
from .numerics import as_f64, relu, sigmoid, softmax, softmax_grad, tanh

GRU_TENSORS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c")
ENERGY_TENSORS = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class UpdateSchedule:
    """Per-layer clock periods; period 1 first, non-decreasing."""

    periods: tuple[int, ...]

    def __post_init__(self):
        periods = tuple(int(p) for p in self.periods)
        object.__setattr__(self, "periods", periods)
        if not periods:
            raise ScheduleError("schedule needs at least one period")
        if any(p < 1 for p in periods):
            raise ScheduleError(f"periods must be positive integers, got {periods}")
        if periods[0] != 1:
            raise ScheduleError(f"the first layer must have period 1, got {periods[0]}")
        if any(a > b for a, b in zip(periods, periods[1:])):
            raise ScheduleError(f"periods must be non-decreasing, got {periods}")

    @property
    def depth(self) -> int:
        return len(self.periods)

    def layers_due(self, step: int) -> list[int]:
        """1-based indices of layers that update at this step, ascending."""
        if step < 1:
            raise ScheduleError(f"step index must be >= 1, got {step}")
        return [j + 1 for j, p in enumerate(self.periods) if step % p == 0]


_DUE_CACHE: dict[tuple[tuple[int, ...], int], list[list[int]]] = {}


def _due_table(schedule: UpdateSchedule, seq_len: int) -> list[list[int]]:
    key = (schedule.periods, seq_len)
    table = _DUE_CACHE.get(key)
    if table is None:
        table = [schedule.layers_due(i) for i in range(1, seq_len + 1)]
        _DUE_CACHE[key] = table
    return table


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class GruLayer:
    """Gated recurrent cell parameters for one memory layer.

    w_* map the layer input (event vector for layer 1, the slot below for
    deeper layers), u_* map the layer's previous slot value, b_* are biases;
    z = update gate, r = reset gate, c = candidate state.
    """

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_c: np.ndarray
    u_c: np.ndarray
    b_c: np.ndarray

    @classmethod
    def init(
        cls,
        input_dim: int,
        state_dim: int,
        rng: np.random.Generator,
        gate_bias_span: float = 1.0,
    ) -> "GruLayer":
        """Fresh layer: glorot input maps, zero recurrent maps and biases.

        Zero u_* means a fresh layer behaves as a decayed average of its
        inputs, which keeps what it stores linearly readable until the
        recurrent maps are learned. gate_bias_span > 1 additionally spreads
        the update-gate bias so unit i starts with an effective averaging
        window drawn log-uniformly from [1, span] updates; span
        1.0 leaves the bias at zero (a half-open gate).
        """
        if input_dim < 1 or state_dim < 1:
            raise ShapeError(
                f"layer dims must be >= 1, got input_dim={input_dim}, state_dim={state_dim}"
            )
        if gate_bias_span < 1.0:
            raise ShapeError(f"gate_bias_span must be >= 1, got {gate_bias_span}")
        tensors = {}
        for gate in ("z", "r", "c"):
            tensors[f"w_{gate}"] = glorot_uniform(rng, state_dim, input_dim)
            tensors[f"u_{gate}"] = np.zeros((state_dim, state_dim))
            tensors[f"b_{gate}"] = np.zeros(state_dim)
        if gate_bias_span > 1.0:
            tensors["b_z"] = -np.log(rng.uniform(1.0, gate_bias_span, size=state_dim))
        return cls(**tensors)

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1]

    @property
    def state_dim(self) -> int:
        return self.w_z.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GRU_TENSORS}


@dataclass
class EnergyNet:
    """Two affine layers with a ReLU between; scores one (slot, query) pair."""

    w1: np.ndarray  # (hidden, slot_dim + query_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)

    @classmethod
    def init(cls, slot_dim: int, query_dim: int, hidden: int, rng: np.random.Generator) -> "EnergyNet":
        if hidden < 1:
            raise ShapeError(f"energy hidden width must be >= 1, got {hidden}")
        return cls(
            w1=glorot_uniform(rng, hidden, slot_dim + query_dim),
            b1=np.zeros(hidden),
            w2=glorot_uniform(rng, 1, hidden)[0],
            b2=np.zeros(1),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ENERGY_TENSORS}


@dataclass
class MemoryPool:
    """Per-user memory: one slot per layer plus the user's global step count."""

    slots: np.ndarray  # (depth, slot_dim)
    step_count: int = 0

    @classmethod
    def zeros(cls, depth: int, slot_dim: int) -> "MemoryPool":
        return cls(slots=np.zeros((depth, slot_dim)), step_count=0)

    @property
    def depth(self) -> int:
        return self.slots.shape[0]

    @property
    def slot_dim(self) -> int:
        return self.slots.shape[1]


def gru_cell(layer: GruLayer, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """One gated update: returns (1 - z) * h + z * tanh-candidate."""
    x = as_f64(x)
    h = as_f64(h)
    if x.shape != (layer.input_dim,):
        raise ShapeError(
            f"gru_cell: input shape {x.shape} does not match layer input width {layer.input_dim}"
        )
    if h.shape != (layer.state_dim,):
        raise ShapeError(
            f"gru_cell: state shape {h.shape} does not match layer state width {layer.state_dim}"
        )
    z = sigmoid(layer.w_z @ x + layer.u_z @ h + layer.b_z)
    r = sigmoid(layer.w_r @ x + layer.u_r @ h + layer.b_r)
    c = tanh(layer.w_c @ x + layer.u_c @ (r * h) + layer.b_c)
    return (1.0 - z) * h + z * c


def step(
    pool: MemoryPool,
    layers: list[GruLayer],
    schedule: UpdateSchedule,
    event_vec: np.ndarray,
) -> MemoryPool:
    """Advance one event: bump the step counter and rewrite exactly the due layers.

    Due layers update bottom-up, so a deeper layer sees the value slot j-1
    holds after this same step. Non-due slots carry over bitwise unchanged.
    """
    if len(layers) != schedule.depth or pool.depth != schedule.depth:
        raise ShapeError(
            f"step: pool depth {pool.depth}, {len(layers)} layers and schedule depth "
            f"{schedule.depth} must all agree"
        )
    i = pool.step_count + 1
    slots = pool.slots.copy()
    for j in schedule.layers_due(i):
        x = event_vec if j == 1 else slots[j - 2]
        slots[j - 1] = gru_cell(layers[j - 1], x, slots[j - 1])
    return MemoryPool(slots=slots, step_count=i)


def run_sequence(
    layers: list[GruLayer],
    schedule: UpdateSchedule,
    event_vecs,
) -> MemoryPool:
    """Fold a whole event-vector sequence into a fresh zero pool."""
    event_vecs = list(event_vecs)
    if not event_vecs:
        raise ShapeError("run_sequence: empty sequence")
    pool = MemoryPool.zeros(schedule.depth, layers[0].state_dim)
    for vec in event_vecs:
        pool = step(pool, layers, schedule, vec)
    return pool


def energy_scores(energy: EnergyNet, slots: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Raw attention score per slot: w2 . relu(w1 @ [slot; query] + b1) + b2."""
    slots = as_f64(slots)
    query = as_f64(query)
    expected = energy.w1.shape[1]
    if slots.ndim != 2 or slots.shape[1] + query.shape[0] != expected:
        raise ShapeError(
            f"energy_scores: slot width {slots.shape} plus query width {query.shape} "
            f"must equal energy input width {expected}"
        )
    scores = np.empty(slots.shape[0])
    for j in range(slots.shape[0]):
        hidden = relu(energy.w1 @ np.concatenate([slots[j], query]) + energy.b1)
        scores[j] = energy.w2 @ hidden + energy.b2[0]
    return scores


def read(pool, energy: EnergyNet, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention read: returns (representation, weights) for one pool and query."""
    slots = pool.slots if isinstance(pool, MemoryPool) else as_f64(pool)
    weights = softmax(energy_scores(energy, slots, query))
    return weights @ slots, weights


def memory_covariance(pool) -> np.ndarray:
    """Row-centered covariance of the pool: C = (1/p) A A^T with A = M - rowmean(M)."""
    slots = pool.slots if isinstance(pool, MemoryPool) else as_f64(pool)
    if slots.ndim != 2:
        raise ShapeError(f"memory_covariance: pool must be 2-D, got shape {slots.shape}")
    centered = slots - slots.mean(axis=1, keepdims=True)
    return (centered @ centered.T) / slots.shape[1]


def covariance_loss(cov: np.ndarray) -> float:
    """Half the sum of squared off-diagonal covariance entries; always >= 0."""
    cov = as_f64(cov)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"covariance_loss: expected a square matrix, got shape {cov.shape}")
    mask = ~np.eye(cov.shape[0], dtype=bool)
    off = cov[mask]
    return 0.5 * float(off @ off)


def expand(
    pool: MemoryPool,
    layers: list[GruLayer],
    schedule: UpdateSchedule,
    new_period: int,
    seed: int = 0,
    gate_bias_span: float = 1.0,
) -> tuple[MemoryPool, list[GruLayer], UpdateSchedule]:
    """Append one slower layer: fresh parameters, a zero slot, an extended schedule.

    Existing layer parameters and slot values are copied bitwise unchanged;
    the new period must be at least the current slowest period.
    """
    if new_period < schedule.periods[-1]:
        raise ScheduleError(
            f"new period {new_period} must be >= current slowest period {schedule.periods[-1]}"
        )
    state_dim = pool.slot_dim
    rng = np.random.default_rng(seed)
    new_layer = GruLayer.init(state_dim, state_dim, rng, gate_bias_span=gate_bias_span)
    layers2 = [
        GruLayer(**{k: v.copy() for k, v in layer.tensors().items()}) for layer in layers
    ]
    layers2.append(new_layer)
    slots2 = np.vstack([pool.slots.copy(), np.zeros((1, state_dim))])
    pool2 = MemoryPool(slots=slots2, step_count=pool.step_count)
    schedule2 = UpdateSchedule((*schedule.periods, new_period))
    return pool2, layers2, schedule2


# ---------------------------------------------------------------------------
# Batched training path. Shapes: events (B, T, in_dim), slot history
# (T+1, depth, B, slot_dim), final slots (B, depth, slot_dim).
# ---------------------------------------------------------------------------


def gru_cell_batch(
    layer: GruLayer, x: np.ndarray, h: np.ndarray
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Batched cell over rows of x, h; returns (new state, (z, r, c) cache)."""
    z = sigmoid(x @ layer.w_z.T + h @ layer.u_z.T + layer.b_z)
    r = sigmoid(x @ layer.w_r.T + h @ layer.u_r.T + layer.b_r)
    c = tanh(x @ layer.w_c.T + (r * h) @ layer.u_c.T + layer.b_c)
    return h + z * (c - h), (z, r, c)


def _gru_cell_batch_lean(layer: GruLayer, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    z = sigmoid(x @ layer.w_z.T + h @ layer.u_z.T + layer.b_z)
    r = sigmoid(x @ layer.w_r.T + h @ layer.u_r.T + layer.b_r)
    c = tanh(x @ layer.w_c.T + (r * h) @ layer.u_c.T + layer.b_c)
    return h + z * (c - h)


def run_sequence_batch(
    layers: list[GruLayer],
    schedule: UpdateSchedule,
    events: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Fold a batch of equal-length sequences, keeping everything backward needs.

    Returns (history, caches): history[i] holds all slots after step i
    (history[0] is the zero pool) and caches maps (step, layer) to that
    cell's (z, r, c) activations.
    """
    n_batch, seq_len, _ = events.shape
    if seq_len == 0:
        raise ShapeError("run_sequence_batch: empty sequence")
    depth = schedule.depth
    state_dim = layers[0].state_dim
    history = np.zeros((seq_len + 1, depth, n_batch, state_dim))
    caches: dict[tuple[int, int], tuple] = {}
    due_table = _due_table(schedule, seq_len)
    for i in range(1, seq_len + 1):
        history[i] = history[i - 1]
        for j in due_table[i - 1]:
            x = events[:, i - 1, :] if j == 1 else history[i, j - 2]
            new_h, cache = gru_cell_batch(layers[j - 1], x, history[i - 1, j - 1])
            history[i, j - 1] = new_h
            caches[(i, j)] = cache
    return history, caches


def final_slots_batch(
    layers: list[GruLayer],
    schedule: UpdateSchedule,
    events: np.ndarray,
) -> np.ndarray:
    """Forward-only version of run_sequence_batch; returns (B, depth, slot_dim)."""
    n_batch, seq_len, _ = events.shape
    if seq_len == 0:
        raise ShapeError("final_slots_batch: empty sequence")
    depth = schedule.depth
    state_dim = layers[0].state_dim
    slots = [np.zeros((n_batch, state_dim)) for _ in range(depth)]
    due_table = _due_table(schedule, seq_len)
    for i in range(1, seq_len + 1):
        for j in due_table[i - 1]:
            x = events[:, i - 1, :] if j == 1 else slots[j - 2]
            slots[j - 1] = _gru_cell_batch_lean(layers[j - 1], x, slots[j - 1])
    return np.stack(slots, axis=1)


def sequence_backward(
    layers: list[GruLayer],
    schedule: UpdateSchedule,
    events: np.ndarray,
    history: np.ndarray,
    caches: dict,
    d_final: np.ndarray,
) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
    """Backprop through run_sequence_batch.

    d_final is (depth, B, slot_dim): the loss gradient on each final slot.
    Returns per-layer parameter gradients and the gradient on the events.
    """
    n_batch, seq_len, _ = events.shape
    grads = [
        {name: np.zeros_like(t) for name, t in layer.tensors().items()} for layer in layers
    ]
    d_events = np.zeros_like(events)
    d_slots = [d_final[j].copy() for j in range(schedule.depth)]
    due_table = _due_table(schedule, seq_len)
    for i in range(seq_len, 0, -1):
        for j in reversed(due_table[i - 1]):
            layer = layers[j - 1]
            z, r, c = caches[(i, j)]
            h = history[i - 1, j - 1]
            x = events[:, i - 1, :] if j == 1 else history[i, j - 2]
            gm = d_slots[j - 1]

            d_c = gm * z
            d_z = gm * (c - h)
            d_h = gm * (1.0 - z)
            d_ac = d_c * (1.0 - c * c)
            d_az = d_z * z * (1.0 - z)
            rh = r * h
            d_rh = d_ac @ layer.u_c
            d_r = d_rh * h
            d_h = d_h + d_rh * r
            d_ar = d_r * r * (1.0 - r)
            d_h = d_h + d_az @ layer.u_z + d_ar @ layer.u_r
            d_x = d_az @ layer.w_z + d_ar @ layer.w_r + d_ac @ layer.w_c

            g = grads[j - 1]
            g["w_z"] += d_az.T @ x
            g["u_z"] += d_az.T @ h
            g["b_z"] += d_az.sum(axis=0)
            g["w_r"] += d_ar.T @ x
            g["u_r"] += d_ar.T @ h
            g["b_r"] += d_ar.sum(axis=0)
            g["w_c"] += d_ac.T @ x
            g["u_c"] += d_ac.T @ rh
            g["b_c"] += d_ac.sum(axis=0)

            d_slots[j - 1] = d_h
            if j == 1:
                d_events[:, i - 1, :] += d_x
            else:
                d_slots[j - 2] += d_x
    return grads, d_events


def read_batch(
    energy: EnergyNet, slots: np.ndarray, query: np.ndarray
) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Batched attention read over (B, depth, slot_dim) pools.

    Returns (representation (B, slot_dim), weights (B, depth), cache).
    """
    n_batch, depth, slot_dim = slots.shape
    tiled_query = np.broadcast_to(query[:, None, :], (n_batch, depth, query.shape[1]))
    joint = np.concatenate([slots, tiled_query], axis=2).reshape(n_batch * depth, -1)
    hidden = relu(joint @ energy.w1.T + energy.b1)
    scores = (hidden @ energy.w2 + energy.b2[0]).reshape(n_batch, depth)
    weights = softmax(scores)
    rep = np.einsum("bd,bdp->bp", weights, slots)
    return rep, weights, (joint, hidden, weights)


def read_batch_backward(
    energy: EnergyNet,
    slots: np.ndarray,
    cache: tuple,
    d_rep: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Backprop through read_batch given the gradient on the representation."""
    joint, hidden, weights = cache
    n_batch, depth, slot_dim = slots.shape
    d_weights = np.einsum("bp,bdp->bd", d_rep, slots)
    d_slots = weights[:, :, None] * d_rep[:, None, :]
    d_scores = softmax_grad(weights, d_weights).reshape(n_batch * depth)
    g_w2 = hidden.T @ d_scores
    g_b2 = np.array([d_scores.sum()])
    d_hidden = d_scores[:, None] * energy.w2[None, :]
    d_pre = d_hidden * (hidden > 0.0)
    g_w1 = d_pre.T @ joint
    g_b1 = d_pre.sum(axis=0)
    d_joint = (d_pre @ energy.w1).reshape(n_batch, depth, -1)
    d_slots += d_joint[:, :, :slot_dim]
    d_query = d_joint[:, :, slot_dim:].sum(axis=1)
    return d_slots, d_query, {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def covariance_penalty(slots: np.ndarray) -> np.ndarray:
    """Per-sample covariance loss over (B, depth, slot_dim) pools."""
    slot_dim = slots.shape[2]
    centered = slots - slots.mean(axis=2, keepdims=True)
    cov = centered @ centered.transpose(0, 2, 1) / slot_dim
    mask = ~np.eye(slots.shape[1], dtype=bool)
    off = cov[:, mask]
    return 0.5 * np.einsum("bk,bk->b", off, off)


def covariance_penalty_backward(slots: np.ndarray, coeff: float) -> np.ndarray:
    """Gradient of coeff * sum_b covariance_penalty(slots[b]) w.r.t. slots."""
    slot_dim = slots.shape[2]
    centered = slots - slots.mean(axis=2, keepdims=True)
    cov = centered @ centered.transpose(0, 2, 1) / slot_dim
    eye = np.eye(slots.shape[1], dtype=bool)
    cov[:, eye] = 0.0
    d_centered = (2.0 * coeff / slot_dim) * (cov @ centered)
    return d_centered - d_centered.mean(axis=2, keepdims=True)
