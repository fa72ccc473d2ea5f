"""The assembled response model: embeddings, layered memory, attention, head.

ResponseModel owns every trainable tensor and exposes three views of the same
network:

* a single-sample path (predict_sample) used by the online store and checked
  bitwise against the streaming path,
* a batched training path (loss_and_grads) with a hand-written backward pass,
* a lean batched loss (batch_loss) used by finite-difference gradient checks.

Checkpoints are numpy .npz containers with a JSON metadata entry; loading one
reproduces every tensor bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import embedding as emb
from . import memory as mem
from . import predictor as pred
from .data import FIELDS, Sample, Vocabulary
from .errors import CheckpointError, ShapeError, VocabularyError

CHECKPOINT_FORMAT = "perimem-checkpoint-v1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; everything the random init depends on."""

    vocab_sizes: dict[str, int]
    periods: tuple[int, ...] = (1, 2, 4)
    slot_dim: int = 32
    embed_dim: int = 16
    energy_hidden: int = 64
    mlp_hidden: tuple[int, int] = (200, 80)
    gate_bias_spans: tuple[float, ...] | None = None
    n_side: int = 1
    n_ctx: int = 1
    n_uside: int = 1
    seed: int = 0

    def __post_init__(self):
        self.periods = tuple(int(p) for p in self.periods)
        self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)
        if self.gate_bias_spans is not None:
            self.gate_bias_spans = tuple(float(s) for s in self.gate_bias_spans)
            if len(self.gate_bias_spans) != len(self.periods):
                raise ValueError(
                    f"gate_bias_spans needs one entry per layer, got "
                    f"{len(self.gate_bias_spans)} for {len(self.periods)} layers"
                )
        self.vocab_sizes = {name: int(self.vocab_sizes.get(name, 1)) for name in FIELDS}
        if self.n_side < 0 or self.n_ctx < 0 or self.n_uside < 0:
            raise ValueError("feature slot counts must be non-negative")

    def span_for_layer(self, j: int) -> float:
        """Update-gate bias span for 0-based layer j (1.0 when unset)."""
        return 1.0 if self.gate_bias_spans is None else self.gate_bias_spans[j]

    @property
    def event_width(self) -> int:
        return (2 + self.n_side) * self.embed_dim

    @property
    def query_width(self) -> int:
        return self.event_width

    @property
    def ctx_width(self) -> int:
        return self.n_ctx * self.embed_dim

    @property
    def uside_width(self) -> int:
        return self.n_uside * self.embed_dim

    @property
    def predictor_input(self) -> int:
        return self.slot_dim + self.query_width + self.ctx_width + self.uside_width


@dataclass
class EncodedBatch:
    """Vocabulary ids of a same-length batch, ready for table gathers."""

    seq_len: int
    item: np.ndarray  # (B, T)
    cat: np.ndarray  # (B, T)
    side: np.ndarray  # (B, T, n_side)
    tgt_item: np.ndarray  # (B,)
    tgt_cat: np.ndarray  # (B,)
    tgt_side: np.ndarray  # (B, n_side)
    ctx: np.ndarray  # (B, n_ctx)
    uside: np.ndarray  # (B, n_uside)
    labels: np.ndarray  # (B,) float64

    @property
    def size(self) -> int:
        return self.item.shape[0]


class ResponseModel:
    """Every trainable tensor of the network plus forward/backward machinery."""

    def __init__(
        self,
        config: ModelConfig,
        tables: emb.EmbeddingTables,
        layers: list[mem.GruLayer],
        energy: mem.EnergyNet,
        mlp: pred.PredictorMlp,
        vocab: Vocabulary | None = None,
    ):
        self.config = config
        self.schedule = mem.UpdateSchedule(config.periods)
        self.tables = tables
        self.layers = layers
        self.energy = energy
        self.mlp = mlp
        self.vocab = vocab

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary | None = None) -> "ResponseModel":
        """Deterministic fresh model: same config, same seed, same tensors."""
        tables = emb.init_tables(config.vocab_sizes, config.embed_dim, config.seed)
        schedule = mem.UpdateSchedule(config.periods)
        layers = []
        for j in range(schedule.depth):
            rng = np.random.default_rng([config.seed, 1, j])
            input_dim = config.event_width if j == 0 else config.slot_dim
            layers.append(
                mem.GruLayer.init(
                    input_dim,
                    config.slot_dim,
                    rng,
                    gate_bias_span=config.span_for_layer(j),
                )
            )
        energy = mem.EnergyNet.init(
            config.slot_dim,
            config.query_width,
            config.energy_hidden,
            np.random.default_rng([config.seed, 2]),
        )
        mlp = pred.PredictorMlp.init(
            config.predictor_input,
            np.random.default_rng([config.seed, 3]),
            hidden=config.mlp_hidden,
        )
        return cls(config, tables, layers, energy, mlp, vocab=vocab)

    # -- parameter bookkeeping ----------------------------------------------

    def named_tensors(self) -> dict[str, np.ndarray]:
        """All trainable tensors in a stable order, keyed by dotted names."""
        out: dict[str, np.ndarray] = {}
        for name in FIELDS:
            out[f"embed.{name}"] = self.tables.tables[name]
        for j, layer in enumerate(self.layers, start=1):
            for name, tensor in layer.tensors().items():
                out[f"mem{j}.{name}"] = tensor
        for name, tensor in self.energy.tensors().items():
            out[f"energy.{name}"] = tensor
        for name, tensor in self.mlp.tensors().items():
            out[f"out.{name}"] = tensor
        return out

    def n_parameters(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def copy_tensors(self) -> dict[str, np.ndarray]:
        return {name: t.copy() for name, t in self.named_tensors().items()}

    def set_tensors(self, values: dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_tensors().items():
            np.copyto(tensor, values[name])

    def fingerprint(self) -> str:
        """Short content hash over config and every tensor; the model version."""
        digest = hashlib.sha256()
        digest.update(CHECKPOINT_FORMAT.encode())
        digest.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, tensor in self.named_tensors().items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor).tobytes())
        return digest.hexdigest()[:16]

    # -- encoding -----------------------------------------------------------

    def encode_samples(self, samples: list[Sample]) -> EncodedBatch:
        """Pack same-length samples into id arrays, validating every id once."""
        if not samples:
            raise ShapeError("encode_samples: empty batch")
        cfg = self.config
        seq_len = len(samples[0].sequence.events)
        if seq_len == 0:
            raise ShapeError("encode_samples: samples have empty histories")
        item = np.empty((len(samples), seq_len), dtype=np.int64)
        cat = np.empty_like(item)
        side = np.empty((len(samples), seq_len, cfg.n_side), dtype=np.int64)
        tgt_item = np.empty(len(samples), dtype=np.int64)
        tgt_cat = np.empty_like(tgt_item)
        tgt_side = np.empty((len(samples), cfg.n_side), dtype=np.int64)
        ctx = np.empty((len(samples), cfg.n_ctx), dtype=np.int64)
        uside = np.empty((len(samples), cfg.n_uside), dtype=np.int64)
        labels = np.empty(len(samples), dtype=np.float64)
        for b, sample in enumerate(samples):
            events = sample.sequence.events
            if len(events) != seq_len:
                raise ShapeError(
                    f"encode_samples: sample {b} has {len(events)} events, expected {seq_len}"
                )
            if sample.label not in (0, 1):
                raise ValueError(f"encode_samples: sample {b} label must be 0 or 1")
            for i, event in enumerate(events):
                item[b, i] = event.item
                cat[b, i] = event.cat
                side[b, i] = emb.pad_ids(event.side, cfg.n_side, "side")
            tgt_item[b] = sample.target.item
            tgt_cat[b] = sample.target.cat
            tgt_side[b] = emb.pad_ids(sample.target.side, cfg.n_side, "side")
            ctx[b] = emb.pad_ids(sample.context, cfg.n_ctx, "ctx")
            uside[b] = emb.pad_ids(sample.sequence.user_side, cfg.n_uside, "uside")
            labels[b] = float(sample.label)
        for field_name, arrays in (
            ("item", (item, tgt_item)),
            ("cat", (cat, tgt_cat)),
            ("side", (side, tgt_side)),
            ("ctx", (ctx,)),
            ("uside", (uside,)),
        ):
            size = cfg.vocab_sizes[field_name]
            for arr in arrays:
                if arr.size and (arr.min() < 0 or arr.max() >= size):
                    bad = int(arr.min()) if arr.min() < 0 else int(arr.max())
                    raise VocabularyError(
                        f"{field_name} id {bad} outside table of size {size}"
                    )
        return EncodedBatch(
            seq_len=seq_len,
            item=item,
            cat=cat,
            side=side,
            tgt_item=tgt_item,
            tgt_cat=tgt_cat,
            tgt_side=tgt_side,
            ctx=ctx,
            uside=uside,
            labels=labels,
        )

    # -- single-sample path (shared with the online store) -------------------

    def embed_event(self, event) -> np.ndarray:
        return emb.embed_event(self.tables, event, self.config.n_side)

    def embed_query(self, target) -> np.ndarray:
        return emb.embed_query(self.tables, target, self.config.n_side)

    def embed_context(self, context) -> np.ndarray:
        return emb.embed_ids(self.tables, "ctx", context, self.config.n_ctx)

    def embed_user_side(self, user_side) -> np.ndarray:
        return emb.embed_ids(self.tables, "uside", user_side, self.config.n_uside)

    def predict_from_pool(
        self, pool: mem.MemoryPool, target, context, user_side
    ) -> tuple[float, np.ndarray]:
        """Attention read plus head on an existing pool; returns (prob, weights)."""
        query = self.embed_query(target)
        rep, weights = mem.read(pool, self.energy, query)
        prob = pred.predict(
            self.mlp,
            rep,
            query,
            self.embed_context(context),
            self.embed_user_side(user_side),
        )
        return prob, weights

    def predict_sample(self, sample: Sample) -> tuple[float, np.ndarray]:
        """Offline pipeline: fold the history, read, predict. Returns (prob, weights)."""
        vecs = [self.embed_event(e) for e in sample.sequence.events]
        pool = mem.run_sequence(self.layers, self.schedule, vecs)
        return self.predict_from_pool(
            pool, sample.target, sample.context, sample.sequence.user_side
        )

    # -- batched paths -------------------------------------------------------

    def _embed_batch(self, enc: EncodedBatch):
        t = self.tables.tables
        n_batch = enc.size
        events = np.concatenate(
            [
                t["item"][enc.item],
                t["cat"][enc.cat],
                t["side"][enc.side].reshape(n_batch, enc.seq_len, -1),
            ],
            axis=2,
        )
        query = np.concatenate(
            [
                t["item"][enc.tgt_item],
                t["cat"][enc.tgt_cat],
                t["side"][enc.tgt_side].reshape(n_batch, -1),
            ],
            axis=1,
        )
        ctx = t["ctx"][enc.ctx].reshape(n_batch, -1)
        uside = t["uside"][enc.uside].reshape(n_batch, -1)
        return events, query, ctx, uside

    def forward_batch(self, enc: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
        """Inference forward pass; returns (probs, attention weights)."""
        events, query, ctx, uside = self._embed_batch(enc)
        slots = mem.final_slots_batch(self.layers, self.schedule, events)
        rep, weights, _ = mem.read_batch(self.energy, slots, query)
        x = np.concatenate([rep, query, ctx, uside], axis=1)
        probs, _ = pred.forward_batch(self.mlp, x)
        return probs, weights

    def batch_loss(self, enc: EncodedBatch, cov_weight: float, l2_weight: float) -> float:
        """Training objective without caches; the finite-difference hot path."""
        events, query, ctx, uside = self._embed_batch(enc)
        slots = mem.final_slots_batch(self.layers, self.schedule, events)
        rep, _, _ = mem.read_batch(self.energy, slots, query)
        x = np.concatenate([rep, query, ctx, uside], axis=1)
        probs, _ = pred.forward_batch(self.mlp, x)
        data = pred.cross_entropy_batch(enc.labels, probs)
        cov = mem.covariance_penalty(slots)
        return pred.total_loss(
            data, cov, self.named_tensors().values(), cov_weight, l2_weight
        )

    def loss_and_grads(
        self, enc: EncodedBatch, cov_weight: float, l2_weight: float
    ) -> tuple[float, dict[str, np.ndarray], dict]:
        """Batched loss plus the gradient of every trainable tensor.

        Returns (loss, grads keyed like named_tensors, stats) where stats
        carries the per-sample probabilities and loss components.
        """
        cfg = self.config
        n_batch = enc.size
        events, query, ctx, uside = self._embed_batch(enc)

        history, caches = mem.run_sequence_batch(self.layers, self.schedule, events)
        slots = history[-1].transpose(1, 0, 2)  # (B, depth, slot_dim)
        rep, weights, read_cache = mem.read_batch(self.energy, slots, query)
        x = np.concatenate([rep, query, ctx, uside], axis=1)
        probs, mlp_cache = pred.forward_batch(self.mlp, x)
        raw = mlp_cache[3]

        data = pred.cross_entropy_batch(enc.labels, probs)
        cov = mem.covariance_penalty(slots)
        tensors = self.named_tensors()
        loss = pred.total_loss(data, cov, tensors.values(), cov_weight, l2_weight)

        # Backward.
        d_logit = pred.logit_grad(enc.labels, raw)
        mlp_grads, d_x = pred.backward_batch(self.mlp, mlp_cache, d_logit)

        w = cfg.slot_dim
        d_rep = d_x[:, :w]
        d_query = d_x[:, w : w + cfg.query_width].copy()
        d_ctx = d_x[:, w + cfg.query_width : w + cfg.query_width + cfg.ctx_width]
        d_uside = d_x[:, w + cfg.query_width + cfg.ctx_width :]

        d_slots, d_query_read, energy_grads = mem.read_batch_backward(
            self.energy, slots, read_cache, d_rep
        )
        d_query += d_query_read
        d_slots += mem.covariance_penalty_backward(slots, cov_weight / n_batch)

        layer_grads, d_events = mem.sequence_backward(
            self.layers,
            self.schedule,
            events,
            history,
            caches,
            d_slots.transpose(1, 0, 2),
        )

        grads = {name: np.zeros_like(t) for name, t in tensors.items()}
        for j, g in enumerate(layer_grads, start=1):
            for name, val in g.items():
                grads[f"mem{j}.{name}"] += val
        for name, val in energy_grads.items():
            grads[f"energy.{name}"] += val
        for name, val in mlp_grads.items():
            grads[f"out.{name}"] += val

        d = cfg.embed_dim
        emb.scatter_add(grads["embed.item"], enc.item, d_events[:, :, :d])
        emb.scatter_add(grads["embed.cat"], enc.cat, d_events[:, :, d : 2 * d])
        if cfg.n_side:
            emb.scatter_add(grads["embed.side"], enc.side, d_events[:, :, 2 * d :])
        emb.scatter_add(grads["embed.item"], enc.tgt_item, d_query[:, :d])
        emb.scatter_add(grads["embed.cat"], enc.tgt_cat, d_query[:, d : 2 * d])
        if cfg.n_side:
            emb.scatter_add(grads["embed.side"], enc.tgt_side, d_query[:, 2 * d :])
        if cfg.n_ctx:
            emb.scatter_add(grads["embed.ctx"], enc.ctx, d_ctx)
        if cfg.n_uside:
            emb.scatter_add(grads["embed.uside"], enc.uside, d_uside)

        if l2_weight:
            for name, tensor in tensors.items():
                grads[name] += l2_weight * tensor

        stats = {
            "probs": probs,
            "weights": weights,
            "ce_sum": float(data.sum()),
            "cov_mean": float(cov.mean()),
            "data_loss_mean": float(data.mean()) + cov_weight * float(cov.mean()),
        }
        return loss, grads, stats

    def predict_proba_samples(self, samples: list[Sample], batch_size: int = 512) -> np.ndarray:
        """Probabilities for arbitrary samples; batches group equal history lengths."""
        probs = np.empty(len(samples))
        for idx, enc in encode_groups(self, samples, batch_size):
            p, _ = self.forward_batch(enc)
            probs[idx] = p
        return probs

    def attention_weights_samples(
        self, samples: list[Sample], batch_size: int = 512
    ) -> np.ndarray:
        """Attention weights (n_samples, depth) for arbitrary samples."""
        weights = np.empty((len(samples), self.schedule.depth))
        for idx, enc in encode_groups(self, samples, batch_size):
            _, w = self.forward_batch(enc)
            weights[idx] = w
        return weights

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        """Write a bit-exact checkpoint (.npz with a JSON metadata entry)."""
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "fingerprint": self.fingerprint(),
            "vocab": self.vocab.fields if self.vocab is not None else None,
        }
        arrays = {f"tensor/{k}": v for k, v in self.named_tensors().items()}
        with open(path, "wb") as fp:
            np.savez(fp, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "ResponseModel":
        try:
            with np.load(path, allow_pickle=False) as bundle:
                if "meta" not in bundle:
                    raise CheckpointError(f"{path}: missing checkpoint metadata")
                meta = json.loads(str(bundle["meta"]))
                if meta.get("format") != CHECKPOINT_FORMAT:
                    raise CheckpointError(
                        f"{path}: unsupported checkpoint format {meta.get('format')!r}"
                    )
                stored = {
                    k[len("tensor/") :]: bundle[k] for k in bundle.files if k.startswith("tensor/")
                }
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
        cfg_raw = meta["config"]
        config = ModelConfig(**cfg_raw)
        vocab = Vocabulary(meta["vocab"]) if meta.get("vocab") else None
        model = cls.init(config, vocab=vocab)
        expected = model.named_tensors()
        if set(expected) != set(stored):
            raise CheckpointError(f"{path}: tensor names do not match the stored config")
        for name, tensor in expected.items():
            if stored[name].shape != tensor.shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {stored[name].shape}, "
                    f"expected {tensor.shape}"
                )
        model.set_tensors(stored)
        saved_fp = meta.get("fingerprint")
        if saved_fp and model.fingerprint() != saved_fp:
            raise CheckpointError(f"{path}: checkpoint fingerprint mismatch")
        return model


def encode_groups(model: ResponseModel, samples: list[Sample], batch_size: int = 512):
    """Yield (index array, EncodedBatch) chunks grouping equal history lengths."""
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s.sequence.events), []).append(i)
    for seq_len in sorted(by_len):
        idxs = by_len[seq_len]
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            yield np.array(chunk), model.encode_samples([samples[i] for i in chunk])


def expand_model(
    model: ResponseModel, new_period: int, seed: int = 0, gate_bias_span: float = 1.0
) -> ResponseModel:
    """Return a model with one appended slower layer; existing tensors are copied bitwise."""
    pool = mem.MemoryPool.zeros(model.schedule.depth, model.config.slot_dim)
    _, layers2, schedule2 = mem.expand(
        pool, model.layers, model.schedule, new_period, seed=seed,
        gate_bias_span=gate_bias_span,
    )
    cfg = model.config
    if cfg.gate_bias_spans is None and gate_bias_span == 1.0:
        spans2 = None
    else:
        old = cfg.gate_bias_spans or (1.0,) * model.schedule.depth
        spans2 = (*old, gate_bias_span)
    config2 = ModelConfig(
        vocab_sizes=dict(cfg.vocab_sizes),
        periods=schedule2.periods,
        slot_dim=cfg.slot_dim,
        embed_dim=cfg.embed_dim,
        energy_hidden=cfg.energy_hidden,
        mlp_hidden=cfg.mlp_hidden,
        gate_bias_spans=spans2,
        n_side=cfg.n_side,
        n_ctx=cfg.n_ctx,
        n_uside=cfg.n_uside,
        seed=cfg.seed,
    )
    tables2 = emb.EmbeddingTables(
        dim=model.tables.dim,
        tables={k: v.copy() for k, v in model.tables.tables.items()},
    )
    energy2 = mem.EnergyNet(**{k: v.copy() for k, v in model.energy.tensors().items()})
    mlp2 = pred.PredictorMlp(**{k: v.copy() for k, v in model.mlp.tensors().items()})
    return ResponseModel(config2, tables2, layers2, energy2, mlp2, vocab=model.vocab)
