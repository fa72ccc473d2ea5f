"""Sum-pooling baseline: no memory, no attention, same embeddings and head.

The history representation is just the sum of event vectors, concatenated
with the query, context, and user side vectors before the prediction MLP.
The class mirrors enough of ResponseModel's surface (encode_samples,
loss_and_grads, batch_loss, predict_proba_samples, copy/set_tensors) that
the trainer and metrics code run unchanged on either architecture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict

import numpy as np

from . import embedding as emb
from . import predictor as pred
from .data import FIELDS, Vocabulary
from .errors import CheckpointError
from .model import EncodedBatch, ModelConfig, ResponseModel, encode_groups

BASELINE_FORMAT = "perimem-baseline-v1"


class SumPoolModel:
    """Pooled-history response model sharing ResponseModel's training surface."""

    # These only touch config/tables and work identically here.
    encode_samples = ResponseModel.encode_samples
    _embed_batch = ResponseModel._embed_batch
    copy_tensors = ResponseModel.copy_tensors
    set_tensors = ResponseModel.set_tensors
    n_parameters = ResponseModel.n_parameters

    def __init__(
        self,
        config: ModelConfig,
        tables: emb.EmbeddingTables,
        mlp: pred.PredictorMlp,
        vocab: Vocabulary | None = None,
    ):
        self.config = config
        self.tables = tables
        self.mlp = mlp
        self.vocab = vocab

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary | None = None) -> "SumPoolModel":
        tables = emb.init_tables(config.vocab_sizes, config.embed_dim, config.seed)
        mlp = pred.PredictorMlp.init(
            cls.input_width(config),
            np.random.default_rng([config.seed, 4]),
            hidden=config.mlp_hidden,
        )
        return cls(config, tables, mlp, vocab=vocab)

    @staticmethod
    def input_width(config: ModelConfig) -> int:
        return (
            config.event_width
            + config.query_width
            + config.ctx_width
            + config.uside_width
        )

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in FIELDS:
            out[f"embed.{name}"] = self.tables.tables[name]
        for name, tensor in self.mlp.tensors().items():
            out[f"out.{name}"] = tensor
        return out

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(BASELINE_FORMAT.encode())
        digest.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, tensor in self.named_tensors().items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor).tobytes())
        return digest.hexdigest()[:16]

    # -- forward / backward ----------------------------------------------------

    def _inputs(self, enc: EncodedBatch):
        events, query, ctx, uside = self._embed_batch(enc)
        pooled = events.sum(axis=1)
        x = np.concatenate([pooled, query, ctx, uside], axis=1)
        return events, x

    def forward_batch(self, enc: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
        _, x = self._inputs(enc)
        probs, _ = pred.forward_batch(self.mlp, x)
        return probs, np.zeros((enc.size, 0))

    def batch_loss(self, enc: EncodedBatch, cov_weight: float, l2_weight: float) -> float:
        _, x = self._inputs(enc)
        probs, _ = pred.forward_batch(self.mlp, x)
        data = pred.cross_entropy_batch(enc.labels, probs)
        # No memory matrix, so the decorrelation term is identically zero.
        return pred.total_loss(
            data, np.zeros(enc.size), self.named_tensors().values(), cov_weight, l2_weight
        )

    def loss_and_grads(
        self, enc: EncodedBatch, cov_weight: float, l2_weight: float
    ) -> tuple[float, dict[str, np.ndarray], dict]:
        cfg = self.config
        _, x = self._inputs(enc)
        probs, mlp_cache = pred.forward_batch(self.mlp, x)
        raw = mlp_cache[3]
        data = pred.cross_entropy_batch(enc.labels, probs)
        tensors = self.named_tensors()
        loss = pred.total_loss(
            data, np.zeros(enc.size), tensors.values(), cov_weight, l2_weight
        )

        d_logit = pred.logit_grad(enc.labels, raw)
        mlp_grads, d_x = pred.backward_batch(self.mlp, mlp_cache, d_logit)

        w = cfg.event_width
        d_pooled = d_x[:, :w]
        d_query = d_x[:, w : w + cfg.query_width]
        d_ctx = d_x[:, w + cfg.query_width : w + cfg.query_width + cfg.ctx_width]
        d_uside = d_x[:, w + cfg.query_width + cfg.ctx_width :]
        # Sum pooling broadcasts the same gradient to every event in the window.
        d_events = np.broadcast_to(
            d_pooled[:, None, :], (enc.size, enc.seq_len, w)
        )

        grads = {name: np.zeros_like(t) for name, t in tensors.items()}
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
            "weights": np.zeros((enc.size, 0)),
            "ce_sum": float(data.sum()),
            "cov_mean": 0.0,
            "data_loss_mean": float(data.mean()),
        }
        return loss, grads, stats

    def predict_proba_samples(self, samples, batch_size: int = 512) -> np.ndarray:
        probs = np.empty(len(samples))
        for idx, enc in encode_groups(self, samples, batch_size):
            p, _ = self.forward_batch(enc)
            probs[idx] = p
        return probs

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format": BASELINE_FORMAT,
            "config": asdict(self.config),
            "fingerprint": self.fingerprint(),
            "vocab": self.vocab.fields if self.vocab is not None else None,
        }
        arrays = {f"tensor/{k}": v for k, v in self.named_tensors().items()}
        with open(path, "wb") as fp:
            np.savez(fp, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "SumPoolModel":
        try:
            with np.load(path, allow_pickle=False) as bundle:
                meta = json.loads(str(bundle["meta"]))
                arrays = {k: bundle[k] for k in bundle.files if k.startswith("tensor/")}
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
        if meta.get("format") != BASELINE_FORMAT:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format {meta.get('format')!r}"
            )
        config = ModelConfig(**meta["config"])
        vocab = Vocabulary(meta["vocab"]) if meta.get("vocab") else None
        model = cls.init(config, vocab=vocab)
        for name, tensor in model.named_tensors().items():
            key = f"tensor/{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: checkpoint is missing tensor {name}")
            if arrays[key].shape != tensor.shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {arrays[key].shape}, "
                    f"expected {tensor.shape}"
                )
            np.copyto(tensor, arrays[key])
        if model.fingerprint() != meta.get("fingerprint"):
            raise CheckpointError(f"{path}: fingerprint mismatch, file is corrupt")
        return model
