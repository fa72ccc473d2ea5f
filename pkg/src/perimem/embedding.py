"""Embedding tables mapping categorical ids to dense float64 vectors.

Every categorical field (item, category, event side features, context,
user side features) has its own table. Row 0 of each table is the reserved
padding row used for missing values; it is trained like any other row but
lookups of id 0 always succeed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FIELDS
from .errors import VocabularyError


@dataclass
class EmbeddingTables:
    """One (vocab_size, dim) float64 table per categorical field."""

    dim: int
    tables: dict[str, np.ndarray]

    def size(self, field_name: str) -> int:
        return self.tables[field_name].shape[0]

    def lookup(self, field_name: str, idx: int) -> np.ndarray:
        table = self.tables[field_name]
        if not 0 <= idx < table.shape[0]:
            raise VocabularyError(
                f"{field_name} id {idx} outside table of size {table.shape[0]}"
            )
        return table[idx]


def init_tables(vocab_sizes: dict[str, int], dim: int, seed: int) -> EmbeddingTables:
    """Fresh tables with entries drawn uniformly from [-0.05, 0.05].

    Fields are initialized in the fixed FIELDS order, so a given
    (vocab_sizes, dim, seed) always produces identical tables.
    """
    if dim < 1:
        raise ValueError(f"embedding dim must be >= 1, got {dim}")
    for name in FIELDS:
        size = vocab_sizes.get(name, 0)
        if size < 1:
            raise ValueError(f"vocabulary size for field {name!r} must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    tables = {
        name: rng.uniform(-0.05, 0.05, size=(vocab_sizes[name], dim))
        for name in FIELDS
    }
    return EmbeddingTables(dim=dim, tables=tables)


def pad_ids(ids, width: int, field_name: str) -> tuple[int, ...]:
    """Right-pad an id tuple with the reserved id 0 to a fixed width."""
    ids = tuple(ids)
    if len(ids) > width:
        raise VocabularyError(
            f"{field_name}: got {len(ids)} ids but the model accepts at most {width}"
        )
    return ids + (0,) * (width - len(ids))


def embed_ids(tables: EmbeddingTables, field_name: str, ids, width: int) -> np.ndarray:
    """Concatenate `width` rows of one field's table, padding missing ids with 0."""
    padded = pad_ids(ids, width, field_name)
    return np.concatenate([tables.lookup(field_name, i) for i in padded])


def embed_event(tables: EmbeddingTables, event, n_side: int) -> np.ndarray:
    """Dense vector for one event: item row, category row, then side rows."""
    return np.concatenate(
        [
            tables.lookup("item", event.item),
            tables.lookup("cat", event.cat),
            embed_ids(tables, "side", event.side, n_side),
        ]
    )


def embed_query(tables: EmbeddingTables, target, n_side: int) -> np.ndarray:
    """Dense vector for the prediction target; same layout as embed_event."""
    return embed_event(tables, target, n_side)


def event_width(dim: int, n_side: int) -> int:
    return (2 + n_side) * dim


def gather(table: np.ndarray, idx: np.ndarray, field_name: str) -> np.ndarray:
    """Batched row lookup with range validation; output shape idx.shape + (dim,)."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = int(idx.min()) if idx.min() < 0 else int(idx.max())
        raise VocabularyError(
            f"{field_name} id {bad} outside table of size {table.shape[0]}"
        )
    return table[idx]


def scatter_add(grad_table: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """Accumulate gradient rows into a table gradient, summing repeated ids."""
    dim = grad_table.shape[1]
    np.add.at(grad_table, np.asarray(idx).reshape(-1), rows.reshape(-1, dim))
