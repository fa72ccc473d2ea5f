"""Incremental per-user memory store backing the online serving path.

The store keeps one (memory pool, last timestamp, user side features) entry
per user. Ingesting an event advances only that user's pool through exactly
the same single-sample code path the offline pipeline uses, so a stream of
ingests followed by a query reproduces the offline prediction bit for bit.

Store files are versioned .npz containers stamped with the owning model's
fingerprint; loading against a different model is refused.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

import numpy as np

from . import memory as mem
from .data import BehaviorEvent
from .errors import StoreError, StoreVersionError, TimestampError, UnknownUserError

STORE_FORMAT = "perimem-store-v1"


@dataclass
class StoreEntry:
    pool: mem.MemoryPool
    last_ts: int
    user_side: tuple[int, ...]


class MemoryStore:
    """user_id -> memory state, bound to one model version."""

    def __init__(self, model_version: str, depth: int, slot_dim: int):
        self.model_version = model_version
        self.depth = depth
        self.slot_dim = slot_dim
        self.entries: dict[str, StoreEntry] = {}
        self._write_lock = threading.Lock()

    @classmethod
    def for_model(cls, model) -> "MemoryStore":
        return cls(
            model_version=model.fingerprint(),
            depth=model.schedule.depth,
            slot_dim=model.config.slot_dim,
        )

    @property
    def n_users(self) -> int:
        return len(self.entries)

    def users(self) -> list[str]:
        return sorted(self.entries)

    def ingest(
        self,
        user_id: str,
        event: BehaviorEvent,
        model,
        user_side: tuple[int, ...] | None = None,
    ) -> None:
        """Fold one event into one user's pool.

        Events must arrive in non-decreasing timestamp order per user. The
        first event for a user creates a zero pool and records the user's side
        features; later calls ignore user_side. Writes are serialized under a
        store-wide lock; reads never take it.
        """
        vec = model.embed_event(event)  # validates ids before any state changes
        with self._write_lock:
            entry = self.entries.get(user_id)
            if entry is None:
                entry = StoreEntry(
                    pool=mem.MemoryPool.zeros(self.depth, self.slot_dim),
                    last_ts=event.ts,
                    user_side=tuple(user_side or ()),
                )
                self.entries[user_id] = entry
            elif event.ts < entry.last_ts:
                raise TimestampError(
                    f"user {user_id!r}: event at ts={event.ts} arrived after ts={entry.last_ts}"
                )
            entry.pool = mem.step(entry.pool, model.layers, model.schedule, vec)
            entry.last_ts = event.ts

    def query(
        self,
        user_id: str,
        target: BehaviorEvent,
        context: tuple[int, ...],
        model,
    ) -> tuple[float, np.ndarray]:
        """Read-only prediction from a user's current pool; returns (prob, weights)."""
        entry = self.entries.get(user_id)
        if entry is None:
            raise UnknownUserError(
                f"user {user_id!r} has no stored memory (cold start; ingest events first)"
            )
        if entry.pool.slots.shape != (self.depth, self.slot_dim):
            raise StoreError(
                f"user {user_id!r}: pool shape {entry.pool.slots.shape} does not match "
                f"store layout ({self.depth}, {self.slot_dim})"
            )
        return model.predict_from_pool(entry.pool, target, context, entry.user_side)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        users = self.users()
        n = len(users)
        pools = np.zeros((n, self.depth, self.slot_dim))
        steps = np.zeros(n, dtype=np.int64)
        last_ts = np.zeros(n, dtype=np.int64)
        uside_len = np.zeros(n, dtype=np.int64)
        max_uside = max((len(self.entries[u].user_side) for u in users), default=0)
        uside = np.zeros((n, max_uside), dtype=np.int64)
        for k, u in enumerate(users):
            entry = self.entries[u]
            pools[k] = entry.pool.slots
            steps[k] = entry.pool.step_count
            last_ts[k] = entry.last_ts
            uside_len[k] = len(entry.user_side)
            uside[k, : len(entry.user_side)] = entry.user_side
        meta = {
            "format": STORE_FORMAT,
            "model_version": self.model_version,
            "depth": self.depth,
            "slot_dim": self.slot_dim,
            "n_users": n,
        }
        with open(path, "wb") as fp:
            np.savez(
                fp,
                meta=np.array(json.dumps(meta)),
                users=np.array(users, dtype=np.str_),
                pools=pools,
                steps=steps,
                last_ts=last_ts,
                uside=uside,
                uside_len=uside_len,
            )

    @classmethod
    def load(cls, path, model) -> "MemoryStore":
        """Rebuild a store, refusing files written under a different model version."""
        try:
            with np.load(path, allow_pickle=False) as bundle:
                if "meta" not in bundle:
                    raise StoreError(f"{path}: missing store metadata")
                meta = json.loads(str(bundle["meta"]))
                data = {k: bundle[k] for k in bundle.files}
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise StoreError(f"{path}: unreadable store file ({exc})") from None
        if meta.get("format") != STORE_FORMAT:
            raise StoreError(f"{path}: unsupported store format {meta.get('format')!r}")
        version = meta.get("model_version")
        if version != model.fingerprint():
            raise StoreVersionError(
                f"{path}: store was written for model version {version}, "
                f"but the loaded model is {model.fingerprint()}"
            )
        depth, slot_dim = int(meta["depth"]), int(meta["slot_dim"])
        if (depth, slot_dim) != (model.schedule.depth, model.config.slot_dim):
            raise StoreError(
                f"{path}: store layout ({depth}, {slot_dim}) does not match the model"
            )
        store = cls(model_version=version, depth=depth, slot_dim=slot_dim)
        required = {"users", "pools", "steps", "last_ts", "uside", "uside_len"}
        if not required.issubset(data):
            raise StoreError(f"{path}: missing arrays {sorted(required - set(data))}")
        users = data["users"]
        pools = data["pools"]
        if pools.shape != (len(users), depth, slot_dim):
            raise StoreError(f"{path}: pool array shape {pools.shape} is inconsistent")
        for k, u in enumerate(users):
            n_side = int(data["uside_len"][k])
            store.entries[str(u)] = StoreEntry(
                pool=mem.MemoryPool(
                    slots=pools[k].copy(), step_count=int(data["steps"][k])
                ),
                last_ts=int(data["last_ts"][k]),
                user_side=tuple(int(v) for v in data["uside"][k, :n_side]),
            )
        return store

    def expanded(self, new_model) -> "MemoryStore":
        """Store for an expanded model: every pool gains one zero slot."""
        if new_model.schedule.depth != self.depth + 1:
            raise StoreError(
                f"expanded model must have depth {self.depth + 1}, "
                f"got {new_model.schedule.depth}"
            )
        if new_model.config.slot_dim != self.slot_dim:
            raise StoreError("expanded model must keep the same slot width")
        out = MemoryStore.for_model(new_model)
        for user_id, entry in self.entries.items():
            slots = np.vstack([entry.pool.slots.copy(), np.zeros((1, self.slot_dim))])
            out.entries[user_id] = StoreEntry(
                pool=mem.MemoryPool(slots=slots, step_count=entry.pool.step_count),
                last_ts=entry.last_ts,
                user_side=entry.user_side,
            )
        return out
