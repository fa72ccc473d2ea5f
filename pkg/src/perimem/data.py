"""Behavior logs, vocabularies, synthetic data, and dataset assembly.

External formats
----------------
Event log (JSONL, one event per line)::

    {"user": "u12", "item": "i7", "cat": "c3", "ts": 1031, "side": ["s2"]}

Vocabulary (JSON): ``{"item": {"i1": 1, ...}, "cat": {...}, "side": {...},
"ctx": {...}, "uside": {...}}``. Index 0 of every field is reserved for
missing / padding values and never appears in a vocabulary file.

Sample file (JSONL, vocabulary-encoded integers)::

    {"user": "u12", "uside": [3], "events": [[item, cat, ts, [side...]], ...],
     "target": [item, cat, ts, [side...]], "ctx": [2], "label": 1, "pred_ts": 117}
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, SamplingError, VocabularyError

FIELDS = ("item", "cat", "side", "ctx", "uside")

# Planted dependency windows of the synthetic task: the leading quarter of the
# sequence and the final RECENT_WINDOW events.
RECENT_WINDOW = 6
MIN_SEQ_LEN = 8


@dataclass(frozen=True)
class BehaviorEvent:
    """One user interaction: encoded item/category ids, timestamp, side features."""

    item: int
    cat: int
    ts: int
    side: tuple[int, ...] = ()


@dataclass
class UserSequence:
    """A user's interaction history, sorted by ascending timestamp."""

    user_id: str
    user_side: tuple[int, ...]
    events: list[BehaviorEvent]


@dataclass
class Sample:
    """A prediction instance: history, candidate target, context, binary label."""

    sequence: UserSequence
    target: BehaviorEvent
    context: tuple[int, ...]
    label: int
    prediction_time: int


class Vocabulary:
    """Per-field mapping from string tokens to dense indices starting at 1."""

    def __init__(self, fields: dict[str, dict[str, int]]):
        self.fields = {name: dict(fields.get(name, {})) for name in FIELDS}
        self._reverse = {}
        for name, mapping in self.fields.items():
            rev = {}
            for token, idx in mapping.items():
                if not isinstance(idx, int) or idx < 1:
                    raise VocabularyError(
                        f"vocabulary field {name!r}: index for {token!r} must be a positive int"
                    )
                if idx in rev:
                    raise VocabularyError(
                        f"vocabulary field {name!r}: duplicate index {idx}"
                    )
                rev[idx] = token
            self._reverse[name] = rev

    @classmethod
    def from_tokens(cls, tokens_by_field: dict[str, list[str]]) -> "Vocabulary":
        """Assign indices 1..n to tokens in the given order."""
        return cls(
            {
                name: {tok: i + 1 for i, tok in enumerate(tokens)}
                for name, tokens in tokens_by_field.items()
            }
        )

    def size(self, field_name: str) -> int:
        """Table size including the reserved index 0."""
        mapping = self.fields[field_name]
        return (max(mapping.values()) + 1) if mapping else 1

    def sizes(self) -> dict[str, int]:
        return {name: self.size(name) for name in FIELDS}

    def encode(self, field_name: str, token: str) -> int:
        try:
            return self.fields[field_name][token]
        except KeyError:
            raise VocabularyError(
                f"unknown {field_name} token {token!r}"
            ) from None

    def decode(self, field_name: str, idx: int) -> str:
        try:
            return self._reverse[field_name][idx]
        except KeyError:
            raise VocabularyError(
                f"{field_name} index {idx} has no vocabulary token"
            ) from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(self.fields, fp, indent=1, sort_keys=True)
            fp.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fp:
            try:
                raw = json.load(fp)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise DataFormatError(f"{path}: vocabulary must be a JSON object")
        return cls(raw)


def _require(cond: bool, lineno: int, message: str) -> None:
    if not cond:
        raise DataFormatError(f"line {lineno}: {message}")


def _parse_event_line(lineno: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from None
    _require(isinstance(rec, dict), lineno, "event record must be a JSON object")
    for key in ("user", "item", "cat", "ts"):
        _require(key in rec, lineno, f"missing required key {key!r}")
    for key in ("user", "item", "cat"):
        _require(isinstance(rec[key], str) and rec[key] != "", lineno, f"{key!r} must be a non-empty string")
    _require(
        isinstance(rec["ts"], int) and not isinstance(rec["ts"], bool),
        lineno,
        "'ts' must be an integer",
    )
    side = rec.get("side", [])
    _require(
        isinstance(side, list) and all(isinstance(s, str) for s in side),
        lineno,
        "'side' must be a list of strings",
    )
    rec["side"] = side
    return rec


def load_events(path, vocab: Vocabulary | None = None) -> tuple[list[UserSequence], Vocabulary]:
    """Read a JSONL event log into per-user sequences.

    When no vocabulary is given, one is built from the file with tokens sorted
    lexicographically per field. Unknown tokens against a given vocabulary are
    an error naming the field. Output sequences are ordered by user id and
    events within a user by ascending timestamp (ties keep file order).
    """
    records = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            records.append(_parse_event_line(lineno, line))
    if vocab is None:
        items = sorted({r["item"] for r in records})
        cats = sorted({r["cat"] for r in records})
        sides = sorted({s for r in records for s in r["side"]})
        vocab = Vocabulary.from_tokens({"item": items, "cat": cats, "side": sides})
    by_user: dict[str, list[BehaviorEvent]] = {}
    for rec in records:
        event = BehaviorEvent(
            item=vocab.encode("item", rec["item"]),
            cat=vocab.encode("cat", rec["cat"]),
            ts=rec["ts"],
            side=tuple(vocab.encode("side", s) for s in rec["side"]),
        )
        by_user.setdefault(rec["user"], []).append(event)
    sequences = []
    for user_id in sorted(by_user):
        events = sorted(by_user[user_id], key=lambda e: e.ts)
        sequences.append(UserSequence(user_id=user_id, user_side=(), events=events))
    return sequences, vocab


def save_events(sequences: list[UserSequence], vocab: Vocabulary, path) -> None:
    """Write sequences back to the JSONL event-log format (decoded tokens)."""
    with open(path, "w", encoding="utf-8") as fp:
        for seq in sequences:
            for event in seq.events:
                rec = {
                    "user": seq.user_id,
                    "item": vocab.decode("item", event.item),
                    "cat": vocab.decode("cat", event.cat),
                    "ts": event.ts,
                    "side": [vocab.decode("side", s) for s in event.side],
                }
                fp.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _event_to_json(event: BehaviorEvent) -> list:
    return [event.item, event.cat, event.ts, list(event.side)]


def _event_from_json(lineno: int, raw) -> BehaviorEvent:
    _require(
        isinstance(raw, list) and len(raw) == 4,
        lineno,
        "event must be [item, cat, ts, [side...]]",
    )
    item, cat, ts, side = raw
    for v, name in ((item, "item"), (cat, "cat"), (ts, "ts")):
        _require(isinstance(v, int) and not isinstance(v, bool), lineno, f"event {name} must be an int")
    _require(isinstance(side, list), lineno, "event side must be a list")
    return BehaviorEvent(item=item, cat=cat, ts=ts, side=tuple(side))


def save_samples(samples: list[Sample], path) -> None:
    """Write samples as vocabulary-encoded JSONL, one sample per line."""
    with open(path, "w", encoding="utf-8") as fp:
        for s in samples:
            rec = {
                "user": s.sequence.user_id,
                "uside": list(s.sequence.user_side),
                "events": [_event_to_json(e) for e in s.sequence.events],
                "target": _event_to_json(s.target),
                "ctx": list(s.context),
                "label": s.label,
                "pred_ts": s.prediction_time,
            }
            fp.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_samples(path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            _require(isinstance(rec, dict), lineno, "sample must be a JSON object")
            for key in ("user", "uside", "events", "target", "ctx", "label", "pred_ts"):
                _require(key in rec, lineno, f"missing required key {key!r}")
            _require(rec["label"] in (0, 1), lineno, "label must be 0 or 1")
            events = [_event_from_json(lineno, e) for e in rec["events"]]
            samples.append(
                Sample(
                    sequence=UserSequence(
                        user_id=rec["user"],
                        user_side=tuple(rec["uside"]),
                        events=events,
                    ),
                    target=_event_from_json(lineno, rec["target"]),
                    context=tuple(rec["ctx"]),
                    label=int(rec["label"]),
                    prediction_time=int(rec["pred_ts"]),
                )
            )
    return samples


def _user_rng(seed: int, user_id: str) -> np.random.Generator:
    """Independent random stream per (seed, user); stable across runs and processes."""
    digest = hashlib.sha256(user_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "big")])


def planted_windows(seq_len: int) -> tuple[range, range]:
    """0-based event-index windows carrying the planted label dependency.

    The long-range window covers the leading quarter of the sequence, the
    recent window the trailing RECENT_WINDOW events.
    """
    if seq_len < MIN_SEQ_LEN:
        raise ValueError(f"sequence length must be >= {MIN_SEQ_LEN}, got {seq_len}")
    return range(0, seq_len // 4), range(seq_len - RECENT_WINDOW, seq_len)


def window_membership(sample: Sample) -> tuple[bool, bool]:
    """Whether the target's category occurs in the long-range / recent window."""
    events = sample.sequence.events
    long_rng, recent_rng = planted_windows(len(events))
    cat = sample.target.cat
    in_long = any(events[i].cat == cat for i in long_rng)
    in_recent = any(events[i].cat == cat for i in recent_rng)
    return in_long, in_recent


def generate_synthetic(
    n_users: int,
    seq_len: int,
    n_items: int,
    n_cats: int,
    seed: int,
    *,
    targets_per_user: int = 1,
    n_side_tokens: int = 4,
    n_ctx_tokens: int = 4,
    n_uside_tokens: int = 4,
) -> tuple[list[Sample], Vocabulary]:
    """Generate labeled samples with a planted two-window dependency.

    Every category appears the same number of times in every history (up to
    one extra when n_cats does not divide seq_len), so aggregate counts carry
    no label information and the dependency below is purely positional. Each
    category's occurrences form one contiguous run plus one floating single
    event; the run and single positions are private to the user. Runs give
    each category a temporally localized, high-amplitude footprint, the
    floating single lets a category touch both planted windows. Items are
    uniform within their category. Target items are uniform over the catalog;
    the label is 1 with probability 0.9 when the target's category occurs in
    the long-range or recent window of the history (see planted_windows),
    else 1 with probability 0.1. targets_per_user independent (target, label)
    pairs share each history. Everything is a pure function of
    (seed, user index), so the output is reproducible element for element.
    """
    if n_users < 1:
        raise ValueError(f"n_users must be >= 1, got {n_users}")
    if seq_len < MIN_SEQ_LEN:
        raise ValueError(f"seq_len must be >= {MIN_SEQ_LEN}, got {seq_len}")
    if n_cats < 2:
        raise ValueError(f"n_cats must be >= 2, got {n_cats}")
    if n_items < n_cats:
        raise ValueError(f"n_items must be >= n_cats, got {n_items} < {n_cats}")
    if targets_per_user < 1:
        raise ValueError(f"targets_per_user must be >= 1, got {targets_per_user}")

    # Item k (1-based) belongs to category ((k - 1) % n_cats) + 1, so every
    # category owns at least one item.
    def item_cat(k: int) -> int:
        return (k - 1) % n_cats + 1

    def cat_item_count(c: int) -> int:
        return (n_items - c) // n_cats + 1

    long_rng, recent_rng = planted_windows(seq_len)
    # Per-category count: floor(seq_len/n_cats) everywhere, the first
    # (seq_len mod n_cats) categories get one more.
    base, extra = divmod(seq_len, n_cats)
    samples = []
    for u in range(n_users):
        user_id = f"u{u + 1}"
        rng = np.random.default_rng([seed, u])
        segments = []
        for c in range(1, n_cats + 1):
            count = base + (1 if c <= extra else 0)
            if count >= 2:
                segments.append([c] * (count - 1))
            if count >= 1:
                segments.append([c])
        order = rng.permutation(len(segments))
        cats = [c for si in order for c in segments[si]]
        base_ts = u * (seq_len + 2)
        events = []
        for i in range(seq_len):
            c = int(cats[i])
            item = c + n_cats * int(rng.integers(cat_item_count(c)))
            side = (int(rng.integers(1, n_side_tokens + 1)),)
            events.append(BehaviorEvent(item=item, cat=c, ts=base_ts + i + 1, side=side))
        user_side = (int(rng.integers(1, n_uside_tokens + 1)),)
        context = (int(rng.integers(1, n_ctx_tokens + 1)),)
        sequence = UserSequence(user_id=user_id, user_side=user_side, events=events)
        for _ in range(targets_per_user):
            target_item = int(rng.integers(1, n_items + 1))
            target = BehaviorEvent(
                item=target_item,
                cat=item_cat(target_item),
                ts=base_ts + seq_len + 1,
                side=(int(rng.integers(1, n_side_tokens + 1)),),
            )
            planted = any(events[i].cat == target.cat for i in long_rng) or any(
                events[i].cat == target.cat for i in recent_rng
            )
            label = int(rng.random() < (0.9 if planted else 0.1))
            samples.append(
                Sample(
                    sequence=sequence,
                    target=target,
                    context=context,
                    label=label,
                    prediction_time=target.ts,
                )
            )
    vocab = Vocabulary.from_tokens(
        {
            "item": [f"i{k}" for k in range(1, n_items + 1)],
            "cat": [f"c{k}" for k in range(1, n_cats + 1)],
            "side": [f"s{k}" for k in range(1, n_side_tokens + 1)],
            "ctx": [f"x{k}" for k in range(1, n_ctx_tokens + 1)],
            "uside": [f"g{k}" for k in range(1, n_uside_tokens + 1)],
        }
    )
    return samples, vocab


def synthetic_event_log(samples: list[Sample]) -> list[UserSequence]:
    """Flatten samples back to full event sequences (history plus target event)."""
    return [
        UserSequence(
            user_id=s.sequence.user_id,
            user_side=s.sequence.user_side,
            events=[*s.sequence.events, s.target],
        )
        for s in samples
    ]


def build_dataset(
    sequences: list[UserSequence],
    cut_time: float,
    neg_ratio: float = 0.5,
    seed: int = 0,
) -> tuple[list[Sample], list[Sample]]:
    """Turn full sequences into labeled samples with a time-based train/test split.

    The last event of each sequence becomes the prediction target. With
    probability neg_ratio the target item is replaced by an item the user
    never clicked (drawn uniformly from the rest of the catalog, label 0);
    otherwise the true item is kept (label 1). Samples whose prediction time
    falls strictly before cut_time go to train, the rest to test.
    """
    if not 0.0 <= neg_ratio <= 1.0:
        raise ValueError(f"neg_ratio must be in [0, 1], got {neg_ratio}")
    for seq in sequences:
        if len(seq.events) < 2:
            raise ValueError(
                f"user {seq.user_id}: needs at least 2 events to form a sample"
            )
    catalog: dict[int, int] = {}
    for seq in sequences:
        for event in seq.events:
            catalog.setdefault(event.item, event.cat)
    all_items = sorted(catalog)
    train, test = [], []
    for seq in sequences:
        rng = _user_rng(seed, seq.user_id)
        history = seq.events[:-1]
        target = seq.events[-1]
        label = 1
        if rng.random() < neg_ratio:
            clicked = {e.item for e in seq.events}
            candidates = [k for k in all_items if k not in clicked]
            if not candidates:
                raise SamplingError(
                    f"user {seq.user_id} clicked every known item; no negative available"
                )
            neg_item = candidates[int(rng.integers(len(candidates)))]
            target = replace(target, item=neg_item, cat=catalog[neg_item])
            label = 0
        prediction_time = max(target.ts, history[-1].ts + 1)
        sample = Sample(
            sequence=UserSequence(seq.user_id, seq.user_side, history),
            target=target,
            context=(),
            label=label,
            prediction_time=prediction_time,
        )
        if prediction_time < cut_time:
            train.append(sample)
        else:
            test.append(sample)
    return train, test


def split_by_time(samples: list[Sample], cut_time: float) -> tuple[list[Sample], list[Sample]]:
    """Split samples into (before cut_time, at-or-after cut_time)."""
    train = [s for s in samples if s.prediction_time < cut_time]
    test = [s for s in samples if s.prediction_time >= cut_time]
    return train, test


def cut_time_for_fraction(samples: list[Sample], fraction: float) -> float:
    """Prediction-time threshold putting roughly `fraction` of samples before it."""
    if not samples:
        raise ValueError("no samples to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    times = sorted(s.prediction_time for s in samples)
    k = min(max(int(math.floor(fraction * len(times))), 1), len(times) - 1)
    return times[k]
