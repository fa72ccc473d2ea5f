"""Input checking shared by the sklearn-style estimators and the CLI."""

from __future__ import annotations

from .data import FIELDS, Sample
from .errors import DataFormatError


def check_samples(X) -> list[Sample]:
    """Validate a collection of Sample objects and return it as a list."""
    samples = list(X)
    if not samples:
        raise ValueError("expected at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"element {i} is {type(s).__name__}, expected Sample")
        if not s.sequence.events:
            raise DataFormatError(f"sample {i}: history is empty")
        if s.label not in (0, 1):
            raise DataFormatError(f"sample {i}: label must be 0 or 1, got {s.label!r}")
    return samples


def feature_counts(samples: list[Sample]) -> dict[str, int]:
    """Widest side/ctx/uside tuples seen; the model pads shorter ones with id 0."""
    n_side = n_ctx = n_uside = 0
    for s in samples:
        for e in s.sequence.events:
            n_side = max(n_side, len(e.side))
        n_side = max(n_side, len(s.target.side))
        n_ctx = max(n_ctx, len(s.context))
        n_uside = max(n_uside, len(s.sequence.user_side))
    return {"n_side": n_side, "n_ctx": n_ctx, "n_uside": n_uside}


def infer_vocab_sizes(samples: list[Sample]) -> dict[str, int]:
    """Smallest per-field table sizes that cover every id in the samples."""
    high = {name: 0 for name in FIELDS}

    def see(name, ids):
        for v in ids:
            if v < 0:
                raise DataFormatError(f"negative {name} id {v}")
            high[name] = max(high[name], int(v))

    for s in samples:
        for e in s.sequence.events + [s.target]:
            see("item", (e.item,))
            see("cat", (e.cat,))
            see("side", e.side)
        see("ctx", s.context)
        see("uside", s.sequence.user_side)
    return {name: high[name] + 1 for name in FIELDS}


def labels_of(samples: list[Sample]):
    return [s.label for s in samples]
