"""Instance parsing, negative sampling, and minibatching.

The on-disk format is one instance per line, whitespace separated::

    LABEL FIELD:FEATURE [FIELD:FEATURE ...]

where LABEL is ``1`` for a positive and ``0`` (or ``-1``) for a negative,
and FIELD/FEATURE are unsigned integers. The same field-aware format is
used for every model kind; models without field-aware embeddings simply
ignore the field ids. Files ending in ``.gz`` are read through gzip.

Nothing in this module reorders examples: streams are consumed and emitted
in arrival order, because the models train each example exactly once, in
chronological order.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import BadRate, ParseError

__all__ = [
    "SparseInstance",
    "StreamStats",
    "parse_line",
    "parse_features",
    "instance_to_line",
    "InstanceReader",
    "read_instances",
    "negative_sample",
    "minibatch",
    "sample_rate_for_ratio",
]


@dataclass(frozen=True)
class SparseInstance:
    """One labeled example: a sign label and M active (field, feature) pairs."""

    label: int  # +1 or -1
    fields: tuple[int, ...]
    features: tuple[int, ...]

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ParseError(f"label must be +1 or -1, got {self.label}")
        if len(self.fields) != len(self.features):
            raise ParseError("fields and features must align")
        if len(self.features) == 0:
            raise ParseError("an instance needs at least one active feature")
        if len(set(self.features)) != len(self.features):
            raise ParseError("duplicate feature id within an instance")

    @property
    def m(self) -> int:
        return len(self.features)


@dataclass
class StreamStats:
    """Counters describing what a reader and its filters saw."""

    examples_read: int = 0
    positives: int = 0
    negatives_kept: int = 0
    negatives_dropped: int = 0
    parse_errors: int = 0
    extra: dict = field(default_factory=dict)

    def summary_line(self) -> str:
        """Single-line JSON summary, emitted when a stream closes."""
        payload = {
            "examples_read": self.examples_read,
            "positives": self.positives,
            "negatives_kept": self.negatives_kept,
            "negatives_dropped": self.negatives_dropped,
            "parse_errors": self.parse_errors,
        }
        payload.update(self.extra)
        return json.dumps(payload, sort_keys=True)


def parse_features(tokens: Sequence[str], line_number: int = 0) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Parse ``field:feature`` tokens into parallel (fields, features) tuples."""
    fields: list[int] = []
    features: list[int] = []
    seen: set[int] = set()
    for tok in tokens:
        head, sep, tail = tok.partition(":")
        if not sep:
            raise ParseError(f"expected 'field:feature', got {tok!r}", line_number)
        try:
            fid = int(head)
            feat = int(tail)
        except ValueError:
            raise ParseError(f"non-integer token {tok!r}", line_number) from None
        if fid < 0 or feat < 0:
            raise ParseError(f"negative id in token {tok!r}", line_number)
        if feat in seen:
            raise ParseError(f"duplicate feature {feat}", line_number)
        seen.add(feat)
        fields.append(fid)
        features.append(feat)
    if not features:
        raise ParseError("no features on line", line_number)
    return tuple(fields), tuple(features)


def parse_line(text: str, line_number: int = 0) -> SparseInstance:
    """Parse one text line into a :class:`SparseInstance`.

    Label token ``1`` maps to +1; ``0`` or ``-1`` map to -1.
    """
    tokens = text.split()
    if not tokens:
        raise ParseError("empty line", line_number)
    label_tok = tokens[0]
    if label_tok == "1":
        label = 1
    elif label_tok in ("0", "-1"):
        label = -1
    else:
        raise ParseError(f"bad label {label_tok!r}", line_number)
    fields, features = parse_features(tokens[1:], line_number)
    return SparseInstance(label, fields, features)


def instance_to_line(instance: SparseInstance) -> str:
    """Canonical text form of an instance (inverse of :func:`parse_line`)."""
    label = "1" if instance.label > 0 else "0"
    pairs = " ".join(f"{f}:{x}" for f, x in zip(instance.fields, instance.features))
    return f"{label} {pairs}"


class InstanceReader:
    """Iterates instances from a text (or gzip) file, skipping bad lines.

    Bad lines are counted in ``stats.parse_errors`` rather than raised: a
    streaming trainer must not die on one corrupt record.
    """

    def __init__(self, path: str):
        self.path = str(path)
        self.stats = StreamStats()

    def __iter__(self) -> Iterator[SparseInstance]:
        opener = gzip.open if self.path.endswith(".gz") else open
        with opener(self.path, "rt", encoding="utf-8") as fh:
            for line_number, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    inst = parse_line(line, line_number)
                except ParseError:
                    self.stats.parse_errors += 1
                    continue
                self.stats.examples_read += 1
                if inst.label > 0:
                    self.stats.positives += 1
                else:
                    self.stats.negatives_kept += 1
                yield inst


def read_instances(path: str) -> InstanceReader:
    """Open an instance file for streaming; counters live on ``.stats``."""
    return InstanceReader(path)


def negative_sample(
    stream: Iterable[SparseInstance],
    w: float,
    seed: int = 0,
    stats: StreamStats | None = None,
) -> Iterator[SparseInstance]:
    """Keep all positives; keep each negative independently with probability w.

    Deterministic given the seed. ``w=1`` passes the stream through
    unchanged (no generator draws are consumed, so the filtered stream is
    the identity in that case).
    """
    if not (0.0 < w <= 1.0):
        raise BadRate(f"sample rate must be in (0, 1], got {w}")
    if w == 1.0:
        for inst in stream:
            yield inst
        return
    rng = np.random.default_rng(seed)
    for inst in stream:
        if inst.label > 0:
            yield inst
        elif rng.random() < w:
            yield inst
        elif stats is not None:
            stats.negatives_dropped += 1
            stats.negatives_kept -= 1


def minibatch(stream: Iterable[SparseInstance], n: int) -> Iterator[list[SparseInstance]]:
    """Group a stream into order-preserving batches of ``n`` (last may be short)."""
    if n < 1:
        raise BadRate(f"batch size must be >= 1, got {n}")
    batch: list[SparseInstance] = []
    for inst in stream:
        batch.append(inst)
        if len(batch) == n:
            yield batch
            batch = []
    if batch:
        yield batch


def sample_rate_for_ratio(base_ctr: float, target_ratio: float = 0.1) -> float:
    """Sample rate w that makes post-sampling positive:negative ~= target_ratio.

    Solving p / ((1-p) * w) = r for w gives w = p / (r * (1-p)); the result
    is capped at 1 since negatives can't be upsampled.
    """
    if not (0.0 < base_ctr < 1.0):
        raise BadRate(f"base rate must be in (0, 1), got {base_ctr}")
    if target_ratio <= 0.0:
        raise BadRate(f"target ratio must be > 0, got {target_ratio}")
    return min(1.0, base_ctr / (target_ratio * (1.0 - base_ctr)))
