"""Record encoding: validated records -> numeric inputs for the critic.

One shared code path for training and serving. Dense numerics are
z-normalized with Welford running statistics (variance floor 1e-6, clipped
to [-10, 10]); categoricals map to embedding ids with a reserved
out-of-vocabulary index; text hashes to token ids via FNV-1a 64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .schema import (CategoricalKind, MessageSpec, NumericKind, Record,
                     TextKind)

VARIANCE_FLOOR = 1e-6
CLIP = 10.0

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class EncodingError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def hash_text(s: str, table_size: int,
              max_tokens: Optional[int] = None) -> list[int]:
    """Lowercased whitespace tokens -> stable 64-bit hash ids mod table_size.

    table_size must be a power of two >= 2. Deterministic across processes
    and platforms.
    """
    if table_size < 2 or table_size & (table_size - 1):
        raise ValueError(f"table_size must be a power of two >= 2, "
                         f"got {table_size}")
    tokens = s.lower().split()
    if max_tokens is not None:
        tokens = tokens[:max_tokens]
    mask = table_size - 1
    return [fnv1a64(t.encode("utf-8")) & mask for t in tokens]


@dataclass(frozen=True)
class EncodedRecord:
    """Numeric view of one record: a dense vector plus embedding ids."""

    dense: np.ndarray  # z-normalized, clipped, length fixed per spec
    categorical_ids: tuple[tuple[int, int], ...]  # (field_slot, id)
    token_ids: tuple[tuple[int, tuple[int, ...]], ...]  # (field_slot, ids)


@dataclass(frozen=True)
class Layout:
    """Precomputed slot layout for one MessageSpec (log_only excluded)."""

    numeric: tuple[tuple[str, int], ...]  # (name, element count), in order
    categorical: tuple[tuple[str, int], ...]  # (name, num_categories)
    text: tuple[tuple[str, int, int], ...]  # (name, max_length, table_size)
    dense_size: int

    @classmethod
    def for_spec(cls, spec: MessageSpec) -> "Layout":
        numeric, categorical, text = [], [], []
        for f in spec.model_fields:
            if isinstance(f.kind, NumericKind):
                numeric.append((f.name, f.kind.size))
            elif isinstance(f.kind, CategoricalKind):
                categorical.append((f.name, f.kind.num_categories))
            elif isinstance(f.kind, TextKind):
                text.append((f.name, f.kind.max_length, f.kind.table_size))
        return cls(numeric=tuple(numeric), categorical=tuple(categorical),
                   text=tuple(text),
                   dense_size=sum(n for _, n in numeric))


_EMPTY = EncodedRecord(dense=np.zeros(0), categorical_ids=(), token_ids=())


class Normalizer:
    """Welford running statistics over the numeric scalar slots of one spec.

    Single writer; ``snapshot()`` yields an immutable view whose transform
    is frozen into trained policies so inference sees training statistics.
    """

    def __init__(self, spec: MessageSpec):
        self.layout = Layout.for_spec(spec)
        n = self.layout.dense_size
        self.count = np.zeros(n, dtype=np.int64)
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    def update(self, value: Record) -> None:
        """One Welford step per scalar slot. The value must validate."""
        offset = 0
        for name, size in self.layout.numeric:
            flat = value.get(name)
            xs = np.asarray(flat, dtype=float).ravel()
            if xs.size != size or not np.all(np.isfinite(xs)):
                raise EncodingError([f"{name} is not a valid numeric value"])
            sl = slice(offset, offset + size)
            self.count[sl] += 1
            delta = xs - self.mean[sl]
            self.mean[sl] += delta / self.count[sl]
            self.m2[sl] += delta * (xs - self.mean[sl])
            offset += size

    def variance(self) -> np.ndarray:
        return self.m2 / np.maximum(self.count - 1, 1)

    def snapshot(self) -> "NormalizerSnapshot":
        scale = 1.0 / np.sqrt(np.maximum(self.variance(), VARIANCE_FLOOR))
        scale[self.count == 0] = 0.0  # no data: normalize to exactly 0
        return NormalizerSnapshot(mean=self.mean.copy(), scale=scale,
                                  count=self.count.copy())

    def to_dict(self) -> dict[str, Any]:
        return {"count": self.count.tolist(), "mean": self.mean.tolist(),
                "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, spec: MessageSpec, obj: dict[str, Any]) -> "Normalizer":
        norm = cls(spec)
        norm.count = np.asarray(obj["count"], dtype=np.int64)
        norm.mean = np.asarray(obj["mean"], dtype=float)
        norm.m2 = np.asarray(obj["m2"], dtype=float)
        return norm


@dataclass(frozen=True)
class NormalizerSnapshot:
    mean: np.ndarray
    scale: np.ndarray  # 1/sqrt(max(var, floor)); 0 where count == 0
    count: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def transform(self, dense: np.ndarray) -> np.ndarray:
        return np.clip((dense - self.mean) * self.scale, -CLIP, CLIP)

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "count": self.count.tolist()}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "NormalizerSnapshot":
        return cls(mean=np.asarray(obj["mean"], dtype=float),
                   scale=np.asarray(obj["scale"], dtype=float),
                   count=np.asarray(obj["count"], dtype=np.int64))


def fresh_snapshot(spec: MessageSpec) -> NormalizerSnapshot:
    return Normalizer(spec).snapshot()


def update_normalizer(normalizer: Normalizer, value: Record) -> Normalizer:
    """In-place Welford update; returns the same object for chaining."""
    normalizer.update(value)
    return normalizer


def encode(spec: MessageSpec, normalizer: NormalizerSnapshot | Normalizer,
           value: Record, *, lenient: bool = False) -> EncodedRecord:
    """Encode a record. Pure in (spec, normalizer snapshot, value).

    Strict mode raises EncodingError listing the violations; lenient mode
    never errors: bad numerics become zeros, bad categoricals the OOV
    index, bad text the empty token list.
    """
    layout = Layout.for_spec(spec)
    snap = normalizer.snapshot() if isinstance(normalizer, Normalizer) \
        else normalizer
    violations: list[str] = []

    dense = np.zeros(layout.dense_size)
    offset = 0
    for name, size in layout.numeric:
        v = value.get(name)
        ok = False
        if v is not None:
            try:
                xs = np.asarray(v, dtype=float).ravel()
                if xs.size == size and np.all(np.isfinite(xs)):
                    dense[offset:offset + size] = xs
                    ok = True
            except (TypeError, ValueError):
                pass
        if not ok:
            violations.append(f"{name} is not a valid numeric value")
        offset += size
    dense = snap.transform(dense)

    categorical_ids = []
    for slot, (name, num_categories) in enumerate(layout.categorical):
        v = value.get(name)
        if isinstance(v, int) and not isinstance(v, bool) \
                and 0 <= v < num_categories:
            categorical_ids.append((slot, v))
        else:
            violations.append(f"{name} is not a valid category")
            categorical_ids.append((slot, num_categories))  # OOV

    token_ids = []
    for slot, (name, max_length, table_size) in enumerate(layout.text):
        v = value.get(name)
        if isinstance(v, str):
            ids = hash_text(v, table_size, max_tokens=max_length)
        else:
            violations.append(f"{name} is not a valid string")
            ids = []
        token_ids.append((slot, tuple(ids)))

    if violations and not lenient:
        raise EncodingError(violations)
    return EncodedRecord(dense=dense,
                         categorical_ids=tuple(categorical_ids),
                         token_ids=tuple(token_ids))


def feedback_vector(problem, record: Record) -> np.ndarray:
    """Canonical all-maximize metric vector: minimize-direction metrics are
    negated at ingestion so all downstream math is maximize-only.
    """
    names = problem.metric_names
    signs = problem.direction_signs
    out = np.empty(len(names))
    for i, name in enumerate(names):
        v = record.get(name)
        if isinstance(v, (list, tuple)):
            v = v[0] if len(v) == 1 else None
        if not isinstance(v, (int, float)) or isinstance(v, bool) \
                or not math.isfinite(v):
            raise EncodingError([f"{name} is not a finite metric value"])
        out[i] = signs[i] * float(v)
    return out


def natural_feedback(problem, vector: np.ndarray) -> dict[str, float]:
    """Inverse of feedback_vector: canonical vector back to natural units."""
    return {name: float(sign * v) for name, sign, v in
            zip(problem.metric_names, problem.direction_signs, vector)}
