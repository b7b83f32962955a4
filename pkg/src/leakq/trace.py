"""Trace representation, cache-unit mapping, matrix folding and pair datasets.

A trace is the ordered log of side-channel events (memory accesses and
branch targets) recorded while a program processes one secret.  Traces are
mapped to cache-unit granularity, folded into a fixed-shape matrix for the
estimators, and combined into labeled positive/negative pair datasets.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientData, ShapeTooSmall

KIND_DATA = "D"
KIND_BRANCH = "B"

_KINDS = (KIND_DATA, KIND_BRANCH)


@dataclass(frozen=True)
class Record:
    """One side-channel event: an address, its kind and the emitting point.

    ``address`` is the raw pre-mapping value; ``source_id`` identifies the
    synthetic program point and is stable across runs of one workload.
    """

    address: int
    kind: str = KIND_DATA
    source_id: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")
        if self.address < 0 or self.address > 0xFFFFFFFFFFFFFFFF:
            raise ValueError("address out of 64-bit range")
        if self.source_id < 0:
            raise ValueError("source_id must be non-negative")


@dataclass
class Trace:
    """Ordered record sequence from one program run under one secret."""

    records: list[Record]
    secret_id: str = ""
    run_index: int = 0

    def __post_init__(self):
        if len(self.records) < 1:
            raise ValueError("trace must contain at least one record")
        if self.run_index < 0:
            raise ValueError("run_index must be >= 0")

    def __len__(self) -> int:
        return len(self.records)

    def addresses(self) -> np.ndarray:
        return np.array([r.address for r in self.records], dtype=np.uint64)

    def source_ids(self) -> np.ndarray:
        return np.array([r.source_id for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class Secret:
    """Fixed-length bit vector with the log2 size of its sampling space."""

    bits: tuple[int, ...]
    key_space_log2: float = 0.0

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("secret bits must be 0/1")
        if self.key_space_log2 == 0.0:
            object.__setattr__(self, "key_space_log2", float(len(self.bits)))
        if self.key_space_log2 <= 0:
            raise ValueError("key_space_log2 must be positive")

    @classmethod
    def from_int(cls, value: int, n_bits: int) -> "Secret":
        bits = tuple((value >> i) & 1 for i in range(n_bits))
        return cls(bits=bits)

    @classmethod
    def from_hex(cls, text: str, n_bits: int | None = None) -> "Secret":
        digits = text[2:] if text.startswith(("0x", "0X")) else text
        if n_bits is None:
            n_bits = max(1, 4 * len(digits))
        return cls.from_int(int(digits, 16), n_bits)

    def to_int(self) -> int:
        value = 0
        for i, b in enumerate(self.bits):
            value |= b << i
        return value

    def to_hex(self) -> str:
        width = (len(self.bits) + 3) // 4
        return format(self.to_int(), f"0{width}x")

    def bit_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.bits)


class CacheGranularity(Enum):
    """Address-to-unit mapping: cache line, cache bank, or raw identity."""

    LINE = "line"
    BANK = "bank"
    RAW = "raw"

    @property
    def shift(self) -> int:
        return {"line": 6, "bank": 2, "raw": 0}[self.value]


@dataclass(frozen=True)
class CacheModel:
    granularity: CacheGranularity = CacheGranularity.LINE

    def map_address(self, address: int) -> int:
        return address >> self.granularity.shift


def map_to_cache_units(trace: Trace, model: CacheModel) -> Trace:
    """Replace each record address with its cache-unit index.

    Kinds, source ids, ordering and length are preserved; the mapping is a
    total function of the granularity.
    """
    shift = model.granularity.shift
    if shift == 0:
        return Trace(records=list(trace.records), secret_id=trace.secret_id,
                     run_index=trace.run_index)
    mapped = [Record(address=r.address >> shift, kind=r.kind, source_id=r.source_id)
              for r in trace.records]
    return Trace(records=mapped, secret_id=trace.secret_id, run_index=trace.run_index)


@dataclass
class FoldedTrace:
    """Trace folded row-major into a (height, width, channels) grid.

    Real cells hold ``unit + 1`` so the padding sentinel 0 never collides
    with a legal unit index (unit 0 is a valid cache line).
    """

    matrix: np.ndarray
    pad_len: int
    kinds: tuple[str, ...] = ()
    source_ids: tuple[int, ...] = ()
    secret_id: str = ""
    run_index: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.matrix.shape  # type: ignore[return-value]

    @property
    def n_records(self) -> int:
        return self.matrix.size - self.pad_len

    def cells(self) -> np.ndarray:
        """Flattened cell values in record order (padding last)."""
        return self.matrix.reshape(-1)


def fold_trace(trace: Trace, shape: tuple[int, int, int]) -> FoldedTrace:
    """Write a (mapped) trace row-major into a zero-padded grid.

    Expects addresses already mapped to cache units.  Raises
    :class:`ShapeTooSmall` when the grid capacity is below the trace length.
    The inverse (:func:`unfold_trace`) recovers the mapped trace exactly.
    """
    height, width, channels = shape
    capacity = height * width * channels
    n = len(trace.records)
    if capacity < n:
        raise ShapeTooSmall(f"shape {shape} holds {capacity} cells < {n} records")
    flat = np.zeros(capacity, dtype=np.int64)
    flat[:n] = trace.addresses().astype(np.int64) + 1
    return FoldedTrace(
        matrix=flat.reshape(shape),
        pad_len=capacity - n,
        kinds=tuple(r.kind for r in trace.records),
        source_ids=tuple(r.source_id for r in trace.records),
        secret_id=trace.secret_id,
        run_index=trace.run_index,
    )


def unfold_trace(folded: FoldedTrace) -> Trace:
    """Strip padding and shift cell values back to unit indices."""
    n = folded.n_records
    units = folded.cells()[:n] - 1
    kinds = folded.kinds if folded.kinds else (KIND_DATA,) * n
    sources = folded.source_ids if folded.source_ids else (0,) * n
    records = [Record(address=int(u), kind=k, source_id=s)
               for u, k, s in zip(units, kinds, sources)]
    return Trace(records=records, secret_id=folded.secret_id,
                 run_index=folded.run_index)


def auto_fold_shape(max_len: int) -> tuple[int, int, int]:
    """Near-square single-channel shape with capacity >= max_len."""
    height = int(np.ceil(np.sqrt(max(1, max_len))))
    width = int(np.ceil(max(1, max_len) / height))
    return (height, width, 1)


@dataclass
class PairDataset:
    """Labeled positive (co-occurring) and negative (recombined) pairs.

    ``positives[i]`` pairs a secret with a trace it produced; negatives
    recombine a secret with a trace from a different secret.  ``group_ids``
    partition pairs for cross-validation de-biasing; index ``i`` below
    ``len(positives)`` refers to a positive, the rest to negatives.
    """

    positives: list[tuple[Secret, FoldedTrace]]
    negatives: list[tuple[Secret, FoldedTrace]]
    pos_group_ids: list[int]
    neg_group_ids: list[int]
    n_groups: int
    fold_shape: tuple[int, int, int]

    def group(self, group_id: int) -> "PairDataset":
        """Sub-dataset containing only pairs of one group."""
        pos = [p for p, g in zip(self.positives, self.pos_group_ids) if g == group_id]
        neg = [p for p, g in zip(self.negatives, self.neg_group_ids) if g == group_id]
        return PairDataset(pos, neg, [group_id] * len(pos), [group_id] * len(neg),
                           self.n_groups, self.fold_shape)


def make_pairs(
    secrets: Sequence[Secret],
    traces: Sequence[Trace],
    runs_per_secret: int = 4,
    seed: int = 0,
    cache_model: CacheModel | None = None,
    fold_shape: tuple[int, int, int] | None = None,
    n_groups: int = 2,
) -> PairDataset:
    """Build the labeled pair dataset from a corpus.

    ``traces`` must hold ``runs_per_secret`` consecutive runs per secret, in
    secret order.  Every co-occurring pair becomes a positive; one negative
    per positive recombines the secret with a trace drawn (without
    replacement until exhausted) from a different secret.  Group ids are
    assigned round-robin.  The result is a pure function of the arguments.
    """
    if cache_model is None:
        cache_model = CacheModel()
    n_secrets = len(secrets)
    if len(traces) != n_secrets * runs_per_secret:
        raise InsufficientData(
            f"expected {n_secrets * runs_per_secret} traces "
            f"({n_secrets} secrets x {runs_per_secret} runs), got {len(traces)}")
    for idx in range(n_secrets):
        chunk = traces[idx * runs_per_secret:(idx + 1) * runs_per_secret]
        if len(chunk) < runs_per_secret:
            raise InsufficientData(f"secret {idx} lacks {runs_per_secret} runs")

    mapped = [map_to_cache_units(t, cache_model) for t in traces]
    if fold_shape is None:
        fold_shape = auto_fold_shape(max(len(t) for t in mapped))
    folded = [fold_trace(t, fold_shape) for t in mapped]

    positives: list[tuple[Secret, FoldedTrace]] = []
    pos_owner: list[int] = []
    for s_idx in range(n_secrets):
        for r in range(runs_per_secret):
            positives.append((secrets[s_idx], folded[s_idx * runs_per_secret + r]))
            pos_owner.append(s_idx)

    # Per-pair RNG streams are derived by counter-based seed splitting so the
    # sampling is independent of worker count or evaluation order.
    negatives: list[tuple[Secret, FoldedTrace]] = []
    n_traces = len(folded)
    for i, (secret, _) in enumerate(positives):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(i,)))
        if n_secrets < 2:
            raise InsufficientData("negative sampling needs at least 2 secrets")
        while True:
            j = int(rng.integers(0, n_traces))
            if j // runs_per_secret != pos_owner[i]:
                break
        negatives.append((secret, folded[j]))

    pos_groups = [i % n_groups for i in range(len(positives))]
    neg_groups = [i % n_groups for i in range(len(negatives))]
    return PairDataset(positives, negatives, pos_groups, neg_groups,
                       n_groups, fold_shape)


# ---------------------------------------------------------------------------
# Trace file format: line-delimited text, bit-exact (LF endings, no extra
# whitespace).  Header: "#leakq-trace v1 secret_id=<hex> run=<int>", then one
# record per line "<kind>,<address-hex>,<source_id>".

TRACE_MAGIC = "#leakq-trace v1"


def dump_trace(trace: Trace) -> str:
    out = io.StringIO()
    out.write(f"{TRACE_MAGIC} secret_id={trace.secret_id} run={trace.run_index}\n")
    for r in trace.records:
        out.write(f"{r.kind},{r.address:x},{r.source_id}\n")
    return out.getvalue()


def load_trace(text: str) -> Trace:
    lines = text.split("\n")
    header = lines[0]
    if not header.startswith(TRACE_MAGIC):
        raise ValueError("not a leakq trace file")
    fields = dict(part.split("=", 1) for part in header[len(TRACE_MAGIC):].split())
    records = []
    for line in lines[1:]:
        if not line:
            continue
        kind, addr_hex, src = line.split(",")
        records.append(Record(address=int(addr_hex, 16), kind=kind,
                              source_id=int(src)))
    return Trace(records=records, secret_id=fields["secret_id"],
                 run_index=int(fields["run"]))
