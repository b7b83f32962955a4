"""Synthetic vulnerable programs with analytically known leakage.

Each program is a deterministic function of (secret, run randomness) that
emits a trace of data accesses and branch targets.  Non-determinism wrappers
(blinding, dummy-access interleaving, measurement noise) turn deterministic
generators into randomized ones.  ``ground_truth`` computes total and
per-program-point leakage by enumerating the relevant secret sub-space per
record rather than hard-coding constants.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import KeyLengthMismatch, NoAnalyticTruth
from .trace import KIND_BRANCH, KIND_DATA, Record, Secret, Trace, dump_trace, load_trace

PROGRAMS = ("fig1a", "fig1b", "fig3a", "aes_toy", "threshold_branch", "lookup")
WRAPPERS = ("blinding", "oram_dummies", "gaussian_noise")

# Reserved source id for records that carry no program-point identity
# (ORAM dummies, blinding prefixes).
NOISE_SOURCE = 0

_STRIDE = 64  # one cache line per table entry

# Table base addresses, line-aligned.
_FIG3A_A = 0x40
_FIG3A_B = 0x80
_FIG1A_X = 0x0          # 4 entries, units 0..3
_FIG1A_Y = 0x1000       # 2 entries, units 64..65
_AES_BASE = 0x0         # 16 tables x 256 entries, raw granularity
_THRESH_NT = 0x40       # branch 1 fall-through target
_THRESH_TK = 0x80       # branch 1 taken target
_THRESH_B2 = 0xC0       # branch 2 target
_LOOKUP_BASE = 0x40
_FIG1B_PREFIX = 0x10000
_FIG1B_Y = 0x100000
_FIG1B_Z = 0x8000000
_BLIND_PREFIX = 0x40000
_DUMMY_BASE = 0x20000   # 16 dummy lines


@dataclass(frozen=True)
class WorkloadSpec:
    """Program choice plus wrapper configuration and the corpus seed."""

    program: str
    key_bits: int = 0
    wrappers: tuple[str, ...] = ()
    blinding_modulus: int = 0        # 0: rotate over the full table
    blinding_prefix_len: int = 0
    oram_rate: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    # fig1b shape: halves of key_bits/2 bits index tables of 2**width_log2
    # entries, either by the half's integer value (mod table size) or by its
    # popcount.
    fig1b_prefix_len: int = 16
    fig1b_width_log2: int = 8
    fig1b_index_mode: str = "value_mod"

    def __post_init__(self):
        if self.program not in PROGRAMS:
            raise ValueError(f"unknown program {self.program!r}")
        for w in self.wrappers:
            if w not in WRAPPERS:
                raise ValueError(f"unknown wrapper {w!r}")
        required = {"fig1a": 1024, "fig3a": 2, "aes_toy": 128,
                    "threshold_branch": 4}
        default = required.get(self.program, 1024 if self.program == "fig1b" else 4)
        if self.key_bits == 0:
            object.__setattr__(self, "key_bits", default)
        if self.program in required and self.key_bits != required[self.program]:
            raise KeyLengthMismatch(
                f"{self.program} requires {required[self.program]}-bit keys, "
                f"got {self.key_bits}")
        if self.program == "fig1b":
            if self.key_bits % 2 != 0:
                raise KeyLengthMismatch("fig1b needs an even key length")
            if self.fig1b_index_mode not in ("value_mod", "popcount"):
                raise ValueError("fig1b_index_mode must be value_mod or popcount")
        if self.program == "lookup" and not 1 <= self.key_bits <= 24:
            raise KeyLengthMismatch("lookup supports 1..24 key bits")
        if not 0.0 <= self.oram_rate <= 1.0:
            raise ValueError("oram_rate must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def canonical(self) -> str:
        parts = [f"program={self.program}", f"key_bits={self.key_bits}",
                 f"wrappers={','.join(self.wrappers)}",
                 f"blinding_modulus={self.blinding_modulus}",
                 f"blinding_prefix_len={self.blinding_prefix_len}",
                 f"oram_rate={self.oram_rate!r}",
                 f"noise_sigma={self.noise_sigma!r}",
                 f"seed={self.seed}",
                 f"fig1b_prefix_len={self.fig1b_prefix_len}",
                 f"fig1b_width_log2={self.fig1b_width_log2}",
                 f"fig1b_index_mode={self.fig1b_index_mode}"]
        return ";".join(parts)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


@dataclass
class GroundTruth:
    """Analytic leakage: totals and the per-source split.

    ``per_source_bits`` are expected attributed bits per trace (a source
    absent from a trace contributes zero for that trace), so they sum to
    ``total_bits``.  ``per_record_bits`` is the mean attribution per record
    occurrence of each source, the figure localization reports.
    """

    total_bits: float
    per_source_bits: dict[int, float]
    per_record_bits: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "total_bits": self.total_bits,
            "per_source_bits": {str(k): v for k, v in
                                sorted(self.per_source_bits.items())},
            "per_record_bits": {str(k): v for k, v in
                                sorted(self.per_record_bits.items())},
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        raw = json.loads(text)
        return cls(total_bits=raw["total_bits"],
                   per_source_bits={int(k): v for k, v in
                                    raw["per_source_bits"].items()},
                   per_record_bits={int(k): v for k, v in
                                    raw.get("per_record_bits", {}).items()})


def _run_rng(spec: WorkloadSpec, secret: Secret, run_index: int, salt: int):
    return np.random.default_rng(np.random.SeedSequence(
        entropy=[spec.seed, secret.to_int(), run_index, salt]))


def _bits_int(bits, lo, hi) -> int:
    value = 0
    for i in range(lo, hi):
        value |= bits[i] << (i - lo)
    return value


# ---------------------------------------------------------------------------
# Program bodies.

def _emit_fig3a(spec, secret, rng) -> list[Record]:
    k = secret.to_int()
    if k == 0:
        return [Record(address=_FIG3A_A, kind=KIND_DATA, source_id=1)]
    return [Record(address=_FIG3A_B, kind=KIND_DATA, source_id=2)]


def _emit_fig1a(spec, secret, rng) -> list[Record]:
    bits = secret.bits
    records = []
    for j in range(128):
        chunk = _bits_int(bits, 4 * j, 4 * j + 4)
        records.append(Record(address=_FIG1A_X + _STRIDE * (chunk % 4),
                              kind=KIND_DATA, source_id=1))
    for t in range(512):
        records.append(Record(address=_FIG1A_Y + _STRIDE * bits[512 + t],
                              kind=KIND_DATA, source_id=2))
    return records


def _fig1b_indices(spec: WorkloadSpec, secret: Secret) -> tuple[int, int]:
    half = spec.key_bits // 2
    lo = _bits_int(secret.bits, 0, half)
    hi = _bits_int(secret.bits, half, 2 * half)
    if spec.fig1b_index_mode == "popcount":
        return lo.bit_count(), hi.bit_count()
    size = 1 << spec.fig1b_width_log2
    return lo % size, hi % size


def _emit_fig1b(spec, secret, rng) -> list[Record]:
    if spec.fig1b_width_log2 > 32:
        raise ValueError("fig1b generation supports table widths up to 2**32")
    records = []
    prefix = rng.integers(0, 16, size=spec.fig1b_prefix_len)
    for r in prefix:
        records.append(Record(address=_FIG1B_PREFIX + _STRIDE * int(r),
                              kind=KIND_DATA, source_id=1))
    iy, iz = _fig1b_indices(spec, secret)
    records.append(Record(address=_FIG1B_Y + _STRIDE * iy, kind=KIND_DATA,
                          source_id=2))
    records.append(Record(address=_FIG1B_Z + _STRIDE * iz, kind=KIND_DATA,
                          source_id=3))
    return records


def _emit_aes_toy(spec, secret, rng) -> list[Record]:
    bits = secret.bits
    records = []
    for j in range(16):
        byte = _bits_int(bits, 8 * j, 8 * j + 8)
        records.append(Record(address=_AES_BASE + 256 * j + byte,
                              kind=KIND_DATA, source_id=j + 1))
    return records


def _emit_threshold_branch(spec, secret, rng) -> list[Record]:
    v = secret.to_int()
    if v <= 9:
        return [Record(address=_THRESH_NT, kind=KIND_BRANCH, source_id=1)]
    return [Record(address=_THRESH_TK, kind=KIND_BRANCH, source_id=1),
            Record(address=_THRESH_B2, kind=KIND_BRANCH, source_id=2)]


def _emit_lookup(spec, secret, rng) -> list[Record]:
    idx = secret.to_int()
    return [Record(address=_LOOKUP_BASE + _STRIDE * idx, kind=KIND_DATA,
                   source_id=1)]


_EMITTERS = {
    "fig3a": _emit_fig3a,
    "fig1a": _emit_fig1a,
    "fig1b": _emit_fig1b,
    "aes_toy": _emit_aes_toy,
    "threshold_branch": _emit_threshold_branch,
    "lookup": _emit_lookup,
}


def table_geometry(spec: WorkloadSpec) -> dict[int, tuple[int, int, int]]:
    """source_id -> (base address, entry stride, table size) for data tables."""
    if spec.program == "fig3a":
        return {1: (_FIG3A_A, _STRIDE, 1), 2: (_FIG3A_B, _STRIDE, 1)}
    if spec.program == "fig1a":
        return {1: (_FIG1A_X, _STRIDE, 4), 2: (_FIG1A_Y, _STRIDE, 2)}
    if spec.program == "fig1b":
        size = 1 << spec.fig1b_width_log2
        if spec.fig1b_index_mode == "popcount":
            size = spec.key_bits // 2 + 1
        return {1: (_FIG1B_PREFIX, _STRIDE, 16),
                2: (_FIG1B_Y, _STRIDE, size), 3: (_FIG1B_Z, _STRIDE, size)}
    if spec.program == "aes_toy":
        return {j + 1: (_AES_BASE + 256 * j, 1, 256) for j in range(16)}
    if spec.program == "threshold_branch":
        return {}
    if spec.program == "lookup":
        return {1: (_LOOKUP_BASE, _STRIDE, 1 << spec.key_bits)}
    raise ValueError(spec.program)


# ---------------------------------------------------------------------------
# Non-determinism wrappers.  Each is deterministic per (spec seed, secret,
# run_index); randomness streams are split per wrapper.

def wrap_blinding(records: list[Record], spec: WorkloadSpec, rng) -> list[Record]:
    """Mask table indices by a per-run random rotation, optionally prepending
    accesses driven by fresh randomness.  A fully blinded lookup observes
    (index + r) mod table_size, independent of the secret."""
    geometry = table_geometry(spec)
    out = []
    for t in range(spec.blinding_prefix_len):
        out.append(Record(address=_BLIND_PREFIX + _STRIDE * int(rng.integers(0, 16)),
                          kind=KIND_DATA, source_id=NOISE_SOURCE))
    rotations: dict[int, int] = {}
    for rec in records:
        geo = geometry.get(rec.source_id)
        if rec.kind != KIND_DATA or geo is None:
            out.append(rec)
            continue
        base, stride, size = geo
        modulus = spec.blinding_modulus or size
        if rec.source_id not in rotations:
            rotations[rec.source_id] = int(rng.integers(0, modulus))
        entry = (rec.address - base) // stride
        entry = (entry + rotations[rec.source_id]) % modulus
        out.append(Record(address=base + stride * entry, kind=rec.kind,
                          source_id=rec.source_id))
    return out


def wrap_oram_dummies(records: list[Record], spec: WorkloadSpec, rng) -> list[Record]:
    """Interleave secret-independent dummy accesses at the configured rate.

    ``rate`` is the expected fraction of dummies in the output (0.9 grows the
    trace roughly tenfold); rate 1.0 substitutes every record with a dummy.
    """
    def dummy() -> Record:
        return Record(address=_DUMMY_BASE + _STRIDE * int(rng.integers(0, 16)),
                      kind=KIND_DATA, source_id=NOISE_SOURCE)

    rate = spec.oram_rate
    if rate == 0.0:
        return records
    if rate == 1.0:
        return [dummy() for _ in records]
    out = []
    for rec in records:
        n_dummies = int(rng.geometric(1.0 - rate)) - 1
        out.extend(dummy() for _ in range(n_dummies))
        out.append(rec)
    return out


def wrap_noise(records: list[Record], spec: WorkloadSpec, rng) -> list[Record]:
    """Perturb line indices with rounded Gaussian noise and randomly
    drop/duplicate records (probability 0.01 * min(1, sigma) each)."""
    sigma = spec.noise_sigma
    if sigma == 0.0:
        return records
    p_edit = 0.01 * min(1.0, sigma)
    out = []
    for rec in records:
        u = rng.random()
        if u < p_edit:
            continue
        jitter = int(round(rng.normal(0.0, sigma)))
        unit = max(0, (rec.address >> 6) + jitter)
        noisy = Record(address=unit << 6, kind=rec.kind, source_id=rec.source_id)
        out.append(noisy)
        if u < 2 * p_edit:
            out.append(noisy)
    if not out:
        out.append(Record(address=_DUMMY_BASE, kind=KIND_DATA,
                          source_id=NOISE_SOURCE))
    return out


_WRAPPER_FNS = {"blinding": wrap_blinding, "oram_dummies": wrap_oram_dummies,
                "gaussian_noise": wrap_noise}


def run_workload(spec: WorkloadSpec, secret: Secret, run_index: int = 0) -> Trace:
    """Emit one trace for ``secret``; deterministic given (spec, secret,
    run_index).  Unwrapped programs ignore ``run_index`` entirely."""
    if len(secret) != spec.key_bits:
        raise KeyLengthMismatch(
            f"{spec.program} expects {spec.key_bits}-bit secrets, got {len(secret)}")
    records = _EMITTERS[spec.program](spec, secret,
                                      _run_rng(spec, secret, run_index, 0))
    for salt, name in enumerate(spec.wrappers, start=1):
        rng = _run_rng(spec, secret, run_index, salt)
        records = _WRAPPER_FNS[name](records, spec, rng)
    return Trace(records=records, secret_id=secret.to_hex(), run_index=run_index)


def sample_secret(spec: WorkloadSpec, rng) -> Secret:
    bits = tuple(int(b) for b in rng.integers(0, 2, size=spec.key_bits))
    return Secret(bits=bits)


def generate_corpus(spec: WorkloadSpec, n_secrets: int, runs_per_secret: int,
                    seed: int) -> tuple[list[Secret], list[Trace]]:
    """Sample independent-uniform secrets and emit their traces.

    Secrets use per-index derived seed streams, so the corpus is identical
    no matter how generation work is distributed; output order is fixed by
    secret index then run index.
    """
    if n_secrets < 1:
        raise ValueError("n_secrets must be >= 1")
    secrets = []
    traces = []
    for i in range(n_secrets):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=[seed, 0x5EC, i]))
        secret = sample_secret(spec, rng)
        secrets.append(secret)
        for run in range(runs_per_secret):
            traces.append(run_workload(spec, secret, run))
    return secrets, traces


def enumerate_secrets(spec: WorkloadSpec) -> list[Secret]:
    """All secrets of an enumerable key space (refuses above 2**20)."""
    if spec.key_bits > 20:
        raise NoAnalyticTruth(f"{spec.key_bits}-bit space is not enumerable")
    return [Secret.from_int(v, spec.key_bits) for v in range(1 << spec.key_bits)]


# ---------------------------------------------------------------------------
# Ground truth by enumeration.

def _entropy_bits(counts) -> float:
    total = float(sum(counts))
    h = 0.0
    for c in counts:
        if c:
            p = c / total
            h -= p * math.log2(p)
    return h


def _per_access_bits_fig1b(spec: WorkloadSpec) -> float:
    half = spec.key_bits // 2
    if spec.fig1b_index_mode == "value_mod":
        return float(min(spec.fig1b_width_log2, half))
    # Popcount index: entropy of Binomial(half, 1/2) from exact coefficients.
    weights = [math.comb(half, t) for t in range(half + 1)]
    return _entropy_bits(weights)


def _truth_by_program(spec: WorkloadSpec) -> GroundTruth:
    if spec.program == "fig3a":
        # One record per trace; o = table a iff k == 0.
        pmi_a = math.log2(4 / 1)
        pmi_b = math.log2(4 / 3)
        total = 0.25 * pmi_a + 0.75 * pmi_b
        return GroundTruth(total_bits=total,
                           per_source_bits={1: 0.25 * pmi_a, 2: 0.75 * pmi_b},
                           per_record_bits={1: pmi_a, 2: pmi_b})
    if spec.program == "fig1a":
        per_x = _entropy_bits([4] * 4)   # chunk mod 4 over 16 chunk values
        per_y = _entropy_bits([1, 1])    # one key bit per access
        return GroundTruth(total_bits=128 * per_x + 512 * per_y,
                           per_source_bits={1: 128 * per_x, 2: 512 * per_y},
                           per_record_bits={1: per_x, 2: per_y})
    if spec.program == "fig1b":
        per = _per_access_bits_fig1b(spec)
        return GroundTruth(total_bits=2 * per,
                           per_source_bits={1: 0.0, 2: per, 3: per},
                           per_record_bits={1: 0.0, 2: per, 3: per})
    if spec.program == "aes_toy":
        per = _entropy_bits([1] * 256)
        return GroundTruth(total_bits=16 * per,
                           per_source_bits={j + 1: per for j in range(16)},
                           per_record_bits={j + 1: per for j in range(16)})
    if spec.program == "threshold_branch":
        # 10 of 16 nibbles stop at branch 1; the rest also reach branch 2,
        # whose two records carry the same refinement and split it evenly.
        pmi_low = math.log2(16 / 10)
        pmi_high = math.log2(16 / 6)
        total = (10 / 16) * pmi_low + (6 / 16) * pmi_high
        return GroundTruth(
            total_bits=total,
            per_source_bits={1: (10 / 16) * pmi_low + (6 / 16) * pmi_high / 2,
                             2: (6 / 16) * pmi_high / 2},
            per_record_bits={1: (10 / 16) * pmi_low + (6 / 16) * pmi_high / 2,
                             2: pmi_high / 2})
    if spec.program == "lookup":
        per = float(spec.key_bits)
        return GroundTruth(total_bits=per, per_source_bits={1: per},
                           per_record_bits={1: per})
    raise ValueError(spec.program)


def ground_truth(spec: WorkloadSpec) -> GroundTruth:
    """Analytic total and per-source leakage for the configured workload.

    Raises :class:`NoAnalyticTruth` when a wrapper (noise, partial blinding)
    leaves no closed form.
    """
    truth = _truth_by_program(spec)
    for name in spec.wrappers:
        if name == "gaussian_noise" and spec.noise_sigma > 0:
            raise NoAnalyticTruth("no closed form under Gaussian noise")
        if name == "blinding":
            geometry = table_geometry(spec)
            for src, (_, _, size) in geometry.items():
                modulus = spec.blinding_modulus or size
                if modulus < size:
                    raise NoAnalyticTruth(
                        "partial blinding modulus has no closed form")
            # Full-table rotation makes every wrapped table access uniform
            # and secret-independent; single-access-per-source programs
            # therefore leak nothing through them.
            zeroed = {src: 0.0 for src in truth.per_source_bits}
            truth = GroundTruth(total_bits=0.0, per_source_bits=zeroed,
                                per_record_bits={s: 0.0 for s in
                                                 truth.per_record_bits})
            truth.per_source_bits[NOISE_SOURCE] = 0.0
            truth.per_record_bits[NOISE_SOURCE] = 0.0
        if name == "oram_dummies":
            if spec.oram_rate == 1.0:
                zeroed = {src: 0.0 for src in truth.per_source_bits}
                truth = GroundTruth(total_bits=0.0, per_source_bits=zeroed,
                                    per_record_bits={s: 0.0 for s in
                                                     truth.per_record_bits})
            truth.per_source_bits.setdefault(NOISE_SOURCE, 0.0)
            truth.per_record_bits.setdefault(NOISE_SOURCE, 0.0)
    return truth


# ---------------------------------------------------------------------------
# Corpus directory layout.

def write_corpus(directory: str, spec: WorkloadSpec, secrets: list[Secret],
                 traces: list[Trace], runs_per_secret: int) -> str:
    """Write secrets, traces and (when available) ground truth under
    ``directory/<spec-hash>/``; returns the corpus path."""
    corpus_dir = os.path.join(directory, spec.spec_hash())
    os.makedirs(corpus_dir, exist_ok=True)
    with open(os.path.join(corpus_dir, "secrets.txt"), "w", newline="") as fh:
        for s in secrets:
            fh.write(s.to_hex() + "\n")
    for i in range(len(secrets)):
        for run in range(runs_per_secret):
            trace = traces[i * runs_per_secret + run]
            path = os.path.join(corpus_dir, f"trace_{i}_{run}.txt")
            with open(path, "w", newline="") as fh:
                fh.write(dump_trace(trace))
    try:
        truth = ground_truth(spec)
        with open(os.path.join(corpus_dir, "ground_truth.json"), "w",
                  newline="") as fh:
            fh.write(truth.to_json() + "\n")
    except NoAnalyticTruth:
        pass
    with open(os.path.join(corpus_dir, "spec.txt"), "w", newline="") as fh:
        fh.write(spec.canonical() + "\n")
    return corpus_dir


def read_corpus(corpus_dir: str, spec: WorkloadSpec,
                runs_per_secret: int) -> tuple[list[Secret], list[Trace]]:
    with open(os.path.join(corpus_dir, "secrets.txt")) as fh:
        secrets = [Secret.from_hex(line.strip(), spec.key_bits)
                   for line in fh if line.strip()]
    traces = []
    for i in range(len(secrets)):
        for run in range(runs_per_secret):
            with open(os.path.join(corpus_dir, f"trace_{i}_{run}.txt")) as fh:
                traces.append(load_trace(fh.read()))
    return secrets, traces
