"""Apportioning a trace's leaked bits across records and program points.

Leakage over one trace is treated as a cooperative game among its records:
a coalition's value is the leakage of the trace with all other records reset
to the base sentinel.  Exact Shapley values enumerate every coalition; the
permutation-sampling approximation updates running means from incremental
prefix evaluations and stops early once the values settle.  Gradient-ranked
pruning removes records whose joint removal leaves no leakage, and all
coalition evaluations funnel through a batched oracle call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TraceTooLong
from .estimators.classifier import ClassifierModel
from .trace import FoldedTrace, Secret

EXACT_LIMIT = 20


# ---------------------------------------------------------------------------
# Coalition-value oracles.  An oracle exposes ``n_records``, ``phi(mask)``
# and ``phi_batch(masks)`` where a mask marks the involved records; the base
# value of a removed record is the 0 sentinel.

class GameOracle:
    """Mixin providing scalar phi and call accounting over ``phi_batch``."""

    n_records: int
    source_ids: tuple[int, ...] = ()

    def __init__(self):
        self.batched_calls = 0

    def phi(self, mask: np.ndarray) -> float:
        return float(self.phi_batch(np.asarray(mask, dtype=bool)[None, :])[0])

    def phi_batch(self, masks: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grand_value(self) -> float:
        return self.phi(np.ones(self.n_records, dtype=bool))

    def empty_value(self) -> float:
        return self.phi(np.zeros(self.n_records, dtype=bool))


class ClassifierPhi(GameOracle):
    """Game over a trace whose value is the classifier's clamped leakage."""

    _CHUNK_CELLS = 8_000_000

    def __init__(self, model: ClassifierModel, secret: Secret,
                 folded: FoldedTrace):
        super().__init__()
        self.model = model
        self.secret = secret
        self.folded = folded
        self.n_records = folded.n_records
        self.source_ids = folded.source_ids
        self._cells = folded.cells()
        self._kbits = secret.bit_array()[None, :]
        self.key_space_log2 = secret.key_space_log2

    def phi_batch(self, masks: np.ndarray) -> np.ndarray:
        self.batched_calls += 1
        masks = np.asarray(masks, dtype=bool)
        n = masks.shape[0]
        grids = np.zeros((n, self._cells.size), dtype=self._cells.dtype)
        grids[:, :self.n_records] = np.where(masks, self._cells[:self.n_records],
                                             0)
        out = np.empty(n, dtype=np.float64)
        rows = max(1, self._CHUNK_CELLS // max(1, self._cells.size))
        for start in range(0, n, rows):
            chunk = grids[start:start + rows]
            k = np.repeat(self._kbits, chunk.shape[0], axis=0)
            bits = self.model.log2_odds_batch(k, chunk)
            out[start:start + rows] = np.clip(bits, 0.0, self.key_space_log2)
        return out

    def record_gradients(self) -> np.ndarray:
        scores = self.model.cell_gradients(self.secret, self._cells)
        return scores[:self.n_records]


class EnumOracleAdapter(GameOracle):
    """Adapts :class:`leakq.estimators.EnumPhi` to the game interface."""

    def __init__(self, enum_phi):
        super().__init__()
        self.enum = enum_phi
        self.n_records = enum_phi.n_records
        self.source_ids = enum_phi.folded.source_ids

    def phi_batch(self, masks: np.ndarray) -> np.ndarray:
        self.batched_calls += 1
        return self.enum.phi_batch(np.asarray(masks, dtype=bool))


class SyntheticGame(GameOracle):
    """Additive-plus-pairwise game with a closed-form Shapley solution.

    value(S) = sum_i w_i + sum_{i<j in S} y_ij, so the exact attribution is
    w_i + sum_j y_ij / 2.  Used by the axiom suite and as an independent
    oracle in tests.
    """

    def __init__(self, weights: np.ndarray, synergy: np.ndarray | None = None):
        super().__init__()
        self.weights = np.asarray(weights, dtype=np.float64)
        n = self.weights.size
        self.n_records = n
        if synergy is None:
            synergy = np.zeros((n, n))
        self.synergy = np.triu(np.asarray(synergy, dtype=np.float64), k=1)

    def phi_batch(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.float64)
        lin = masks @ self.weights
        inter = np.einsum("ni,ij,nj->n", masks, self.synergy, masks)
        return lin + inter

    def closed_form_shapley(self) -> np.ndarray:
        pair = self.synergy + self.synergy.T
        return self.weights + 0.5 * pair.sum(axis=1)


class SumGame(GameOracle):
    """Pointwise sum of two games over the same record set."""

    def __init__(self, left: GameOracle, right: GameOracle):
        super().__init__()
        if left.n_records != right.n_records:
            raise ValueError("games must share the record set")
        self.left, self.right = left, right
        self.n_records = left.n_records
        self.source_ids = left.source_ids

    def phi_batch(self, masks: np.ndarray) -> np.ndarray:
        return self.left.phi_batch(masks) + self.right.phi_batch(masks)


def batched_phi(oracle: GameOracle, masks) -> np.ndarray:
    """Evaluate a list of coalition masks in one oracle call."""
    return oracle.phi_batch(np.asarray(masks, dtype=bool))


# ---------------------------------------------------------------------------
# Results.

@dataclass
class AttributionResult:
    per_record_bits: list[float]
    per_source_bits: dict[int, float]
    iterations_used: int
    converged: bool
    max_adjacent_delta: float
    variance_estimates: list[float] = field(default_factory=list)
    marginal_ranges: list[tuple[float, float]] = field(default_factory=list)
    pruned_records: list[int] = field(default_factory=list)
    grand_value: float = 0.0
    empty_value: float = 0.0

    @property
    def total_bits(self) -> float:
        return float(sum(self.per_record_bits))

    def efficiency_residual(self) -> float:
        return self.total_bits - (self.grand_value - self.empty_value)


def _per_source(per_record: np.ndarray, source_ids) -> dict[int, float]:
    out: dict[int, float] = {}
    if not source_ids:
        return out
    for bits, src in zip(per_record, source_ids):
        out[src] = out.get(src, 0.0) + float(bits)
    return out


# ---------------------------------------------------------------------------
# Exact enumeration.

def exact_shapley(oracle: GameOracle,
                  return_coalition_values: bool = False):
    """Shapley values by full coalition enumeration (2**n oracle calls).

    Raises :class:`TraceTooLong` above 20 records.  Optionally returns the
    complete coalition-value table for axiom verification.
    """
    n = oracle.n_records
    if n > EXACT_LIMIT:
        raise TraceTooLong(f"{n} records exceed the exact limit {EXACT_LIMIT}")
    n_masks = 1 << n
    codes = np.arange(n_masks, dtype=np.uint32)
    masks = ((codes[:, None] >> np.arange(n, dtype=np.uint32)) & 1).astype(bool)
    values = oracle.phi_batch(masks)

    sizes = masks.sum(axis=1)
    # weight(|S|) = |S|! (n - |S| - 1)! / n!
    n_fact = math.factorial(n)
    weights = np.array([math.factorial(s) * math.factorial(n - 1 - s) / n_fact
                        for s in range(n)])

    per_record = np.zeros(n)
    for i in range(n):
        without = (codes >> i) & 1 == 0
        s_codes = codes[without]
        w = weights[sizes[without]]
        per_record[i] = np.sum(w * (values[s_codes | (1 << i)] - values[s_codes]))

    result = AttributionResult(
        per_record_bits=[float(b) for b in per_record],
        per_source_bits=_per_source(per_record, oracle.source_ids),
        iterations_used=n_masks,
        converged=True,
        max_adjacent_delta=0.0,
        variance_estimates=[0.0] * n,
        grand_value=float(values[-1]),
        empty_value=float(values[0]),
    )
    if return_coalition_values:
        return result, values
    return result


# ---------------------------------------------------------------------------
# Permutation sampling.

def sampled_shapley(oracle: GameOracle, max_iterations: int = 200,
                    convergence_delta: float = 0.5, seed: int = 0,
                    convergence_window: int = 3,
                    active: np.ndarray | None = None) -> AttributionResult:
    """Monte Carlo Shapley values from sampled involvement orders.

    Each iteration draws one permutation and involves records in that order;
    the n+1 prefix evaluations yield every record's marginal contribution
    for that permutation.  All planned prefix coalitions are evaluated in a
    single batched oracle call and running means are then updated in
    iteration order, so results do not depend on how the oracle parallelizes
    the batch.  Stops once the largest mean update stays below
    ``convergence_delta`` for ``convergence_window`` consecutive iterations.

    ``active`` restricts play to a record subset (pruned records stay at the
    base value and receive exactly 0).
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    n = oracle.n_records
    if active is None:
        active = np.ones(n, dtype=bool)
    active_idx = np.flatnonzero(active)
    na = active_idx.size
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    perms = np.stack([rng.permutation(na) for _ in range(max_iterations)]) \
        if na else np.zeros((max_iterations, 0), dtype=int)

    masks = np.zeros((max_iterations * (na + 1), n), dtype=bool)
    for t in range(max_iterations):
        base_row = t * (na + 1)
        mask = np.zeros(n, dtype=bool)
        for j in range(na):
            masks[base_row + j] = mask
            mask[active_idx[perms[t, j]]] = True
        masks[base_row + na] = mask
    values = oracle.phi_batch(masks)

    means = np.zeros(n)
    m2 = np.zeros(n)
    mg_min = np.full(n, np.inf)
    mg_max = np.full(n, -np.inf)
    consecutive = 0
    converged = False
    delta = math.inf
    iterations = 0
    for t in range(max_iterations):
        base_row = t * (na + 1)
        prev_means = means.copy()
        row_vals = values[base_row:base_row + na + 1]
        marginals = row_vals[1:] - row_vals[:-1]
        record_order = active_idx[perms[t]]
        k = t + 1
        means[record_order] += (marginals - means[record_order]) / k
        m2[record_order] += ((marginals - prev_means[record_order])
                             * (marginals - means[record_order]))
        np.minimum.at(mg_min, record_order, marginals)
        np.maximum.at(mg_max, record_order, marginals)
        iterations = k
        if k >= 2:
            delta = float(np.max(np.abs(means - prev_means))) if n else 0.0
            if delta < convergence_delta:
                consecutive += 1
                if consecutive >= convergence_window:
                    converged = True
                    break
            else:
                consecutive = 0

    means[~active] = 0.0
    var_of_mean = np.zeros(n)
    if iterations >= 2:
        var_of_mean[active] = (m2[active] / iterations) / iterations
    ranges = [(float(lo), float(hi)) if np.isfinite(lo) else (0.0, 0.0)
              for lo, hi in zip(mg_min, mg_max)]
    return AttributionResult(
        per_record_bits=[float(b) for b in means],
        per_source_bits=_per_source(means, oracle.source_ids),
        iterations_used=iterations,
        converged=converged,
        max_adjacent_delta=float(delta) if math.isfinite(delta) else 0.0,
        variance_estimates=[float(v) for v in var_of_mean],
        marginal_ranges=ranges,
        grand_value=float(values[-1] if na == n else oracle.grand_value()),
        empty_value=float(values[0]),
    )


# ---------------------------------------------------------------------------
# Gradient pruning.

@dataclass
class PruneResult:
    survivors: list[int]
    pruned: list[int]
    phi_without_survivors: float
    budget_exceeded: bool


def prune_null_players(oracle: ClassifierPhi, budget: int = 512,
                       zero_tol: float = 0.1) -> PruneResult:
    """Keep the shortest gradient-ranked record prefix whose removal drives
    the leakage to (near) zero; everything outside it is a null player
    within tolerance.

    Requires a differentiable oracle.  When even ``budget`` removals leave
    residual leakage, the top-``budget`` records survive and the result is
    flagged ``budget_exceeded``.
    """
    n = oracle.n_records
    scores = oracle.record_gradients()
    order = np.argsort(-scores, kind="stable")  # ties break by record index
    budget = min(budget, n)

    def residual(j: int) -> float:
        mask = np.ones(n, dtype=bool)
        mask[order[:j]] = False
        return oracle.phi(mask)

    # Geometric ladder, then bisect inside the bracket.  Residual leakage is
    # treated as non-increasing along the ranked prefix.
    lo, hi = 0, None
    j = 1
    while j <= budget:
        if residual(j) <= zero_tol:
            hi = j
            break
        lo = j
        j *= 2
    if hi is None:
        if residual(budget) <= zero_tol:
            hi = budget
        else:
            return PruneResult(survivors=[int(i) for i in order[:budget]],
                               pruned=[int(i) for i in order[budget:]],
                               phi_without_survivors=residual(budget),
                               budget_exceeded=True)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if residual(mid) <= zero_tol:
            hi = mid
        else:
            lo = mid
    survivors = [int(i) for i in order[:hi]]
    return PruneResult(survivors=survivors,
                       pruned=[int(i) for i in order[hi:]],
                       phi_without_survivors=residual(hi),
                       budget_exceeded=False)


# ---------------------------------------------------------------------------
# Localization across traces.

@dataclass
class LocalizeOptions:
    max_iterations: int = 60
    convergence_delta: float = 0.5
    prune_budget: int = 512
    prune_zero_tol: float = 0.1
    use_pruning: bool = True
    seed: int = 0


@dataclass
class SourceStat:
    source_id: int
    mean_bits: float
    n_records: int
    n_traces: int


@dataclass
class LocalizeResult:
    per_trace: list[AttributionResult]
    ranked_points: list[SourceStat]

    def as_rows(self) -> list[tuple[int, float, int, int]]:
        return [(s.source_id, s.mean_bits, s.n_traces, rank + 1)
                for rank, s in enumerate(self.ranked_points)]


def localize(pairs: list[tuple[Secret, FoldedTrace]], model: ClassifierModel,
             options: LocalizeOptions | None = None) -> LocalizeResult:
    """Prune, sample Shapley values per trace, and aggregate per program
    point (mean attributed bits per record occurrence across traces)."""
    if options is None:
        options = LocalizeOptions()
    if not pairs:
        raise ValueError("localize needs at least one trace")
    per_trace = []
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    trace_seen: dict[int, int] = {}
    for t_idx, (secret, folded) in enumerate(pairs):
        oracle = ClassifierPhi(model, secret, folded)
        active = np.ones(oracle.n_records, dtype=bool)
        pruned: list[int] = []
        if options.use_pruning:
            pr = prune_null_players(oracle, budget=options.prune_budget,
                                    zero_tol=options.prune_zero_tol)
            active = np.zeros(oracle.n_records, dtype=bool)
            active[pr.survivors] = True
            pruned = pr.pruned
        result = sampled_shapley(oracle,
                                 max_iterations=options.max_iterations,
                                 convergence_delta=options.convergence_delta,
                                 seed=options.seed + t_idx,
                                 active=active)
        result.pruned_records = pruned
        per_trace.append(result)
        present = set()
        for bits, src in zip(result.per_record_bits, folded.source_ids):
            sums[src] = sums.get(src, 0.0) + bits
            counts[src] = counts.get(src, 0) + 1
            present.add(src)
        for src in present:
            trace_seen[src] = trace_seen.get(src, 0) + 1
    stats = [SourceStat(source_id=src, mean_bits=sums[src] / counts[src],
                        n_records=counts[src], n_traces=trace_seen[src])
             for src in sums]
    stats.sort(key=lambda s: (-s.mean_bits, s.source_id))
    return LocalizeResult(per_trace=per_trace, ranked_points=stats)


# ---------------------------------------------------------------------------
# Error analysis and the axiom suite.

@dataclass
class VarianceRow:
    record: int
    variance_of_mean: float
    bound: float
    within_bound: bool


def variance_report(result: AttributionResult) -> list[VarianceRow]:
    """Per-record sampling variance against the spread bound.

    The bound is (max - min)**2 / 4 over the observed marginal
    contributions, which the population variance can never exceed.
    """
    rows = []
    for i, (var, (lo, hi)) in enumerate(zip(result.variance_estimates,
                                            result.marginal_ranges)):
        bound = (hi - lo) ** 2 / 4.0
        sample_var = var * max(result.iterations_used, 1)
        rows.append(VarianceRow(record=i, variance_of_mean=var, bound=bound,
                                within_bound=sample_var <= bound + 1e-12))
    return rows


@dataclass
class AxiomReport:
    efficiency_residual: float
    efficiency_ok: bool
    null_ok: bool | None
    dummy_ok: bool | None
    symmetry_ok: bool | None
    linearity_residual: float | None
    notes: str = ("uniqueness follows from efficiency, symmetry, dummy and "
                  "linearity and is not separately tested")

    def as_dict(self) -> dict:
        return {
            "efficiency_residual": self.efficiency_residual,
            "efficiency_ok": self.efficiency_ok,
            "null_ok": self.null_ok,
            "dummy_ok": self.dummy_ok,
            "symmetry_ok": self.symmetry_ok,
            "linearity_residual": self.linearity_residual,
            "notes": self.notes,
        }


def _subset_codes_without(n: int, i: int) -> np.ndarray:
    codes = np.arange(1 << n, dtype=np.uint32)
    return codes[(codes >> i) & 1 == 0]


def axiom_suite(oracle: GameOracle, result: AttributionResult,
                coalition_values: np.ndarray | None = None,
                exact: bool = True, linearity_seed: int = 0) -> AxiomReport:
    """Check the attribution against the Shapley axioms.

    Efficiency is always checked.  Null, dummy and symmetry need the full
    coalition table (pass ``coalition_values`` from ``exact_shapley``);
    linearity composes the game with a seeded additive game and compares
    attributions, and runs only in exact mode within the enumeration limit.
    """
    n = oracle.n_records
    phi_span = result.grand_value - result.empty_value
    residual = result.efficiency_residual()
    if exact:
        eff_tol = max(1e-9, 1e-9 * abs(phi_span))
    else:
        eff_tol = max(0.02 * abs(phi_span), 1e-6)
    report = AxiomReport(efficiency_residual=float(residual),
                         efficiency_ok=bool(abs(residual) <= eff_tol),
                         null_ok=None, dummy_ok=None, symmetry_ok=None,
                         linearity_residual=None)
    pi = np.array(result.per_record_bits)

    if coalition_values is not None and n <= EXACT_LIMIT:
        v = coalition_values
        null_ok = True
        dummy_ok = True
        for i in range(n):
            s = _subset_codes_without(n, i)
            deltas = v[s | (1 << i)] - v[s]
            solo = v[1 << i] - v[0]
            if np.all(np.abs(deltas) <= 1e-12):
                null_ok &= pi[i] == 0.0 or abs(pi[i]) <= 1e-12
            if np.all(np.abs(deltas - solo) <= 1e-12):
                dummy_ok &= abs(pi[i] - solo) <= 1e-9
        sym_ok = True
        for i in range(n):
            for j in range(i + 1, n):
                s = _subset_codes_without(n, i)
                s = s[(s >> j) & 1 == 0]
                if np.all(np.abs(v[s | (1 << i)] - v[s | (1 << j)]) <= 1e-12):
                    sym_ok &= abs(pi[i] - pi[j]) <= 1e-9
        report.null_ok = bool(null_ok)
        report.dummy_ok = bool(dummy_ok)
        report.symmetry_ok = bool(sym_ok)

    if exact and n <= EXACT_LIMIT:
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=linearity_seed))
        extra = SyntheticGame(weights=rng.uniform(0.0, 1.0, size=n))
        combined = exact_shapley(SumGame(oracle, extra))
        expected = pi + extra.closed_form_shapley()
        report.linearity_residual = float(np.max(np.abs(
            np.array(combined.per_record_bits) - expected)))
    return report
