"""Exact discrete leakage estimation for enumerable secret spaces.

Joint counts over (secret value, observation value) give the point-wise
dependency directly; with a full enumeration of a deterministic workload the
figures are exact, which makes this the oracle the trained classifier is
validated against.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..errors import SpaceTooLarge
from ..trace import (CacheModel, FoldedTrace, Secret, Trace, fold_trace,
                     map_to_cache_units)
from ..workloads import WorkloadSpec, enumerate_secrets, run_workload
from .classifier import LeakageEstimate

ENUM_LIMIT = 10 ** 6


def observation_key(trace: Trace) -> tuple:
    return tuple((r.kind, r.address) for r in trace.records)


@dataclass
class ExactEstimator:
    """PD/PMI from joint occurrence counts of an enumerable corpus."""

    joint: Counter
    key_marginal: Counter
    obs_marginal: Counter
    total: int
    key_space_log2: float

    @classmethod
    def from_pairs(cls, pairs: list[tuple[int, tuple]],
                   key_space_log2: float) -> "ExactEstimator":
        joint = Counter(pairs)
        keys = Counter(k for k, _ in pairs)
        obs = Counter(o for _, o in pairs)
        if len(keys) * len(obs) > ENUM_LIMIT:
            raise SpaceTooLarge(
                f"{len(keys)} keys x {len(obs)} observations exceeds "
                f"{ENUM_LIMIT}")
        return cls(joint=joint, key_marginal=keys, obs_marginal=obs,
                   total=len(pairs), key_space_log2=key_space_log2)

    def pmi(self, key: int, obs: tuple) -> float:
        n_joint = self.joint.get((key, obs), 0)
        if n_joint == 0:
            return -math.inf
        p_joint = n_joint / self.total
        p_k = self.key_marginal[key] / self.total
        p_o = self.obs_marginal[obs] / self.total
        return math.log2(p_joint / (p_k * p_o))

    def mi(self) -> LeakageEstimate:
        pmis = []
        acc = 0.0
        for (k, o), n in sorted(self.joint.items()):
            value = self.pmi(k, o)
            weight = n / self.total
            acc += weight * value
            pmis.extend([value] * n)
        return LeakageEstimate(pmi_bits=pmis, mi_bits=acc,
                               leakage_ratio=acc / self.key_space_log2,
                               debias_log_odds=0.0, n_traces=self.total)


def exact_estimate(secrets: list[Secret], traces: list[Trace],
                   cache_model: CacheModel | None = None,
                   key_space_log2: float | None = None) -> ExactEstimator:
    """Exact estimator over an observed corpus (one trace per listed secret)."""
    if cache_model is None:
        cache_model = CacheModel()
    if key_space_log2 is None:
        key_space_log2 = secrets[0].key_space_log2
    pairs = [(s.to_int(), observation_key(map_to_cache_units(t, cache_model)))
             for s, t in zip(secrets, traces)]
    return ExactEstimator.from_pairs(pairs, key_space_log2)


def enumeration_estimator(spec: WorkloadSpec,
                          cache_model: CacheModel | None = None
                          ) -> ExactEstimator:
    """Exact estimator from the full key-space enumeration of a
    deterministic workload (uniform key prior)."""
    secrets = enumerate_secrets(spec)
    traces = [run_workload(spec, s, 0) for s in secrets]
    return exact_estimate(secrets, traces, cache_model)


class EnumPhi:
    """Coalition-value oracle from a key-space enumeration.

    Holds the folded cell grid of every key's (deterministic) trace; the
    value of a coalition is the exact point-wise leakage of the target's
    grid with non-coalition cells reset to the base sentinel 0.
    """

    def __init__(self, spec: WorkloadSpec, secret: Secret,
                 cache_model: CacheModel | None = None,
                 fold_shape: tuple[int, int, int] | None = None):
        if cache_model is None:
            cache_model = CacheModel()
        secrets = enumerate_secrets(spec)
        mapped = [map_to_cache_units(run_workload(spec, s, 0), cache_model)
                  for s in secrets]
        if fold_shape is None:
            side = max(len(t) for t in mapped)
            fold_shape = (side, 1, 1)
        folded = [fold_trace(t, fold_shape) for t in mapped]
        self.grids = np.stack([f.cells() for f in folded])
        self.target_index = secret.to_int()
        self.target = self.grids[self.target_index]
        self.n_records = folded[self.target_index].n_records
        self.folded = folded[self.target_index]
        self.key_space_log2 = secret.key_space_log2

    def phi(self, mask: np.ndarray) -> float:
        return float(self.phi_batch(mask[None, :])[0])

    def phi_batch(self, masks: np.ndarray) -> np.ndarray:
        """Leakage of each record-coalition mask (n_masks, n_records)."""
        n_keys = self.grids.shape[0]
        out = np.empty(masks.shape[0], dtype=np.float64)
        for i, mask in enumerate(masks):
            vis = np.zeros(self.grids.shape[1], dtype=bool)
            vis[:self.n_records] = mask.astype(bool)
            if not vis.any():
                out[i] = 0.0
                continue
            matches = np.all(self.grids[:, vis] == self.target[vis], axis=1)
            out[i] = math.log2(n_keys / int(matches.sum()))
        return out
