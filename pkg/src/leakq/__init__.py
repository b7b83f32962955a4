"""leakq: quantify and localize secret leakage in side-channel traces.

The toolkit measures how many bits of a secret an attacker could learn from
logged cache-access traces, by training a classifier to tell co-occurring
(secret, trace) pairs from independent recombinations, and apportions the
leaked bits to individual records and program points with optimized Shapley
values.  Synthetic workloads with analytically known leakage provide the
ground truth everything is validated against.
"""

from .errors import LeakqError
from .trace import (CacheGranularity, CacheModel, FoldedTrace, PairDataset,
                    Record, Secret, Trace, fold_trace, make_pairs,
                    map_to_cache_units, unfold_trace)
from .workloads import GroundTruth, WorkloadSpec, generate_corpus, ground_truth, run_workload

__version__ = "0.1.0"
