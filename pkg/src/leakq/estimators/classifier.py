"""Trainable conditional-probability estimator and leakage figures.

The classifier scores how plausibly a (secret, trace) pair co-occurred
versus being an independent recombination.  With balanced positive/negative
training, its raw log-odds converge to the log point-wise dependency of the
pair, which is the per-trace leakage in bits once clamped to the key size;
program-level leakage is the mean over co-occurring pairs.  For
non-deterministic traces, a held-out odds correction removes
distinguishability that does not generalize (randomness, memorization).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import (EmptyDataset, MissingHoldout, NonFiniteLoss,
                      ShapeMismatch)
from ..trace import FoldedTrace, PairDataset, Secret
from .network import (Adam, Arch, PairNet, TrainConfig,
                      apply_mask_augmentation, bootstrap_gates,
                      calibrate_tables, featurize, load_net, save_net)

LN2 = math.log(2.0)

# Log2-odds are clipped to this magnitude before exponentiation when
# averaging odds for the de-bias term.
_ODDS_CLIP_BITS = 60.0


@dataclass
class LeakageEstimate:
    """Per-trace and program-level leakage in bits."""

    pmi_bits: list[float]
    mi_bits: float
    leakage_ratio: float
    debias_log_odds: float
    n_traces: int

    def to_json(self, config_hash: str = "") -> str:
        payload = {
            "mi_bits": self.mi_bits,
            "leakage_ratio": self.leakage_ratio,
            "pmi_per_trace": self.pmi_bits,
            "debias_log_odds": self.debias_log_odds,
            "n_traces": self.n_traces,
            "config_hash": config_hash,
        }
        return json.dumps(payload, sort_keys=True, indent=1)


class ClassifierModel:
    """Frozen pair classifier plus the metadata needed to evaluate it."""

    def __init__(self, net: PairNet, fold_shape: tuple[int, int, int],
                 key_space_log2: float, train_config: TrainConfig):
        self.net = net
        self.fold_shape = tuple(fold_shape)
        self.key_space_log2 = float(key_space_log2)
        self.train_config = train_config
        self._f64: dict[str, np.ndarray] | None = None

    @property
    def key_bits(self) -> int:
        return self.net.arch.key_bits

    @property
    def n_cells(self) -> int:
        return self.net.arch.n_cells

    def _check(self, secret_bits: np.ndarray, cells: np.ndarray) -> None:
        if secret_bits.shape[-1] != self.key_bits:
            raise ShapeMismatch(
                f"model expects {self.key_bits}-bit secrets, "
                f"got {secret_bits.shape[-1]}")
        if cells.shape[-1] != self.n_cells:
            raise ShapeMismatch(
                f"model expects {self.n_cells} cells, got {cells.shape[-1]}")

    def _eval_net(self) -> PairNet:
        # Frozen-model evaluation runs in float64 so batched and per-pair
        # calls agree to well under the contract tolerance.
        if self._f64 is None:
            self._f64 = {k: v.astype(np.float64) for k, v in
                         self.net.params.items()}
        net = PairNet.__new__(PairNet)
        net.arch = self.net.arch
        net.params = self._f64
        return net

    def invalidate_cache(self) -> None:
        self._f64 = None

    def log2_odds_batch(self, secret_bits: np.ndarray,
                        cells: np.ndarray) -> np.ndarray:
        """Raw pair log-odds in bits for (n, key_bits) x (n, cells) arrays."""
        self._check(secret_bits, cells)
        feats = featurize(cells, self.net.arch.n_planes).astype(np.float64)
        z = self._eval_net().logit(secret_bits.astype(np.float64), feats)
        return z / LN2

    def log2_odds(self, secret: Secret, folded: FoldedTrace) -> float:
        return float(self.log2_odds_batch(secret.bit_array()[None, :],
                                          folded.cells()[None, :])[0])

    def cell_gradients(self, secret: Secret, cells: np.ndarray) -> np.ndarray:
        """|d logit / d cell| scores used for gradient pruning."""
        feats = featurize(cells[None, :], self.net.arch.n_planes)
        k = secret.bit_array()[None, :].astype(np.float32)
        return self.net.input_gradient(k, feats)[0]


def pair_arrays(pairs: list[tuple[Secret, FoldedTrace]]):
    k = np.stack([s.bit_array() for s, _ in pairs]).astype(np.float32)
    cells = np.stack([f.cells() for _, f in pairs])
    return k, cells


def train_classifier(dataset: PairDataset, config: TrainConfig | None = None,
                     log_fn=None) -> ClassifierModel:
    """Fit the pair classifier on a labeled dataset.

    Mini-batch Adam on the joint and per-channel binary cross-entropies;
    deterministic for a fixed config seed on one worker.  Raises
    :class:`EmptyDataset` without both pair polarities and
    :class:`NonFiniteLoss` if the loss leaves the reals.
    """
    if config is None:
        config = TrainConfig()
    if not dataset.positives or not dataset.negatives:
        raise EmptyDataset("training needs at least one positive and one "
                           "negative pair")
    key_bits = len(dataset.positives[0][0])
    k_pos, c_pos = pair_arrays(dataset.positives)
    k_neg, c_neg = pair_arrays(dataset.negatives)
    keys = np.concatenate([k_pos, k_neg], axis=0)
    cells = np.concatenate([c_pos, c_neg], axis=0)
    labels = np.concatenate([np.ones(len(k_pos)), np.zeros(len(k_neg))])
    labels = labels.astype(np.float32)

    max_unit = int(cells.max(initial=1))
    n_planes = max(1, (max_unit - 1).bit_length()) if max_unit > 1 else 1
    arch = Arch(n_cells=cells.shape[1], n_planes=n_planes, key_bits=key_bits,
                hidden_units=config.hidden_units)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed))
    net = PairNet(arch, rng)
    sgd_group = ("code_w", "code_b", "gate_w", "gate_b")
    enc_group = ("enc_w", "enc_b")
    adam_params = {k: v for k, v in net.params.items()
                   if k not in sgd_group + enc_group}
    opt = Adam(adam_params, beta1=config.beta1, beta2=config.beta2)

    n = len(labels)
    lr = config.learning_rate
    code_lr = config.code_lr
    table_from = int(config.epochs * config.table_warmup)
    gate_from = int(config.epochs * config.gate_warmup)
    average_from = int(config.epochs * (1.0 - config.tail_average))
    averaged: dict[str, np.ndarray] = {}
    n_averaged = 0
    first_loss = None
    for epoch in range(config.epochs):
        if epoch == gate_from:
            bootstrap_gates(net)
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_cells, clean = apply_mask_augmentation(
                cells[idx], config.mask_augment_prob, rng)
            feats = featurize(batch_cells, n_planes)
            grads, loss = net.train_batch(keys[idx], feats, labels[idx], rng,
                                          table_weight=clean)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged at epoch {epoch}")
            if epoch < table_from:
                grads["table"][:] = 0.0
            if epoch < gate_from:
                grads["gate_w"][:] = 0.0
                grads["gate_b"][:] = 0.0
            opt.step(adam_params,
                     {k: g for k, g in grads.items() if k in adam_params},
                     lr, weight_decay=config.weight_decay,
                     decayed=("fc1_w", "fc1_b", "fc2_w", "fc2_b"))
            for name in sgd_group:
                net.params[name] -= (code_lr * grads[name]).astype(np.float32)
            for name in enc_group:
                net.params[name] -= (code_lr * config.encoder_lr_scale
                                     * grads[name]).astype(np.float32)
            np.clip(net.params["table"], -config.table_clip,
                    config.table_clip, out=net.params["table"])
            epoch_loss += loss
            n_batches += 1
        epoch_loss /= max(1, n_batches)
        if first_loss is None:
            first_loss = epoch_loss
        if log_fn is not None:
            log_fn(epoch, epoch_loss)
        lr *= config.lr_decay
        code_lr *= config.lr_decay
        if config.tail_average > 0 and epoch >= average_from:
            n_averaged += 1
            for name, value in net.params.items():
                if name not in averaged:
                    averaged[name] = value.astype(np.float64)
                else:
                    averaged[name] += value
    if n_averaged:
        for name, acc in averaged.items():
            net.params[name] = (acc / n_averaged).astype(net.params[name].dtype)
    calibrate_tables(net, keys, featurize(cells, n_planes), labels,
                     clip=config.table_clip)

    secret = dataset.positives[0][0]
    return ClassifierModel(net, dataset.fold_shape, secret.key_space_log2,
                           config)


def predict_cp(model: ClassifierModel, secret: Secret, folded: FoldedTrace,
               key_prior: bool = False) -> float:
    """Conditional probability that the pair co-occurred.

    The default is the balanced-pool posterior the classifier was trained
    for (0.5 means chance).  ``key_prior=True`` re-weights the prior odds by
    1/|K|, the calibration under which the leakage formula
    ``log2(|K| * F / (1 - F))`` reproduces the pair's leaked bits.
    """
    bits = model.log2_odds(secret, folded)
    if key_prior:
        bits -= model.key_space_log2
    eps = model.train_config.clip_eps
    prob = 0.5 * (1.0 + math.tanh(0.5 * bits * LN2))
    return min(max(prob, eps), 1.0 - eps)


def pmi(model: ClassifierModel, secret: Secret, folded: FoldedTrace,
        key_space_log2: float | None = None) -> float:
    """Point-wise leaked bits of one pair, clamped to [0, key bits]."""
    if key_space_log2 is None:
        key_space_log2 = model.key_space_log2
    return _clamp_bits(model.log2_odds(secret, folded), key_space_log2)


def _clamp_bits(bits: float, key_space_log2: float) -> float:
    return float(min(max(bits, 0.0), key_space_log2))


def mi(model: ClassifierModel, positives: list[tuple[Secret, FoldedTrace]],
       debias_log_odds: float = 0.0) -> LeakageEstimate:
    """Program-level leakage: mean per-pair leaked bits over positives."""
    if not positives:
        raise EmptyDataset("mi needs at least one positive pair")
    k, cells = pair_arrays(positives)
    bits = model.log2_odds_batch(k, cells) - debias_log_odds
    L = model.key_space_log2
    pmis = [float(min(max(b, 0.0), L)) for b in bits]
    mi_bits = float(np.mean(pmis))
    return LeakageEstimate(pmi_bits=pmis, mi_bits=mi_bits,
                           leakage_ratio=mi_bits / L,
                           debias_log_odds=debias_log_odds,
                           n_traces=len(pmis))


def debias_term(model: ClassifierModel,
                heldout_negatives: list[tuple[Secret, FoldedTrace]]) -> float:
    """Log2 of the mean held-out recombination odds.

    A classifier that memorized non-generalizable structure keeps a shifted
    base rate on unseen pairs; subtracting this term recenters unseen pair
    odds at 1 (Bayes-optimal recombination odds average to exactly 1).
    """
    if not heldout_negatives:
        raise MissingHoldout("de-biasing needs held-out negative pairs")
    k, cells = pair_arrays(heldout_negatives)
    bits = model.log2_odds_batch(k, cells)
    odds = np.exp2(np.clip(bits, -_ODDS_CLIP_BITS, _ODDS_CLIP_BITS))
    return float(np.log2(np.mean(odds)))


def debiased_pmi(model: ClassifierModel, secret: Secret, folded: FoldedTrace,
                 heldout_positives: list[tuple[Secret, FoldedTrace]],
                 heldout_negatives: list[tuple[Secret, FoldedTrace]],
                 key_space_log2: float | None = None) -> float:
    """Per-pair leaked bits after the held-out odds correction.

    ``heldout_positives`` are the pairs program-level estimates should be
    averaged over (see :func:`debiased_mi`); the correction itself comes
    from the held-out negatives.
    """
    if key_space_log2 is None:
        key_space_log2 = model.key_space_log2
    correction = debias_term(model, heldout_negatives)
    return _clamp_bits(model.log2_odds(secret, folded) - correction,
                       key_space_log2)


def debiased_mi(model: ClassifierModel, heldout: PairDataset) -> LeakageEstimate:
    """Program-level de-biased leakage over a held-out group."""
    if not heldout.positives:
        raise EmptyDataset("debiased mi needs held-out positives")
    correction = debias_term(model, heldout.negatives)
    return mi(model, heldout.positives, debias_log_odds=correction)


def save_model(model: ClassifierModel, path: str) -> None:
    meta = {
        "fold_shape": list(model.fold_shape),
        "key_space_log2": model.key_space_log2,
        "train_config": model.train_config.to_dict(),
    }
    save_net(model.net, meta, path)


def load_model(path: str) -> ClassifierModel:
    net, meta = load_net(path)
    return ClassifierModel(net, tuple(meta["fold_shape"]),
                           meta["key_space_log2"],
                           TrainConfig.from_dict(meta["train_config"]))
