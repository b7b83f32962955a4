"""Numeric core of the pair classifier: layers, gradients and Adam.

The network scores a (secret, folded trace) pair with the log-odds that the
pair co-occurred rather than being an independent recombination.  It is a
three-part pipeline:

* encoder: fixed bit-plane expansion of the cell grid followed by a 1x1
  convolution-style mixing layer shared across cells;
* compressor: per-key-bit sigmoid code over the encoder features, binarized
  by Bernoulli sampling during training (straight-through gradient);
* head: per-key-bit evidence tables scaled by a learned visibility gate,
  summed into the pair logit, plus a small fully-connected residual for
  cross-bit structure.

The per-channel tables are trained with their own binary cross-entropy, so
each stays a calibrated (bounded) log-likelihood-ratio even when the joint
logit is far into saturation; the total therefore tracks hundreds of bits
where a monolithic head would stall near the float saturation of a single
sigmoid.  Training randomly masks cells so that the network learns that an
absent cell carries no evidence, which is what coalition-masked evaluation
relies on.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteLoss

F32 = np.float32


@dataclass
class TrainConfig:
    learning_rate: float = 0.0002
    batch_size: int = 256
    epochs: int = 50
    clip_eps: float = 1e-6
    seed: int = 0
    lr_decay: float = 1.0           # per-epoch multiplicative decay
    mask_augment_prob: float = 0.5  # fraction of samples trained with masks
    hidden_units: int = 32
    weight_decay: float = 1e-4      # decoupled, residual head only
    beta1: float = 0.9
    beta2: float = 0.999
    # Code/gate matrices train with plain SGD: their signal is sparse and
    # Adam's per-parameter normalization inflates the many near-zero-gradient
    # weights into a random walk at learning-rate scale.  The encoder uses
    # the same SGD at a reduced rate.
    code_lr: float = 0.2
    encoder_lr_scale: float = 0.1
    # Per-channel evidence bound in nats; strata never seen under one label
    # would otherwise drift without limit.
    table_clip: float = 10.0
    # Fractions of epochs with evidence tables / visibility gates frozen at
    # their oriented init.  While frozen, the per-channel loss reduces to
    # "make the code track the key bit"; unfreezing then calibrates tables
    # to each channel's achieved quality.  Gates unfreeze last: trained too
    # early they collapse on still-unaligned codes and kill the gradient.
    table_warmup: float = 0.4
    gate_warmup: float = 0.7
    # Average parameters over the final fraction of epochs.  Adam dithers
    # irrelevant weights in a random walk at the learning-rate scale, which
    # caps per-channel code accuracy; the tail average cancels it.
    tail_average: float = 0.25

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__ if k in raw})


@dataclass
class Arch:
    n_cells: int
    n_planes: int        # bit planes per cell, presence plane excluded
    key_bits: int
    hidden_units: int

    @property
    def cell_features(self) -> int:
        return self.n_planes + 1

    @property
    def encoder_out(self) -> int:
        return self.n_cells * self.cell_features


def featurize(cells: np.ndarray, n_planes: int) -> np.ndarray:
    """Cell grid (n, cells) of sentinel-coded units -> (n, cells, planes+1).

    Plane 0 is presence; the rest are the bit planes of the stored unit.
    Masked/padding cells (value 0) featurize to all zeros.
    """
    present = cells > 0
    vals = np.where(present, cells - 1, 0).astype(np.int64)
    n, c = cells.shape
    out = np.zeros((n, c, n_planes + 1), dtype=F32)
    out[:, :, 0] = present
    for p in range(n_planes):
        out[:, :, p + 1] = (vals >> p) & 1
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class PairNet:
    """Parameter container with forward/backward passes (see module doc)."""

    def __init__(self, arch: Arch, rng: np.random.Generator):
        self.arch = arch
        p = arch.cell_features
        eye = np.zeros((p, p), dtype=F32)
        np.fill_diagonal(eye, 1.0)
        e, L, h = arch.encoder_out, arch.key_bits, arch.hidden_units
        self.params: dict[str, np.ndarray] = {
            "enc_w": eye + rng.normal(0, 0.01, size=(p, p)).astype(F32),
            "enc_b": np.zeros(p, dtype=F32),
            "code_w": rng.normal(0, 0.01, size=(e, L)).astype(F32),
            "code_b": np.zeros(L, dtype=F32),
            "gate_w": rng.normal(0, 0.01, size=(e, L)).astype(F32),
            "gate_b": np.full(L, 2.0, dtype=F32),
            # Evidence per (key bit, code bit), indexed by 2*k + b.  Starts
            # agreement-oriented: a zero init would leave the code weights
            # without any gradient (their signal flows through the table
            # asymmetry), stalling training at the symmetric saddle.
            "table": np.tile(np.array([0.5, -0.5, -0.5, 0.5], dtype=F32),
                             (L, 1)),
            "fc1_w": rng.normal(0, 0.05, size=(2 * L, h)).astype(F32),
            "fc1_b": np.zeros(h, dtype=F32),
            "fc2_w": np.zeros((h, 1), dtype=F32),
            "fc2_b": np.zeros(1, dtype=F32),
        }

    # -- shared encoder/compressor trunk ------------------------------------

    def _trunk(self, feats: np.ndarray):
        p = self.params
        pre = feats @ p["enc_w"] + p["enc_b"]
        act = np.maximum(pre, 0.0)
        flat = act.reshape(feats.shape[0], -1)
        code_logit = flat @ p["code_w"] + p["code_b"]
        gate_logit = flat @ p["gate_w"] + p["gate_b"]
        return pre, act, flat, code_logit, gate_logit

    def _gather_table(self, k_bits: np.ndarray):
        tab = self.params["table"]
        idx = np.arange(self.arch.key_bits)
        t0 = tab[idx, (2 * k_bits.astype(np.int64))]      # b = 0
        t1 = tab[idx, (2 * k_bits.astype(np.int64)) + 1]  # b = 1
        return t0, t1

    # -- evaluation ----------------------------------------------------------

    # Gates below this level count as closed at evaluation so that masked
    # cells contribute exactly zero evidence.
    GATE_FLOOR = 0.25

    def logit(self, k_bits: np.ndarray, feats: np.ndarray) -> np.ndarray:
        """Deterministic pair logit.

        The code commits to its rounded bits (the saturated limit of the
        Bernoulli sampling used in training) and each channel contributes
        its gated evidence-table entry; the visibility-weighted residual
        adds the cross-bit correction.
        """
        p = self.params
        _, _, _, code_logit, gate_logit = self._trunk(feats)
        q = _sigmoid(code_logit)
        gate = _sigmoid(gate_logit)
        gate = np.where(gate > self.GATE_FLOOR, gate, 0.0)
        t0, t1 = self._gather_table(k_bits)
        committed = q >= 0.5
        evidence = gate * np.where(committed, t1, t0)
        xm = np.concatenate([k_bits, q], axis=1)
        hidden = np.maximum(xm @ p["fc1_w"] + p["fc1_b"], 0.0)
        resid = (hidden @ p["fc2_w"]).reshape(-1) + p["fc2_b"][0]
        # The cross-bit correction is weighted by the visible-cell fraction:
        # a fully masked trace must score exactly like an empty one.
        resid = resid * feats[:, :, 0].mean(axis=1)
        return np.sum(evidence, axis=1, dtype=np.float64) + resid.astype(np.float64)

    def input_gradient(self, k_bits: np.ndarray, feats: np.ndarray) -> np.ndarray:
        """d logit / d features, per cell: (n, cells) sum of |grad| over the
        cell's feature planes, used to rank records for pruning.  The
        committed code is piecewise constant, so the smooth pre-rounding
        surrogate (expected evidence) stands in for it.
        """
        p = self.params
        pre, act, flat, code_logit, gate_logit = self._trunk(feats)
        q = _sigmoid(code_logit)
        gate = _sigmoid(gate_logit)
        t0, t1 = self._gather_table(k_bits)

        frac = feats[:, :, 0].mean(axis=1)
        xm = np.concatenate([k_bits, q], axis=1)
        hpre = xm @ p["fc1_w"] + p["fc1_b"]
        hidden = np.maximum(hpre, 0.0)
        dhid = frac[:, None] * np.broadcast_to(p["fc2_w"].reshape(1, -1),
                                               hidden.shape)
        dhid = dhid.copy()
        dhid[hpre <= 0] = 0.0
        dxm = dhid @ p["fc1_w"].T
        dq = gate * (t1 - t0) + dxm[:, self.arch.key_bits:]
        dgate = q * t1 + (1.0 - q) * t0
        dcode_logit = dq * q * (1.0 - q)
        dgate_logit = dgate * gate * (1.0 - gate)
        dflat = dcode_logit @ p["code_w"].T + dgate_logit @ p["gate_w"].T
        dact = dflat.reshape(act.shape)
        dact[pre <= 0] = 0.0
        dfeats = dact @ p["enc_w"].T
        # The residual's visibility weighting contributes to the presence
        # plane of every cell.
        mlp_out = (hidden @ p["fc2_w"]).reshape(-1) + p["fc2_b"][0]
        dfeats[:, :, 0] += (mlp_out / self.arch.n_cells)[:, None]
        return np.sum(np.abs(dfeats), axis=2)

    # -- training ------------------------------------------------------------

    def train_batch(self, k_bits: np.ndarray, feats: np.ndarray,
                    labels: np.ndarray, rng: np.random.Generator,
                    table_weight: np.ndarray | None = None):
        """One forward/backward pass; returns (grads, joint loss).

        ``table_weight`` restricts table calibration to a sample subset
        (mask-augmented samples train the code and gates but would dilute
        the clean-trace evidence calibration).

        The code probability trains on the Bernoulli code in expectation
        (closed form for a 2-point distribution), so its gradient is exact
        and matches evaluation; training it on sampled bits leaves a
        persistent (1 - q) fraction of sign-flipped gradients that caps the
        code accuracy well below the separable optimum.  Tables and gates
        calibrate on the sampled two-point strata instead: fitting them
        through the interpolated logit lets the never-co-occurring stratum
        run away and drag the other entry off calibration.  The cross-bit
        residual head reads the code probabilities, identical to evaluation.
        """
        p = self.params
        n = feats.shape[0]
        L = self.arch.key_bits
        pre, act, flat, code_logit, gate_logit = self._trunk(feats)
        q = _sigmoid(code_logit)
        gate = _sigmoid(gate_logit)
        bern = (rng.random(q.shape) < q).astype(F32)

        kid = k_bits.astype(np.int64)
        code = 2 * kid + bern.astype(np.int64)
        idx = np.arange(L)
        tab = p["table"]
        t0 = tab[idx, 2 * kid]
        t1 = tab[idx, 2 * kid + 1]
        t_sel = tab[idx, code]
        expected_t = q * t1 + (1.0 - q) * t0
        evidence = gate * expected_t

        xm = np.concatenate([k_bits, q], axis=1)
        hpre = xm @ p["fc1_w"] + p["fc1_b"]
        hidden = np.maximum(hpre, 0.0)
        frac = feats[:, :, 0].mean(axis=1)
        resid = ((hidden @ p["fc2_w"]).reshape(-1) + p["fc2_b"][0]) * frac
        z = evidence.sum(axis=1) + resid

        prob = _sigmoid(z)
        y = labels
        # The joint BCE trains only the residual head; the evidence path
        # (tables, gates, code, encoder) trains on per-channel BCEs so each
        # channel stays a calibrated log-likelihood-ratio instead of being
        # dragged by the saturating (and initially noisy) joint gradient.
        dz = (prob - y) / n
        dev_exp = (_sigmoid(evidence) - y[:, None]) / n
        dev_smp = (_sigmoid(gate * t_sel) - y[:, None]) / n

        grads = {}
        dtab = np.zeros_like(tab)
        dev_smp_gate = dev_smp * gate
        dev_tab = dev_smp_gate if table_weight is None \
            else dev_smp_gate * table_weight[:, None]
        for c in range(4):
            dtab[:, c] = np.sum(dev_tab * (code == c), axis=0)
        grads["table"] = dtab

        dgate = dev_smp * t_sel
        dq = dev_exp * gate * (t1 - t0)

        dresid = dz * frac
        grads["fc2_w"] = hidden.T @ dresid[:, None]
        grads["fc2_b"] = np.array([dresid.sum()], dtype=F32)
        dhid = dresid[:, None] @ p["fc2_w"].T
        dhid[hpre <= 0] = 0.0
        grads["fc1_w"] = xm.T @ dhid
        grads["fc1_b"] = dhid.sum(axis=0)

        dcode_logit = dq * q * (1.0 - q)
        dgate_logit = dgate * gate * (1.0 - gate)
        grads["code_w"] = flat.T @ dcode_logit
        grads["code_b"] = dcode_logit.sum(axis=0)
        grads["gate_w"] = flat.T @ dgate_logit
        grads["gate_b"] = dgate_logit.sum(axis=0)

        dflat = dcode_logit @ p["code_w"].T + dgate_logit @ p["gate_w"].T
        dact = dflat.reshape(act.shape)
        dact[pre <= 0] = 0.0
        nc = act.shape[0] * act.shape[1]
        grads["enc_w"] = feats.reshape(nc, -1).T @ dact.reshape(nc, -1)
        grads["enc_b"] = dact.reshape(nc, -1).sum(axis=0)

        eps = 1e-12
        probc = np.clip(prob.astype(np.float64), eps, 1 - eps)
        y64 = y.astype(np.float64)
        loss = float(-np.mean(y64 * np.log(probc)
                              + (1 - y64) * np.log(1 - probc)))
        return grads, loss


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float = 0.0,
             decayed: tuple[str, ...] = ()) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] -= (lr * update).astype(params[name].dtype)
            if weight_decay and name in decayed:
                params[name] -= (lr * weight_decay) * params[name]


def bootstrap_gates(net: PairNet, swing: float = 8.0) -> None:
    """Re-derive gate weights from the code's learned cell attribution.

    Each channel's gate logit becomes ``swing/2`` when every cell it reads
    is present and falls by the channel's (sharpened, normalized) reading
    mass on a cell when that cell is masked.  This replaces the cold random
    gate init at unfreeze time; gates keep training afterwards.
    """
    arch = net.arch
    p = arch.cell_features
    mass = np.abs(net.params["code_w"]).reshape(arch.n_cells, p, -1).sum(axis=1)
    mass = np.square(mass)  # sharpen toward the dominant cell
    total = mass.sum(axis=0, keepdims=True)
    total[total == 0] = 1.0
    share = mass / total  # (cells, channels)
    gate_w = np.zeros_like(net.params["gate_w"])
    gate_w.reshape(arch.n_cells, p, -1)[:, 0, :] = swing * share
    net.params["gate_w"] = gate_w.astype(F32)
    net.params["gate_b"] = np.full(arch.key_bits, -swing / 2.0, dtype=F32)


def calibrate_tables(net: PairNet, k_bits: np.ndarray, feats: np.ndarray,
                     labels: np.ndarray, clip: float,
                     smoothing: float = 0.5) -> None:
    """Closed-form final calibration of the evidence tables.

    Replaces the trained tables with exactly-counted per-stratum
    log-likelihood-ratios of the committed (rounded) code on clean traces,
    so the summed evidence is calibrated by construction instead of relying
    on the stochastic-training equilibrium.  Additive smoothing plus the
    clip bound never-observed strata.
    """
    _, _, _, code_logit, gate_logit = net._trunk(feats)
    committed = code_logit >= 0.0
    gate = _sigmoid(gate_logit)
    kid = k_bits.astype(np.int64)
    L = net.arch.key_bits
    tab = np.zeros((L, 4), dtype=np.float64)
    pos = labels > 0.5
    counts = {}
    for y, sel_y in ((1, pos), (0, ~pos)):
        for kv in (0, 1):
            sel = sel_y[:, None] & (kid == kv)
            counts[(y, kv, 1)] = np.sum(committed & sel, axis=0)
            counts[(y, kv, 0)] = np.sum(~committed & sel, axis=0)
    for kv in (0, 1):
        for b in (0, 1):
            ratio = ((counts[(1, kv, b)] + smoothing)
                     / (counts[(0, kv, b)] + smoothing))
            tab[:, 2 * kv + b] = np.log(ratio)
    # Evidence is gate * T; divide out each channel's typical open-gate
    # level so the calibrated log-ratio survives the gating.
    open_gate = np.maximum(gate.mean(axis=0), 0.05)
    tab /= open_gate[:, None]
    np.clip(tab, -clip, clip, out=tab)
    net.params["table"] = tab.astype(F32)


def apply_mask_augmentation(cells: np.ndarray, prob: float,
                            rng: np.random.Generator):
    """Zero random cell subsets of random density for a subset of samples.

    Returns the augmented cells and a per-sample clean flag (1.0 for
    samples left untouched).
    """
    n, c = cells.shape
    if prob <= 0.0:
        return cells, np.ones(n, dtype=F32)
    chosen = rng.random(n) < prob
    density = rng.random(n)
    # A slice of fully-masked samples anchors the empty-trace behavior
    # (chance output), which coalition evaluation relies on.
    density = np.where(rng.random(n) < 0.1, 1.0, density)
    drops = rng.random((n, c)) <= density[:, None]
    drops &= chosen[:, None]
    return np.where(drops, 0, cells), (~chosen).astype(F32)


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON manifest line, then the parameters as a flat
# little-endian float32 array in manifest order.

CHECKPOINT_MAGIC = "leakq-model"


def save_net(net: PairNet, meta: dict, path: str) -> None:
    order = sorted(net.params)
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "arch": {"n_cells": net.arch.n_cells, "n_planes": net.arch.n_planes,
                 "key_bits": net.arch.key_bits,
                 "hidden_units": net.arch.hidden_units},
        "params": [[name, list(net.params[name].shape)] for name in order],
        "meta": meta,
    }
    blob = io.BytesIO()
    for name in order:
        blob.write(net.params[name].astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        fh.write(blob.getvalue())


def load_net(path: str) -> tuple[PairNet, dict]:
    with open(path, "rb") as fh:
        header = fh.readline()
        manifest = json.loads(header.decode())
        if manifest.get("format") != CHECKPOINT_MAGIC:
            raise ValueError("not a leakq model checkpoint")
        raw = fh.read()
    arch = Arch(**manifest["arch"])
    net = PairNet(arch, np.random.default_rng(0))
    offset = 0
    flat = np.frombuffer(raw, dtype="<f4")
    for name, shape in manifest["params"]:
        size = int(np.prod(shape)) if shape else 1
        net.params[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise ValueError("checkpoint parameter payload size mismatch")
    return net, manifest["meta"]
