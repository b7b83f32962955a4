"""Run configuration: one INI-style file drives every command.

Sections and keys (all optional unless noted; defaults in parentheses):

    [workload]  program (required; fig1a|fig1b|fig3a|aes_toy|
                threshold_branch|lookup), key_bits (program default),
                wrappers (space-separated: blinding oram_dummies
                gaussian_noise), blinding_modulus (0 = full table),
                blinding_prefix_len (0), oram_rate (0.0), noise_sigma (0.0),
                fig1b_prefix_len (16), fig1b_width_log2 (8),
                fig1b_index_mode (value_mod|popcount)
    [corpus]    n_secrets (256), runs_per_secret (4),
                granularity (line|bank|raw; line)
    [pairs]     n_groups (2), fold_height/fold_width/fold_channels (0 = auto)
    [train]     learning_rate (0.0002), batch_size (256), epochs (50),
                clip_eps (1e-6), lr_decay (1.0), mask_augment_prob (0.5),
                hidden_units (32), weight_decay (0.0001)
    [estimate]  estimator (auto|exact|classifier; auto),
                debias (auto|on|off; auto)
    [shapley]   max_iterations (60), convergence_delta (0.5),
                prune_budget (512), prune_zero_tol (0.1),
                use_pruning (true), localize_traces (8)
    [run]       seed (0), out (out)

The config hash embedded in artifacts is a SHA-256 prefix of the canonical
key=value rendering, so identical configurations map to identical outputs.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError
from .estimators.network import TrainConfig
from .shapley import LocalizeOptions
from .trace import CacheGranularity, CacheModel
from .workloads import PROGRAMS, WRAPPERS, WorkloadSpec

_DEFAULTS = {
    "workload": {
        "program": "", "key_bits": "0", "wrappers": "",
        "blinding_modulus": "0", "blinding_prefix_len": "0",
        "oram_rate": "0.0", "noise_sigma": "0.0",
        "fig1b_prefix_len": "16", "fig1b_width_log2": "8",
        "fig1b_index_mode": "value_mod",
    },
    "corpus": {"n_secrets": "256", "runs_per_secret": "4",
               "granularity": "line"},
    "pairs": {"n_groups": "2", "fold_height": "0", "fold_width": "0",
              "fold_channels": "0"},
    "train": {"learning_rate": "0.0002", "batch_size": "256", "epochs": "50",
              "clip_eps": "1e-6", "lr_decay": "1.0",
              "mask_augment_prob": "0.5", "hidden_units": "32",
              "weight_decay": "0.0001"},
    "estimate": {"estimator": "auto", "debias": "auto"},
    "shapley": {"max_iterations": "60", "convergence_delta": "0.5",
                "prune_budget": "512", "prune_zero_tol": "0.1",
                "use_pruning": "true", "localize_traces": "8"},
    "run": {"seed": "0", "out": "out"},
}


@dataclass
class RunConfig:
    program: str
    key_bits: int
    wrappers: tuple[str, ...]
    blinding_modulus: int
    blinding_prefix_len: int
    oram_rate: float
    noise_sigma: float
    fig1b_prefix_len: int
    fig1b_width_log2: int
    fig1b_index_mode: str
    n_secrets: int
    runs_per_secret: int
    granularity: str
    n_groups: int
    fold_shape: tuple[int, int, int] | None
    train: TrainConfig
    estimator: str
    debias: str
    shapley: LocalizeOptions
    localize_traces: int
    seed: int
    out_dir: str

    def workload_spec(self) -> WorkloadSpec:
        return WorkloadSpec(
            program=self.program, key_bits=self.key_bits,
            wrappers=self.wrappers, blinding_modulus=self.blinding_modulus,
            blinding_prefix_len=self.blinding_prefix_len,
            oram_rate=self.oram_rate, noise_sigma=self.noise_sigma,
            seed=self.seed, fig1b_prefix_len=self.fig1b_prefix_len,
            fig1b_width_log2=self.fig1b_width_log2,
            fig1b_index_mode=self.fig1b_index_mode)

    def cache_model(self) -> CacheModel:
        return CacheModel(granularity=CacheGranularity(self.granularity))

    def is_deterministic_workload(self) -> bool:
        if "gaussian_noise" in self.wrappers and self.noise_sigma > 0:
            return False
        if "blinding" in self.wrappers or (
                "oram_dummies" in self.wrappers and self.oram_rate > 0):
            return False
        return True

    def canonical(self) -> str:
        lines = []
        for key in sorted(self.__dataclass_fields__):
            value = getattr(self, key)
            if isinstance(value, TrainConfig):
                for k in sorted(value.__dataclass_fields__):
                    lines.append(f"train.{k}={getattr(value, k)!r}")
            elif isinstance(value, LocalizeOptions):
                for k in sorted(value.__dataclass_fields__):
                    lines.append(f"shapley.{k}={getattr(value, k)!r}")
            else:
                lines.append(f"{key}={value!r}")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def _coerce(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}={raw!r}: expected {kind.__name__}") \
            from exc


def load_config(path: str, seed_override: int | None = None,
                out_override: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    values: dict[str, dict[str, str]] = {}
    for section, defaults in _DEFAULTS.items():
        values[section] = dict(defaults)
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ConfigError(f"unknown key [{section}] {key}")
                values[section][key] = raw
    for section in parser.sections():
        if section not in _DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")

    w = values["workload"]
    if not w["program"]:
        raise ConfigError("[workload] program is required")
    if w["program"] not in PROGRAMS:
        raise ConfigError(f"unknown program {w['program']!r}")
    wrappers = tuple(w["wrappers"].split())
    for name in wrappers:
        if name not in WRAPPERS:
            raise ConfigError(f"unknown wrapper {name!r}")

    c, p, t, e, s, r = (values["corpus"], values["pairs"], values["train"],
                        values["estimate"], values["shapley"], values["run"])
    if c["granularity"] not in ("line", "bank", "raw"):
        raise ConfigError(f"unknown granularity {c['granularity']!r}")
    if e["estimator"] not in ("auto", "exact", "classifier"):
        raise ConfigError(f"unknown estimator {e['estimator']!r}")
    if e["debias"] not in ("auto", "on", "off"):
        raise ConfigError(f"unknown debias mode {e['debias']!r}")

    seed = seed_override if seed_override is not None \
        else _coerce("run", "seed", r["seed"], int)
    fold = (_coerce("pairs", "fold_height", p["fold_height"], int),
            _coerce("pairs", "fold_width", p["fold_width"], int),
            _coerce("pairs", "fold_channels", p["fold_channels"], int))
    train = TrainConfig(
        learning_rate=_coerce("train", "learning_rate", t["learning_rate"], float),
        batch_size=_coerce("train", "batch_size", t["batch_size"], int),
        epochs=_coerce("train", "epochs", t["epochs"], int),
        clip_eps=_coerce("train", "clip_eps", t["clip_eps"], float),
        seed=seed,
        lr_decay=_coerce("train", "lr_decay", t["lr_decay"], float),
        mask_augment_prob=_coerce("train", "mask_augment_prob",
                                  t["mask_augment_prob"], float),
        hidden_units=_coerce("train", "hidden_units", t["hidden_units"], int),
        weight_decay=_coerce("train", "weight_decay", t["weight_decay"], float),
    )
    shapley = LocalizeOptions(
        max_iterations=_coerce("shapley", "max_iterations",
                               s["max_iterations"], int),
        convergence_delta=_coerce("shapley", "convergence_delta",
                                  s["convergence_delta"], float),
        prune_budget=_coerce("shapley", "prune_budget", s["prune_budget"], int),
        prune_zero_tol=_coerce("shapley", "prune_zero_tol",
                               s["prune_zero_tol"], float),
        use_pruning=_coerce("shapley", "use_pruning", s["use_pruning"], bool),
        seed=seed,
    )
    try:
        cfg = RunConfig(
            program=w["program"],
            key_bits=_coerce("workload", "key_bits", w["key_bits"], int),
            wrappers=wrappers,
            blinding_modulus=_coerce("workload", "blinding_modulus",
                                     w["blinding_modulus"], int),
            blinding_prefix_len=_coerce("workload", "blinding_prefix_len",
                                        w["blinding_prefix_len"], int),
            oram_rate=_coerce("workload", "oram_rate", w["oram_rate"], float),
            noise_sigma=_coerce("workload", "noise_sigma", w["noise_sigma"],
                                float),
            fig1b_prefix_len=_coerce("workload", "fig1b_prefix_len",
                                     w["fig1b_prefix_len"], int),
            fig1b_width_log2=_coerce("workload", "fig1b_width_log2",
                                     w["fig1b_width_log2"], int),
            fig1b_index_mode=w["fig1b_index_mode"],
            n_secrets=_coerce("corpus", "n_secrets", c["n_secrets"], int),
            runs_per_secret=_coerce("corpus", "runs_per_secret",
                                    c["runs_per_secret"], int),
            granularity=c["granularity"],
            n_groups=_coerce("pairs", "n_groups", p["n_groups"], int),
            fold_shape=fold if all(x > 0 for x in fold) else None,
            train=train,
            estimator=e["estimator"],
            debias=e["debias"],
            shapley=shapley,
            localize_traces=_coerce("shapley", "localize_traces",
                                    s["localize_traces"], int),
            seed=seed,
            out_dir=out_override if out_override is not None else r["out"],
        )
        cfg.workload_spec()  # validate program/key_bits combination
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
