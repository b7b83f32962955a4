"""Command-line entry point: generate, quantify, localize, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 the run
finished with a non-convergence warning (artifacts are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import estimators, shapley, workloads
from .config import RunConfig, load_config
from .errors import ConfigError, LeakqError, MissingArtifacts
from .estimators.classifier import load_model, save_model
from .estimators.network import load_net
from .report import write_report
from .trace import make_pairs

log = logging.getLogger("leakq")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_UNCONVERGED = 4


def worker_cap() -> int:
    """Parallelism cap from LEAKQ_WORKERS (all work is vectorized in one
    process, so the cap is an upper bound, not a target)."""
    raw = os.environ.get("LEAKQ_WORKERS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"LEAKQ_WORKERS={raw!r} is not an integer") from exc
    if cap < 1:
        raise ConfigError("LEAKQ_WORKERS must be >= 1")
    return cap


def _corpus_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.out_dir, "corpus", cfg.workload_spec().spec_hash())


def _ensure_corpus(cfg: RunConfig) -> str:
    spec = cfg.workload_spec()
    corpus_dir = _corpus_dir(cfg)
    if os.path.exists(os.path.join(corpus_dir, "secrets.txt")):
        return corpus_dir
    log.info("generating corpus: %s x %d secrets", spec.program, cfg.n_secrets)
    secrets, traces = workloads.generate_corpus(spec, cfg.n_secrets,
                                                cfg.runs_per_secret, cfg.seed)
    workloads.write_corpus(os.path.join(cfg.out_dir, "corpus"), spec, secrets,
                           traces, cfg.runs_per_secret)
    return corpus_dir


def _dataset(cfg: RunConfig, corpus_dir: str):
    spec = cfg.workload_spec()
    secrets, traces = workloads.read_corpus(corpus_dir, spec,
                                            cfg.runs_per_secret)
    return make_pairs(secrets, traces, runs_per_secret=cfg.runs_per_secret,
                      seed=cfg.seed, cache_model=cfg.cache_model(),
                      fold_shape=cfg.fold_shape, n_groups=cfg.n_groups)


def _train_split(cfg: RunConfig, dataset):
    if cfg.n_groups >= 2:
        return dataset.group(0), dataset.group(1)
    return dataset, dataset


def _model_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.out_dir, "model.bin")


def _train_or_load(cfg: RunConfig, dataset):
    path = _model_path(cfg)
    if os.path.exists(path):
        try:
            _, meta = load_net(path)
            if meta.get("config_hash") == cfg.config_hash():
                log.info("reusing trained model %s", path)
                return load_model(path)
        except (ValueError, KeyError):
            pass
    train_ds, _ = _train_split(cfg, dataset)
    log.info("training classifier on %d pairs", 2 * len(train_ds.positives))
    model = estimators.train_classifier(
        train_ds, cfg.train,
        log_fn=lambda e, loss: log.info("epoch %d loss %.4f", e, loss))
    meta = {"fold_shape": list(model.fold_shape),
            "key_space_log2": model.key_space_log2,
            "train_config": model.train_config.to_dict(),
            "config_hash": cfg.config_hash()}
    from .estimators.network import save_net
    save_net(model.net, meta, path)
    return model


def _should_use_exact(cfg: RunConfig) -> bool:
    if cfg.estimator == "exact":
        return True
    if cfg.estimator == "classifier":
        return False
    return cfg.key_bits <= 20 and cfg.is_deterministic_workload()


def cmd_generate(cfg: RunConfig) -> int:
    corpus_dir = _ensure_corpus(cfg)
    print(corpus_dir)
    return EXIT_OK


def cmd_quantify(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    _ensure_corpus(cfg)
    if _should_use_exact(cfg):
        log.info("exact enumeration estimator")
        estimate = estimators.enumeration_estimator(
            cfg.workload_spec(), cfg.cache_model()).mi()
    else:
        dataset = _dataset(cfg, _corpus_dir(cfg))
        model = _train_or_load(cfg, dataset)
        _, eval_ds = _train_split(cfg, dataset)
        debias_on = (cfg.debias == "on" or
                     (cfg.debias == "auto" and not cfg.is_deterministic_workload()))
        if debias_on:
            estimate = estimators.debiased_mi(model, eval_ds)
        else:
            estimate = estimators.mi(model, eval_ds.positives)
    path = os.path.join(cfg.out_dir, "estimate.json")
    with open(path, "w", newline="") as fh:
        fh.write(estimate.to_json(config_hash=cfg.config_hash()) + "\n")
    print(path)
    return EXIT_OK


def cmd_localize(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    _ensure_corpus(cfg)
    dataset = _dataset(cfg, _corpus_dir(cfg))
    model = _train_or_load(cfg, dataset)
    _, eval_ds = _train_split(cfg, dataset)
    pairs = list(zip(range(len(eval_ds.positives)), eval_ds.positives))
    pairs = pairs[:cfg.localize_traces]
    result = shapley.localize([p for _, p in pairs], model, cfg.shapley)

    artifacts = []
    for (pair_idx, (secret, folded)), trace_result in zip(pairs,
                                                          result.per_trace):
        oracle = shapley.ClassifierPhi(model, secret, folded)
        axioms = shapley.axiom_suite(oracle, trace_result, exact=False)
        artifacts.append({
            "trace_id": f"trace_{pair_idx}",
            "per_record_bits": trace_result.per_record_bits,
            "per_source_bits": {str(k): v for k, v in
                                sorted(trace_result.per_source_bits.items())},
            "iterations_used": trace_result.iterations_used,
            "converged": trace_result.converged,
            "max_adjacent_delta": trace_result.max_adjacent_delta,
            "axioms": axioms.as_dict(),
        })
    with open(os.path.join(cfg.out_dir, "attribution.json"), "w",
              newline="") as fh:
        fh.write(json.dumps(artifacts, sort_keys=True, indent=1) + "\n")
    with open(os.path.join(cfg.out_dir, "points.csv"), "w", newline="") as fh:
        fh.write("source_id,mean_bits,n_traces,rank\n")
        for src, mean_bits, n_traces, rank in result.as_rows():
            fh.write(f"{src},{mean_bits!r},{n_traces},{rank}\n")
    print(os.path.join(cfg.out_dir, "attribution.json"))
    if not all(t.converged for t in result.per_trace):
        log.warning("some attribution runs did not converge")
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_report(cfg_or_dir) -> int:
    out_dir = cfg_or_dir if isinstance(cfg_or_dir, str) else cfg_or_dir.out_dir
    write_report(out_dir)
    print(os.path.join(out_dir, "report.md"))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="leakq",
        description="Quantify and localize side-channel secret leakage on "
                    "synthetic workloads.")
    parser.add_argument("command",
                        choices=["generate", "quantify", "localize", "report"])
    parser.add_argument("--config", required=False,
                        help="run configuration file (INI)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override [run] seed")
    parser.add_argument("--out", default=None, help="override [run] out dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    try:
        worker_cap()
        if args.command == "report" and args.config is None:
            if args.out is None:
                raise ConfigError("report needs --config or --out")
            return cmd_report(args.out)
        if args.config is None:
            raise ConfigError("--config is required")
        cfg = load_config(args.config, seed_override=args.seed,
                          out_override=args.out)
        handler = {"generate": cmd_generate, "quantify": cmd_quantify,
                   "localize": cmd_localize, "report": cmd_report}[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifacts as exc:
        print(f"missing artifacts: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LeakqError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
