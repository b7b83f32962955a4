"""Deterministic human- and machine-readable reporting of run artifacts."""

from __future__ import annotations

import csv
import io
import json
import os

from .errors import MissingArtifacts

# Published reference figures for the canonical workloads, embedded in every
# report so regressions are visible next to fresh numbers.
REFERENCE_BITS = {
    "fig1a": {"total": 768.0, "per_point": {"1": 2.0, "2": 1.0}},
    "fig1b": {"total": 510.0, "per_point": {"2": 255.0, "3": 255.0}},
    "fig3a": {"total": 0.8112781244591328,
              "per_point": {"1": 2.0, "2": 0.4150374992788438}},
    "aes_toy": {"total": 128.0, "per_point": {"any": 8.0}},
    "threshold_branch": {"total": 0.9544340029249649,
                         "per_point": {"1": 0.6780719051126378,
                                       "2": 1.415037499278844}},
}


def _load_json(path: str):
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


def _find_ground_truth(out_dir: str):
    corpus_root = os.path.join(out_dir, "corpus")
    if not os.path.isdir(corpus_root):
        return None
    for name in sorted(os.listdir(corpus_root)):
        path = os.path.join(corpus_root, name, "ground_truth.json")
        if os.path.exists(path):
            return _load_json(path)
    return None


def _load_points(path: str):
    if not os.path.exists(path):
        return None
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh)]


def build_report(out_dir: str) -> dict:
    """Collect artifacts in ``out_dir`` into one report structure."""
    estimate = _load_json(os.path.join(out_dir, "estimate.json"))
    if estimate is None:
        raise MissingArtifacts(f"no estimate.json under {out_dir}")
    truth = _find_ground_truth(out_dir)
    attribution = _load_json(os.path.join(out_dir, "attribution.json"))
    points = _load_points(os.path.join(out_dir, "points.csv"))

    quant = {
        "mi_bits": estimate["mi_bits"],
        "leakage_ratio": estimate["leakage_ratio"],
        "n_traces": estimate["n_traces"],
        "debias_log_odds": estimate["debias_log_odds"],
        "config_hash": estimate["config_hash"],
        "ground_truth_bits": truth["total_bits"] if truth else None,
        "abs_error_bits": (abs(estimate["mi_bits"] - truth["total_bits"])
                           if truth else None),
    }
    report = {
        "quantification": quant,
        "localization": None,
        "axioms": None,
        "reference_values": REFERENCE_BITS,
        "warnings": [],
    }
    if attribution is not None:
        report["localization"] = {
            "n_traces": len(attribution),
            "all_converged": all(t["converged"] for t in attribution),
            "points": points or [],
        }
        report["axioms"] = [t["axioms"] for t in attribution]
    else:
        report["warnings"].append("no attribution artifacts; "
                                  "quantification-only report")
    return report


def render_markdown(report: dict) -> str:
    out = io.StringIO()
    q = report["quantification"]
    out.write("# leakq report\n\n")
    out.write(f"config hash: `{q['config_hash']}`\n\n")
    out.write("## Quantification\n\n")
    out.write(f"- leaked bits (MI): {q['mi_bits']}\n")
    out.write(f"- leakage ratio: {q['leakage_ratio']}\n")
    out.write(f"- traces evaluated: {q['n_traces']}\n")
    out.write(f"- de-bias log-odds: {q['debias_log_odds']}\n")
    if q["ground_truth_bits"] is not None:
        out.write(f"- analytic ground truth: {q['ground_truth_bits']}\n")
        out.write(f"- absolute error: {q['abs_error_bits']}\n")
    loc = report["localization"]
    if loc is not None:
        out.write("\n## Localization\n\n")
        out.write(f"- traces analyzed: {loc['n_traces']}\n")
        out.write(f"- all runs converged: {loc['all_converged']}\n\n")
        if loc["points"]:
            out.write("| rank | source_id | mean_bits | n_traces |\n")
            out.write("|---|---|---|---|\n")
            for row in loc["points"]:
                out.write(f"| {row['rank']} | {row['source_id']} | "
                          f"{row['mean_bits']} | {row['n_traces']} |\n")
    if report["axioms"]:
        out.write("\n## Axiom checks\n\n")
        out.write("| trace | efficiency_residual | efficiency_ok |\n")
        out.write("|---|---|---|\n")
        for i, ax in enumerate(report["axioms"]):
            out.write(f"| {i} | {ax['efficiency_residual']} | "
                      f"{ax['efficiency_ok']} |\n")
    out.write("\n## Reference values\n\n")
    out.write("| workload | published total bits |\n")
    out.write("|---|---|\n")
    for name, ref in report["reference_values"].items():
        out.write(f"| {name} | {ref['total']} |\n")
    for warning in report["warnings"]:
        out.write(f"\n> warning: {warning}\n")
    return out.getvalue()


def write_report(out_dir: str) -> None:
    report = build_report(out_dir)
    with open(os.path.join(out_dir, "report.json"), "w", newline="") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=1) + "\n")
    with open(os.path.join(out_dir, "report.md"), "w", newline="") as fh:
        fh.write(render_markdown(report))
