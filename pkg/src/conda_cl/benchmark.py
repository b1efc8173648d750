"""Desk-scale continual benchmark: likelihood-regularised adaptation vs naive fine-tuning.

For every seed the source segmenter and the flow are trained once; both arms
then adapt the same starting point through all targets in order, and every
domain's validation split is scored after every stage.
"""

import dataclasses
import logging
import time

import numpy as np

from .adaptation import init_teacher
from .config import PipelineConfig
from .datagen import class_fractions
from .flow import dequantize, log_prob
from .metrics import forgetting_report
from .pipeline import (adapt_stage, adapted_at, evaluate_all, fit_flow, fit_source,
                       generate_datasets, make_vault, uniform_simplex_maps)
from .rng import Rng

logger = logging.getLogger(__name__)


def flow_sanity(cfg, flow, vault, rng):
    """Mean flow log-likelihood of held-out source maps vs uniform simplex maps."""
    ds = vault.datasets[(vault.source, "val")]
    held = dequantize(ds.labels, cfg.classes, cfg.flow.label_smoothing, cfg.flow.dequant_delta, rng)
    noise = uniform_simplex_maps(len(ds), cfg.classes, *cfg.image_size, rng)
    lp_held = float(np.mean(log_prob(held, flow).value))
    lp_noise = float(np.mean(log_prob(noise, flow).value))
    return {"held_out": lp_held, "uniform": lp_noise, "margin": lp_held - lp_noise}


def run_arm(cfg, datasets, source_params, flow, lam):
    adapt_cfg = dataclasses.replace(cfg.adapt, lam=lam)
    vault = make_vault(cfg, datasets)
    student = source_params.copy()
    teacher = init_teacher(student, adapt_cfg.alpha)
    records = evaluate_all(cfg, vault, student, 0)
    for _ in cfg.domains[1:]:
        student, teacher = adapt_stage(cfg, vault, student, teacher, flow, adapt_cfg)
        records += evaluate_all(cfg, vault, student, vault.stage)
    report = forgetting_report(records, adapted_at(cfg), len(cfg.domains) - 1)
    return {"records": records, "report": report,
            "source_train_reads_after_stage0": vault.source_train_reads_after_stage0()}


def summarize(cfg, arm):
    n = len(cfg.domains) - 1
    first = cfg.domains[1].name
    rep = arm["report"]
    final = [r.miou for r in arm["records"] if r.stage == n and r.domain != cfg.domains[0].name]
    return {
        "forgetting_t1": rep.deltas[(first, n)],
        "final_target_avg": float(np.mean(final)),
        "final_all_avg": rep.stage_average[n],
    }


def run_seed(cfg: PipelineConfig, lam_values=None):
    lam_values = lam_values or {"conda": cfg.adapt.lam, "naive": 0.0}
    t0 = time.time()
    datasets = generate_datasets(cfg)
    vault = make_vault(cfg, datasets)
    source = fit_source(cfg, vault)
    flow = fit_flow(cfg, vault)
    out = {"seed": cfg.seed, "flow": flow_sanity(cfg, flow, vault, Rng(cfg.seed).child(9)),
           "coverage": class_fractions(datasets[(cfg.domains[0].name, "train")].labels).tolist(),
           "arms": {}}
    for name, lam in lam_values.items():
        arm = run_arm(cfg, datasets, source, flow, lam)
        out["arms"][name] = {**arm, "summary": summarize(cfg, arm)}
        logger.info("seed %d arm %s: %s", cfg.seed, name, out["arms"][name]["summary"])
    out["seconds"] = time.time() - t0
    return out


def compare_arms(cfg: PipelineConfig, seeds):
    """Runs every seed; returns per-seed results and seed-averaged summaries."""
    results = [run_seed(dataclasses.replace(cfg, seed=s)) for s in seeds]
    arms = results[0]["arms"].keys()
    mean = {a: {k: float(np.mean([r["arms"][a]["summary"][k] for r in results]))
                for k in results[0]["arms"][a]["summary"]} for a in arms}
    return {"seeds": list(seeds), "per_seed": results, "mean": mean}


def format_comparison(result) -> str:
    lines = []
    for r in result["per_seed"]:
        f = r["flow"]
        lines.append(f"seed {r['seed']}: flow log-lik held-out {f['held_out']:.1f} "
                     f"vs uniform {f['uniform']:.1f} ({r['seconds']:.0f}s)")
        for a, v in r["arms"].items():
            s = v["summary"]
            lines.append(f"  {a:6s} forgetting(T1) {100 * s['forgetting_t1']:+.2f}  "
                         f"final target avg {100 * s['final_target_avg']:.2f}  "
                         f"final all avg {100 * s['final_all_avg']:.2f}")
    for a, s in result["mean"].items():
        lines.append(f"mean {a:6s} forgetting(T1) {100 * s['forgetting_t1']:+.2f}  "
                     f"final target avg {100 * s['final_target_avg']:.2f}  "
                     f"final all avg {100 * s['final_all_avg']:.2f}")
    return "\n".join(lines)
