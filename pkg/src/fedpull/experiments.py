"""Experiment families: single-domain baselines, centralized adaptation, FL sweeps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .federation import (
    DomainData,
    ExperimentReport,
    PretrainCache,
    _TAG_BASELINE,
    _TAG_COMBINED,
    _derived_int,
    build_domains,
    chained_finetune,
    combined_finetune,
    evaluate_model,
    pretrain_model,
    run_fl,
)
from .metrics import report_write
from .model import init_model, make_optimizer, train_steps
from .selection import PullPolicy

CONTROLLERS_KEPT_FRACTION = 1.0 / 3.0


def _model_eval_rows(tag: str, evals) -> list[dict]:
    return [
        {
            "round": 0,
            "client_id": tag,
            "test_domain": domain,
            "bleu": evals[domain].bleu,
            "token_accuracy": evals[domain].token_accuracy,
            "params_pulled": "",
            "params_pushed": "",
        }
        for domain in sorted(evals)
    ]


def _base_report(config: ExperimentConfig, seed: int) -> ExperimentReport:
    return ExperimentReport(
        experiment=config.experiment,
        seed=seed,
        config_echo=config.echo(),
        hist_bucket_width=config.hist_bucket_width,
    )


def _run_baseline_matrix(config, seed, domains, cache) -> dict[str, ExperimentReport]:
    report = _base_report(config, seed)
    matrix = {}
    rows = []
    for idx, tag in enumerate(domains.order):
        model = init_model(replace(config.model, seed=_derived_int([seed, _TAG_BASELINE, idx])))
        model, _, _ = train_steps(
            model,
            make_optimizer(config.optimizer, config.learning_rate),
            domains.train[tag],
            config.baseline_steps,
            config.batch_size,
            np.random.SeedSequence([seed, _TAG_BASELINE, idx, 1]),
        )
        evals = evaluate_model(model, domains.test)
        matrix[tag] = {d: e.as_dict() for d, e in evals.items()}
        rows.extend(_model_eval_rows(tag, evals))
    report.sections["baseline_matrix"] = matrix
    report.sections["model_evals"] = rows
    return {"": report}


def _run_central_combination(config, seed, domains, cache) -> dict[str, ExperimentReport]:
    report = _base_report(config, seed)
    pretrained, tag, key = pretrain_model(config, seed, domains, cache)
    report.pretrain = {"domain": tag, "steps": config.pretrain_steps, "cache_key": key}
    steps = config.rounds * config.steps_per_round
    tuned = combined_finetune(
        pretrained,
        [domains.train[t] for t in domains.order],
        steps,
        batch_size=config.batch_size,
        optimizer=config.optimizer,
        learning_rate=config.learning_rate,
        seed=np.random.SeedSequence([seed, _TAG_COMBINED]),
    )
    evals = evaluate_model(tuned, domains.test)
    report.sections["combination"] = {
        "steps": steps,
        "eval": {d: e.as_dict() for d, e in evals.items()},
    }
    report.sections["model_evals"] = _model_eval_rows("combination", evals)
    report.final_eval = {"server": report.sections["combination"]["eval"], "clients": {}}
    return {"": report}


def _run_central_chained(config, seed, domains, cache) -> dict[str, ExperimentReport]:
    report = _base_report(config, seed)
    pretrained, tag, key = pretrain_model(config, seed, domains, cache)
    report.pretrain = {"domain": tag, "steps": config.pretrain_steps, "cache_key": key}
    order = list(config.chain_order) if config.chain_order else sorted(
        domains.order, key=lambda t: (-domains.train[t].n_k, domains.order.index(t))
    )
    steps_each = (config.rounds * config.steps_per_round) // len(order)
    tuned = chained_finetune(
        pretrained,
        [domains.train[t] for t in order],
        steps_each,
        batch_size=config.batch_size,
        optimizer=config.optimizer,
        learning_rate=config.learning_rate,
        base_seed=seed,
    )
    evals = evaluate_model(tuned, domains.test)
    report.sections["chained"] = {
        "order": order,
        "steps_each": steps_each,
        "eval": {d: e.as_dict() for d, e in evals.items()},
    }
    report.sections["model_evals"] = _model_eval_rows("chained", evals)
    report.final_eval = {"server": report.sections["chained"]["eval"], "clients": {}}
    return {"": report}


def _run_fl(config, seed, domains, cache) -> dict[str, ExperimentReport]:
    return {"": run_fl(config, seed, pretrain_cache=cache, domains=domains)}


def _run_rounds_ablation(config, seed, domains, cache) -> dict[str, ExperimentReport]:
    budget = config.rounds * config.steps_per_round
    out = {}
    for r in config.ablation_rounds:
        out[f"rounds_{r}"] = run_fl(
            config,
            seed,
            rounds=r,
            steps_per_round=budget // r,
            eval_every=max(1, r // 5),
            pretrain_cache=cache,
            domains=domains,
        )
    return out


def _run_dp_compare(config, seed, domains, cache) -> dict[str, ExperimentReport]:
    out = {}
    for mode in ("full", "dp_less", "dp_greater", "random"):
        policy = PullPolicy(
            mode=mode,
            kept_fraction=config.policy.kept_fraction,
            scope="pull_only",
            seed=config.policy.seed,
        )
        out[mode] = run_fl(config, seed, policy=policy, pretrain_cache=cache, domains=domains)
    return out


def _run_controllers_parity(config, seed, domains, cache) -> dict[str, ExperimentReport]:
    out = {}
    for mode in ("dp_less", "dp_greater"):
        policy = PullPolicy(
            mode=mode,
            kept_fraction=CONTROLLERS_KEPT_FRACTION,
            scope="push_and_pull",
            seed=config.policy.seed,
        )
        out[mode] = run_fl(config, seed, policy=policy, pretrain_cache=cache, domains=domains)
    return out


_FAMILIES = {
    "baseline_matrix": _run_baseline_matrix,
    "central_combination": _run_central_combination,
    "central_chained": _run_central_chained,
    "fl": _run_fl,
    "fl_rounds_ablation": _run_rounds_ablation,
    "dp_compare": _run_dp_compare,
    "controllers_parity": _run_controllers_parity,
}


def run_seed(
    config: ExperimentConfig,
    seed: int,
    *,
    domains: DomainData | None = None,
    cache: PretrainCache | None = None,
) -> dict[str, ExperimentReport]:
    family = _FAMILIES.get(config.experiment)
    if family is None:
        raise ConfigError(f"unknown experiment '{config.experiment}'")
    domains = domains or build_domains(config)
    cache = cache or PretrainCache(Path(config.output_dir) / "_pretrain")
    return family(config, seed, domains, cache)


def run_experiment(config: ExperimentConfig, *, seed_parallel: int = 1) -> list[Path]:
    """Run every configured seed and write one report directory per (seed, variant)."""
    domains = build_domains(config)
    cache = PretrainCache(Path(config.output_dir) / "_pretrain")
    stamp = datetime.now(timezone.utc).isoformat()

    def one_seed(seed: int) -> list[Path]:
        reports = run_seed(config, seed, domains=domains, cache=cache)
        written = []
        for variant, report in reports.items():
            report.timestamp = stamp
            out_dir = Path(config.output_dir) / config.experiment / str(seed)
            if variant:
                out_dir = out_dir / variant
            paths = report_write(report, out_dir)
            written.append(paths["report"])
        return written

    all_paths: list[Path] = []
    if seed_parallel > 1 and len(config.seeds) > 1:
        with ThreadPoolExecutor(max_workers=seed_parallel) as pool:
            for paths in pool.map(one_seed, config.seeds):
                all_paths.extend(paths)
    else:
        for seed in config.seeds:
            all_paths.extend(one_seed(seed))
    return all_paths
