import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
import pandas as pd
from engine import EstimateReport, LtmleEngine, arm_report, ArmEstimate
from interventions import contrast_arms, fit_stochastic_law, parse_arm
from sim import (ScenarioConfig, drop_in_trajectory, scenario_presets, simulate_counterfactual_contrast,
                 simulate_counterfactual_mean, simulate_trial)

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["scenario", "policy", "truth", "truth_mc_se", "mean_est", "emp_sd", "mean_se",
                 "coverage", "mean_ci_len", "norm_ci_len", "reps", "failures"]
DEFAULT_POLICIES = ["static0", "static1", "dynamic", "stochastic", "ignore"]


def resolve_scenario(scenario):
    if isinstance(scenario, ScenarioConfig):
        return scenario
    presets = scenario_presets()
    if scenario not in presets:
        raise ValueError(f"Unknown scenario '{scenario}', expected one of {sorted(presets)}")
    return presets[scenario]


def worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    env = os.getenv("LTMLE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def fit_truth_law(config, n_fit, seed):
    """Large-sample version of the data-defined stochastic drop-in law."""
    panel = simulate_trial(config, n_fit, seed)
    return fit_stochastic_law(panel)


def oracle_arm(config, arm_name, horizon, n_mc, seed, n_fit_stochastic=100000):
    arm = parse_arm(arm_name)
    if arm.z_spec.form == "stochastic":
        arm = arm.with_law(fit_truth_law(config, n_fit_stochastic, seed + 1))
    return simulate_counterfactual_mean(config, arm, horizon, n_mc, seed)


def compute_truths(config, policies, horizon, n_mc, seed, n_fit_stochastic=100000):
    law = None
    truths = {}
    for policy in policies:
        active, control = contrast_arms(policy)
        if active.z_spec.form == "stochastic":
            law = law if law is not None else fit_truth_law(config, n_fit_stochastic, seed + 1)
            active, control = active.with_law(law), control.with_law(law)
        truths[policy] = simulate_counterfactual_contrast(config, active, control, horizon, n_mc, seed)
        logger.info("Truth %s/%s: %.6f (MC SE %.6f)", config.name, policy, truths[policy]['psi'],
                    truths[policy]['mc_se'])
    return truths


def _replicate(task):
    config, policies, n, horizon, seed, engine_config, estimator = task
    try:
        panel = simulate_trial(config, n, seed)
        engine = LtmleEngine(config=engine_config)
        gfit = engine.fit_g(panel) if estimator == "tmle" else None
        stochastic = any(contrast_arms(policy)[0].z_spec.form == "stochastic" for policy in policies)
        law = engine.fit_law(panel) if stochastic else None
    except Exception as e:
        logger.error("Replication with seed %d failed: %s", seed, e, exc_info=True)
        return {policy: {'error': str(e)} for policy in policies}
    out = {}
    for policy in policies:
        try:
            report = engine.estimate(panel, [policy], horizon, estimator=estimator, law=law, gfit=gfit)[policy]
        except Exception as e:
            logger.error("Replication with seed %d failed for %s: %s", seed, policy, e)
            out[policy] = {'error': str(e)}
            continue
        diag = report.diagnostics
        weights = [diag[arm].get('max_weight', np.nan) for arm in ("active", "control")]
        eic_means = [abs(diag[arm].get('eic_mean', np.nan)) for arm in ("active", "control")]
        out[policy] = {'est': report.psi, 'se': report.se, 'ci_low': report.ci_low,
                       'ci_high': report.ci_high, 'max_weight': float(np.nanmax(weights))
                       if np.any(np.isfinite(weights)) else np.nan,
                       'eic_mean': float(np.nanmax(eic_means)) if np.any(np.isfinite(eic_means)) else np.nan}
    return out


@dataclass
class ReplicationTable:
    rows: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=TABLE_COLUMNS)

    def row(self, scenario, policy):
        for row in self.rows:
            if row['scenario'] == scenario and row['policy'] == policy:
                return row
        raise KeyError((scenario, policy))

    def extend(self, other):
        self.rows.extend(other.rows)
        self.runs.extend(other.runs)
        self.weights.update(other.weights)
        return self


def summarize(scenario, policy, truth, runs, requested):
    ok = [r for r in runs if 'error' not in r]
    est = np.array([r['est'] for r in ok], dtype=float)
    se = np.array([np.nan if r['se'] is None else r['se'] for r in ok], dtype=float)
    lo = np.array([np.nan if r['ci_low'] is None else r['ci_low'] for r in ok], dtype=float)
    hi = np.array([np.nan if r['ci_high'] is None else r['ci_high'] for r in ok], dtype=float)
    psi = truth['psi']
    has_ci = len(ok) > 0 and np.all(np.isfinite(lo))
    mean_ci_len = float(np.mean(hi - lo)) if has_ci else np.nan
    return {
        'scenario': scenario,
        'policy': policy,
        'truth': psi,
        'truth_mc_se': truth['mc_se'],
        'mean_est': float(np.mean(est)) if len(ok) else np.nan,
        'emp_sd': float(np.std(est, ddof=1)) if len(ok) > 1 else np.nan,
        'mean_se': float(np.mean(se)) if has_ci else np.nan,
        'coverage': float(np.mean((lo <= psi) & (psi <= hi))) if has_ci else np.nan,
        'mean_ci_len': mean_ci_len,
        'norm_ci_len': mean_ci_len / abs(psi) if has_ci and psi != 0 else np.nan,
        'reps': len(ok),
        'failures': requested - len(ok),
    }


def run_replications(scenario, policies, n, reps, horizon, seed, engine_config=None, n_mc=1000000,
                     n_fit_stochastic=100000, workers=None, estimator="tmle", truths=None):
    config = resolve_scenario(scenario)
    if reps < 1:
        raise ValueError("Need at least one replication")
    policies = list(policies)
    engine_config = engine_config if engine_config is not None else LtmleEngine().config
    truths = truths if truths is not None else compute_truths(config, policies, horizon, n_mc, seed,
                                                              n_fit_stochastic)
    tasks = [(config, policies, n, horizon, seed + r, engine_config, estimator) for r in range(1, reps + 1)]
    workers = worker_count(workers)
    logger.info("Running %d replications of %s (n=%d) on %d workers", reps, config.name, n, workers)
    if workers == 1:
        results = [_replicate(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, tasks))

    table = ReplicationTable()
    for policy in policies:
        runs = [result[policy] for result in results]
        table.rows.append(summarize(config.name, policy, truths[policy], runs, reps))
        table.runs.extend({'scenario': config.name, 'policy': policy, 'rep': r + 1, **run}
                          for r, run in enumerate(runs))
        max_weights = [run['max_weight'] for run in runs if 'error' not in run]
        table.weights[(config.name, policy)] = float(np.nanmedian(max_weights)) if max_weights else np.nan
    failures = sum(row['failures'] for row in table.rows)
    if failures:
        logger.warning("%d policy estimates failed across %d replications", failures, reps)
    return table


def drop_in_table(panel):
    long = drop_in_trajectory(panel)
    wide = long.pivot(index="visit", columns="arm", values=["fraction", "at_risk"])
    table = pd.DataFrame({
        'visit': wide.index.to_numpy(),
        'placebo_fraction': wide[("fraction", 0)].to_numpy(),
        'treated_fraction': wide[("fraction", 1)].to_numpy(),
        'placebo_at_risk': wide[("at_risk", 0)].to_numpy(),
        'treated_at_risk': wide[("at_risk", 1)].to_numpy(),
    })
    return table


def _canonical(value):
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_canonical(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            return None
        return float(f"{float(value):.6g}")
    return value


def dumps_canonical(payload):
    return json.dumps(_canonical(payload), sort_keys=True, separators=(",", ":"))


def report_payload(obj):
    if isinstance(obj, ReplicationTable):
        return obj.to_frame().to_dict(orient="records")
    if isinstance(obj, EstimateReport):
        return obj.to_dict()
    if isinstance(obj, ArmEstimate):
        return arm_report(obj)
    if isinstance(obj, pd.DataFrame):
        return obj.to_dict(orient="records")
    if isinstance(obj, dict):
        return {k: report_payload(v) for k, v in obj.items()}
    return obj


def emit_report(obj, fmt, filepath=None):
    """Serialize a table, report or report map as CSV or canonical JSON; returns the text."""
    if fmt == "json":
        text = dumps_canonical(report_payload(obj)) + "\n"
    elif fmt == "csv":
        if isinstance(obj, ReplicationTable):
            frame = obj.to_frame()
        elif isinstance(obj, pd.DataFrame):
            frame = obj
        else:
            raise ValueError("CSV output needs a table")
        text = frame.to_csv(index=False, float_format="%.6g", lineterminator="\n")
    else:
        raise ValueError(f"Unknown report format '{fmt}'")
    if filepath is not None:
        destination = Path(filepath).expanduser().resolve()
        destination.parent.mkdir(parents=True, exist_ok=True)
        destination.write_text(text, encoding="utf-8")
        logger.info("Report written to %s", destination)
    return text
