import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
from scipy.special import expit, logit
from interventions import (NodeHistory, contrast_arms, fit_stochastic_gstar, gstar_prob,
                           parse_arm, policy_from_dict, POLICIES)
from learners import LearnerSpec, constant_model, carry_model, fit_intercept_fluctuation, fit_learner
from panel import PanelError, at_risk_mask, validate_panel
from weights import EstimationError, clever_weights, support_diagnostics

logger = logging.getLogger(__name__)

EIC_TOL = 1e-8
Z_CRIT = 1.96
LOGIT_CLIP = 1e-15


@dataclass
class GFit:
    """Fitted intervention mechanisms.

    g_obs[(node, k)] holds, for every subject, the fitted probability of the
    observed A_k or Z_k and of remaining uncensored (C_k = 0).
    """
    models: dict = field(default_factory=dict)
    g_obs: dict = field(default_factory=dict)
    floored: dict = field(default_factory=dict)
    g_floor: float = 1e-3
    last_visit: int = 0

    def prob(self, node, k):
        try:
            return self.g_obs[(node, k)]
        except KeyError:
            raise EstimationError(f"No fitted g for {node}_{k}; risk set empty before this visit") from None


def _floor(model, p, rows, g_floor):
    if model.is_exact:
        return p, 0
    clipped = np.clip(p, g_floor, 1.0 - g_floor)
    return clipped, int(np.sum((clipped != p) & rows))


def _fit_node(gfit, key, learner, inputs, response, rows, observed, folds, seed, model=None):
    if model is None:
        model = fit_learner(learner, inputs.take(np.flatnonzero(rows)), response[rows], folds=folds, seed=seed)
    p1, floored = _floor(model, model.predict(inputs), rows, gfit.g_floor)
    gfit.models[key] = model
    gfit.g_obs[key] = np.where(observed == 1, p1, 1.0 - p1)
    gfit.floored[f"{key[0]}{key[1]}"] = floored


def fit_g(panel, learner, g_floor=1e-3, folds=10, seed=0, randomized=None):
    randomized = panel.randomized if randomized is None else randomized
    gfit = GFit(g_floor=g_floor)
    everyone = np.ones(panel.n, dtype=bool)
    logger.info("fit_g: fitting treatment, concomitant and censoring mechanisms for %d subjects", panel.n)

    baseline = panel.history(0, a_through=-1, z_through=-1)
    _fit_node(gfit, ("Z", 0), learner, baseline, panel.Z0, everyone, panel.Z0, folds, seed)
    with_z0 = panel.history(0, a_through=-1, z_through=0)
    _fit_node(gfit, ("A", 0), learner, with_z0, panel.A0, everyone, panel.A0, folds, seed,
              model=constant_model(0.5) if randomized else None)

    for k in range(1, panel.K):
        rows = at_risk_mask(panel, k + 1)
        if not rows.any():
            logger.warning("fit_g: nobody at risk after visit %d; mechanisms stop here", k)
            break
        Z_k, A_k = panel.node("Z", k), panel.node("A", k)
        _fit_node(gfit, ("Z", k), learner, panel.history(k, a_through=k - 1, z_through=k - 1),
                  Z_k, rows, Z_k, folds, seed + k)
        carry = carry_model() if np.all(A_k[rows] == panel.node("A", k - 1)[rows]) else None
        _fit_node(gfit, ("A", k), learner, panel.history(k, a_through=k - 1, z_through=k),
                  A_k, rows, A_k, folds, seed + k, model=carry)

    for k in range(1, panel.K + 1):
        rows = at_risk_mask(panel, k)
        if not rows.any():
            break
        C_k = panel.node("C", k)
        _fit_node(gfit, ("C", k), learner, panel.history(k - 1), C_k, rows, C_k, folds, seed + k)
        gfit.last_visit = k
    total = sum(gfit.floored.values())
    if total:
        logger.warning("fit_g: %d propensity predictions floored at %g", total, g_floor)
    return gfit


def _adherent(panel, a, through):
    rows = np.ones(panel.n, dtype=bool)
    for j in range(through + 1):
        rows &= panel.node("A", j) == a
    return rows


def _update(q, eps, model):
    if model.is_exact or eps == 0.0:
        return q
    return expit(_logit(q) + eps)


def _logit(q):
    return logit(np.clip(q, LOGIT_CLIP, 1.0 - LOGIT_CLIP))


def _marginalize(panel, policy, model, eps, history, j):
    """Sum over the visit-j interventional nodes of g* times the updated regression.

    Also returns which subjects only reached histories the regression was fit on;
    a history evaluated with zero g* mass does not count against support.
    """
    base = history.with_last(a=policy.a_value)
    spec = policy.z_spec
    covered = np.ones(panel.n, dtype=bool)

    def q(h, mass=None):
        nonlocal covered
        seen = model.covers(h)
        covered &= seen if mass is None else seen | (mass == 0)
        return _update(model.predict(h), eps, model)

    if spec.form == "static":
        return q(base.with_last(z=spec.value)), covered
    if spec.form == "observational" or (spec.form == "dynamic" and j == 0):
        return q(base), covered
    if spec.form == "dynamic":
        return q(base.with_last(z=panel.Z0)), covered
    z_prev = panel.node("Z", j - 1) if j > 0 else None
    p1 = gstar_prob(spec, 1, NodeHistory(j, panel.L0, panel.Z0, z_prev))
    value = p1 * q(base.with_last(z=1), p1) + (1.0 - p1) * q(base.with_last(z=0), 1.0 - p1)
    return value, covered


@dataclass
class SequentialFit:
    """Per-visit products of the backward pass, keyed by visit l."""
    models: dict = field(default_factory=dict)
    epsilon: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    q_star: dict = field(default_factory=dict)
    score: dict = field(default_factory=dict)
    fit_rows: dict = field(default_factory=dict)


@dataclass
class ArmEstimate:
    policy: str
    psi: float
    eic: np.ndarray
    targeted: bool
    horizon: int
    ids: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    sequential: SequentialFit = None

    @property
    def se(self):
        if self.eic is None:
            return None
        return influence_se(self.eic)


def influence_se(eic):
    """sqrt(sample variance / n) of a per-subject influence curve."""
    n = len(eic)
    if n < 2:
        return float("nan")
    return float(np.sqrt(np.var(eic, ddof=1) / n))


def _backward_pass(panel, policy, learner, horizon, gfit=None, weight_cap=None, folds=10, seed=0):
    if not 1 <= horizon <= panel.K:
        raise ValueError(f"Horizon {horizon} outside 1..{panel.K}")
    if not policy.z_spec.fitted:
        raise ValueError(f"{policy.name}: stochastic intervention has no fitted law")
    targeted = gfit is not None
    a = policy.a_value
    seq = SequentialFit()
    eic = np.zeros(panel.n) if targeted else None
    pseudo = panel.Y[horizon - 1].astype(float)
    q_star = None
    for l in range(horizon, 0, -1):
        history = panel.history(l - 1)
        rows = at_risk_mask(panel, l) & (panel.C[l - 1] == 0) & _adherent(panel, a, l - 1)
        if not rows.any():
            raise EstimationError(f"{policy.name}: no adherent subjects at risk and uncensored at visit {l}")
        model = fit_learner(learner, history.take(np.flatnonzero(rows)), pseudo[rows], folds=folds, seed=seed + l)
        eps = 0.0
        if targeted:
            H = clever_weights(panel, gfit, policy, l, weight_cap)
            q_obs = model.predict(history)
            if not model.is_exact:
                eps = fit_intercept_fluctuation(pseudo[rows], _logit(q_obs[rows]), H[rows])
            residual = np.where(rows, pseudo - _update(q_obs, eps, model), 0.0)
            eic += H * residual
            seq.weights[l] = H
            seq.score[l] = float(np.sum(H * residual))
            if abs(seq.score[l]) > EIC_TOL * max(1.0, panel.n):
                logger.warning("%s: targeted score %.3g at visit %d", policy.name, seq.score[l], l)
        seq.models[l] = model
        seq.epsilon[l] = eps
        seq.fit_rows[l] = int(rows.sum())
        q_star, covered = _marginalize(panel, policy, model, eps, history, l - 1)
        # the value feeds the visit-(l-1) fit, or the mean over everyone at l = 1
        needed = np.ones(panel.n, dtype=bool) if l == 1 else at_risk_mask(panel, l) & _adherent(panel, a, l - 2)
        unsupported = int(np.sum(needed & ~covered))
        if unsupported:
            raise EstimationError(f"{policy.name}: {unsupported} subjects reach a visit-{l} history "
                                  f"with no fitted support")
        seq.q_star[l] = q_star
        if l > 1:
            # competing-risk splice: an earlier event counts 1, an earlier death 0
            pseudo = np.where(panel.Y[l - 2] == 1, 1.0, np.where(panel.D[l - 2] == 1, 0.0, q_star))
    psi = float(np.mean(q_star))
    if targeted:
        eic += q_star - psi
    return psi, eic, seq


def _diagnostics(panel, seq, horizon, eic):
    out = {
        'epsilon': {str(l): seq.epsilon[l] for l in sorted(seq.epsilon)},
        'at_risk': {str(k): int(at_risk_mask(panel, k).sum()) for k in range(1, horizon + 1)},
        'fit_rows': {str(l): seq.fit_rows[l] for l in sorted(seq.fit_rows)},
        'selected': {str(l): m.report.get('selected') for l, m in sorted(seq.models.items()) if m.report},
    }
    if eic is not None:
        out['eic_mean'] = float(np.mean(eic))
        out['eic_solved'] = bool(abs(out['eic_mean']) <= EIC_TOL)
        out['score'] = {str(l): seq.score[l] for l in sorted(seq.score)}
    return out


def tmle_arm(panel, gfit, policy, learners, horizon, weight_cap=None, weight_threshold=50.0, folds=10, seed=0):
    logger.info("tmle_arm: targeting %s at visit %d", policy.name, horizon)
    psi, eic, seq = _backward_pass(panel, policy, learners, horizon, gfit, weight_cap, folds, seed)
    diagnostics = _diagnostics(panel, seq, horizon, eic)
    if not diagnostics['eic_solved']:
        logger.warning("%s: EIC equation residual %.3g above %.0e", policy.name, diagnostics['eic_mean'], EIC_TOL)
    support = support_diagnostics(panel, gfit, policy, horizon, weight_threshold)
    diagnostics['support'] = support.to_dict(orient="records")
    diagnostics['max_weight'] = float(support['max_weight'].max())
    diagnostics['floored'] = dict(gfit.floored)
    return ArmEstimate(policy.name, psi, eic, True, horizon, panel.ids, diagnostics, seq)


def gcomp_arm(panel, policy, learners, horizon, folds=10, seed=0):
    logger.info("gcomp_arm: sequential regression for %s at visit %d", policy.name, horizon)
    psi, _, seq = _backward_pass(panel, policy, learners, horizon, None, None, folds, seed)
    return ArmEstimate(policy.name, psi, None, False, horizon, panel.ids, _diagnostics(panel, seq, horizon, None), seq)


@dataclass
class EstimateReport:
    policy: str
    estimator: str
    horizon: int
    n: int
    risk1: float
    risk0: float
    psi: float
    se: float = None
    ci_low: float = None
    ci_high: float = None
    risk1_se: float = None
    risk0_se: float = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            'policy': self.policy, 'estimator': self.estimator, 'horizon': self.horizon, 'n': self.n,
            'risk1': self.risk1, 'risk1_se': self.risk1_se, 'risk0': self.risk0, 'risk0_se': self.risk0_se,
            'psi': self.psi, 'se': self.se,
            'ci': None if self.se is None else [self.ci_low, self.ci_high],
            'diagnostics': self.diagnostics,
        }


def contrast(active, control, name=None):
    if active.horizon != control.horizon:
        raise ValueError("Arms estimated at different horizons")
    if len(active.ids) != len(control.ids) or not np.array_equal(active.ids, control.ids):
        raise ValueError("Arms estimated on different subject sets")
    n = len(active.ids)
    psi = active.psi - control.psi
    report = EstimateReport(
        policy=name or f"{active.policy}-{control.policy}",
        estimator="tmle" if active.targeted and control.targeted else "gcomp",
        horizon=active.horizon, n=n, risk1=active.psi, risk0=control.psi, psi=psi,
        diagnostics={'active': active.diagnostics, 'control': control.diagnostics},
    )
    if active.eic is not None and control.eic is not None:
        diff = active.eic - control.eic
        report.se = influence_se(diff)
        report.ci_low = psi - Z_CRIT * report.se
        report.ci_high = psi + Z_CRIT * report.se
        report.risk1_se = active.se
        report.risk0_se = control.se
    return report


def load_config_file(path):
    with Path(path).open("r", encoding="utf-8") as handle:
        return json.load(handle)


def learner_from_config(learner_cfg, role):
    """A single LearnerSpec for role, or the super-learner library when enabled."""
    if learner_cfg.get("use_super_learner") and role != "stochastic":
        return [LearnerSpec.from_dict(entry) for entry in learner_cfg.get("library", [])]
    return LearnerSpec.from_dict(learner_cfg.get(role, {'features': "running_avg"}))


def resolve_policy(entry):
    """Contrast name, arm name or policy dict -> (name, [arms])."""
    if isinstance(entry, dict):
        if "a_value" in entry:
            arm = policy_from_dict(entry)
            return arm.name, [arm]
        z_form = entry['z_form']
        name = next((k for k, v in POLICIES.items() if v == z_form), z_form)
        return name, list(contrast_arms(name))
    if entry in POLICIES:
        return entry, list(contrast_arms(entry))
    arm = parse_arm(entry)
    return arm.name, [arm]


class LtmleEngine:
    def __init__(self, config_path=None, config=None):
        if config_path:
            self.config_path = Path(config_path)
        else:
            self.config_path = Path(__file__).resolve().parents[1] / "config.json"
        if config:
            self.config = config
        else:
            self.config = load_config_file(self.config_path)

        estimation_cfg = self.config.get("estimation", {})
        learner_cfg = self.config.get("learners", {})
        self.g_floor = estimation_cfg.get("g_floor", 1e-3)
        self.weight_cap = estimation_cfg.get("weight_cap")
        self.weight_threshold = estimation_cfg.get("weight_threshold", 50.0)
        self.randomized = estimation_cfg.get("randomized")
        self.folds = learner_cfg.get("folds", 10)
        self.seed = learner_cfg.get("seed", 0)
        self.outcome_learner = learner_from_config(learner_cfg, "outcome")
        self.propensity_learner = learner_from_config(learner_cfg, "propensity")
        self.stochastic_learner = learner_from_config(learner_cfg, "stochastic")

    def fit_g(self, panel):
        return fit_g(panel, self.propensity_learner, self.g_floor, self.folds, self.seed, self.randomized)

    def estimate_arm(self, panel, arm, horizon, gfit=None, estimator="tmle"):
        if estimator == "gcomp":
            return gcomp_arm(panel, arm, self.outcome_learner, horizon, self.folds, self.seed)
        gfit = gfit if gfit is not None else self.fit_g(panel)
        return tmle_arm(panel, gfit, arm, self.outcome_learner, horizon, self.weight_cap,
                        self.weight_threshold, self.folds, self.seed)

    def fit_law(self, panel):
        return fit_stochastic_gstar(panel, self.stochastic_learner).law

    def estimate(self, panel, policies, horizon, estimator="tmle", law=None, gfit=None):
        """Estimate every policy on one panel; returns name -> EstimateReport (or ArmEstimate for single arms).

        Request errors (estimator, horizon, policy names) raise ValueError; anything
        the data makes impossible afterwards surfaces as EstimationError.
        """
        if estimator not in ("tmle", "gcomp"):
            raise ValueError(f"Unknown estimator '{estimator}'")
        report = validate_panel(panel)
        if not report.ok:
            raise PanelError(f"Panel failed validation: {report.violations[0]['message']}")
        if not 1 <= horizon <= panel.K:
            raise ValueError(f"Horizon {horizon} outside 1..{panel.K}")
        resolved = [resolve_policy(entry) for entry in policies]
        logger.info("LtmleEngine: estimating %d policies at visit %d on %d subjects",
                    len(policies), horizon, panel.n)
        try:
            if law is None and any(arm.z_spec.form == "stochastic" for _, arms in resolved for arm in arms):
                law = self.fit_law(panel)
            if gfit is None and estimator == "tmle":
                gfit = self.fit_g(panel)

            results = {}
            for name, arms in resolved:
                arms = [arm.with_law(law) if arm.z_spec.form == "stochastic" else arm for arm in arms]
                estimates = [self.estimate_arm(panel, arm, horizon, gfit, estimator) for arm in arms]
                results[name] = contrast(*estimates, name=name) if len(estimates) == 2 else estimates[0]
        except EstimationError:
            raise
        except (ValueError, np.linalg.LinAlgError) as e:
            raise EstimationError(str(e)) from e
        return results


def arm_report(estimate):
    se = estimate.se
    return {
        'policy': estimate.policy, 'estimator': "tmle" if estimate.targeted else "gcomp",
        'horizon': estimate.horizon, 'n': len(estimate.ids), 'risk': estimate.psi, 'se': se,
        'ci': None if se is None else [estimate.psi - Z_CRIT * se, estimate.psi + Z_CRIT * se],
        'diagnostics': estimate.diagnostics,
    }

