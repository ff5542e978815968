import logging
import re
from dataclasses import dataclass, field, replace
import numpy as np
from learners import LearnerSpec, PROB_CLIP, fit_learner
from panel import at_risk_mask

logger = logging.getLogger(__name__)

FORMS = ("static", "dynamic", "stochastic", "observational")
Z_FORMS = ("static0", "static1", "dynamic", "stochastic", "observational")
USE_FITTED = object()

# contrast name -> z_form shared by both arms
POLICIES = {
    'static0': "static0",
    'static1': "static1",
    'dynamic': "dynamic",
    'stochastic': "stochastic",
    'ignore': "observational",
}


@dataclass(frozen=True)
class NodeHistory:
    """What a g* for Z_k may read: visit, L_0, Z_0 and Z_{k-1} (plus survival status)."""
    k: int
    L0: np.ndarray
    Z0: np.ndarray
    Z_prev: np.ndarray = None
    Y: np.ndarray = None
    D: np.ndarray = None


@dataclass
class StochasticLaw:
    """Per-visit fitted P(Z_k = 1 | Z_{k-1}, L_0) among subjects still at risk."""
    models: dict = field(default_factory=dict)

    def prob_one(self, history):
        model = self.models.get(history.k)
        if model is None:
            raise ValueError(f"Stochastic law has no model for visit {history.k}")
        p = model.predict(stochastic_design(history.k, history.L0, history.Z_prev))
        return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


@dataclass(frozen=True)
class InterventionSpec:
    node: str
    form: str
    value: int = None
    law: StochasticLaw = None

    def __post_init__(self):
        if self.node not in ("A", "Z", "C"):
            raise ValueError(f"Unknown intervention node '{self.node}'")
        if self.form not in FORMS:
            raise ValueError(f"Unknown intervention form '{self.form}'")
        if self.form == "static" and self.value not in (0, 1):
            raise ValueError("Static interventions need a value in {0, 1}")
        if self.node == "C" and (self.form != "static" or self.value != 0):
            raise ValueError("Censoring can only be prevented (static 0)")
        if self.node == "A" and self.form != "static":
            raise ValueError("Treatment arms are static interventions")

    @property
    def fitted(self):
        return self.form != "stochastic" or self.law is not None


@dataclass(frozen=True)
class ArmPolicy:
    a_value: int
    z_spec: InterventionSpec
    censor_spec: InterventionSpec = InterventionSpec("C", "static", 0)

    def __post_init__(self):
        if self.a_value not in (0, 1):
            raise ValueError("Arm treatment value must be 0 or 1")
        if self.z_spec.node != "Z":
            raise ValueError("Arm z_spec must intervene on Z")

    @property
    def a_spec(self):
        return InterventionSpec("A", "static", self.a_value)

    @property
    def z_form(self):
        if self.z_spec.form == "static":
            return f"static{self.z_spec.value}"
        return self.z_spec.form

    @property
    def name(self):
        if self.z_spec.form == "static":
            return f"static_a{self.a_value}_z{self.z_spec.value}"
        if self.z_spec.form == "observational":
            return f"ignore_a{self.a_value}"
        return f"{self.z_spec.form}_a{self.a_value}"

    def with_law(self, law):
        return replace(self, z_spec=replace(self.z_spec, law=law))

    def to_dict(self):
        return {'a_value': self.a_value, 'z_form': self.z_form}


def z_spec_from_form(z_form):
    if z_form not in Z_FORMS:
        raise ValueError(f"Unknown z_form '{z_form}', expected one of {Z_FORMS}")
    if z_form.startswith("static"):
        return InterventionSpec("Z", "static", int(z_form[-1]))
    return InterventionSpec("Z", z_form)


def policy_from_dict(payload):
    return ArmPolicy(int(payload['a_value']), z_spec_from_form(payload['z_form']))


def parse_arm(name):
    """static_a1_z0, dynamic_a0, stochastic_a1, ignore_a0 -> ArmPolicy."""
    match = re.fullmatch(r"static_a([01])_z([01])", name)
    if match:
        return ArmPolicy(int(match.group(1)), InterventionSpec("Z", "static", int(match.group(2))))
    match = re.fullmatch(r"(dynamic|stochastic|ignore|observational)_a([01])", name)
    if match:
        form = "observational" if match.group(1) == "ignore" else match.group(1)
        return ArmPolicy(int(match.group(2)), InterventionSpec("Z", form))
    raise ValueError(f"Unknown arm policy '{name}'")


def contrast_arms(policy):
    """Named contrast -> (active arm, control arm)."""
    if policy not in POLICIES:
        raise ValueError(f"Unknown policy '{policy}', expected one of {sorted(POLICIES)}")
    z_spec = z_spec_from_form(POLICIES[policy])
    return ArmPolicy(1, z_spec), ArmPolicy(0, z_spec)


def gstar_prob(spec, value, history):
    value = np.asarray(value)
    if spec.form == "static":
        return (value == spec.value).astype(float)
    if spec.form == "dynamic":
        return (value == np.asarray(history.Z0)).astype(float)
    if spec.form == "observational":
        return USE_FITTED
    if spec.law is None:
        raise ValueError("Stochastic intervention queried before fitting")
    p1 = spec.law.prob_one(history)
    return np.where(value == 1, p1, 1.0 - p1)


def stochastic_design(k, L0, Z_prev):
    L0 = np.asarray(L0, dtype=float)
    L0 = L0[:, None] if L0.ndim == 1 else L0
    if k == 0:
        return L0
    return np.column_stack([np.asarray(Z_prev, dtype=float), L0])


def fit_stochastic_law(panel, learner=None, visits=None):
    learner = learner if learner is not None else LearnerSpec("main")
    visits = range(panel.K) if visits is None else visits
    law = StochasticLaw()
    for k in visits:
        rows = np.ones(panel.n, dtype=bool) if k == 0 else at_risk_mask(panel, k + 1)
        if not rows.any():
            raise ValueError(f"No subjects at risk for the Z_{k} intervention law")
        Z_prev = panel.node("Z", k - 1) if k > 0 else None
        design = stochastic_design(k, panel.L0, Z_prev)[rows]
        response = panel.node("Z", k)[rows]
        if np.all(response == response[0]):
            logger.warning("Z_%d is constant (%d) among %d at-risk subjects; using the empirical constant",
                           k, response[0], rows.sum())
        law.models[k] = fit_learner(learner, design, response)
    return law


def fit_stochastic_gstar(panel, learner=None):
    """Fit the drop-in law on (Z_{k-1}, L_0), pooled over arms, for every visit."""
    logger.info("Fitting stochastic concomitant-treatment law on %d subjects", panel.n)
    return InterventionSpec("Z", "stochastic", law=fit_stochastic_law(panel, learner))
