import numpy as np
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from scipy.special import expit

PROB_CLIP = 1e-6


@dataclass
class FittedModel:
    """Fitted binary regression on the logit scale.

    kind is 'glm' for an IRLS fit, 'constant' for an exact degenerate model
    and 'carry' for the deterministic A_k = A_{k-1} continuation.
    """
    coef: np.ndarray
    learner: object = None
    converged: bool = True
    deviance: float = 0.0
    active: np.ndarray = None
    kind: str = "glm"
    constant: float = None
    feature_state: object = None
    n_iter: int = 0
    report: dict = field(default_factory=dict)

    def linear_predictor(self, inputs, offset=None):
        X, _ = self.learner.design(inputs, state=self.feature_state)
        eta = X @ self.coef
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, inputs, offset=None, clip=True):
        if self.kind == "constant":
            return np.full(_n_rows(inputs), float(self.constant))
        if self.kind == "carry":
            return np.asarray(inputs.A[-1], dtype=float)
        mu = expit(self.linear_predictor(inputs, offset))
        # saturated fits return cell means as they are
        if clip and getattr(self.learner, "clip_predictions", True):
            mu = np.clip(mu, PROB_CLIP, 1.0 - PROB_CLIP)
        return mu

    def covers(self, inputs):
        """True where the fit had data for the row's history."""
        if self.is_exact or self.learner is None:
            return np.ones(_n_rows(inputs), dtype=bool)
        return self.learner.covers(inputs, self.feature_state)

    def prob(self, inputs, value):
        p1 = self.predict(inputs)
        return np.where(np.asarray(value) == 1, p1, 1.0 - p1)

    @property
    def is_exact(self):
        return self.kind in ("constant", "carry")


def constant_model(value, learner=None):
    return FittedModel(coef=np.zeros(0), learner=learner, kind="constant", constant=float(value))


def carry_model(learner=None):
    return FittedModel(coef=np.zeros(0), learner=learner, kind="carry")


def _n_rows(inputs):
    if hasattr(inputs, "n"):
        return inputs.n
    return np.asarray(inputs).shape[0]


class BaseLearner(ABC):
    def __init__(self, name):
        self.name = name
        self.parameters = {}

    @abstractmethod
    def fit(self, inputs, response, weights=None, offset=None):
        pass

    def validate_data(self, response, weights):
        response = np.asarray(response, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if response.shape != weights.shape:
            return False
        if np.any(~np.isfinite(response)) or np.any((response < 0) | (response > 1)):
            return False
        return bool(np.all(weights >= 0))

    def get_info(self):
        return {
            'name': self.name,
            'parameters': self.parameters,
            'description': self.__doc__
        }

    def covers(self, inputs, state=None):
        return np.ones(_n_rows(inputs), dtype=bool)
