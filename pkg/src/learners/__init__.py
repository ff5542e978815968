from .base import BaseLearner, FittedModel, constant_model, carry_model, PROB_CLIP
from .features import FEATURE_MAPS, build_design, running_average
from .glm import LearnerSpec, fit_binary_glm, fit_intercept_fluctuation, quasi_binomial_loss
from .super_learner import fit_discrete_super_learner, fit_learner

__all__ = [
    'BaseLearner',
    'FittedModel',
    'LearnerSpec',
    'FEATURE_MAPS',
    'PROB_CLIP',
    'build_design',
    'carry_model',
    'constant_model',
    'fit_binary_glm',
    'fit_discrete_super_learner',
    'fit_intercept_fluctuation',
    'fit_learner',
    'quasi_binomial_loss',
    'running_average'
]

__version__ = "1.0.0"
