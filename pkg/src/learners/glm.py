import logging
import numpy as np
from scipy.linalg import qr
from scipy.optimize import brentq
from scipy.special import expit, xlogy
from .base import BaseLearner, FittedModel, PROB_CLIP
from .features import FEATURE_MAPS, build_design

logger = logging.getLogger(__name__)

SCORE_TOL = 1e-6
EPS_BRACKET = 50.0


def log_expit(eta):
    return -np.logaddexp(0.0, -eta)


def quasi_binomial_deviance(y, eta, w):
    saturated = xlogy(y, y) + xlogy(1.0 - y, 1.0 - y)
    loglik = y * log_expit(eta) + (1.0 - y) * log_expit(-eta)
    return float(2.0 * np.sum(w * (saturated - loglik)))


def quasi_binomial_loss(y, mu, w):
    """Weighted negative quasi-binomial log-likelihood per unit weight."""
    mu = np.clip(mu, PROB_CLIP, 1.0 - PROB_CLIP)
    total = np.sum(w)
    if total <= 0:
        return np.nan
    return float(-np.sum(w * (y * np.log(mu) + (1.0 - y) * np.log1p(-mu))) / total)


def _check_inputs(design, response, weights, offset):
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("Design must be a matrix with at least one row")
    n = X.shape[0]
    y = np.asarray(response, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    o = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if not (len(y) == len(w) == len(o) == n):
        raise ValueError(f"Length mismatch: design {n}, response {len(y)}, weights {len(w)}, offset {len(o)}")
    if np.any(w < 0):
        raise ValueError("Weights must be nonnegative")
    if not np.any(w > 0):
        raise ValueError("All weights are zero")
    return X, y, w, o


def fit_binary_glm(design, response, weights=None, offset=None, max_iter=50, tol=1e-10, ridge=1e-8):
    X, y, w, o = _check_inputs(design, response, weights, offset)
    p = X.shape[1]
    beta = np.zeros(p)
    dev = quasi_binomial_deviance(y, o, w)
    if p == 0:
        return FittedModel(coef=beta, converged=True, deviance=dev)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        mu = expit(X @ beta + o)
        score = X.T @ (w * (y - mu))
        info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X + ridge * np.eye(p)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(30):
            candidate = beta + t * step
            dev_new = quasi_binomial_deviance(y, X @ candidate + o, w)
            if np.isfinite(dev_new) and dev_new <= dev + 1e-12 * abs(dev):
                break
            t /= 2.0
        beta = candidate
        change = abs(dev_new - dev) / (abs(dev_new) + 0.1)
        dev = dev_new
        if change < tol:
            score = X.T @ (w * (y - expit(X @ beta + o)))
            if np.max(np.abs(score)) <= SCORE_TOL:
                converged = True
                break
    if not converged:
        logger.warning("IRLS did not converge in %d iterations (deviance %.6g)", max_iter, dev)
    return FittedModel(coef=beta, converged=converged, deviance=dev, n_iter=n_iter)


def fit_intercept_fluctuation(pseudo_outcome, offset_logit, weights, tol=1e-10):
    """Root of sum_i w_i (y_i - expit(o_i + eps)) = 0 in eps."""
    y = np.asarray(pseudo_outcome, dtype=float)
    o = np.asarray(offset_logit, dtype=float)
    w = np.asarray(weights, dtype=float)
    keep = w > 0
    if not np.any(keep):
        logger.warning("Fluctuation has no positive weight; returning epsilon = 0")
        return 0.0
    y, o, w = y[keep], o[keep], w[keep]
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(o)):
        raise ValueError("Pseudo-outcomes and offsets must be finite")

    def score(eps):
        return float(np.sum(w * (y - expit(o + eps))))

    eps = 0.0
    s = score(eps)
    if s == 0.0:
        return 0.0
    for _ in range(100):
        mu = expit(o + eps)
        slope = float(np.sum(w * mu * (1.0 - mu)))
        if slope <= 0:
            break
        step = float(np.clip(s / slope, -5.0, 5.0))
        eps += step
        s = score(eps)
        if abs(step) < tol * 1e-3 or s == 0.0:
            break
    if np.isfinite(s) and abs(s) <= 1e-12 * max(1.0, float(np.sum(w))) and abs(eps) < EPS_BRACKET:
        return eps
    lo, hi = score(-EPS_BRACKET), score(EPS_BRACKET)
    if lo <= 0:
        logger.warning("Fluctuation root below bracket; weighted pseudo-outcome mean is 0")
        return -EPS_BRACKET
    if hi >= 0:
        logger.warning("Fluctuation root above bracket; weighted pseudo-outcome mean is 1")
        return EPS_BRACKET
    return float(brentq(score, -EPS_BRACKET, EPS_BRACKET, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def active_columns(X, weights=None, rel_tol=1e-9):
    """Indices of a linearly independent subset of design columns."""
    rows = np.ones(X.shape[0], dtype=bool) if weights is None else np.asarray(weights) > 0
    Xr = X[rows]
    if Xr.shape[1] == 0:
        return np.zeros(0, dtype=int)
    R, piv = qr(Xr, mode="r", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > rel_tol * diag[0]))
    return np.sort(piv[:rank])


class LearnerSpec(BaseLearner):
    """Logit-link regression on a named feature map, fit by IRLS."""

    def __init__(self, features="main", max_iter=50, tol=1e-10, ridge=1e-8, decay=None):
        super().__init__(f"logistic_{features}")
        if features not in FEATURE_MAPS:
            raise ValueError(f"Unknown feature map '{features}', expected one of {FEATURE_MAPS}")
        if tol <= 0:
            raise ValueError("Convergence tolerance must be positive")
        if max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        self.features = features
        self.max_iter = int(max_iter)
        self.tol = float(tol)
        self.ridge = float(ridge)
        self.decay = decay
        self.clip_predictions = features != "saturated"
        self.parameters = {'features': features, 'max_iter': self.max_iter, 'tol': self.tol}

    def design(self, inputs, state=None):
        return build_design(inputs, self.features, state=state, decay=self.decay)

    def covers(self, inputs, state=None):
        if self.features != "saturated" or state is None:
            return super().covers(inputs, state)
        X, _ = self.design(inputs, state=state)
        return X.any(axis=1)

    def fit(self, inputs, response, weights=None, offset=None):
        X, state = self.design(inputs)
        y = np.asarray(response, dtype=float)
        w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
        if not self.validate_data(y, w):
            raise ValueError("Response must lie in [0, 1] with nonnegative weights of equal length")
        active = active_columns(X, w)
        glm = fit_binary_glm(X[:, active], y, w, offset, self.max_iter, self.tol, self.ridge)
        coef = np.zeros(X.shape[1])
        coef[active] = glm.coef
        return FittedModel(coef=coef, learner=self, converged=glm.converged, deviance=glm.deviance,
                           active=active, feature_state=state, n_iter=glm.n_iter)

    def to_dict(self):
        return {'features': self.features, 'max_iter': self.max_iter, 'tol': self.tol}

    @classmethod
    def from_dict(cls, payload):
        return cls(
            features=payload.get("features", "main"),
            max_iter=payload.get("max_iter", 50),
            tol=payload.get("tol", 1e-10),
            ridge=payload.get("ridge", 1e-8),
            decay=payload.get("decay"),
        )

    def __repr__(self):
        return f"LearnerSpec(features={self.features!r})"
