import logging
import numpy as np
from .base import constant_model
from .glm import quasi_binomial_loss

logger = logging.getLogger(__name__)


def take_rows(inputs, idx):
    if hasattr(inputs, "take"):
        return inputs.take(idx)
    return np.asarray(inputs)[idx]


def fold_assignment(n, folds, seed):
    """Seed-deterministic balanced fold labels 0..folds-1."""
    rng = np.random.default_rng(seed)
    labels = np.empty(n, dtype=int)
    labels[rng.permutation(n)] = np.arange(n) % folds
    return labels


def cross_validated_risk(learner, inputs, response, weights, labels, folds):
    total_loss = 0.0
    total_weight = 0.0
    failed = 0
    for v in range(folds):
        train = np.flatnonzero(labels != v)
        valid = np.flatnonzero(labels == v)
        if not np.any(weights[train] > 0):
            failed += 1
            continue
        try:
            model = learner.fit(take_rows(inputs, train), response[train], weights[train])
            mu = model.predict(take_rows(inputs, valid))
        except (ValueError, np.linalg.LinAlgError) as e:
            logger.warning("%s failed on fold %d: %s", learner.name, v, e)
            failed += 1
            continue
        w = weights[valid]
        if w.sum() <= 0:
            continue
        total_loss += quasi_binomial_loss(response[valid], mu, w) * w.sum()
        total_weight += w.sum()
    if failed == folds or total_weight <= 0:
        return np.nan, failed
    return total_loss / total_weight, failed


def fit_discrete_super_learner(library, inputs, response, weights=None, folds=10, seed=0):
    library = list(library)
    if not library:
        raise ValueError("Super learner library is empty")
    if folds < 2:
        raise ValueError("Super learner needs at least 2 folds")
    y = np.asarray(response, dtype=float)
    n = len(y)
    if n < folds:
        raise ValueError(f"Cannot split {n} rows into {folds} folds")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    labels = fold_assignment(n, folds, seed)

    members = []
    for learner in library:
        risk, failed = cross_validated_risk(learner, inputs, y, w, labels, folds)
        members.append({'name': learner.name, 'cv_risk': risk, 'failed_folds': failed})
    risks = np.array([m['cv_risk'] for m in members], dtype=float)
    if np.all(np.isnan(risks)):
        raise ValueError("Every super learner member failed on every fold")
    # nanargmin returns the first minimiser, so ties go to the earliest member
    best = int(np.nanargmin(risks))
    logger.debug("Super learner selected %s (cv risk %.6g)", library[best].name, risks[best])
    model = library[best].fit(inputs, y, w)
    model.report = {'selected': library[best].name, 'selected_index': best, 'members': members, 'folds': folds}
    return model


def fit_learner(learner, inputs, response, weights=None, folds=10, seed=0):
    """Fit one learner or select from a library; constant responses get an exact model."""
    y = np.asarray(response, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    library = list(learner) if isinstance(learner, (list, tuple)) else [learner]
    positive = w > 0
    if not np.any(positive):
        raise ValueError("All weights are zero")
    values = y[positive]
    if np.all(values == values[0]):
        return constant_model(values[0], library[0])
    if len(library) == 1:
        return library[0].fit(inputs, y, w)
    n_folds = min(folds, int(positive.sum()))
    if n_folds < 2:
        return library[0].fit(inputs, y, w)
    keep = np.flatnonzero(positive)
    model = fit_discrete_super_learner(library, take_rows(inputs, keep), y[keep], w[keep], n_folds, seed)
    return model

