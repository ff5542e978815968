import logging
import numpy as np
import pandas as pd
from interventions import NodeHistory, gstar_prob
from panel import at_risk_mask

logger = logging.getLogger(__name__)


class EstimationError(ValueError):
    """Estimation cannot proceed: empty risk sets, positivity breakdown and the like."""


def _ratio(H, numerator, denominator, label):
    out = np.zeros_like(H)
    live = (H > 0) & (numerator > 0)
    if np.any(denominator[live] <= 0):
        raise EstimationError(f"Positivity breakdown: zero fitted probability for {label}")
    out[live] = numerator[live] / denominator[live]
    return H * out


def gstar_z(panel, policy, j):
    """g*(observed Z_j | past) for every subject, or None when Z_j is not intervened on."""
    spec = policy.z_spec
    Z_j = panel.node("Z", j)
    if spec.form == "observational" or (spec.form == "dynamic" and j == 0):
        return None
    z_prev = panel.node("Z", j - 1) if j > 0 else None
    return gstar_prob(spec, Z_j, NodeHistory(j, panel.L0, panel.Z0, z_prev))


def clever_weights(panel, gfit, policy, k, weight_cap=None):
    if not 1 <= k <= panel.K:
        raise ValueError(f"Visit {k} outside 1..{panel.K}")
    H = (at_risk_mask(panel, k) & (panel.C[k - 1] == 0)).astype(float)
    for j in range(1, k + 1):
        H = _ratio(H, np.ones(panel.n), gfit.prob("C", j), f"C_{j}")
    for j in range(0, k):
        numerator = (panel.node("A", j) == policy.a_value).astype(float)
        H = _ratio(H, numerator, gfit.prob("A", j), f"A_{j}")
        gstar = gstar_z(panel, policy, j)
        if gstar is not None:
            H = _ratio(H, gstar, gfit.prob("Z", j), f"Z_{j}")
    if weight_cap is not None:
        H = np.minimum(H, weight_cap)
    return H


def support_diagnostics(panel, gfit, policy, horizon=None, threshold=50.0):
    """Per-visit tail summary of clever weights among subjects with positive weight."""
    horizon = panel.K if horizon is None else horizon
    rows = []
    for k in range(1, horizon + 1):
        H = clever_weights(panel, gfit, policy, k)
        positive = H[H > 0]
        if positive.size:
            max_w = float(positive.max())
            q99 = float(np.quantile(positive, 0.99))
            frac = float(np.mean(positive > threshold))
        else:
            max_w, q99, frac = 0.0, 0.0, 0.0
        rows.append({'visit': k, 'supported': int(positive.size), 'max_weight': max_w,
                     'q99_weight': q99, 'frac_above': frac, 'flagged': max_w > threshold})
        if max_w > threshold:
            logger.warning("%s: clever weight %.1f above %.0f at visit %d", policy.name, max_w, threshold, k)
    return pd.DataFrame(rows)
