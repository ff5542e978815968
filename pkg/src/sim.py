import logging
from dataclasses import dataclass, asdict, fields
import numpy as np
import pandas as pd
from scipy.special import expit
from interventions import NodeHistory, gstar_prob
from panel import TrialPanel, EventRecord, at_risk_mask, CENSORED, PRIMARY, COMPETING

logger = logging.getLogger(__name__)

DEFAULT_BLOCK = 4096
NODE_IDS = {'L0': 0, 'A0': 1, 'Z0': 2, 'C': 3, 'D': 4, 'Y': 5, 'L': 6, 'A': 7, 'Z': 8}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    c_Z0: float = -1.5
    c_Z: float = -2.5
    p_Z: float = 1.0
    p_ZY: float = 1.0
    b_ZZ: float = 8.0
    outcome_intercept: float = -3.75
    covariate_noise_sd: float = 0.5
    covariate_drift_coef: float = 0.3
    outcome_slope: float = 0.3
    n_visits: int = 5
    full_adherence: bool = True
    decay: float = None
    death_hazard: float = 0.0
    censor_hazard: float = 0.0
    discontinue_prob: float = 0.0

    def __post_init__(self):
        if self.p_Z < 0 or self.p_ZY < 0:
            raise ValueError("Concomitant efficacies p_Z and p_ZY must be nonnegative")
        if self.covariate_noise_sd <= 0:
            raise ValueError("covariate_noise_sd must be positive")
        if self.n_visits < 1:
            raise ValueError("n_visits must be at least 1")
        for name in ("death_hazard", "censor_hazard", "discontinue_prob"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.decay is not None and not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"Unknown scenario fields: {sorted(unknown)}")
        return cls(**payload)


def scenario_presets():
    return {
        'scenario1': ScenarioConfig(name="scenario1", p_Z=1.0, p_ZY=1.0, c_Z0=-1.5, c_Z=-2.5),
        'scenario2': ScenarioConfig(name="scenario2", p_Z=1.0, p_ZY=1.0, c_Z0=-1.0, c_Z=0.0),
        'scenario3': ScenarioConfig(name="scenario3", p_Z=0.1, p_ZY=0.1, c_Z0=-1.5, c_Z=-2.5),
    }


@dataclass(frozen=True)
class ToyConfig:
    """Two-visit DGP with binary covariates, non-adherence, deaths and censoring.

    Coefficient tuples start with the intercept; regressor order is given
    next to each field.
    """
    z0: tuple = (-0.5, 1.0)                     # L0
    y1: tuple = (-1.5, 0.8, -0.7, -0.5)         # L0, A0, Z0
    l1: tuple = (-0.3, 1.2, -0.8, -0.4)         # L0, A0, Z0
    z1: tuple = (-1.0, 1.5, 2.0)                # L1, Z0
    a1: tuple = (-1.7, 3.4, -0.3)               # A0, L1
    y2: tuple = (-1.2, 0.8, 0.4, -0.7, -0.5)    # L1, L0, A1, Z1
    death_hazard: float = 0.05
    censor_hazard: float = 0.05
    n_visits: int = 2


class CounterStream:
    """Philox draws keyed by (seed, node, visit, block of subjects).

    Subject i always receives the same draw for a given node and visit, no
    matter how many subjects are simulated or which intervention is applied.
    """

    def __init__(self, seed, block_size=DEFAULT_BLOCK):
        if seed < 0:
            raise ValueError("Seed must be a nonnegative integer")
        self.seed = int(seed)
        self.block_size = int(block_size)

    def draws(self, node, visit, start, count, normal=False):
        bs = self.block_size
        parts = []
        for block in range(start // bs, (start + count - 1) // bs + 1):
            sequence = np.random.SeedSequence([self.seed, NODE_IDS[node], visit, block])
            gen = np.random.Generator(np.random.Philox(sequence))
            values = gen.standard_normal(bs) if normal else gen.random(bs)
            lo = max(start, block * bs) - block * bs
            hi = min(start + count, (block + 1) * bs) - block * bs
            parts.append(values[lo:hi])
        return np.concatenate(parts)


def _draw_z(arm, k, u, p_dgp, L0, Z0, Z_prev):
    form = None if arm is None else arm.z_spec.form
    if form is None or form == "observational" or (form == "dynamic" and k == 0):
        return (u < p_dgp).astype(np.int8)
    if form == "static":
        return np.full(len(u), arm.z_spec.value, dtype=np.int8)
    if form == "dynamic":
        return Z0.copy()
    p1 = gstar_prob(arm.z_spec, 1, NodeHistory(k, L0[:, None], Z0, Z_prev))
    return (u < p1).astype(np.int8)


def _scenario_arrays(config, n, seed, arm=None, start=0, block_size=DEFAULT_BLOCK, horizon=None):
    K = config.n_visits
    horizon = K if horizon is None else horizon
    stream = CounterStream(seed, block_size)

    def draw(node, visit, normal=False):
        return stream.draws(node, visit, start, n, normal)

    decay = 1.0 if config.decay is None else config.decay
    L0 = draw("L0", 0, normal=True)
    A0 = (draw("A0", 0) < 0.5).astype(np.int8)
    Z0 = _draw_z(arm, 0, draw("Z0", 0), expit(L0 + config.c_Z0), L0, None, None)
    if arm is not None:
        A0[:] = arm.a_value

    Y = np.zeros((K, n), dtype=np.int8)
    D = np.zeros_like(Y)
    C = np.zeros_like(Y)
    L = np.zeros((K - 1, n))
    A = np.zeros((K - 1, n), dtype=np.int8)
    Z = np.zeros((K - 1, n), dtype=np.int8)

    L_cur, A_cur, Z_cur = L0, A0, Z0
    S_L, S_A, S_Z, W = L0.copy(), A0.astype(float), Z0.astype(float), 1.0
    y_cum = np.zeros(n, dtype=bool)
    d_cum = np.zeros(n, dtype=bool)
    c_cum = np.zeros(n, dtype=bool)
    for k in range(1, horizon + 1):
        L_avg, A_avg, Z_avg = S_L / W, S_A / W, S_Z / W
        risk = ~(y_cum | d_cum | c_cum)
        if config.censor_hazard > 0 and arm is None:
            c_cum |= risk & (draw("C", k) < config.censor_hazard)
        uncensored = risk & ~c_cum
        if config.death_hazard > 0:
            d_cum |= uncensored & (draw("D", k) < config.death_hazard)
        p_y = expit(config.outcome_slope * (L_avg - A_avg - config.p_ZY * Z_avg) + config.outcome_intercept)
        y_cum |= uncensored & ~d_cum & (draw("Y", k) < p_y)
        Y[k - 1], D[k - 1], C[k - 1] = y_cum, d_cum, c_cum
        if k == K or k == horizon:
            break

        L_new = (L_cur - config.covariate_drift_coef * (A_avg + config.p_Z * Z_avg)
                 + config.covariate_noise_sd * draw("L", k, normal=True))
        if arm is not None:
            A_new = np.full(n, arm.a_value, dtype=np.int8)
        elif config.full_adherence:
            A_new = A0.copy()
        else:
            stop = risk & (draw("A", k) < config.discontinue_prob)
            A_new = (A_cur & ~stop).astype(np.int8)
        p_z = expit(L_new + config.b_ZZ * Z_cur + config.c_Z)
        drawn = _draw_z(arm, k, draw("Z", k), p_z, L0, Z0, Z_cur)
        # absorbed subjects carry their last concomitant status
        Z_new = np.where(risk, drawn, Z_cur).astype(np.int8)

        L[k - 1], A[k - 1], Z[k - 1] = L_new, A_new, Z_new
        S_L = decay * S_L + L_new
        S_A = decay * S_A + A_new
        S_Z = decay * S_Z + Z_new
        W = decay * W + 1.0
        L_cur, A_cur, Z_cur = L_new, A_new, Z_new
    return {'L0': L0, 'A0': A0, 'Z0': Z0, 'Y': Y, 'D': D, 'C': C, 'L': L, 'A': A, 'Z': Z}


def _toy_arrays(config, n, seed, block_size=DEFAULT_BLOCK):
    stream = CounterStream(seed, block_size)

    def bern(node, visit, p):
        return (stream.draws(node, visit, 0, n) < p).astype(np.int8)

    def lin(coef, *terms):
        return coef[0] + sum(c * t for c, t in zip(coef[1:], terms))

    L0 = bern("L0", 0, 0.5)
    Z0 = bern("Z0", 0, expit(lin(config.z0, L0)))
    A0 = bern("A0", 0, 0.5)
    Y = np.zeros((2, n), dtype=np.int8)
    D = np.zeros_like(Y)
    C = np.zeros_like(Y)

    c1 = bern("C", 1, config.censor_hazard).astype(bool)
    d1 = ~c1 & bern("D", 1, config.death_hazard).astype(bool)
    y1 = ~c1 & ~d1 & bern("Y", 1, expit(lin(config.y1, L0, A0, Z0))).astype(bool)
    Y[0], D[0], C[0] = y1, d1, c1

    L1 = bern("L", 1, expit(lin(config.l1, L0, A0, Z0)))
    Z1 = bern("Z", 1, expit(lin(config.z1, L1, Z0)))
    A1 = bern("A", 1, expit(lin(config.a1, A0, L1)))

    risk = ~(c1 | d1 | y1)
    c2 = risk & bern("C", 2, config.censor_hazard).astype(bool)
    d2 = risk & ~c2 & bern("D", 2, config.death_hazard).astype(bool)
    y2 = risk & ~c2 & ~d2 & bern("Y", 2, expit(lin(config.y2, L1, L0, A1, Z1))).astype(bool)
    Y[1], D[1], C[1] = Y[0] | y2, D[0] | d2, C[0] | c2
    return {'L0': L0.astype(float), 'A0': A0, 'Z0': Z0, 'Y': Y, 'D': D, 'C': C,
            'L': L1[None, :].astype(float), 'A': A1[None, :], 'Z': Z1[None, :]}


def simulate_trial(config, n, seed, block_size=DEFAULT_BLOCK):
    if n < 1:
        raise ValueError("Need at least one subject")
    if isinstance(config, ToyConfig):
        arrays = _toy_arrays(config, n, seed, block_size)
    else:
        arrays = _scenario_arrays(config, n, seed, block_size=block_size)
    K = arrays['Y'].shape[0]
    logger.info("Simulated %d subjects over %d visits (seed %d)", n, K, seed)
    return TrialPanel(
        ids=np.arange(n), visit_times=np.arange(K + 1, dtype=float),
        L0=arrays['L0'][:, None], Z0=arrays['Z0'], A0=arrays['A0'],
        Y=arrays['Y'], D=arrays['D'], C=arrays['C'],
        L=arrays['L'][:, :, None], A=arrays['A'], Z=arrays['Z'], randomized=True,
    )


def _check_arm(config, arm, horizon):
    if not 1 <= horizon <= config.n_visits:
        raise ValueError(f"Horizon {horizon} outside 1..{config.n_visits}")
    if arm is not None and arm.z_spec.form == "stochastic" and arm.z_spec.law is None:
        raise ValueError("Stochastic arm needs a fitted concomitant-treatment law")


def simulate_counterfactual_mean(config, arm, horizon, n_mc, seed, chunk=1 << 18, block_size=DEFAULT_BLOCK):
    """Monte-Carlo risk of Y_horizon with (A, Z) drawn from the arm's g*; arm None is the factual law."""
    _check_arm(config, arm, horizon)
    chunk = max(block_size, chunk - chunk % block_size)
    events = 0
    for start in range(0, n_mc, chunk):
        count = min(chunk, n_mc - start)
        arrays = _scenario_arrays(config, count, seed, arm, start, block_size, horizon)
        events += int(arrays['Y'][horizon - 1].sum())
    risk = events / n_mc
    mc_se = float(np.sqrt(risk * (1.0 - risk) / n_mc))
    name = "observed" if arm is None else arm.name
    logger.info("Oracle %s: risk %.6f (MC SE %.6f) at visit %d from %d draws", name, risk, mc_se, horizon, n_mc)
    return {'arm': name, 'horizon': horizon, 'n_mc': n_mc, 'risk': risk, 'mc_se': mc_se}


def simulate_counterfactual_contrast(config, active, control, horizon, n_mc, seed, chunk=1 << 18,
                                     block_size=DEFAULT_BLOCK):
    """Paired risk difference; both arms reuse every subject's random numbers."""
    _check_arm(config, active, horizon)
    _check_arm(config, control, horizon)
    chunk = max(block_size, chunk - chunk % block_size)
    sums = np.zeros(3)
    sum_sq = 0.0
    for start in range(0, n_mc, chunk):
        count = min(chunk, n_mc - start)
        y1 = _scenario_arrays(config, count, seed, active, start, block_size, horizon)['Y'][horizon - 1]
        y0 = _scenario_arrays(config, count, seed, control, start, block_size, horizon)['Y'][horizon - 1]
        diff = y1.astype(float) - y0
        sums += (y1.sum(), y0.sum(), diff.sum())
        sum_sq += float(np.sum(diff ** 2))
    risk1, risk0, psi = sums / n_mc
    var = max(sum_sq / n_mc - psi ** 2, 0.0)
    return {
        'horizon': horizon, 'n_mc': n_mc,
        'risk1': risk1, 'risk1_se': float(np.sqrt(risk1 * (1 - risk1) / n_mc)),
        'risk0': risk0, 'risk0_se': float(np.sqrt(risk0 * (1 - risk0) / n_mc)),
        'psi': psi, 'mc_se': float(np.sqrt(var / n_mc)),
    }


def drop_in_trajectory(panel):
    """Fraction with Z_k = 1 among at-risk subjects, per randomized arm and visit."""
    rows = []
    for k in range(0, panel.K):
        risk = np.ones(panel.n, dtype=bool) if k == 0 else at_risk_mask(panel, k)
        z = panel.node("Z", k)
        for a in (0, 1):
            members = risk & (panel.A0 == a)
            count = int(members.sum())
            if count == 0:
                logger.warning("No arm-%d subjects at risk at visit %d", a, k)
            fraction = float(z[members].mean()) if count else np.nan
            rows.append({'visit': k, 'arm': a, 'at_risk': count, 'fraction': fraction})
    return pd.DataFrame(rows)


def simulate_event_records(n, seed, visit_times=None, n_covariates=3, step=1.0):
    """Continuous-time trial records shaped like a cardiovascular outcomes trial.

    Processes are advanced on a monthly lattice; event times are placed
    uniformly within the month in which they occur. Covariates are measured
    at visit dates with occasional missed visits.
    """
    visit_times = np.arange(0.0, 49.0, 6.0) if visit_times is None else np.asarray(visit_times, dtype=float)
    rng = np.random.default_rng(seed)
    horizon = float(visit_times[-1])
    months = np.arange(0.0, horizon + step, step)

    L0 = rng.standard_normal((n, n_covariates))
    A0 = (rng.random(n) < 0.5).astype(int)
    Z0 = (rng.random(n) < expit(L0[:, 0] - 1.5)).astype(int)
    L = L0.copy()
    A = A0.copy()
    Z = Z0.copy()
    T = np.full(n, np.inf)
    delta = np.full(n, CENSORED)
    discontinued = np.full(n, np.nan)
    exposure_open = np.where(Z0 == 1, 0.0, np.nan)
    exposures = [[] for _ in range(n)]
    measurements = [[] for _ in range(n)]
    visit_set = set(np.round(visit_times[1:], 9))

    for t in months[:-1]:
        alive = ~np.isfinite(T)
        u = rng.random((4, n))
        within = t + step * rng.random(n)
        h_censor = 0.002
        h_death = expit(-6.5 + 0.3 * L[:, 1])
        h_event = expit(-5.2 + 0.4 * L[:, 0] - 0.35 * A - 0.4 * Z)
        censor = alive & (u[0] < h_censor)
        death = alive & ~censor & (u[1] < h_death)
        event = alive & ~censor & ~death & (u[2] < h_event)
        for mask, kind in ((censor, CENSORED), (death, COMPETING), (event, PRIMARY)):
            T[mask] = within[mask]
            delta[mask] = kind
        alive = ~np.isfinite(T)

        L = L - 0.05 * (A + Z)[:, None] + 0.1 * rng.standard_normal((n, n_covariates))
        stop_a = alive & (A == 1) & (u[3] < 0.004)
        A[stop_a] = 0
        discontinued[stop_a] = t + step
        switch = rng.random(n)
        start_z = alive & (Z == 0) & (switch < expit(L[:, 0] - 4.5 + 0.5 * (1 - A0)))
        stop_z = alive & (Z == 1) & (switch < 0.01)
        exposure_open[start_z] = t + step * rng.random(int(start_z.sum()))
        for i in np.flatnonzero(stop_z):
            exposures[i].append((exposure_open[i], t + step))
            exposure_open[i] = np.nan
        Z[start_z] = 1
        Z[stop_z] = 0

        if round(t + step, 9) in visit_set:
            attended = alive & (rng.random(n) < 0.85)
            for i in np.flatnonzero(attended):
                values = L[i].copy()
                values[rng.random(n_covariates) < 0.05] = np.nan
                measurements[i].append((t + step, values))

    records = []
    for i in range(n):
        follow_up = float(T[i]) if np.isfinite(T[i]) else horizon + step
        if np.isfinite(exposure_open[i]):
            exposures[i].append((exposure_open[i], None))
        records.append(EventRecord(
            id=i, T_tilde=follow_up, Delta_tilde=int(delta[i]), L0=L0[i], Z0=int(Z0[i]), A0=int(A0[i]),
            exposures=exposures[i], measurements=measurements[i],
            discontinue_time=None if np.isnan(discontinued[i]) else float(discontinued[i]),
        ))
    logger.info("Simulated %d event records over %.0f months", n, horizon)
    return records


class ToyLaw:
    """Conditional laws of the two-visit toy DGP, for exact enumeration."""

    def __init__(self, config):
        self.config = config

    @staticmethod
    def _lin(coef, *terms):
        return coef[0] + sum(c * t for c, t in zip(coef[1:], terms))

    def baseline(self):
        p_z0 = {l0: float(expit(self._lin(self.config.z0, l0))) for l0 in (0.0, 1.0)}
        return [(0.0, 0.5, p_z0[0.0]), (1.0, 0.5, p_z0[1.0])]

    def hazards(self, k, h):
        d = self.config.death_hazard
        if k == 1:
            p = expit(self._lin(self.config.y1, h['L'][0], h['A'][0], h['Z'][0]))
        else:
            p = expit(self._lin(self.config.y2, h['L'][1], h['L'][0], h['A'][1], h['Z'][1]))
        return (1.0 - d) * float(p), d

    def covariate(self, k, h):
        p = float(expit(self._lin(self.config.l1, h['L'][0], h['A'][0], h['Z'][0])))
        return [(1.0, p), (0.0, 1.0 - p)]

    def concomitant(self, k, h, l_k):
        return float(expit(self._lin(self.config.z1, l_k, h['Z'][0])))


class EmpiricalLaw:
    """Empirical conditional frequencies of a discrete panel, A-history fixed at the arm value."""

    def __init__(self, panel, a_value):
        for name, values in (("L0", panel.L0), ("L", panel.L)):
            if not np.all(np.isin(values, (0.0, 1.0))):
                raise ValueError(f"Enumeration needs binary covariates; {name} is not binary")
        self.panel = panel
        self.a = a_value

    def _rows(self, k, h):
        """Subjects at risk and uncensored at visit k whose history matches h."""
        p = self.panel
        rows = at_risk_mask(p, k) & (p.C[k - 1] == 0)
        for j in range(k):
            covariate = p.L0[:, 0] if j == 0 else p.L[j - 1, :, 0]
            rows &= covariate == h['L'][j]
            rows &= p.node("A", j) == self.a
            rows &= p.node("Z", j) == h['Z'][j]
        if not rows.any():
            raise ValueError(f"History {h} at visit {k} has no support in the panel")
        return rows

    def baseline(self):
        L0 = self.panel.L0[:, 0]
        out = []
        for l0 in np.unique(L0):
            members = L0 == l0
            out.append((float(l0), float(members.mean()), float(self.panel.Z0[members].mean())))
        return out

    def hazards(self, k, h):
        rows = self._rows(k, h)
        return float(self.panel.Y[k - 1, rows].mean()), float(self.panel.D[k - 1, rows].mean())

    def _survivors(self, k, h):
        rows = self._rows(k, h)
        return rows & (self.panel.Y[k - 1] == 0) & (self.panel.D[k - 1] == 0)

    def covariate(self, k, h):
        survivors = self._survivors(k, h)
        if not survivors.any():
            return []
        L_k = self.panel.L[k - 1, survivors, 0]
        return [(float(v), float(np.mean(L_k == v))) for v in np.unique(L_k)]

    def concomitant(self, k, h, l_k):
        survivors = self._survivors(k, h) & (self.panel.L[k - 1, :, 0] == l_k)
        return float(self.panel.Z[k - 1, survivors].mean())


def _z_star_one(arm, k, h, observed_p):
    form = arm.z_spec.form
    if form == "static":
        return float(arm.z_spec.value)
    if form == "observational" or (form == "dynamic" and k == 0):
        return observed_p()
    if form == "dynamic":
        return float(h['Z'][0])
    z_prev = np.array([h['Z'][k - 1]]) if k > 0 else None
    history = NodeHistory(k, np.array([[h['L'][0]]]), np.array([h['Z'][0]]), z_prev)
    return float(gstar_prob(arm.z_spec, 1, history)[0])


def _extend(h, l_k, a, z):
    return {'L': h['L'] + [l_k], 'A': h['A'] + [a], 'Z': h['Z'] + [z]}


def _value(law, arm, h, k, horizon):
    q_y, q_d = law.hazards(k, h)
    if k == horizon:
        return q_y
    survive = 1.0 - q_y - q_d
    if survive <= 0:
        return q_y
    cont = 0.0
    for l_k, p_l in law.covariate(k, h):
        if p_l == 0:
            continue
        pz1 = _z_star_one(arm, k, _extend(h, l_k, arm.a_value, None),
                          lambda: law.concomitant(k, h, l_k))
        for z, pz in ((1, pz1), (0, 1.0 - pz1)):
            if pz > 0:
                cont += p_l * pz * _value(law, arm, _extend(h, l_k, arm.a_value, z), k + 1, horizon)
    return q_y + survive * cont


def _enumerate(law, arm, horizon):
    psi = 0.0
    for l0, p_l0, p_z0 in law.baseline():
        h0 = {'L': [l0], 'A': [arm.a_value], 'Z': [None]}
        pz1 = _z_star_one(arm, 0, h0, lambda: p_z0)
        for z0, pz in ((1, pz1), (0, 1.0 - pz1)):
            if pz > 0:
                psi += p_l0 * pz * _value(law, arm, {'L': [l0], 'A': [arm.a_value], 'Z': [z0]}, 1, horizon)
    return psi


def enumerate_gformula(panel, arm, horizon):
    """Exact g-formula under the panel's empirical law, summed over every discrete trajectory."""
    if not 1 <= horizon <= panel.K:
        raise ValueError(f"Horizon {horizon} outside 1..{panel.K}")
    return _enumerate(EmpiricalLaw(panel, arm.a_value), arm, horizon)


def enumerate_truth(config, arm, horizon):
    """Exact post-interventional risk under the toy DGP."""
    if not 1 <= horizon <= config.n_visits:
        raise ValueError(f"Horizon {horizon} outside 1..{config.n_visits}")
    return _enumerate(ToyLaw(config), arm, horizon)
