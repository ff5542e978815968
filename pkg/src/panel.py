import logging
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

EVENT_KINDS = ("baseline", "event", "covariate", "exposure_start", "exposure_stop", "discontinue")
CENSORED, PRIMARY, COMPETING = 0, 1, 2


class PanelError(ValueError):
    """Malformed panel or event data."""


class History:
    """Ordered visit histories (L-bar, A-bar, Z-bar) for a set of subjects.

    L[0] is the baseline covariate block; A[j] and Z[j] are visit-j nodes.
    The lists may differ in length, e.g. the Z_k propensity sees A_k but
    only Z_{k-1}.
    """

    def __init__(self, L, A, Z):
        self.L = [np.asarray(x, dtype=float) for x in L]
        self.A = [np.asarray(x, dtype=float) for x in A]
        self.Z = [np.asarray(x, dtype=float) for x in Z]

    @property
    def n(self):
        return self.L[0].shape[0]

    def matrix(self):
        cols = [x[:, None] if x.ndim == 1 else x for x in self.L]
        cols += [x[:, None] for x in self.A]
        cols += [x[:, None] for x in self.Z]
        return np.hstack(cols)

    def take(self, idx):
        return History([x[idx] for x in self.L], [x[idx] for x in self.A], [x[idx] for x in self.Z])

    def with_last(self, a=None, z=None):
        """Copy with the most recent A and/or Z replaced by a value or per-subject array."""
        A = list(self.A)
        Z = list(self.Z)
        if a is not None:
            A[-1] = np.broadcast_to(np.asarray(a, dtype=float), (self.n,)).copy()
        if z is not None:
            Z[-1] = np.broadcast_to(np.asarray(z, dtype=float), (self.n,)).copy()
        return History(self.L, A, Z)


@dataclass(frozen=True)
class TrialPanel:
    """n subjects by K visits; per-visit arrays are stored visit-major.

    Y, D, C have shape (K, n) with row k-1 holding visit k. L has shape
    (K-1, n, d') and A, Z have shape (K-1, n) for visits 1..K-1.
    """
    ids: np.ndarray
    visit_times: np.ndarray
    L0: np.ndarray
    Z0: np.ndarray
    A0: np.ndarray
    Y: np.ndarray
    D: np.ndarray
    C: np.ndarray
    L: np.ndarray
    A: np.ndarray
    Z: np.ndarray
    randomized: bool = True

    @property
    def n(self):
        return len(self.ids)

    @property
    def K(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.L0.shape[1]

    @property
    def d_post(self):
        return self.L.shape[2] if self.L.ndim == 3 and self.L.shape[0] else self.d

    def node(self, name, k):
        """Visit-k value of node name; Y/D/C at k = 0 are all zero."""
        if name in ("Y", "D", "C"):
            if k == 0:
                return np.zeros(self.n, dtype=int)
            return getattr(self, name)[k - 1]
        if k == 0:
            return getattr(self, name + "0")
        return getattr(self, name)[k - 1]

    def history(self, through, a_through=None, z_through=None):
        """History with L through visit `through`; A and Z default to the same visit."""
        a_through = through if a_through is None else a_through
        z_through = through if z_through is None else z_through
        if not 0 <= through <= self.K - 1:
            raise ValueError(f"History visit {through} outside 0..{self.K - 1}")
        L = [self.L0] + [self.L[j - 1] for j in range(1, through + 1)]
        A = [self.node("A", j) for j in range(0, a_through + 1)]
        Z = [self.node("Z", j) for j in range(0, z_through + 1)]
        return History(L, A, Z)

    def take(self, idx):
        idx = np.asarray(idx)
        return TrialPanel(
            ids=self.ids[idx], visit_times=self.visit_times, L0=self.L0[idx], Z0=self.Z0[idx],
            A0=self.A0[idx], Y=self.Y[:, idx], D=self.D[:, idx], C=self.C[:, idx],
            L=self.L[:, idx], A=self.A[:, idx], Z=self.Z[:, idx], randomized=self.randomized,
        )


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def add(self, rule, message, subject=None, visit=None):
        self.violations.append({'rule': rule, 'subject': subject, 'visit': visit, 'message': message})

    def to_frame(self):
        return pd.DataFrame(self.violations, columns=['rule', 'subject', 'visit', 'message'])

    def __len__(self):
        return len(self.violations)


@dataclass
class EventRecord:
    id: object
    T_tilde: float
    Delta_tilde: int
    L0: np.ndarray
    Z0: int = 0
    A0: int = 0
    exposures: list = field(default_factory=list)
    measurements: list = field(default_factory=list)
    discontinue_time: float = None


def at_risk_mask(panel, k):
    if not 1 <= k <= panel.K:
        raise ValueError(f"Visit {k} outside 1..{panel.K}")
    if k == 1:
        return np.ones(panel.n, dtype=bool)
    j = k - 2
    return (panel.Y[j] == 0) & (panel.D[j] == 0) & (panel.C[j] == 0)


def validate_panel(panel):
    report = ValidationReport()
    n, K = panel.n, panel.K
    times = np.asarray(panel.visit_times, dtype=float)
    if len(times) != K + 1:
        report.add("visit_grid", f"expected {K + 1} visit times, got {len(times)}")
    elif np.any(np.diff(times) <= 0):
        report.add("visit_grid", "visit times not strictly increasing")

    expected = {'Y': (K, n), 'D': (K, n), 'C': (K, n), 'A': (K - 1, n), 'Z': (K - 1, n),
                'Z0': (n,), 'A0': (n,)}
    for name, shape in expected.items():
        if getattr(panel, name).shape != shape:
            report.add("shape", f"{name} has shape {getattr(panel, name).shape}, expected {shape}")
    if panel.L0.ndim != 2 or panel.L0.shape[0] != n:
        report.add("shape", f"L0 has shape {panel.L0.shape}, expected ({n}, d)")
    if panel.L.ndim != 3 or panel.L.shape[:2] != (K - 1, n):
        report.add("shape", f"L has shape {panel.L.shape}, expected ({K - 1}, {n}, d')")
    if not report.ok:
        return report

    for name in ("Y", "D", "C", "A", "Z", "Z0", "A0"):
        values = np.asarray(getattr(panel, name))
        bad = ~np.isin(values, (0, 1))
        for pos in zip(*np.nonzero(bad)):
            visit = int(pos[0]) + 1 if values.ndim == 2 else 0
            subject = panel.ids[pos[-1]]
            report.add("binary", f"{name} not binary at k={visit}", subject, visit)
    if not np.all(np.isfinite(panel.L0)):
        for i in np.flatnonzero(~np.all(np.isfinite(panel.L0), axis=1)):
            report.add("baseline", "baseline covariates incomplete", panel.ids[i], 0)
    if not report.ok:
        return report

    for name in ("Y", "D", "C"):
        values = getattr(panel, name)
        broken = (values[:-1] == 1) & (values[1:] == 0)
        for j, i in zip(*np.nonzero(broken)):
            report.add("absorbing", f"absorbing {name} broken at k={j + 2}", panel.ids[i], int(j) + 2)

    stacked = np.stack([panel.Y, panel.D, panel.C])
    absorbed = stacked.any(axis=0)
    for i in np.flatnonzero(absorbed.any(axis=0)):
        first = int(np.argmax(absorbed[:, i]))
        jumping = stacked[:, first, i]
        if jumping.sum() > 1:
            report.add("exclusive", f"exclusive first transition violated at k={first + 1}",
                       panel.ids[i], first + 1)
        others = [p for p in range(3) if not jumping[p]]
        for p in others:
            if stacked[p, first:, i].any():
                later = first + int(np.argmax(stacked[p, first:, i])) + 1
                report.add("exclusive", f"second transition after absorption at k={later}",
                           panel.ids[i], later)
    return report


def _normalize_intervals(intervals, end):
    clipped = []
    for start, stop in intervals:
        stop = end if stop is None else min(float(stop), end)
        start = max(float(start), 0.0)
        if stop > start:
            clipped.append((start, stop))
    clipped.sort()
    merged = []
    for start, stop in clipped:
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], stop))
        else:
            merged.append((start, stop))
    return merged


def _record_grid(record, times, d_post):
    K = len(times) - 1
    T = float(record.T_tilde)
    if T < 0:
        raise PanelError(f"Subject {record.id}: negative follow-up time {T}")
    if record.Delta_tilde not in (CENSORED, PRIMARY, COMPETING):
        raise PanelError(f"Subject {record.id}: unknown event type {record.Delta_tilde}")
    L0 = np.asarray(record.L0, dtype=float)
    if not np.all(np.isfinite(L0)):
        raise PanelError(f"Subject {record.id}: baseline covariates incomplete")

    YDC = np.zeros((3, K), dtype=np.int8)
    visit = int(np.searchsorted(times[1:], T, side="left")) + 1
    if visit <= K:
        row = {PRIMARY: 0, COMPETING: 1, CENSORED: 2}[record.Delta_tilde]
        YDC[row, visit - 1:] = 1

    Z = np.zeros(K - 1, dtype=np.int8)
    for start, stop in _normalize_intervals(record.exposures, T):
        Z |= ((start <= times[1:K]) & (stop > times[0:K - 1])).astype(np.int8)

    A = np.full(K - 1, int(record.A0), dtype=np.int8)
    if record.discontinue_time is not None:
        A &= (float(record.discontinue_time) > times[1:K]).astype(np.int8)

    measurements = []
    for time, values in record.measurements:
        if time > times[-1] or time > T:
            logger.warning("Subject %s: measurement at %.4g after follow-up end, dropped", record.id, time)
            continue
        values = np.asarray(values, dtype=float)
        if values.shape != (d_post,):
            raise PanelError(f"Subject {record.id}: covariate measurement at {time} has {values.size} values, "
                             f"expected {d_post}")
        measurements.append((float(time), values))
    measurements.sort(key=lambda m: m[0])

    L = np.empty((K - 1, d_post))
    # the baseline row is the time-0 measurement when both describe the same covariates
    current = L0.copy() if len(L0) == d_post else np.full(d_post, np.nan)
    cursor = 0
    for k in range(1, K):
        # covariates are lagged one visit: L_k is the latest value at or before t_{k-1}
        while cursor < len(measurements) and measurements[cursor][0] <= times[k - 1]:
            values = measurements[cursor][1]
            current = np.where(np.isfinite(values), values, current)
            cursor += 1
        if k < visit and not np.all(np.isfinite(current)):
            raise PanelError(f"Subject {record.id}: no covariate measurement at or before t={times[k - 1]:g} "
                             f"to carry into visit {k}")
        # values after absorption are ignored; never-measured ones are stored as 0
        L[k - 1] = np.where(np.isfinite(current), current, 0.0)
    return L0, YDC, L, A, Z


def covariate_width(records, d):
    """Width d' of the time-varying covariates; the baseline width when nothing is measured later."""
    widths = {np.atleast_1d(values).size for record in records for _, values in record.measurements}
    if len(widths) > 1:
        raise PanelError(f"Covariate measurements disagree on width: {sorted(widths)}")
    return widths.pop() if widths else d


def ingest_long_events(records, visit_times, randomized=True, d_post=None):
    """Discretize continuous-time records onto the visit grid.

    Time-varying covariates get their own width d' (taken from the measurements
    unless given). When d' equals the baseline width, L0 seeds the carried-forward
    values; otherwise every subject needs a measurement at or before baseline.
    """
    times = np.asarray(visit_times, dtype=float)
    if times.ndim != 1 or len(times) < 2:
        raise PanelError("Visit grid needs a baseline time and at least one visit")
    if np.any(np.diff(times) <= 0):
        raise PanelError("Visit times must be strictly increasing")
    records = list(records)
    if not records:
        raise PanelError("No event records to ingest")
    K = len(times) - 1
    d = len(np.atleast_1d(records[0].L0))
    d_post = covariate_width(records, d) if d_post is None else int(d_post)
    logger.info("Ingesting %d event records onto a %d-visit grid", len(records), K)

    ids, L0, Z0, A0 = [], [], [], []
    Y = np.zeros((K, len(records)), dtype=np.int8)
    D = np.zeros_like(Y)
    C = np.zeros_like(Y)
    L = np.empty((K - 1, len(records), d_post))
    A = np.zeros((K - 1, len(records)), dtype=np.int8)
    Z = np.zeros_like(A)
    for i, record in enumerate(records):
        if len(np.atleast_1d(record.L0)) != d:
            raise PanelError(f"Subject {record.id}: expected {d} baseline covariates")
        base, YDC, L_i, A_i, Z_i = _record_grid(record, times, d_post)
        ids.append(record.id)
        L0.append(base)
        Z0.append(int(record.Z0))
        A0.append(int(record.A0))
        Y[:, i], D[:, i], C[:, i] = YDC
        L[:, i] = L_i
        A[:, i] = A_i
        Z[:, i] = Z_i

    panel = TrialPanel(
        ids=np.asarray(ids), visit_times=times, L0=np.vstack(L0), Z0=np.asarray(Z0, dtype=np.int8),
        A0=np.asarray(A0, dtype=np.int8), Y=Y, D=D, C=C, L=L, A=A, Z=Z, randomized=randomized,
    )
    report = validate_panel(panel)
    if not report.ok:
        raise PanelError(f"Ingested panel failed validation: {report.violations[0]['message']}")
    return panel


def panel_to_events(panel):
    """Render a panel as event records that ingest back to the same panel.

    Treatment can only be represented as discontinuation of the randomized
    arm, so A_k must be A_0 times a non-increasing indicator.
    """
    times = np.asarray(panel.visit_times, dtype=float)
    K = panel.K
    beyond = times[-1] + (times[-1] - times[-2])
    records = []
    for i in range(panel.n):
        T, delta = beyond, CENSORED
        for row, kind in ((panel.Y, PRIMARY), (panel.D, COMPETING), (panel.C, CENSORED)):
            hits = np.flatnonzero(row[:, i])
            if hits.size and times[hits[0] + 1] < T:
                T, delta = times[hits[0] + 1], kind
        # open after t_{k-1} so the exposure lands only in (t_{k-1}, t_k]
        exposures = [(0.5 * (times[k - 1] + times[k]), times[k]) for k in range(1, K) if panel.Z[k - 1, i]]
        measurements = [(min(times[k - 1], T), panel.L[k - 1, i].copy()) for k in range(1, K)]
        discontinue = None
        if panel.A0[i] == 1:
            stopped = np.flatnonzero(panel.A[:, i] == 0)
            if stopped.size:
                discontinue = times[stopped[0] + 1]
        records.append(EventRecord(
            id=panel.ids[i], T_tilde=float(T), Delta_tilde=delta, L0=panel.L0[i].copy(),
            Z0=int(panel.Z0[i]), A0=int(panel.A0[i]), exposures=exposures,
            measurements=measurements, discontinue_time=discontinue,
        ))
    return records


def panel_to_frame(panel):
    columns = {'id': panel.ids}
    for j in range(panel.d):
        columns[f"L0_{j + 1}"] = panel.L0[:, j]
    columns['Z0'] = panel.Z0.astype(int)
    columns['A0'] = panel.A0.astype(int)
    for k in range(1, panel.K + 1):
        columns[f"Y{k}"] = panel.Y[k - 1].astype(int)
        columns[f"D{k}"] = panel.D[k - 1].astype(int)
        columns[f"C{k}"] = panel.C[k - 1].astype(int)
        if k < panel.K:
            for j in range(panel.d_post):
                columns[f"L{k}_{j + 1}"] = panel.L[k - 1, :, j]
            columns[f"A{k}"] = panel.A[k - 1].astype(int)
            columns[f"Z{k}"] = panel.Z[k - 1].astype(int)
    return pd.DataFrame(columns)


def _count_prefixed(columns, prefix):
    count = 0
    while f"{prefix}_{count + 1}" in columns:
        count += 1
    return count


def _require(df, name):
    if name not in df.columns:
        raise PanelError(f"Panel is missing required column '{name}'")
    values = df[name]
    if values.isna().any():
        raise PanelError(f"Column '{name}' has missing values")
    return values.to_numpy()


def panel_from_frame(df, visit_times=None, randomized=True):
    columns = set(df.columns)
    K = 0
    while f"Y{K + 1}" in columns:
        K += 1
    if K == 0:
        raise PanelError("Panel is missing required column 'Y1'")
    d = _count_prefixed(columns, "L0")
    if d == 0:
        raise PanelError("Panel is missing required column 'L0_1'")
    d_post = _count_prefixed(columns, "L1") if K > 1 else d
    if K > 1 and d_post == 0:
        raise PanelError("Panel is missing required column 'L1_1'")
    n = len(df)
    ids = _require(df, "id")
    L0 = np.column_stack([_require(df, f"L0_{j + 1}").astype(float) for j in range(d)])
    Z0 = _require(df, "Z0").astype(np.int8)
    A0 = _require(df, "A0").astype(np.int8)
    Y, D, C = (np.vstack([_require(df, f"{name}{k}") for k in range(1, K + 1)]).astype(np.int8)
               for name in ("Y", "D", "C"))
    L = np.empty((K - 1, n, d_post))
    A = np.zeros((K - 1, n), dtype=np.int8)
    Z = np.zeros((K - 1, n), dtype=np.int8)
    for k in range(1, K):
        for j in range(d_post):
            L[k - 1, :, j] = _require(df, f"L{k}_{j + 1}").astype(float)
        A[k - 1] = _require(df, f"A{k}")
        Z[k - 1] = _require(df, f"Z{k}")
    times = np.arange(K + 1, dtype=float) if visit_times is None else np.asarray(visit_times, dtype=float)
    return TrialPanel(ids=ids, visit_times=times, L0=L0, Z0=Z0, A0=A0, Y=Y, D=D, C=C,
                      L=L, A=A, Z=Z, randomized=randomized)


def write_panel_csv(panel, filepath):
    destination = Path(filepath).expanduser().resolve()
    destination.parent.mkdir(parents=True, exist_ok=True)
    panel_to_frame(panel).to_csv(destination, index=False)
    logger.info("Panel with %d subjects saved to %s", panel.n, destination)
    return destination


def read_panel_csv(filepath, visit_times=None, randomized=True):
    try:
        df = pd.read_csv(filepath)
    except (OSError, pd.errors.ParserError) as e:
        raise PanelError(f"Cannot read panel CSV {filepath}: {e}") from e
    return panel_from_frame(df, visit_times=visit_times, randomized=randomized)


def _filled_width(frame, value_columns):
    """One past the last value column holding data in any row of frame."""
    filled = frame[value_columns].notna().to_numpy()
    if not filled.any():
        return 0
    return int(np.max(np.where(filled.any(axis=0))[0])) + 1


def read_event_csv(filepath, d_post=None):
    """Long event CSV with columns id, time, kind and one or more value columns.

    A baseline row carries the L0 components followed by Z0 and A0; a
    covariate row uses the leading d' value columns (blank means missing).
    Both widths are read off the filled columns unless d_post is given.
    """
    try:
        df = pd.read_csv(filepath)
    except (OSError, pd.errors.ParserError) as e:
        raise PanelError(f"Cannot read event CSV {filepath}: {e}") from e
    for name in ("id", "time", "kind"):
        if name not in df.columns:
            raise PanelError(f"Event CSV is missing required column '{name}'")
    value_columns = [c for c in df.columns if c not in ("id", "time", "kind")]
    if len(value_columns) < 3:
        raise PanelError("Event CSV needs value columns for L0, Z0 and A0")
    unknown = set(df["kind"]) - set(EVENT_KINDS)
    if unknown:
        raise PanelError(f"Unknown event kinds: {sorted(unknown)}")
    d = _filled_width(df[df["kind"] == "baseline"], value_columns) - 2
    if d < 1:
        raise PanelError("Baseline rows need at least one covariate followed by Z0 and A0")
    if d_post is None:
        d_post = _filled_width(df[df["kind"] == "covariate"], value_columns) or d

    records = []
    for subject, rows in df.groupby("id", sort=False):
        rows = rows.sort_values("time", kind="stable")
        baseline = rows[rows["kind"] == "baseline"]
        events = rows[rows["kind"] == "event"]
        if baseline.empty:
            raise PanelError(f"Subject {subject}: no baseline row")
        if len(events) != 1:
            raise PanelError(f"Subject {subject}: expected one event row, found {len(events)}")
        base = baseline.iloc[0][value_columns].to_numpy(dtype=float)
        starts = rows.loc[rows["kind"] == "exposure_start", "time"].tolist()
        stops = rows.loc[rows["kind"] == "exposure_stop", "time"].tolist()
        exposures = []
        for start in starts:
            stop = next((s for s in stops if s >= start), None)
            if stop is not None:
                stops.remove(stop)
            exposures.append((start, stop))
        measurements = [(row["time"], row[value_columns[:d_post]].to_numpy(dtype=float))
                        for _, row in rows[rows["kind"] == "covariate"].iterrows()]
        discontinued = rows.loc[rows["kind"] == "discontinue", "time"]
        records.append(EventRecord(
            id=subject,
            T_tilde=float(events.iloc[0]["time"]),
            Delta_tilde=int(events.iloc[0][value_columns[0]]),
            L0=base[:d],
            Z0=int(base[d]),
            A0=int(base[d + 1]),
            exposures=exposures,
            measurements=measurements,
            discontinue_time=float(discontinued.iloc[0]) if len(discontinued) else None,
        ))
    return records


def events_to_frame(records):
    d = len(np.atleast_1d(records[0].L0)) if records else 1
    width = max(d + 2, covariate_width(records, d) if records else d)
    value_columns = [f"value{j + 1}" for j in range(width)]
    rows = []

    def add(subject, time, kind, values=()):
        padded = list(values) + [np.nan] * (len(value_columns) - len(values))
        rows.append([subject, time, kind] + padded)

    for r in records:
        add(r.id, 0.0, "baseline", list(np.atleast_1d(r.L0)) + [r.Z0, r.A0])
        add(r.id, r.T_tilde, "event", [r.Delta_tilde])
        for start, stop in r.exposures:
            add(r.id, start, "exposure_start")
            if stop is not None:
                add(r.id, stop, "exposure_stop")
        for time, values in r.measurements:
            add(r.id, time, "covariate", list(values))
        if r.discontinue_time is not None:
            add(r.id, r.discontinue_time, "discontinue")
    return pd.DataFrame(rows, columns=["id", "time", "kind"] + value_columns)


def write_event_csv(records, filepath):
    destination = Path(filepath).expanduser().resolve()
    destination.parent.mkdir(parents=True, exist_ok=True)
    events_to_frame(records).to_csv(destination, index=False)
    return destination
