import numpy as np

FEATURE_MAPS = ("intercept", "main", "interactions", "running_avg", "saturated")


def flatten_inputs(inputs):
    if hasattr(inputs, "matrix"):
        return inputs.matrix()
    M = np.asarray(inputs, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    return M


def expand_columns(M, features):
    n = M.shape[0]
    ones = np.ones((n, 1))
    if features == "intercept":
        return ones
    if features == "main":
        return np.hstack([ones, M])
    if features == "interactions":
        p = M.shape[1]
        pairs = [M[:, i] * M[:, j] for i in range(p) for j in range(i + 1, p)]
        if not pairs:
            return np.hstack([ones, M])
        return np.hstack([ones, M, np.column_stack(pairs)])
    raise ValueError(f"Unknown feature map '{features}'")


def running_average(arrays, decay=None):
    """Running average of a list of per-visit arrays (l = 0..j).

    With decay set, visit l gets weight decay**(j - l) before normalisation.
    """
    stack = np.stack([np.asarray(a, dtype=float) for a in arrays], axis=0)
    j = stack.shape[0] - 1
    if decay is None:
        weights = np.ones(j + 1)
    else:
        weights = decay ** (j - np.arange(j + 1, dtype=float))
    weights = weights / weights.sum()
    return np.tensordot(weights, stack, axes=(0, 0))


def running_avg_columns(history, decay=None):
    # baseline L0 enters as a main effect; post-baseline L as average + latest
    cols = [np.ones((history.n, 1)), _as_2d(history.L[0])]
    post = history.L[1:]
    if post:
        cols.append(_as_2d(running_average(post, decay)))
        cols.append(_as_2d(post[-1]))
    if history.A:
        cols.append(_as_2d(running_average(history.A, decay)))
        if len(history.A) > 1:
            cols.append(_as_2d(history.A[-1]))
    if history.Z:
        cols.append(_as_2d(running_average(history.Z, decay)))
        if len(history.Z) > 1:
            cols.append(_as_2d(history.Z[-1]))
    return np.hstack(cols)


def saturated_columns(M, cells=None):
    if cells is None:
        cells = np.unique(M, axis=0)
    X = np.zeros((M.shape[0], cells.shape[0]))
    for c, cell in enumerate(cells):
        X[:, c] = np.all(M == cell, axis=1)
    return X, cells


def build_design(inputs, features, state=None, decay=None):
    if features == "running_avg":
        if not hasattr(inputs, "L"):
            raise ValueError("running_avg features need a visit history, not a bare matrix")
        return running_avg_columns(inputs, decay), None
    M = flatten_inputs(inputs)
    if features == "saturated":
        return saturated_columns(M, state)
    return expand_columns(M, features), None


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x
