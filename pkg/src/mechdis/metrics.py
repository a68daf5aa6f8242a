"""Disentanglement and graph-recovery metrics, plus the baselines."""

import itertools
import warnings

import numpy as np

from . import diffengine as de
from . import model as mdl
from .errors import MetricError


def linear_assignment(cost):
    """Minimum-cost perfect matching on a square matrix.

    Shortest augmenting path with row/column potentials, O(n^3). Returns
    ``cols`` such that row ``i`` is assigned to column ``cols[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise MetricError(f"assignment needs a square matrix, got {cost.shape}")
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)   # match[j] = row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j], way[j] = cur, j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        cols[match[j] - 1] = j - 1
    return cols


def brute_force_assignment(weight):
    """Maximum-weight matching by enumerating permutations (small n only)."""
    n = weight.shape[0]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(n)):
        s = weight[np.arange(n), perm].sum()
        if s > best:
            best, best_perm = s, np.array(perm)
    return best_perm, best


def abs_correlation(learned, truth):
    """|Pearson correlation| with rows indexing truth dims, columns learned dims."""
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if learned.shape != truth.shape or learned.ndim != 2:
        raise MetricError(f"shape mismatch {learned.shape} vs {truth.shape}")
    if learned.shape[0] < 3:
        raise MetricError("need at least 3 samples")
    out = []
    for name, m in (("learned", learned), ("truth", truth)):
        c = m - m.mean(axis=0)
        sd = np.sqrt((c * c).sum(axis=0))
        bad = np.flatnonzero(sd <= 1e-12 * max(1.0, np.abs(m).max()))
        if bad.size:
            raise MetricError(f"{name} column {int(bad[0])} has zero variance")
        out.append(c / sd)
    lc, tc = out
    return np.abs(tc.T @ lc)


def mcc(learned, truth):
    """Mean correlation coefficient and matching.

    ``perm[i]`` is the learned column matched to ground-truth column ``i``.
    """
    corr = abs_correlation(learned, truth)
    perm = linear_assignment(-corr)
    return float(corr[np.arange(len(perm)), perm].mean()), perm


def linear_score(learned, truth):
    """Mean R^2 of OLS regressions (with intercept) of each truth dim on ``learned``."""
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n, d = learned.shape
    if n <= d + 1:
        raise MetricError(f"need n > d + 1 samples, got n={n}, d={d}")
    X = np.hstack([learned, np.ones((n, 1))])
    gram = X.T @ X
    if np.linalg.matrix_rank(gram) < d + 1:
        warnings.warn("rank-deficient design in linear_score; adding ridge 1e-8", RuntimeWarning, stacklevel=2)
        gram = gram + 1e-8 * np.eye(d + 1)
        coef = np.linalg.solve(gram, X.T @ truth)
    else:
        coef = np.linalg.lstsq(X, truth, rcond=None)[0]
    resid = truth - X @ coef
    ss_res = (resid ** 2).sum(axis=0)
    ss_tot = ((truth - truth.mean(axis=0)) ** 2).sum(axis=0)
    if np.any(ss_tot == 0):
        raise MetricError("truth column with zero variance")
    return float(np.mean(1.0 - ss_res / ss_tot))


def graph_shd(learned, truth, perm=None, permute_cols=False):
    """Hamming distance after aligning learned latents to the truth.

    Row ``i`` of the aligned mask is learned row ``perm[i]``; for latent-by-latent
    graphs (``permute_cols``) columns are aligned the same way.
    """
    learned = np.asarray(learned)
    truth = np.asarray(truth)
    if learned.shape != truth.shape:
        raise MetricError(f"shape mismatch {learned.shape} vs {truth.shape}")
    if perm is not None:
        perm = np.asarray(perm)
        learned = learned[perm]
        if permute_cols:
            learned = learned[:, perm]
    return int(np.sum(learned.astype(bool) != truth.astype(bool)))


# ---------------------------------------------------------------- baselines


def _test_frames(dataset, test_idx):
    test = dataset.subset(test_idx)
    n, T = test.x.shape[:2]
    return test.x.reshape(n * T, -1), test.z.reshape(n * T, -1)


def random_baseline(dataset, meta, config):
    """MCC of a freshly initialized, untrained encoder on the test split."""
    from .training import split_indices, model_config_for

    params = mdl.init_params(model_config_for(meta, config), de.Rng(config.seed).spawn(2)[0])
    _, test_idx = split_indices(dataset.n_seq, config.test_fraction)
    x, z = _test_frames(dataset, test_idx)
    return mcc(mdl.encode_mean(params, x), z)[0], params


def supervised_baseline(dataset, meta, config):
    """Fit the encoder mean to ground-truth latents by mean-squared error.

    Uses the same initialization, minibatching and Adam settings as
    :func:`mechdis.training.train`. Returns ``(test MCC, params)``.
    """
    from .training import split_indices, model_config_for

    if dataset.z is None:
        raise MetricError("supervised baseline needs ground-truth latents")
    cfg = model_config_for(meta, config)
    init_rng, loop_rng = de.Rng(config.seed).spawn(2)
    params = mdl.init_params(cfg, init_rng)
    train_idx, test_idx = split_indices(dataset.n_seq, config.test_fraction)
    n_tr, T = len(train_idx), dataset.T
    x_tr = dataset.x[train_idx].reshape(n_tr * T, -1)
    z_tr = dataset.z[train_idx].reshape(n_tr * T, -1)
    names = [k for k in params.weights if k.startswith("enc.")]
    state = de.AdamState(lr=config.lr)
    weights = dict(params.weights)
    batch = config.batch_size * T
    for _ in range(config.epochs):
        (epoch_rng,) = loop_rng.spawn(1)
        order = epoch_rng.permutation(len(x_tr))
        for b in range(0, len(x_tr), batch):
            idx = order[b:b + batch]
            p = {k: de.parameter(weights[k], name=k) for k in names}
            mean, _ = mdl.encode(x_tr[idx], p, cfg)
            r = mean - z_tr[idx]
            loss = de.mean(r * r)
            grads = de.backward(loss, wrt=list(p.values()))
            upd, state = de.adam_step({k: weights[k] for k in names}, {k: grads[t] for k, t in p.items()}, state)
            weights.update(upd)
    params = mdl.ModelParams(cfg, weights)
    x, z = _test_frames(dataset, test_idx)
    return mcc(mdl.encode_mean(params, x), z)[0], params


def evaluate(params, dataset, meta, test_fraction=0.1, seed=0):
    """Build the report dict for ``params`` on the held-out split."""
    from .training import evaluate_elbo, split_indices

    _, test_idx = split_indices(dataset.n_seq, test_fraction)
    x, z = _test_frames(dataset, test_idx)
    learned = mdl.encode_mean(params, x)
    score, perm = mcc(learned, z)
    m_z, m_a = params.hard_masks()
    return {
        "mcc": score,
        "permutation": perm.tolist(),
        "linear_score": linear_score(learned, z),
        "shd_a": graph_shd(m_a, meta["M_a"], perm),
        "shd_z": graph_shd(m_z, meta["M_z"], perm, permute_cols=True),
        "elbo_test": evaluate_elbo(dataset.subset(test_idx), params, seed=seed),
        "masks": {"M_a": m_a.tolist(), "M_z": m_z.tolist()},
    }
