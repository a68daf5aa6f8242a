"""Checkers for the identifiability conditions and randomized lemma oracles.

Everything here assumes the Gaussian, fixed-variance, one-statistic family
used by the synthetic processes: the natural parameter is the transition mean
divided by the (constant) noise variance and ``T(z) = z``. Rank conditions are
therefore checked directly on the mean function and its Jacobian; a positive
rescaling does not change any verdict.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, PreconditionError
from .synthdata import BipartiteGraph

RANK_TOL = 1e-6
RESAMPLES = 5


def _as_graph(g):
    return g if isinstance(g, BipartiteGraph) else BipartiteGraph(g)


def numeric_rank(m, tol=RANK_TOL):
    """Number of singular values above ``tol`` times the largest one."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


# ---------------------------------------------------------------- graphical criteria


@dataclass
class CriterionReport:
    satisfied: bool
    # latent -> {"rows": [...], "cols": [...]} of a minimal witness family
    witnesses: dict = field(default_factory=dict)
    violators: list = field(default_factory=list)
    intersections: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "satisfied": self.satisfied,
            "witnesses": {str(k): v for k, v in self.witnesses.items()},
            "violators": list(self.violators),
            "intersections": {str(k): sorted(v) for k, v in self.intersections.items()},
        }


def _prune(p, sets):
    """Drop sets from a witness family while the intersection stays ``{p}``."""
    keep = list(sets)
    for item in list(keep):
        trial = [s for s in keep if s is not item]
        if trial and frozenset.intersection(*(s for _, s in trial)) == {p}:
            keep = trial
    return keep


def check_action_criterion(graph):
    """For every latent ``i``, do the children sets of some actions meet exactly in ``{i}``?

    Intersecting all children sets that contain ``i`` gives the smallest
    possible intersection, so testing that one family is exact.
    """
    g = _as_graph(graph)
    ch = [g.children(j) for j in range(g.cols)]
    report = CriterionReport(True)
    for i in range(g.rows):
        family = [(("cols", j), ch[j]) for j in range(g.cols) if i in ch[j]]
        inter = frozenset.intersection(*(s for _, s in family)) if family else frozenset()
        report.intersections[i] = inter
        if inter != {i}:
            report.satisfied = False
            report.violators.append(i)
            continue
        kept = _prune(i, family)
        report.witnesses[i] = {"rows": [], "cols": sorted(j for (_, j), _ in kept)}
    return report


def check_temporal_criterion(graph):
    """For every latent ``p``, does some family of parent and children sets meet exactly in ``{p}``?"""
    g = _as_graph(graph)
    if g.rows != g.cols:
        raise ContractError(f"temporal graph must be square, got {g.rows}x{g.cols}")
    pa = [g.parents(i) for i in range(g.rows)]
    ch = [g.children(j) for j in range(g.cols)]
    report = CriterionReport(True)
    for p in range(g.rows):
        family = [(("rows", i), pa[i]) for i in range(g.rows) if p in pa[i]]
        family += [(("cols", j), ch[j]) for j in range(g.cols) if p in ch[j]]
        inter = frozenset.intersection(*(s for _, s in family)) if family else frozenset()
        report.intersections[p] = inter
        if inter != {p}:
            report.satisfied = False
            report.violators.append(p)
            continue
        kept = _prune(p, family)
        report.witnesses[p] = {
            "rows": sorted(k for (kind, k), _ in kept if kind == "rows"),
            "cols": sorted(k for (kind, k), _ in kept if kind == "cols"),
        }
    return report


def exhaustive_action_criterion(graph):
    """Reference check by enumerating every subset of actions (small graphs only)."""
    g = _as_graph(graph)
    ch = [g.children(j) for j in range(g.cols)]
    universe = frozenset(range(g.rows))
    ok = []
    for i in range(g.rows):
        found = False
        for r in range(1, g.cols + 1):
            for subset in itertools.combinations(range(g.cols), r):
                if frozenset.intersection(universe, *(ch[j] for j in subset)) == {i}:
                    found = True
                    break
            if found:
                break
        ok.append(found)
    return all(ok), ok


def exhaustive_temporal_criterion(graph):
    """Reference check by enumerating every family of parent and children sets."""
    g = _as_graph(graph)
    sets = [g.parents(i) for i in range(g.rows)] + [g.children(j) for j in range(g.cols)]
    universe = frozenset(range(g.rows))
    ok = []
    for p in range(g.rows):
        found = False
        for r in range(1, len(sets) + 1):
            for subset in itertools.combinations(sets, r):
                if frozenset.intersection(universe, *subset) == {p}:
                    found = True
                    break
            if found:
                break
        ok.append(found)
    return all(ok), ok


# ---------------------------------------------------------------- variability


@dataclass
class RankReport:
    satisfied: bool
    rank: int
    target: int
    # largest |entry| outside the allowed support, relative to the largest entry
    leakage: float = 0.0
    attempts: int = 1
    detail: dict = field(default_factory=dict)

    def to_json(self):
        return {"satisfied": self.satisfied, "rank": self.rank, "target": self.target,
                "leakage": self.leakage, "attempts": self.attempts, **self.detail}


def _leakage(full, allowed):
    scale = np.abs(full).max()
    if scale == 0:
        return 0.0
    return float(np.abs(full[:, ~allowed]).max() / scale) if (~allowed).any() else 0.0


def _sample_inputs(process, n, rng):
    # the condition asks for some points anywhere in latent space; a box wide
    # enough for the slowest NT-T frequency 1/d_z to complete a period keeps
    # the low-frequency Jacobian entries numerically distinguishable
    half = np.pi * process.d_z
    z = rng.uniform(-half, half, (n, process.d_z))
    a = rng.uniform(-2.0, 2.0, (n, process.d_a))
    return z, a


def check_action_variability(process, action, n_probes=None, rng=None):
    """Rank of partial differences of the transition mean along one action coordinate.

    Both ``a_l`` and ``a_l + eps`` are drawn inside the action support
    ``[-2, 2]``. The differences are restricted to the children of the action.
    """
    from .diffengine import Rng

    rng = rng or Rng(0)
    children = np.asarray(process.M_a)[:, action].astype(bool)
    target = int(children.sum())
    n_probes = n_probes or 2 * process.d_z + 10
    best = None
    for attempt in range(1, RESAMPLES + 1):
        z, a = _sample_inputs(process, n_probes, rng)
        shifted = a.copy()
        shifted[:, action] = rng.uniform(-2.0, 2.0, n_probes)
        delta = process.mean(z, shifted) - process.mean(z, a)
        rank = numeric_rank(delta[:, children]) if target else 0
        report = RankReport(rank == target, rank, target, _leakage(delta, children), attempt,
                            {"action": int(action)})
        if best is None or rank > best.rank:
            best = report
        if report.satisfied:
            return report
    best.attempts = RESAMPLES
    return best


def numeric_jacobian(fn, z, a, h=1e-5):
    """Central-difference Jacobians ``d fn/d z`` for a batch, shape ``(n, d_out, d_z)``."""
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for j in range(z.shape[1]):
        e = np.zeros(z.shape[1])
        e[j] = h
        cols.append((fn(z + e, a) - fn(z - e, a)) / (2 * h))
    return np.stack(cols, axis=-1)


def check_temporal_variability(process, n_probes=None, rng=None, graph=None):
    """Rank of mean Jacobians w.r.t. the previous latent, vectorized over the edge set.

    ``graph`` defaults to ``process.M_z``. For ``T(z) = z`` the statistic
    Jacobian is the identity, so only the mean Jacobian enters.
    """
    from .diffengine import Rng

    rng = rng or Rng(0)
    allowed = np.asarray(process.M_z if graph is None else _as_graph(graph).adj).astype(bool)
    target = int(allowed.sum())
    n_probes = n_probes or 2 * target + 10
    best = None
    for attempt in range(1, RESAMPLES + 1):
        z, a = _sample_inputs(process, n_probes, rng)
        jac = numeric_jacobian(process.mean, z, a)
        flat = jac.reshape(n_probes, -1)
        rank = numeric_rank(flat[:, allowed.ravel()])
        report = RankReport(rank == target, rank, target, _leakage(flat, allowed.ravel()), attempt)
        if best is None or rank > best.rank:
            best = report
        if report.satisfied:
            return report
    best.attempts = RESAMPLES
    return best


# ---------------------------------------------------------------- sufficient statistics


@dataclass
class ExponentialFamilySpec:
    k: int
    statistic: object          # callable: (n,) array of z -> (n, k)
    sampler: object            # callable: (rng, n) -> (n,) support samples
    base_measure: str = "lebesgue"
    support: str = "R"

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")


def gaussian_fixed_variance(variance=1.0):
    return ExponentialFamilySpec(1, lambda z: np.asarray(z)[:, None] / variance,
                                 lambda rng, n: rng.normal(n), "gaussian", "R")


def check_minimal_statistic(spec, n_probes=20, rng=None):
    """Is ``T`` minimal, i.e. do ``T(z_i) - T(z_0)``, ``i = 1..k``, span ``R^k`` for some probes?"""
    from .diffengine import Rng

    rng = rng or Rng(0)
    for _ in range(n_probes):
        z = spec.sampler(rng, spec.k + 1)
        t = np.asarray(spec.statistic(z), dtype=np.float64).reshape(spec.k + 1, spec.k)
        if numeric_rank(t[1:] - t[0]) == spec.k:
            return True
    return False


# ---------------------------------------------------------------- equivalence


@dataclass
class LinearEquivalence:
    L: np.ndarray
    b: np.ndarray
    c: np.ndarray = None
    residual_rep: float = 0.0
    residual_param: float = None
    condition_number: float = np.inf
    invertible: bool = False
    permutation: bool = False
    dominance: np.ndarray = None


def detect_equivalence(learned, truth, learned_params=None, truth_params=None, threshold=0.9):
    """Fit ``truth ~ L @ learned + b`` and decide whether ``L`` is a scaled permutation.

    With natural parameters supplied, the second condition
    ``L^T truth_params + c = learned_params`` is also fitted for ``c`` and its
    residual reported. The verdict requires one column-normalized ``|L|`` entry
    above ``threshold`` in every row and every column.
    """
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n, d = learned.shape
    X = np.hstack([learned, np.ones((n, 1))])
    coef, *_ = np.linalg.lstsq(X, truth, rcond=None)
    L, b = coef[:d].T, coef[d]
    resid = truth - X @ coef
    cond = np.linalg.cond(L) if np.all(np.isfinite(L)) else np.inf
    invertible = bool(np.isfinite(cond) and cond < 1e12)
    out = LinearEquivalence(L, b, residual_rep=float(np.sqrt(np.mean(resid ** 2))),
                            condition_number=float(cond), invertible=invertible)
    if learned_params is not None and truth_params is not None:
        mapped = np.asarray(truth_params) @ L
        out.c = np.mean(np.asarray(learned_params) - mapped, axis=0)
        out.residual_param = float(np.sqrt(np.mean((mapped + out.c - learned_params) ** 2)))
    absL = np.abs(L)
    colmax = absL.max(axis=0)
    colmax[colmax == 0] = 1.0
    dom = absL / colmax > threshold
    out.dominance = absL / colmax
    out.permutation = bool(invertible and np.all(dom.sum(axis=0) == 1) and np.all(dom.sum(axis=1) == 1))
    return out


def is_permutation_scaling(L, tol=1e-9):
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ContractError("is_permutation_scaling needs a square matrix")
    big = np.abs(L) > tol
    return bool(np.all(big.sum(axis=0) == 1) and np.all(big.sum(axis=1) == 1))


# ---------------------------------------------------------------- lemma oracles


@dataclass
class LemmaResult:
    ok: bool
    trials: int
    hits: int = 0                    # trials with |S~| <= |S|
    counterexample: dict = None


def _pattern_matrix(S, shape):
    S = np.asarray(S)
    if S.shape == shape and S.dtype != object and set(np.unique(S)) <= {0, 1}:
        return S.astype(bool)
    mask = np.zeros(shape, dtype=bool)
    for i, j in S:
        mask[i, j] = True
    return mask


def _random_invertible(m, rng, kind):
    while True:
        if kind == "dense":
            L = rng.normal((m, m))
        elif kind == "perm":
            L = np.zeros((m, m))
            L[np.arange(m), rng.permutation(m)] = rng.normal(m) + np.sign(rng.normal(m))
        elif kind == "perturbed":
            L = np.zeros((m, m))
            L[np.arange(m), rng.permutation(m)] = 1.0 + rng.uniform(0, 1, m)
            n_extra = 1 + int(rng.uniform(0, 1) * max(1, m - 1))
            for _ in range(n_extra):
                i, j = (int(v) for v in rng.uniform(0, m, 2))
                L[i, j] = rng.normal()
        else:
            L = rng.normal((m, m)) * (rng.uniform(0, 1, (m, m)) < 0.5)
        if abs(np.linalg.det(L)) > 1e-6:
            return L


_KINDS = ("dense", "perm", "perturbed", "sparse")


def _support_of(mats, tol=1e-9):
    scale = max(np.abs(mats).max(), 1.0)
    return np.any(np.abs(mats) > tol * scale, axis=0)


def verify_lemma_action(m, n, S, trials=500, rng=None, check_precondition=True):
    """Randomized search for an invertible ``L`` that keeps ``L Lambda`` as sparse as ``Lambda``
    without being a permutation-scaling matrix.

    Samples of ``Lambda`` are random matrices with support ``S``; with
    ``|S| + 2`` samples they span each column subspace almost surely.
    Candidates mix dense, sparse, permutation-scaling and perturbed
    permutation matrices so the sparsity condition is actually met often.
    """
    from .diffengine import Rng

    rng = rng or Rng(0)
    mask = _pattern_matrix(S, (m, n))
    if check_precondition and not check_action_criterion(mask.astype(int)).satisfied:
        raise PreconditionError("pattern violates the action graphical criterion")
    size = int(mask.sum())
    hits = 0
    for t in range(trials):
        lam = rng.normal((size + 2, m, n)) * mask
        L = _random_invertible(m, rng, _KINDS[t % len(_KINDS)])
        new_size = int(_support_of(L @ lam).sum())
        if new_size <= size:
            hits += 1
            if not is_permutation_scaling(L):
                return LemmaResult(False, t + 1, hits, {"L": L.tolist(), "S": mask.astype(int).tolist(),
                                                        "size": size, "new_size": new_size})
    return LemmaResult(True, trials, hits)


def verify_lemma_temporal(m, S, trials=500, rng=None, check_precondition=True):
    """Same search for the congruence ``L^T Lambda L`` on square patterns."""
    from .diffengine import Rng

    rng = rng or Rng(0)
    mask = _pattern_matrix(S, (m, m))
    if check_precondition and not check_temporal_criterion(mask.astype(int)).satisfied:
        raise PreconditionError("pattern violates the temporal graphical criterion")
    size = int(mask.sum())
    hits = 0
    for t in range(trials):
        lam = rng.normal((size + 2, m, m)) * mask
        L = _random_invertible(m, rng, _KINDS[t % len(_KINDS)])
        new_size = int(_support_of(L.T @ lam @ L).sum())
        if new_size <= size:
            hits += 1
            if not is_permutation_scaling(L):
                return LemmaResult(False, t + 1, hits, {"L": L.tolist(), "S": mask.astype(int).tolist(),
                                                        "size": size, "new_size": new_size})
    return LemmaResult(True, trials, hits)
