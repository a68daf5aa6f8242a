"""Ground-truth sequential processes with known latent causal graphs.

Four variants are supported:

* ``t-a``   trivial action sparsity, diagonal action graph
* ``nt-a``  non-trivial action sparsity, circulant band action graph
* ``t-t``   trivial temporal sparsity, each latent depends on itself
* ``nt-t``  non-trivial temporal sparsity, upper-triangular temporal graph

Array layout for a batch is ``(n_seq, T, dim)``. Index ``k`` of ``z`` and ``x``
is time step ``k + 1``; ``a[:, k]`` is the action ``a^k`` that precedes
``z[:, k]``. ``a[:, 0]`` is sampled but never used, because the first latent
is drawn from a standard normal.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DatasetFormatError, DimensionError

VARIANTS = ("t-a", "nt-a", "t-t", "nt-t")
ACTION_VARIANTS = ("t-a", "nt-a")
LEAKY_SLOPE = 0.2
OBS_NOISE = 1e-2
DEFAULT_SIGMA_Z = 0.1
FORMAT_VERSION = 1


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ContractError(f"unsupported variant {variant!r}; expected one of {VARIANTS}")


def orthonormal_columns(a):
    """QR-orthogonalize the columns of ``a``, fixing signs so diag(R) > 0."""
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


class BipartiteGraph:
    """Adjacency between parents (columns) and children (rows)."""

    def __init__(self, adj):
        adj = np.asarray(adj)
        if adj.ndim != 2 or not np.isin(adj, (0, 1)).all():
            raise ContractError("adjacency must be a 2-d 0/1 matrix")
        self.adj = adj.astype(np.int64)

    @property
    def rows(self):
        return self.adj.shape[0]

    @property
    def cols(self):
        return self.adj.shape[1]

    def parents(self, i):
        return frozenset(np.flatnonzero(self.adj[i]).tolist())

    def children(self, j):
        return frozenset(np.flatnonzero(self.adj[:, j]).tolist())

    @property
    def edges(self):
        return [tuple(e) for e in np.argwhere(self.adj == 1).tolist()]

    @property
    def n_edges(self):
        return int(self.adj.sum())

    def to_json(self):
        return {"rows": self.rows, "cols": self.cols, "adj": self.adj.tolist()}

    @classmethod
    def from_json(cls, obj):
        adj = np.asarray(obj["adj"])
        if adj.shape != (obj["rows"], obj["cols"]):
            raise DatasetFormatError(f"graph declares {obj['rows']}x{obj['cols']} but adj is {adj.shape}")
        return cls(adj)

    def __eq__(self, other):
        return isinstance(other, BipartiteGraph) and np.array_equal(self.adj, other.adj)

    def __repr__(self):
        return f"BipartiteGraph({self.adj.tolist()})"


# ---------------------------------------------------------------- construction


def make_mixing_fn(d_z, d_x, rng):
    """Weights of a random injective leaky-ReLU MLP from R^d_z to R^d_x.

    Three hidden layers of ``d_x`` units followed by a linear output layer.
    Each matrix has shape ``(d_out, d_in)``. Its Gaussian columns are
    orthogonalized and kept at the typical Gaussian column norm ``sqrt(d_out)``,
    then rescaled by the Glorot factor adjusted for the 0.2 leaky slope, which
    keeps the activation scale roughly constant through the layers.
    """
    if d_z > d_x:
        raise ContractError(f"mixing needs d_z <= d_x for injectivity, got d_z={d_z}, d_x={d_x}")
    weights = []
    d_in = d_z
    for _ in range(4):
        w = orthonormal_columns(rng.normal((d_x, d_in))) * np.sqrt(d_x)
        scale = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2)) * np.sqrt(2.0 / (d_in + d_x))
        weights.append(w * scale)
        d_in = d_x
    return weights


def apply_mixing(weights, z):
    h = np.asarray(z, dtype=np.float64)
    for k, w in enumerate(weights):
        h = h @ w.T
        if k < len(weights) - 1:
            h = np.where(h > 0, h, LEAKY_SLOPE * h)
    return h


def make_stable_matrix(d_z, rng):
    """Random real matrix whose eigenvalues all have nonpositive real part."""
    if d_z < 1:
        raise ContractError("d_z must be >= 1")
    w = orthonormal_columns(rng.normal((d_z, d_z)))
    evals, evecs = np.linalg.eig(w)
    evals = -np.abs(evals.real) + 1j * evals.imag
    rebuilt = evecs @ np.diag(evals) @ np.linalg.inv(evecs)
    if np.max(np.abs(rebuilt.imag)) > 1e-10:
        raise ContractError("stable matrix reconstruction is not real")
    return rebuilt.real


def adjacency(variant, d_z, d_a):
    """Ground-truth ``(M^a, M^z)`` for a variant. Rows index latent children."""
    _check_variant(variant)
    if variant in ACTION_VARIANTS and d_a != d_z:
        raise ContractError(f"{variant} needs d_a == d_z, got d_a={d_a}, d_z={d_z}")
    eye = np.eye(d_z, dtype=np.int64)
    if variant == "t-a":
        return eye.copy(), np.ones((d_z, d_z), dtype=np.int64)
    if variant == "nt-a":
        m_a = eye.copy()
        for i in range(1, d_z):
            m_a[i, i - 1] = 1
        m_a[0, d_z - 1] = 1
        return m_a, np.ones((d_z, d_z), dtype=np.int64)
    m_a = np.zeros((d_z, d_a), dtype=np.int64)
    if variant == "t-t":
        return m_a, eye.copy()
    m_z = eye.copy()
    m_z[0, :] = 1
    m_z[:, d_z - 1] = 1
    return m_a, m_z


@dataclass
class GroundTruthProcess:
    variant: str
    d_z: int
    d_x: int
    d_a: int
    mixing: list
    W: np.ndarray = None
    M_a: np.ndarray = None
    M_z: np.ndarray = None
    sigma: float = OBS_NOISE
    sigma_z: float = DEFAULT_SIGMA_Z
    seed: int = None
    # test hook: replaces the MLP mixing when set
    mixing_override: object = field(default=None, repr=False)

    def mix(self, z):
        if self.mixing_override is not None:
            return self.mixing_override(np.asarray(z, dtype=np.float64))
        return apply_mixing(self.mixing, z)

    def mean(self, z_prev, a_prev):
        return transition_mean(self.variant, z_prev, a_prev, self)

    @property
    def graph_a(self):
        return BipartiteGraph(self.M_a)

    @property
    def graph_z(self):
        return BipartiteGraph(self.M_z)


def make_process(variant, d_z, d_x, seed=0, sigma=OBS_NOISE, sigma_z=DEFAULT_SIGMA_Z, d_a=None):
    from .diffengine import Rng

    _check_variant(variant)
    d_a = d_z if d_a is None else d_a
    rng = Rng(seed)
    mix_rng, w_rng = rng.spawn(2)
    mixing = make_mixing_fn(d_z, d_x, mix_rng)
    W = make_stable_matrix(d_z, w_rng) if variant in ACTION_VARIANTS else None
    m_a, m_z = adjacency(variant, d_z, d_a)
    return GroundTruthProcess(variant, d_z, d_x, d_a, mixing, W, m_a, m_z, sigma, sigma_z, seed)


def transition_mean(variant, z_prev, a_prev, process):
    """Mean of ``z^t`` given ``z^{t-1}`` and ``a^{t-1}``; accepts batches on leading axes."""
    _check_variant(variant)
    if variant != process.variant:
        raise ContractError(f"variant {variant!r} does not match process {process.variant!r}")
    z = np.asarray(z_prev, dtype=np.float64)
    a = np.asarray(a_prev, dtype=np.float64)
    d_z = process.d_z
    if z.shape[-1] != d_z or a.shape[-1] != process.d_a:
        raise DimensionError(f"expected z[..., {d_z}] and a[..., {process.d_a}], got {z.shape} and {a.shape}")
    freqs = np.arange(1, d_z + 1) / d_z
    if variant == "t-a":
        return z + 0.1 * (z @ process.W.T + np.sin(a))
    if variant == "nt-a":
        # row i: M^a_i . sin(i * a / d_z)
        drive = np.einsum("ij,...ij->...i", process.M_a, np.sin(freqs[:, None] * a[..., None, :]))
        return z + 0.1 * (z @ process.W.T + drive)
    if variant == "t-t":
        return z + 0.5 * np.sin(z)
    drive = np.einsum("ij,...ij->...i", process.M_z, np.sin(freqs[:, None] * z[..., None, :]))
    return z + 0.5 * drive


# ---------------------------------------------------------------- sampling


@dataclass
class SequenceBatch:
    x: np.ndarray
    a: np.ndarray
    z: np.ndarray = None

    def __post_init__(self):
        n, T = self.x.shape[:2]
        if self.a.shape[:2] != (n, T) or (self.z is not None and self.z.shape[:2] != (n, T)):
            raise DimensionError("x, a, z must share (n_seq, T)")

    @property
    def n_seq(self):
        return self.x.shape[0]

    @property
    def T(self):
        return self.x.shape[1]

    def subset(self, idx):
        return SequenceBatch(self.x[idx], self.a[idx], None if self.z is None else self.z[idx])


def sample_sequences(process, n_seq, T, rng):
    if n_seq < 1 or T < 2:
        raise ContractError(f"need n_seq >= 1 and T >= 2, got n_seq={n_seq}, T={T}")
    d_z, d_a = process.d_z, process.d_a
    if process.variant in ACTION_VARIANTS:
        a = rng.uniform(-2.0, 2.0, (n_seq, T, d_a))
    else:
        a = np.zeros((n_seq, T, d_a))
    z = np.empty((n_seq, T, d_z))
    z[:, 0] = rng.normal((n_seq, d_z))
    for k in range(1, T):
        mu = process.mean(z[:, k - 1], a[:, k])
        z[:, k] = mu + process.sigma_z * rng.normal((n_seq, d_z))
    x = process.mix(z.reshape(-1, d_z)).reshape(n_seq, T, -1)
    x = x + process.sigma * rng.normal(x.shape)
    return SequenceBatch(x, a, z)


def generate(variant, d_z, d_x, n_seq, T=2, seed=0, sigma=OBS_NOISE, sigma_z=DEFAULT_SIGMA_Z, d_a=None):
    """Build a process and sample a batch; a pure function of its arguments."""
    from .diffengine import Rng

    process = make_process(variant, d_z, d_x, seed=seed, sigma=sigma, sigma_z=sigma_z, d_a=d_a)
    sample_rng = Rng(seed).spawn(3)[2]
    return process, sample_sequences(process, n_seq, T, sample_rng)


# ---------------------------------------------------------------- persistence


def process_metadata(process, batch):
    return {
        "format_version": FORMAT_VERSION,
        "variant": process.variant,
        "d_z": process.d_z,
        "d_x": process.d_x,
        "d_a": process.d_a,
        "n_seq": batch.n_seq,
        "T": batch.T,
        "seed": process.seed,
        "sigma": process.sigma,
        "sigma_z": process.sigma_z,
        "M_a": np.asarray(process.M_a).tolist(),
        "M_z": np.asarray(process.M_z).tolist(),
    }


def save_dataset(batch, meta, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    meta = dict(meta)
    meta["has_z"] = batch.z is not None
    for name, arr in (("x", batch.x), ("a", batch.a), ("z", batch.z)):
        if arr is None:
            continue
        arr.astype("<f8").tofile(os.path.join(out_dir, f"{name}.bin"))
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _read_bin(path, shape):
    if not os.path.exists(path):
        raise DatasetFormatError(f"missing file {path}")
    expected = int(np.prod(shape)) * 8
    size = os.path.getsize(path)
    if size != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes for shape {shape}, found {size}")
    return np.fromfile(path, dtype="<f8").reshape(shape).astype(np.float64)


def load_dataset(data_dir):
    """Return ``(SequenceBatch, metadata)``; adjacency comes back as BipartiteGraphs."""
    meta_path = os.path.join(data_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise DatasetFormatError(f"missing file {meta_path}")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        n, T = meta["n_seq"], meta["T"]
        dims = {"x": meta["d_x"], "a": meta["d_a"], "z": meta["d_z"]}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{meta_path}: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{meta_path}: unsupported format_version {meta.get('format_version')}")
    arrays = {}
    for name, d in dims.items():
        if name == "z" and not meta.get("has_z", True):
            arrays[name] = None
            continue
        arrays[name] = _read_bin(os.path.join(data_dir, f"{name}.bin"), (n, T, d))
    meta["graph_a"] = BipartiteGraph(meta["M_a"])
    meta["graph_z"] = BipartiteGraph(meta["M_z"])
    if meta["graph_a"].adj.shape != (dims["z"], dims["a"]) or meta["graph_z"].adj.shape != (dims["z"], dims["z"]):
        raise DatasetFormatError(f"{meta_path}: adjacency shapes do not match dims")
    return SequenceBatch(arrays["x"], arrays["a"], arrays["z"]), meta
