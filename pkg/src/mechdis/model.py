"""Sequential VAE with a masked, per-latent Gaussian transition prior.

Parameters live in a flat dict of float64 arrays (``ModelParams.weights``) so
that Adam, checkpointing and finite-difference checks all see the same view.
Forward functions take the matching dict of :class:`~mechdis.diffengine.Tensor`
objects returned by :meth:`ModelParams.tensors`.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from .errors import ContractError, DatasetFormatError, NumericError

LOGVAR_CLAMP = 10.0
FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ModelConfig:
    d_z: int
    d_x: int
    d_a: int
    enc_hidden: int = 128
    enc_layers: int = 3
    tr_hidden: int = 64
    tr_layers: int = 3
    slope: float = 0.2
    sigma: float = 1e-2
    gamma_init: float = 2.0
    temperature: float = 1.0


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict = field(default_factory=dict)

    def tensors(self, which=None):
        names = self.weights if which is None else which
        return {k: de.parameter(self.weights[k], name=k) for k in names}

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def hard_masks(self):
        """Deterministic evaluation masks: sigmoid(gamma) > 0.5."""
        return ((self.weights["gamma_z"] > 0).astype(np.int64),
                (self.weights["gamma_a"] > 0).astype(np.int64))


def _mlp_shapes(prefix, d_in, d_out, hidden, layers):
    sizes = [d_in] + [hidden] * layers + [d_out]
    shapes = {}
    for k in range(len(sizes) - 1):
        shapes[f"{prefix}.W{k}"] = (sizes[k], sizes[k + 1])
        shapes[f"{prefix}.b{k}"] = (sizes[k + 1],)
    return shapes


def param_shapes(cfg):
    shapes = {}
    shapes.update(_mlp_shapes("enc", cfg.d_x, 2 * cfg.d_z, cfg.enc_hidden, cfg.enc_layers))
    shapes.update(_mlp_shapes("dec", cfg.d_z, cfg.d_x, cfg.enc_hidden, cfg.enc_layers))
    # one network per latent, stacked on a leading axis for batched matmul
    sizes = [cfg.d_z + cfg.d_a] + [cfg.tr_hidden] * cfg.tr_layers + [1]
    for k in range(len(sizes) - 1):
        shapes[f"tr.W{k}"] = (cfg.d_z, sizes[k], sizes[k + 1])
        shapes[f"tr.b{k}"] = (cfg.d_z, 1, sizes[k + 1])
    # linear skip from the same masked inputs, so near-identity dynamics
    # z^t ~ z^{t-1} do not have to be carved out of leaky-ReLU units
    shapes["tr.skip"] = (cfg.d_z, sizes[0], 1)
    shapes["prior_logvar"] = (cfg.d_z,)
    shapes["gamma_z"] = (cfg.d_z, cfg.d_z)
    shapes["gamma_a"] = (cfg.d_z, cfg.d_a)
    return shapes


def init_params(cfg, rng):
    """Glorot-normal weights, zero biases, mask logits at ``gamma_init``."""
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name in ("gamma_z", "gamma_a"):
            weights[name] = np.full(shape, cfg.gamma_init)
        elif ".W" in name:
            fan_in, fan_out = shape[-2], shape[-1]
            weights[name] = rng.normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))
        else:
            weights[name] = np.zeros(shape)
    return ModelParams(cfg, weights)


def zero_params(cfg):
    return ModelParams(cfg, {n: np.zeros(s) for n, s in param_shapes(cfg).items()})


def _mlp(h, p, prefix, n_layers, slope):
    for k in range(n_layers + 1):
        h = de.matmul(h, p[f"{prefix}.W{k}"]) + p[f"{prefix}.b{k}"]
        if k < n_layers:
            h = de.leaky_relu(h, slope)
    return h


# ---------------------------------------------------------------- encoder / decoder


def encode(x, p, cfg):
    """Posterior mean and clamped log-variance for a ``(n, d_x)`` batch."""
    out = _mlp(de.as_tensor(x), p, "enc", cfg.enc_layers, cfg.slope)
    mean = out[:, :cfg.d_z]
    logvar = de.clip(out[:, cfg.d_z:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mean, logvar


def decode(z, p, cfg):
    return _mlp(de.as_tensor(z), p, "dec", cfg.enc_layers, cfg.slope)


def encode_mean(params, x, chunk=8192):
    """Numpy-only batched encoder means, used for evaluation."""
    p = {k: de.constant(v) for k, v in params.weights.items() if k.startswith("enc.")}
    x = np.asarray(x, dtype=np.float64)
    out = [encode(x[i:i + chunk], p, params.config)[0].value for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.d_z))


# ---------------------------------------------------------------- masks


@dataclass
class MaskSample:
    M_z: de.Tensor
    M_a: de.Tensor
    relaxed_z: de.Tensor = None
    relaxed_a: de.Tensor = None


def sample_masks(gamma_z, gamma_a, temperature, rng):
    """Gumbel-sigmoid straight-through Bernoulli masks.

    Each entry draws two standard Gumbels; the relaxed value is
    ``sigmoid((gamma + g1 - g0) / temperature)`` and the hard value thresholds
    it at 0.5. The returned hard masks carry gradient into the relaxed ones.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    out = []
    for gamma in (gamma_z, gamma_a):
        gamma = de.as_tensor(gamma)
        noise = rng.gumbel(gamma.shape) - rng.gumbel(gamma.shape)
        relaxed = de.sigmoid((gamma + noise) * (1.0 / temperature))
        hard = (relaxed.value > 0.5).astype(np.float64)
        out.append((de.straight_through(hard, relaxed), relaxed))
    (mz, rz), (ma, ra) = out
    return MaskSample(mz, ma, rz, ra)


def fixed_masks(M_z, M_a):
    return MaskSample(de.constant(np.asarray(M_z, float)), de.constant(np.asarray(M_a, float)))


# ---------------------------------------------------------------- prior


def prior_params(z_prev, a_prev, masks, p, cfg):
    """Transition prior for a ``(B, d_z)`` / ``(B, d_a)`` batch.

    Latent ``i`` sees ``M^z_i * z_prev`` and ``M^a_i * a_prev`` only.
    """
    z_prev, a_prev = de.as_tensor(z_prev), de.as_tensor(a_prev)
    B = z_prev.shape[0]
    inputs = de.concatenate([z_prev, a_prev], axis=1)              # (B, d_in)
    mask = de.concatenate([masks.M_z, masks.M_a], axis=1)          # (d_z, d_in)
    h = de.multiply(de.reshape(inputs, (1, B, -1)),
                    de.reshape(mask, (cfg.d_z, 1, -1)))            # (d_z, B, d_in)
    skip = de.matmul(h, p["tr.skip"])
    for k in range(cfg.tr_layers + 1):
        h = de.matmul(h, p[f"tr.W{k}"]) + p[f"tr.b{k}"]
        if k < cfg.tr_layers:
            h = de.leaky_relu(h, cfg.slope)
    h = h + skip
    mean = de.transpose(de.reshape(h, (cfg.d_z, B)))               # (B, d_z)
    logvar = de.multiply(p["prior_logvar"], np.ones((B, cfg.d_z)))
    return mean, logvar


def initial_prior(d_z):
    return np.zeros(d_z), np.zeros(d_z)


# ---------------------------------------------------------------- densities


def reparam_sample(mean, logvar, rng):
    mean, logvar = de.as_tensor(mean), de.as_tensor(logvar)
    eps = rng.normal(mean.shape)
    return mean + de.exp(logvar * 0.5) * eps


def kl_diag_gaussians(q_mean, q_logvar, p_mean, p_logvar):
    """KL(q || p) for diagonal Gaussians, summed over every element."""
    q_mean, q_logvar = de.as_tensor(q_mean), de.as_tensor(q_logvar)
    p_mean, p_logvar = de.as_tensor(p_mean), de.as_tensor(p_logvar)
    diff = q_mean - p_mean
    inv_p = de.exp(-p_logvar)
    terms = (p_logvar - q_logvar) + (de.exp(q_logvar) + diff * diff) * inv_p - 1.0
    return de.sum_(terms) * 0.5


def gaussian_log_density(x, mean, sigma):
    """Sum of log N(x; mean, sigma^2) over every element."""
    r = de.as_tensor(x) - de.as_tensor(mean)
    n = np.prod(r.shape)
    return de.sum_(r * r) * (-0.5 / sigma ** 2) - 0.5 * n * (_LOG_2PI + 2 * np.log(sigma))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params, path, extra=None):
    obj = {
        "format_version": FORMAT_VERSION,
        "config": asdict(params.config),
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in sorted(params.weights.items())},
    }
    if extra:
        obj.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_checkpoint(path):
    """Return ``(ModelParams, raw_json)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        cfg = ModelConfig(**obj["config"])
        weights = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                   for k, v in obj["weights"].items()}
    except FileNotFoundError:
        raise DatasetFormatError(f"missing file {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
    expected = param_shapes(cfg)
    for k, shape in expected.items():
        if k not in weights or weights[k].shape != tuple(shape):
            raise DatasetFormatError(f"{path}: parameter {k!r} missing or misshapen")
    for k, v in weights.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"{path}: non-finite values in {k!r}")
    return ModelParams(cfg, weights), obj
