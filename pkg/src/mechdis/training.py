"""Regularized ELBO and the Adam training loop."""

import csv
import io
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from . import model as mdl
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "elbo", "recon", "kl", "penalty", "mask_density_a", "mask_density_z", "seconds"]


@dataclass
class TrainConfig:
    alpha_a: float = 0.0
    alpha_z: float = 0.0
    lr: float = 0.0005
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    temperature: float = 1.0
    log_every: int = 1
    checkpoint_every: int = 0
    test_fraction: float = 0.1
    enc_hidden: int = 128
    enc_layers: int = 3
    tr_hidden: int = 64
    tr_layers: int = 3

    def validate(self):
        if self.alpha_a < 0 or self.alpha_z < 0:
            raise ContractError("alpha_a and alpha_z must be >= 0")
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ContractError("lr and batch_size must be positive, epochs >= 0")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if not 0 <= self.test_fraction < 1:
            raise ContractError("test_fraction must lie in [0, 1)")
        return self


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_HEADER[1:]])
        return buf.getvalue()


def split_indices(n_seq, test_fraction):
    """Train/test split by position: the last ``test_fraction`` of sequences is held out."""
    n_test = int(round(n_seq * test_fraction))
    if test_fraction > 0:
        n_test = max(n_test, 1)
    n_test = min(n_test, n_seq - 1)
    return np.arange(n_seq - n_test), np.arange(n_seq - n_test, n_seq)


def model_config_for(meta, config):
    return mdl.ModelConfig(
        d_z=meta["d_z"], d_x=meta["d_x"], d_a=meta["d_a"],
        enc_hidden=config.enc_hidden, enc_layers=config.enc_layers,
        tr_hidden=config.tr_hidden, tr_layers=config.tr_layers,
        sigma=meta["sigma"], temperature=config.temperature,
    )


# ---------------------------------------------------------------- objective


def elbo(batch, p, masks, rng, cfg):
    """Single-sample ELBO averaged over the sequences of ``batch``.

    Returns ``(total, parts)`` where ``total`` is a scalar tensor and ``parts``
    holds the ``recon`` and ``kl`` tensors with ``total = recon - kl``.
    """
    n, T = batch.x.shape[:2]
    if T < 1:
        raise ContractError("batch needs at least one time step")
    mean, logvar = mdl.encode(batch.x.reshape(n * T, -1), p, cfg)
    z = mdl.reparam_sample(mean, logvar, rng)
    recon = mdl.gaussian_log_density(batch.x.reshape(n * T, -1), mdl.decode(z, p, cfg), cfg.sigma)

    zs = de.reshape(z, (n, T, cfg.d_z))
    ms = de.reshape(mean, (n, T, cfg.d_z))
    lvs = de.reshape(logvar, (n, T, cfg.d_z))
    kl = mdl.kl_diag_gaussians(ms[:, 0], lvs[:, 0], np.zeros((n, cfg.d_z)), np.zeros((n, cfg.d_z)))
    if T > 1:
        z_prev = de.reshape(zs[:, :-1], (n * (T - 1), cfg.d_z))
        a_prev = batch.a[:, 1:].reshape(n * (T - 1), -1)
        p_mean, p_logvar = mdl.prior_params(z_prev, a_prev, masks, p, cfg)
        q_mean = de.reshape(ms[:, 1:], (n * (T - 1), cfg.d_z))
        q_logvar = de.reshape(lvs[:, 1:], (n * (T - 1), cfg.d_z))
        kl = kl + mdl.kl_diag_gaussians(q_mean, q_logvar, p_mean, p_logvar)
    recon = recon * (1.0 / n)
    kl = kl * (1.0 / n)
    return recon - kl, {"recon": recon, "kl": kl}


def mask_penalty(masks, alpha_a, alpha_z):
    # masks are nonnegative so the L1 norm is a plain sum; |x| would have a
    # zero subgradient at the entries sampled off and stall their logits
    return de.sum_(masks.M_a) * alpha_a + de.sum_(masks.M_z) * alpha_z


def regularized_objective(batch, p, rng, config, cfg):
    """ELBO minus L1 penalties on freshly sampled hard masks (to maximize).

    Returns ``(objective, parts)``; ``parts`` adds ``penalty`` and ``masks``.
    """
    mask_rng, elbo_rng = rng.spawn(2)
    masks = mdl.sample_masks(p["gamma_z"], p["gamma_a"], config.temperature, mask_rng)
    total, parts = elbo(batch, p, masks, elbo_rng, cfg)
    penalty = mask_penalty(masks, config.alpha_a, config.alpha_z)
    parts = dict(parts, penalty=penalty, masks=masks, elbo=total)
    if config.alpha_a == 0 and config.alpha_z == 0:
        return total, parts
    return total - penalty, parts


# ---------------------------------------------------------------- loop


def train(dataset, meta, config, out_dir=None, init=None, callback=None):
    """Adam ascent on the regularized objective.

    ``dataset`` is the full :class:`~mechdis.synthdata.SequenceBatch`; only
    the training split is used. Deterministic for a given ``(dataset, config)``.
    ``init`` resumes from given parameters (fresh Adam state). ``callback``,
    if given, is called as ``callback(epoch, params)`` after every epoch.
    """
    config.validate()
    cfg = model_config_for(meta, config)
    root = de.Rng(config.seed)
    init_rng, loop_rng = root.spawn(2)
    params = init.copy() if init is not None else mdl.init_params(cfg, init_rng)
    train_idx, _ = split_indices(dataset.n_seq, config.test_fraction)
    data = dataset.subset(train_idx)
    state = de.AdamState(lr=config.lr)
    history = TrainLog()
    names = list(params.weights)
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        (epoch_rng,) = loop_rng.spawn(1)
        order = epoch_rng.permutation(data.n_seq)
        sums = dict.fromkeys(("elbo", "recon", "kl", "penalty"), 0.0)
        n_batches = 0
        for b, step_rng in zip(range(0, data.n_seq, config.batch_size),
                               epoch_rng.spawn(-(-data.n_seq // config.batch_size))):
            batch = data.subset(order[b:b + config.batch_size])
            try:
                p = params.tensors(names)
                obj, parts = regularized_objective(batch, p, step_rng, config, cfg)
                grads = de.backward(-obj, wrt=list(p.values()))
                new_weights, state = de.adam_step(params.weights, {k: grads[t] for k, t in p.items()}, state)
            except NumericError:
                if out_dir:
                    mdl.save_checkpoint(params, os.path.join(out_dir, "checkpoint.json"),
                                        {"train_config": asdict(config), "epoch": epoch - 1, "aborted": True})
                raise
            params = mdl.ModelParams(cfg, new_weights)
            for k in sums:
                sums[k] += parts[k].item()
            n_batches += 1
        if epoch % config.log_every == 0 or epoch == config.epochs:
            row = {k: v / max(n_batches, 1) for k, v in sums.items()}
            row["epoch"] = epoch
            row["mask_density_a"] = float(_sigmoid(params.weights["gamma_a"]).mean()) if cfg.d_a else 0.0
            row["mask_density_z"] = float(_sigmoid(params.weights["gamma_z"]).mean())
            # wall time is excluded from byte-identical artifacts by the CLI
            row["seconds"] = time.perf_counter() - start
            history.rows.append(row)
            log.info("epoch %d elbo %.3f kl %.3f", epoch, row["elbo"], row["kl"])
        if callback is not None:
            callback(epoch, params)
        if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            mdl.save_checkpoint(params, os.path.join(out_dir, "checkpoint.json"),
                                {"train_config": asdict(config), "epoch": epoch})
    return params, history


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def evaluate_elbo(batch, params, seed=0, masks=None):
    """ELBO of ``batch`` under hardened (or given) masks, as a float."""
    cfg = params.config
    if masks is None:
        mz, ma = params.hard_masks()
        masks = mdl.fixed_masks(mz, ma)
    p = {k: de.constant(v) for k, v in params.weights.items()}
    total, _ = elbo(batch, p, masks, de.Rng(seed), cfg)
    return total.item()
