"""Latent material model: a 3 -> 2 -> 3 VAE with a radial-flow posterior.

The objective is reconstruction MSE in normalized space plus a
decomposed KL term (mutual information, total correlation and per-dimension
KL with a free-nats floor). Gradients are computed by hand in float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax
from tqdm import trange

from models import (
    NU_DECODE_MAX,
    Hyperparams,
    LossBreakdown,
    MaterialRangeDb,
    MaterialTriplet,
    Normalizer,
    triplets_to_array,
)
from services import metrics_service, mtd_service
from services.matvae_errors import (
    BatchTooSmallError,
    DivergenceError,
    FlowDomainError,
    MatVaeServiceError,
    NonFiniteError,
)
from services.nn_layers import Mlp, load_state_dict, parameter_checksum, state_dict
from services.optim import AdamW, clip_grad_norm, cosine_lr
from services.radial_flow import RadialFlow
from storage.checkpoint_repository import (
    CheckpointRepository,
    FlowRecord,
    MatVaeCheckpoint,
    TensorRecord,
)

logger = logging.getLogger(__name__)

__all__ = [
    "MatVaeServiceError",
    "NonFiniteError",
    "FlowDomainError",
    "DivergenceError",
    "BatchTooSmallError",
    "MatVaeModel",
    "MatVaeTrainer",
]

LATENT_DIM = 2
LOG_2PI = math.log(2.0 * math.pi)
# log10 exponents beyond this overflow float64 on decode
MAX_DECODE_EXPONENT = 300.0


class MatVaeModel:
    def __init__(
        self,
        normalizer: Normalizer,
        hidden: int = 256,
        dropout: float = 0.05,
        seed: int = 0,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.normalizer = normalizer
        self.encoder = Mlp(3, hidden, [LATENT_DIM, LATENT_DIM], rng, dropout=dropout)
        self.decoder = Mlp(LATENT_DIM, hidden, [1, 1, 1], rng, dropout=dropout)
        self.flow = RadialFlow(LATENT_DIM)
        self.meta: Dict[str, object] = {"seed": seed, "epochs": 0, "hidden": hidden, "dropout": dropout}
        self.eval()

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.encoder.named_parameters("encoder.")
        yield from self.decoder.named_parameters("decoder.")
        yield from self.flow.named_parameters("flow.")

    def named_gradients(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.encoder.named_gradients("encoder.")
        yield from self.decoder.named_gradients("decoder.")
        yield from self.flow.named_gradients("flow.")

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.decoder.zero_grad()
        self.flow.zero_grad()

    def train(self, mode: bool = True) -> "MatVaeModel":
        self.encoder.train(mode)
        self.decoder.train(mode)
        return self

    def eval(self) -> "MatVaeModel":
        return self.train(False)

    def checksum(self) -> str:
        return parameter_checksum(self.encoder) + parameter_checksum(self.decoder) + repr(self.flow.state())

    def to_checkpoint(self) -> MatVaeCheckpoint:
        return MatVaeCheckpoint(
            normalizer=self.normalizer.to_dict(),
            encoder=[TensorRecord(**entry) for entry in state_dict(self.encoder)],
            decoder=[TensorRecord(**entry) for entry in state_dict(self.decoder)],
            flow=FlowRecord(**self.flow.state()),
            meta=dict(self.meta),
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: MatVaeCheckpoint) -> "MatVaeModel":
        meta = dict(checkpoint.meta)
        model = cls(
            Normalizer.from_dict(checkpoint.normalizer),
            hidden=int(meta.get("hidden", 256)),
            dropout=float(meta.get("dropout", 0.05)),
            seed=int(meta.get("seed", 0)),
        )
        try:
            load_state_dict(model.encoder, [entry.model_dump() for entry in checkpoint.encoder])
            load_state_dict(model.decoder, [entry.model_dump() for entry in checkpoint.decoder])
        except ValueError as exc:
            raise MatVaeServiceError(f"Checkpoint does not match the model layout: {exc}") from exc
        model.flow = RadialFlow.from_state(checkpoint.flow.model_dump())
        model.meta = meta
        return model


def save_checkpoint(model: MatVaeModel, path: Path) -> None:
    CheckpointRepository(path).save(model.to_checkpoint())


def load_checkpoint(path: Path) -> MatVaeModel:
    return MatVaeModel.from_checkpoint(CheckpointRepository(path).load_matvae())


# --- network pieces -------------------------------------------------------


def encoder_forward(
    encoder: Mlp, x: np.ndarray, rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, np.ndarray]:
    out = encoder.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)), rng)
    return out[:, :LATENT_DIM], out[:, LATENT_DIM:]


def decoder_forward(decoder: Mlp, z: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return decoder.forward(np.atleast_2d(np.asarray(z, dtype=np.float64)), rng)


def reparameterize(
    mu: np.ndarray,
    logvar: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
) -> np.ndarray:
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize needs either a generator or explicit noise.")
        eps = rng.standard_normal(np.shape(mu))
    return mu + np.exp(0.5 * np.asarray(logvar)) * eps


def radial_flow(u: np.ndarray, flow: RadialFlow) -> Tuple[np.ndarray, np.ndarray]:
    return flow.forward(u)


def posterior_log_density(
    u: np.ndarray, mu: np.ndarray, logvar: np.ndarray, log_det: np.ndarray
) -> np.ndarray:
    u, mu, logvar = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (u, mu, logvar))
    base = -0.5 * LOG_2PI - 0.5 * logvar - 0.5 * (u - mu) ** 2 * np.exp(-logvar)
    return base.sum(axis=1) - np.asarray(log_det, dtype=np.float64)


# --- decomposed KL --------------------------------------------------------


def importance_log_weights(batch_size: int, dataset_size: int, estimator: str = "mss") -> np.ndarray:
    """Log weights (B, B) applied to log q(z_i | x_j) when estimating the aggregated posterior."""
    if batch_size < 2:
        raise BatchTooSmallError(f"Batch size must be at least 2, got {batch_size}.")
    if dataset_size < batch_size:
        raise BatchTooSmallError(f"Dataset size {dataset_size} is smaller than the batch size {batch_size}.")
    if estimator == "mws":
        return np.full((batch_size, batch_size), -math.log(dataset_size * batch_size))
    if estimator != "mss":
        raise ValueError(f"Unknown aggregated-posterior estimator {estimator!r}.")
    m = batch_size - 1
    weights = np.full((batch_size, batch_size), 1.0 / m)
    rows = np.arange(batch_size)
    weights[rows, (rows + 1) % batch_size] = (dataset_size - m) / (dataset_size * m)
    weights[rows, rows] = 1.0 / dataset_size
    return np.log(weights)


@dataclass
class KlEstimate:
    mi: float
    tc: float
    dim_kl: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    diff: np.ndarray
    inv_var: np.ndarray
    joint_weights: np.ndarray
    dim_weights: np.ndarray

    def backward(
        self, g_mi: float, g_tc: float, g_dim: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns gradients w.r.t. (u, mu, logvar, log_det, z) given dL/d(mi, tc, dim_kl)."""
        batch, dim = self.u.shape
        g_dim = np.asarray(g_dim, dtype=np.float64)
        g_lqcx = np.full(batch, g_mi / batch)
        g_lqz = np.full(batch, (g_tc - g_mi) / batch)
        g_lqd = np.tile((g_dim - g_tc) / batch, (batch, 1))
        g_lp = np.tile(-g_dim / batch, (batch, 1))

        g_m = g_lqz[:, None, None] * self.joint_weights[:, :, None]
        g_m = g_m + g_lqd[:, None, :] * self.dim_weights
        rows = np.arange(batch)
        g_m[rows, rows, :] += g_lqcx[:, None]

        # M[i,j,d] = -log(2 pi)/2 - lv[j,d]/2 - diff[i,j,d]^2 inv_var[j,d]/2
        scaled = self.diff * self.inv_var[None, :, :]
        g_u = -np.sum(g_m * scaled, axis=1)
        g_mu = np.sum(g_m * scaled, axis=0)
        g_lv = np.sum(g_m * (-0.5 + 0.5 * self.diff * scaled), axis=0)
        g_ld = -g_lqcx - g_lqz - g_lqd.sum(axis=1) / dim
        g_z = -self.z * g_lp
        return g_u, g_mu, g_lv, g_ld, g_z


def kl_decomposition(
    u: np.ndarray,
    mu: np.ndarray,
    logvar: np.ndarray,
    log_det: np.ndarray,
    dataset_size: int,
    z: Optional[np.ndarray] = None,
    estimator: str = "mss",
) -> KlEstimate:
    """Minibatch estimates of mutual information, total correlation and per-dimension KL.

    ``z`` is the flowed sample used for the prior term; it defaults to ``u``
    for an identity flow.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    log_det = np.asarray(log_det, dtype=np.float64).reshape(-1)
    z = u if z is None else np.atleast_2d(np.asarray(z, dtype=np.float64))
    batch, dim = u.shape
    log_w = importance_log_weights(batch, dataset_size, estimator)

    diff = u[:, None, :] - mu[None, :, :]
    inv_var = np.exp(-logvar)
    pair = -0.5 * LOG_2PI - 0.5 * logvar[None, :, :] - 0.5 * diff**2 * inv_var[None, :, :]

    rows = np.arange(batch)
    log_q_cond = pair[rows, rows, :].sum(axis=1) - log_det
    joint_logits = log_w + pair.sum(axis=2)
    log_q_agg = logsumexp(joint_logits, axis=1) - log_det
    dim_logits = log_w[:, :, None] + pair
    log_q_dim = logsumexp(dim_logits, axis=1) - log_det[:, None] / dim
    log_prior = -0.5 * LOG_2PI - 0.5 * z**2

    return KlEstimate(
        mi=float(np.mean(log_q_cond - log_q_agg)),
        tc=float(np.mean(log_q_agg - log_q_dim.sum(axis=1))),
        dim_kl=np.mean(log_q_dim - log_prior, axis=0),
        u=u,
        mu=mu,
        logvar=logvar,
        z=z,
        diff=diff,
        inv_var=inv_var,
        joint_weights=softmax(joint_logits, axis=1),
        dim_weights=softmax(dim_logits, axis=1),
    )


# --- objective ------------------------------------------------------------


def kl_weights(hyper: Hyperparams, epoch: int) -> Tuple[float, float, float]:
    """(gamma, beta, alpha) ramped linearly from zero over the annealing epochs."""
    ramp = 1.0 if hyper.kl_anneal_epochs == 0 else min(1.0, epoch / hyper.kl_anneal_epochs)
    return (ramp * hyper.gamma_mi, ramp * hyper.beta_tc, ramp * hyper.alpha_kl)


def combine_loss(
    recon: float,
    mi: float,
    tc: float,
    dim_kl: Sequence[float],
    weights: Tuple[float, float, float] = (1.0, 2.0, 1.0),
    free_nats: float = 0.1,
) -> float:
    gamma, beta, alpha = weights
    floored = sum(max(free_nats, float(value)) for value in dim_kl)
    return recon + gamma * mi + beta * tc + alpha * floored


def loss(
    model: MatVaeModel,
    x: np.ndarray,
    dataset_size: int,
    hyper: Hyperparams,
    epoch: int,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
    training: bool = True,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Objective and its gradient for every trainable parameter on one normalized batch."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    model.train(training)
    model.zero_grad()

    mu, logvar = encoder_forward(model.encoder, x, rng)
    if eps is None:
        if rng is None:
            raise ValueError("loss needs either a generator or explicit noise.")
        eps = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * logvar)
    u = mu + std * eps
    z, log_det = model.flow.forward(u)
    x_hat = decoder_forward(model.decoder, z, rng)

    recon = float(np.mean((x_hat - x) ** 2))
    estimate = kl_decomposition(u, mu, logvar, log_det, dataset_size, z=z, estimator=hyper.estimator)
    weights = kl_weights(hyper, epoch)
    total = combine_loss(recon, estimate.mi, estimate.tc, estimate.dim_kl, weights, hyper.free_nats)
    breakdown = LossBreakdown(
        recon=recon,
        mi=estimate.mi,
        tc=estimate.tc,
        dim_kl=(float(estimate.dim_kl[0]), float(estimate.dim_kl[1])),
        total=total,
    )
    if not math.isfinite(total):
        raise NonFiniteError(f"Non-finite loss at epoch {epoch}: {breakdown}.")

    gamma, beta, alpha = weights
    active = (estimate.dim_kl > hyper.free_nats).astype(np.float64)
    gz_dec = model.decoder.backward(2.0 * (x_hat - x) / x.size)
    gu_kl, gmu, glv, gld, gz_kl = estimate.backward(gamma, beta, alpha * active)
    gu = gu_kl + model.flow.backward(gz_dec + gz_kl, gld)
    gmu = gmu + gu
    glv = glv + gu * eps * std * 0.5
    model.encoder.backward(np.concatenate([gmu, glv], axis=1))

    grads = {name: value.copy() for name, value in model.named_gradients()}
    for name, value in grads.items():
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Non-finite gradient for parameter {name} at epoch {epoch}.")
    return breakdown, grads


# --- training -------------------------------------------------------------


class MatVaeTrainer:
    """Seeded AdamW training loop with cosine learning-rate annealing."""

    def __init__(self, hyper: Optional[Hyperparams] = None, progress: bool = True) -> None:
        self.hyper = hyper or Hyperparams()
        self.progress = progress
        self.history: List[LossBreakdown] = []
        self.lr_history: List[float] = []

    def fit(self, triplets: Sequence[MaterialTriplet]) -> MatVaeModel:
        hyper = self.hyper
        if len(triplets) < max(2, hyper.batch_size):
            raise BatchTooSmallError(
                f"Training needs at least {max(2, hyper.batch_size)} triplets, got {len(triplets)}."
            )
        normalizer = mtd_service.fit_normalizer(triplets)
        data = mtd_service.normalize_array(triplets_to_array(triplets), normalizer)
        rng = np.random.default_rng(hyper.seed)
        model = MatVaeModel(normalizer, hidden=hyper.hidden, dropout=hyper.dropout, seed=hyper.seed, rng=rng)
        optimizer = AdamW(list(model.named_parameters()), weight_decay=hyper.weight_decay)
        size = len(data)
        log_every = max(1, hyper.epochs // 10)
        logger.info("Training on %d triplets for %d epochs", size, hyper.epochs)

        for epoch in trange(hyper.epochs, desc="matvae", disable=not self.progress):
            lr = cosine_lr(epoch, hyper.epochs, hyper.lr, hyper.final_lr)
            order = rng.permutation(size)
            totals = np.zeros(6)
            batches = 0
            for start in range(0, size, hyper.batch_size):
                index = order[start : start + hyper.batch_size]
                if len(index) < 2:
                    continue
                try:
                    breakdown, grads = loss(model, data[index], size, hyper, epoch, rng=rng)
                except (NonFiniteError, FlowDomainError) as exc:
                    raise DivergenceError(f"Training diverged at epoch {epoch}: {exc}") from exc
                clip_grad_norm(list(grads.values()), hyper.grad_clip)
                optimizer.step(grads, lr)
                totals += (breakdown.recon, breakdown.mi, breakdown.tc, *breakdown.dim_kl, breakdown.total)
                batches += 1
                logger.debug("epoch %d batch %d lr %.3e loss %.6f", epoch, batches, lr, breakdown.total)
            mean = totals / max(batches, 1)
            self.history.append(LossBreakdown(mean[0], mean[1], mean[2], (mean[3], mean[4]), mean[5]))
            self.lr_history.append(lr)
            if (epoch + 1) % log_every == 0 or epoch == hyper.epochs - 1:
                logger.info("epoch %d/%d loss %.5f recon %.5f", epoch + 1, hyper.epochs, mean[5], mean[0])

        model.meta.update({"epochs": hyper.epochs})
        return model.eval()


def train(triplets: Sequence[MaterialTriplet], hyper: Optional[Hyperparams] = None, progress: bool = True) -> MatVaeModel:
    return MatVaeTrainer(hyper, progress=progress).fit(triplets)


# --- inference ------------------------------------------------------------


def encode_array(model: MatVaeModel, values: np.ndarray) -> np.ndarray:
    """Flowed posterior means for raw (N, 3) triplets."""
    model.eval()
    mu, _ = encoder_forward(model.encoder, mtd_service.normalize_array(values, model.normalizer))
    z, _ = model.flow.forward(mu)
    return z


def decode_normalized(model: MatVaeModel, z: np.ndarray) -> np.ndarray:
    model.eval()
    return decoder_forward(model.decoder, z)


def denormalize_decoded(normalized: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    """Maps decoder output to raw triplets that always satisfy the physical bounds."""
    scaled = np.asarray(normalized, dtype=np.float64).reshape(-1, 3) * normalizer.spans + normalizer.mins
    log_e = np.clip(scaled[:, 0], -MAX_DECODE_EXPONENT, MAX_DECODE_EXPONENT)
    log_rho = np.clip(scaled[:, 2], -MAX_DECODE_EXPONENT, MAX_DECODE_EXPONENT)
    nu = np.clip(scaled[:, 1], 0.0, NU_DECODE_MAX)
    return np.stack([10.0**log_e, nu, 10.0**log_rho], axis=1)


def decode_array(model: MatVaeModel, z: np.ndarray) -> np.ndarray:
    return denormalize_decoded(decode_normalized(model, z), model.normalizer)


def encode(model: MatVaeModel, triplet: MaterialTriplet) -> np.ndarray:
    return encode_array(model, np.array([triplet.as_tuple()]))[0]


def decode(model: MatVaeModel, z: np.ndarray) -> MaterialTriplet:
    e, nu, rho = decode_array(model, np.asarray(z, dtype=np.float64).reshape(1, LATENT_DIM))[0]
    return MaterialTriplet(float(e), float(nu), float(rho))


def _to_triplets(values: np.ndarray) -> List[MaterialTriplet]:
    return [MaterialTriplet(float(e), float(nu), float(rho)) for e, nu, rho in values]


def interpolate(model: MatVaeModel, a: MaterialTriplet, b: MaterialTriplet, steps: int) -> List[MaterialTriplet]:
    if steps < 2:
        raise ValueError(f"Interpolation needs at least 2 steps, got {steps}.")
    z_a = encode(model, a)
    z_b = encode(model, b)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    return _to_triplets(decode_array(model, (1.0 - t) * z_a + t * z_b))


def naive_interpolate(a: MaterialTriplet, b: MaterialTriplet, t: float) -> MaterialTriplet:
    """Independent linear interpolation of the raw properties."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"Interpolation fraction must lie in [0, 1], got {t}.")
    if t == 0.0:
        return a
    return MaterialTriplet(
        e=(1.0 - t) * a.e + t * b.e,
        nu=(1.0 - t) * a.nu + t * b.nu,
        rho=(1.0 - t) * a.rho + t * b.rho,
    )


def sample_prior(model: MatVaeModel, count: int, seed: int) -> List[MaterialTriplet]:
    if count < 1:
        raise ValueError(f"Sample count must be at least 1, got {count}.")
    z = np.random.default_rng(seed).standard_normal((count, LATENT_DIM))
    return _to_triplets(decode_array(model, z))


def traverse(model: MatVaeModel, triplet: MaterialTriplet, step: float, half_width: int) -> List[List[MaterialTriplet]]:
    """Decodes a (2k+1) x (2k+1) latent grid centred on the code of ``triplet``."""
    if half_width < 0 or step <= 0:
        raise ValueError("Traversal needs a non-negative half width and a positive step.")
    center = encode(model, triplet)
    offsets = np.arange(-half_width, half_width + 1) * step
    grid = np.array([[center[0] + dx, center[1] + dy] for dx in offsets for dy in offsets])
    decoded = _to_triplets(decode_array(model, grid))
    side = len(offsets)
    return [decoded[row * side : (row + 1) * side] for row in range(side)]


def reconstruction_report(
    model: MatVaeModel, triplets: Sequence[MaterialTriplet], db: Optional[MaterialRangeDb] = None
) -> Dict[str, object]:
    """Reconstruction quality of encode/decode on held-out triplets."""
    gt = triplets_to_array(triplets)
    pred = decode_array(model, encode_array(model, gt))
    normalized_gt = mtd_service.normalize_array(gt, model.normalizer)
    normalized_pred = mtd_service.normalize_array(pred, model.normalizer)
    mse = np.mean((normalized_pred - normalized_gt) ** 2, axis=0)
    report: Dict[str, object] = {
        "count": len(gt),
        "normalized_mse": {"e": float(mse[0]), "nu": float(mse[1]), "rho": float(mse[2])},
        "relative_errors": metrics_service.mechanical_relative_errors(pred, gt),
        "distribution": metrics_service.distribution_report(pred, gt, normalizer=model.normalizer),
    }
    if db is not None:
        report["valid_fraction"] = mtd_service.valid_fraction(pred, db)
    return report
