"""Per-voxel material prediction through the frozen latent decoder."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import trange

from models import AnnotatedVoxelSet, HeadHyperparams, MaterialField, Normalizer, SolidVoxelization, VoxelFeatures
from services import matvae_service, mtd_service
from services.matvae_errors import NonFiniteError
from services.matvae_service import LATENT_DIM, MatVaeModel
from services.nn_layers import Linear, Sequential, SiLU, load_state_dict, parameter_checksum, state_dict
from services.optim import AdamW, clip_grad_norm, cosine_lr
from storage import scene_io, tables, voxel_codec
from storage.checkpoint_repository import CheckpointRepository, HeadCheckpoint, TensorRecord

logger = logging.getLogger(__name__)


class FieldServiceError(Exception):
    """Base error for field prediction."""


class WidthMismatchError(FieldServiceError):
    pass


class DivergenceError(FieldServiceError):
    pass


class PredictorHead:
    """Features -> latent code: Linear, SiLU, Linear, SiLU, Linear."""

    def __init__(self, channels: int, hidden: int = 128, seed: int = 0, rng: Optional[np.random.Generator] = None) -> None:
        if channels < 1:
            raise ValueError(f"Feature width must be positive, got {channels}.")
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.channels = channels
        self.hidden = hidden
        self.net = Sequential(
            [
                Linear(channels, hidden, rng),
                SiLU(),
                Linear(hidden, hidden, rng),
                SiLU(),
                Linear(hidden, LATENT_DIM, rng),
            ]
        )
        self.meta: Dict[str, object] = {"channels": channels, "hidden": hidden, "seed": seed}

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.net.named_parameters("head.")

    def named_gradients(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.net.named_gradients("head.")

    def zero_grad(self) -> None:
        self.net.zero_grad()

    def checksum(self) -> str:
        return parameter_checksum(self.net)

    def to_checkpoint(self) -> HeadCheckpoint:
        return HeadCheckpoint(layers=[TensorRecord(**entry) for entry in state_dict(self.net)], meta=dict(self.meta))

    @classmethod
    def from_checkpoint(cls, checkpoint: HeadCheckpoint) -> "PredictorHead":
        meta = dict(checkpoint.meta)
        head = cls(int(meta["channels"]), hidden=int(meta.get("hidden", 128)), seed=int(meta.get("seed", 0)))
        try:
            load_state_dict(head.net, [entry.model_dump() for entry in checkpoint.layers])
        except ValueError as exc:
            raise FieldServiceError(f"Head checkpoint does not match the head layout: {exc}") from exc
        head.meta = meta
        return head


def save_head(head: PredictorHead, path: Path) -> None:
    CheckpointRepository(path).save(head.to_checkpoint())


def load_head(path: Path) -> PredictorHead:
    return PredictorHead.from_checkpoint(CheckpointRepository(path).load_head())


def stochastic_subsample(count: int, l_n: int, seed: int, epoch: int = 0) -> np.ndarray:
    """All indices when ``count <= l_n``, else ``l_n`` distinct ones drawn for this (seed, epoch)."""
    if count < 1 or l_n < 1:
        raise ValueError(f"Subsampling needs count >= 1 and l_n >= 1, got {count} and {l_n}.")
    if count <= l_n:
        return np.arange(count)
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return np.sort(rng.choice(count, size=l_n, replace=False))


def _feature_array(features: Union[VoxelFeatures, np.ndarray]) -> np.ndarray:
    if isinstance(features, VoxelFeatures):
        return features.features
    return np.atleast_2d(np.asarray(features, dtype=np.float64))


def head_forward(head: PredictorHead, features: Union[VoxelFeatures, np.ndarray]) -> np.ndarray:
    values = _feature_array(features)
    if values.shape[1] != head.channels:
        raise WidthMismatchError(f"Head expects {head.channels} feature channels, got {values.shape[1]}.")
    return head.net.forward(values)


def field_loss(
    head: PredictorHead,
    matvae: MatVaeModel,
    data: AnnotatedVoxelSet,
    subset: Optional[Sequence[int]] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean squared normalized error of decoded head outputs and the head-only gradients."""
    index = np.arange(len(data)) if subset is None else np.asarray(subset, dtype=np.int64)
    if len(index) == 0:
        raise ValueError("Field loss needs a non-empty subset.")
    if index.min() < 0 or index.max() >= len(data):
        raise IndexError(f"Subset indexes outside the {len(data)} annotated voxels.")
    target = mtd_service.normalize_array(data.materials[index], matvae.normalizer)

    matvae.eval()
    head.zero_grad()
    z = head_forward(head, data.features.features[index])
    decoded = matvae_service.decoder_forward(matvae.decoder, z)
    residual = decoded - target
    value = float(np.sum(residual * residual) / len(index))

    gz = matvae.decoder.backward(2.0 * residual / len(index), param_grads=False)
    head.net.backward(gz)
    grads = {name: grad.copy() for name, grad in head.named_gradients()}
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Non-finite gradient for parameter {name}.")
    return value, grads


def train_head(
    data: AnnotatedVoxelSet,
    matvae: MatVaeModel,
    hyper: Optional[HeadHyperparams] = None,
    seed: int = 0,
    progress: bool = True,
) -> PredictorHead:
    hyper = hyper or HeadHyperparams()
    if len(data) == 0:
        raise FieldServiceError("Cannot train a head on an empty voxel set.")
    rng = np.random.default_rng(seed)
    head = PredictorHead(data.features.channels, hidden=hyper.hidden, seed=seed, rng=rng)
    optimizer = AdamW(list(head.named_parameters()), weight_decay=hyper.weight_decay)
    log_every = max(1, hyper.epochs // 10)
    logger.info("Training head on %d voxels (%d channels) for %d epochs", len(data), head.channels, hyper.epochs)

    for epoch in trange(hyper.epochs, desc="field", disable=not progress):
        lr = cosine_lr(epoch, hyper.epochs, hyper.lr, hyper.final_lr)
        subset = stochastic_subsample(len(data), hyper.l_n, seed, epoch)
        order = subset[rng.permutation(len(subset))]
        total = 0.0
        batches = 0
        for start in range(0, len(order), hyper.batch_size):
            try:
                value, grads = field_loss(head, matvae, data, order[start : start + hyper.batch_size])
            except NonFiniteError as exc:
                raise DivergenceError(f"Head training diverged at epoch {epoch}: {exc}") from exc
            clip_grad_norm(list(grads.values()), hyper.grad_clip)
            optimizer.step(grads, lr)
            total += value
            batches += 1
        if (epoch + 1) % log_every == 0 or epoch == hyper.epochs - 1:
            logger.info("epoch %d/%d field loss %.6f", epoch + 1, hyper.epochs, total / batches)

    head.meta["epochs"] = hyper.epochs
    return head


def predict_field(
    head: PredictorHead,
    matvae: MatVaeModel,
    voxels: SolidVoxelization,
    features: Union[VoxelFeatures, np.ndarray],
) -> MaterialField:
    values = _feature_array(features)
    if len(values) != len(voxels):
        raise FieldServiceError(f"{len(values)} feature rows for {len(voxels)} voxels.")
    materials = matvae_service.decode_array(matvae, head_forward(head, values))
    logger.info("Predicted materials for %d voxels", len(voxels))
    return MaterialField(voxels=voxels, materials=materials)


def read_annotated(voxel_path: Path, features_path: Path, sidecar_path: Path) -> AnnotatedVoxelSet:
    voxels = voxel_codec.read_voxels(voxel_path)
    features = scene_io.read_features(features_path)
    materials, object_ids = tables.read_sidecar(sidecar_path, len(voxels))
    try:
        return AnnotatedVoxelSet(voxels=voxels, features=features, materials=materials, object_ids=object_ids)
    except ValueError as exc:
        raise FieldServiceError(str(exc)) from exc


def read_field(voxel_path: Path, sidecar_path: Path) -> MaterialField:
    voxels = voxel_codec.read_voxels(voxel_path)
    materials, _ = tables.read_sidecar(sidecar_path, len(voxels))
    return MaterialField(voxels=voxels, materials=materials)


def write_field(voxel_path: Path, sidecar_path: Path, field: MaterialField) -> None:
    voxel_codec.write_voxels(voxel_path, field.voxels)
    tables.write_sidecar(sidecar_path, field.materials)


def nearest_training_material(predicted: np.ndarray, candidates: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    """Index of the closest candidate triplet per prediction, measured in normalized space."""
    pred = mtd_service.normalize_array(np.asarray(predicted, dtype=np.float64).reshape(-1, 3), normalizer)
    cand = mtd_service.normalize_array(np.asarray(candidates, dtype=np.float64).reshape(-1, 3), normalizer)
    distance = np.linalg.norm(pred[:, None, :] - cand[None, :, :], axis=2)
    return np.argmin(distance, axis=1)
