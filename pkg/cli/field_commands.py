"""``lift`` and ``field`` commands: feature lifting and per-voxel material prediction."""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import TYPE_CHECKING

from cli import common
from config import Settings
from models import HeadHyperparams
from services import feature_service, field_service, matvae_service
from storage import scene_io, tables, voxel_codec

if TYPE_CHECKING:
    from cli.routing import Router

HEAD_FLAGS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "final_lr": float,
    "weight_decay": float,
    "grad_clip": float,
    "hidden": int,
    "l_n": int,
}


class FieldCommands:
    def __init__(self, settings: Settings) -> None:
        self.settings = settings

    def register(self, router: "Router", areas: argparse._SubParsersAction) -> None:
        lift = router.leaf(areas, ("lift",), self.lift, "Average multi-view feature maps onto voxels.")
        lift.add_argument("--voxels", type=Path, required=True)
        lift.add_argument("--views", type=Path, required=True, help="View manifest JSON.")
        lift.add_argument("--out", type=Path, required=True, help="Feature archive (.npz).")

        commands = router.group(areas, "field", "Material field prediction.")

        train = router.leaf(commands, ("field", "train"), self.train, "Train a prediction head.")
        train.add_argument("--voxels", type=Path, required=True)
        train.add_argument("--features", type=Path, required=True)
        train.add_argument("--sidecar", type=Path, required=True, help="Ground-truth materials per voxel.")
        train.add_argument("--matvae", type=Path, required=True)
        train.add_argument("--seed", type=int)
        train.add_argument("--out", type=Path, required=True, help="Head checkpoint JSON.")
        for name, kind in HEAD_FLAGS.items():
            train.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind)

        predict = router.leaf(commands, ("field", "predict"), self.predict, "Predict materials per voxel.")
        predict.add_argument("--voxels", type=Path, required=True)
        predict.add_argument("--features", type=Path, required=True)
        predict.add_argument("--matvae", type=Path, required=True)
        predict.add_argument("--head", type=Path, required=True)
        predict.add_argument("--out", type=Path, required=True, help="Material sidecar CSV.")

    def lift(self, args: argparse.Namespace) -> int:
        voxels = voxel_codec.read_voxels(args.voxels)
        views = scene_io.read_view_manifest(args.views)
        scene_io.write_features(args.out, feature_service.lift_features(voxels, views))
        return common.EXIT_OK

    def train(self, args: argparse.Namespace) -> int:
        seed = common.require_seed(args)
        overrides = {name: getattr(args, name) for name in HEAD_FLAGS if getattr(args, name) is not None}
        hyper = HeadHyperparams.from_dict(overrides)
        data = field_service.read_annotated(args.voxels, args.features, args.sidecar)
        matvae = matvae_service.load_checkpoint(args.matvae)
        head = field_service.train_head(data, matvae, hyper, seed=seed, progress=not args.quiet)
        field_service.save_head(head, args.out)
        return common.EXIT_OK

    def predict(self, args: argparse.Namespace) -> int:
        voxels = voxel_codec.read_voxels(args.voxels)
        features = scene_io.read_features(args.features)
        matvae = matvae_service.load_checkpoint(args.matvae)
        head = field_service.load_head(args.head)
        prediction = field_service.predict_field(head, matvae, voxels, features)
        tables.write_sidecar(args.out, prediction.materials)
        return common.EXIT_OK
