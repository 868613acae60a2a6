"""``matvae`` commands: train, encode, decode, interpolate, sample, report, traverse."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import TYPE_CHECKING, List

import numpy as np
import pandas as pd

from cli import common
from config import Settings
from models import Hyperparams, MaterialTriplet, array_to_triplets, triplets_to_array
from services import matvae_service, mtd_service
from storage import tables

if TYPE_CHECKING:
    from cli.routing import Router

logger = logging.getLogger(__name__)

HYPER_FLAGS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "final_lr": float,
    "weight_decay": float,
    "grad_clip": float,
    "kl_anneal_epochs": int,
    "hidden": int,
    "dropout": float,
    "free_nats": float,
}


def _triplet_frame(triplets: List[MaterialTriplet], **leading: object) -> pd.DataFrame:
    frame = pd.DataFrame(triplets_to_array(triplets), columns=tables.TRIPLET_COLUMNS)
    for position, (name, values) in enumerate(leading.items()):
        frame.insert(position, name, values)
    return frame


class MatVaeCommands:
    def __init__(self, settings: Settings) -> None:
        self.settings = settings

    def register(self, router: "Router", areas: argparse._SubParsersAction) -> None:
        commands = router.group(areas, "matvae", "Latent material model.")

        train = router.leaf(commands, ("matvae", "train"), self.train, "Train a model on a triplet table.")
        train.add_argument("--triplets", type=Path, required=True)
        train.add_argument("--out", type=Path, required=True, help="Checkpoint JSON.")
        train.add_argument("--seed", type=int)
        train.add_argument("--estimator", choices=("mss", "mws"))
        train.add_argument("--holdout", action="store_true", help="Train on an 80%% split and report on the test split.")
        for name, kind in HYPER_FLAGS.items():
            train.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind)

        encode = router.leaf(commands, ("matvae", "encode"), self.encode, "Triplets to latent codes.")
        encode.add_argument("--model", type=Path, required=True)
        encode.add_argument("--triplets", type=Path, required=True)
        encode.add_argument("--out", type=Path, required=True)

        decode = router.leaf(commands, ("matvae", "decode"), self.decode, "Latent codes to triplets.")
        decode.add_argument("--model", type=Path, required=True)
        decode.add_argument("--latents", type=Path, required=True)
        decode.add_argument("--out", type=Path, required=True)

        interp = router.leaf(commands, ("matvae", "interp"), self.interp, "Interpolate between two materials.")
        interp.add_argument("--model", type=Path)
        interp.add_argument("--a", required=True, help="E,nu,rho")
        interp.add_argument("--b", required=True, help="E,nu,rho")
        interp.add_argument("--steps", type=int, default=5)
        interp.add_argument("--naive", action="store_true", help="Interpolate raw properties instead of codes.")
        interp.add_argument("--out", type=Path)

        sample = router.leaf(commands, ("matvae", "sample"), self.sample, "Decode draws from the latent prior.")
        sample.add_argument("--model", type=Path, required=True)
        sample.add_argument("--count", type=int, required=True)
        sample.add_argument("--seed", type=int)
        sample.add_argument("--out", type=Path, required=True)

        report = router.leaf(
            commands, ("matvae", "reconstruct-report"), self.reconstruct_report, "Reconstruction quality report."
        )
        report.add_argument("--model", type=Path, required=True)
        report.add_argument("--triplets", type=Path, required=True)
        report.add_argument("--ranges", type=Path, help="Also score validity against this range database.")

        traverse = router.leaf(commands, ("matvae", "traverse"), self.traverse, "Decode a latent grid around a material.")
        traverse.add_argument("--model", type=Path, required=True)
        traverse.add_argument("--triplet", required=True, help="E,nu,rho")
        traverse.add_argument("--step", type=float, default=0.5)
        traverse.add_argument("--half-width", type=int, default=2)
        traverse.add_argument("--out", type=Path)

    def train(self, args: argparse.Namespace) -> int:
        seed = common.require_seed(args)
        overrides = {name: getattr(args, name) for name in HYPER_FLAGS if getattr(args, name) is not None}
        if args.estimator is not None:
            overrides["estimator"] = args.estimator
        hyper = Hyperparams.from_dict({**Hyperparams().to_dict(), **overrides, "seed": seed})
        triplets = tables.read_triplets(args.triplets)
        test: List[MaterialTriplet] = []
        if args.holdout:
            triplets, _, test = mtd_service.split_triplets(triplets, seed=seed)
        model = matvae_service.train(triplets, hyper, progress=not args.quiet)
        matvae_service.save_checkpoint(model, args.out)
        if test:
            common.emit(matvae_service.reconstruction_report(model, test), args.format)
        return common.EXIT_OK

    def encode(self, args: argparse.Namespace) -> int:
        model = matvae_service.load_checkpoint(args.model)
        values = triplets_to_array(tables.read_triplets(args.triplets))
        tables.write_latents(args.out, matvae_service.encode_array(model, values))
        return common.EXIT_OK

    def decode(self, args: argparse.Namespace) -> int:
        model = matvae_service.load_checkpoint(args.model)
        decoded = matvae_service.decode_array(model, tables.read_latents(args.latents))
        tables.write_triplets(args.out, array_to_triplets(decoded))
        return common.EXIT_OK

    def interp(self, args: argparse.Namespace) -> int:
        a = common.parse_triplet(args.a)
        b = common.parse_triplet(args.b)
        if args.steps < 2:
            raise common.CliUsageError("--steps must be at least 2.")
        fractions = np.linspace(0.0, 1.0, args.steps)
        if args.naive:
            path = [matvae_service.naive_interpolate(a, b, float(t)) for t in fractions]
        else:
            if args.model is None:
                raise common.CliUsageError("matvae interp needs --model unless --naive is given.")
            path = matvae_service.interpolate(matvae_service.load_checkpoint(args.model), a, b, args.steps)
        common.emit(_triplet_frame(path, t=fractions), args.format, args.out)
        return common.EXIT_OK

    def sample(self, args: argparse.Namespace) -> int:
        seed = common.require_seed(args)
        model = matvae_service.load_checkpoint(args.model)
        tables.write_triplets(args.out, matvae_service.sample_prior(model, args.count, seed))
        return common.EXIT_OK

    def reconstruct_report(self, args: argparse.Namespace) -> int:
        model = matvae_service.load_checkpoint(args.model)
        db = mtd_service.load_ranges(args.ranges) if args.ranges is not None else None
        report = matvae_service.reconstruction_report(model, tables.read_triplets(args.triplets), db)
        common.emit(report, args.format)
        return common.EXIT_OK

    def traverse(self, args: argparse.Namespace) -> int:
        model = matvae_service.load_checkpoint(args.model)
        grid = matvae_service.traverse(model, common.parse_triplet(args.triplet), args.step, args.half_width)
        side = len(grid)
        offsets = np.arange(side) - args.half_width
        flat = [item for row in grid for item in row]
        frame = _triplet_frame(flat, row=np.repeat(offsets, side), col=np.tile(offsets, side))
        common.emit(frame, args.format, args.out)
        return common.EXIT_OK
