"""``metrics`` and ``elasticity`` commands."""

from __future__ import annotations

import argparse
import math
from pathlib import Path
from typing import TYPE_CHECKING, Dict

from cli import common
from config import Settings
from models import Aggregation, MaterialField, triplets_to_array
from services import matvae_service, metrics_service, transfer_service
from storage import tables, voxel_codec

if TYPE_CHECKING:
    from cli.routing import Router

LOG_BASES = {"e": math.e, "10": 10.0}
ELASTICITY_MODELS = ("neo_hookean", "corotational")


class MetricsCommands:
    def __init__(self, settings: Settings) -> None:
        self.settings = settings

    def register(self, router: "Router", areas: argparse._SubParsersAction) -> None:
        commands = router.group(areas, "metrics", "Evaluation of predicted materials.")

        field = router.leaf(commands, ("metrics", "field"), self.field, "Pointwise errors of a predicted field.")
        field.add_argument("--pred", type=Path, required=True, help="Predicted material sidecar.")
        field.add_argument("--gt", type=Path, required=True, help="Ground-truth material sidecar.")
        field.add_argument(
            "--aggregation", choices=[mode.value for mode in Aggregation], default=Aggregation.PER_OBJECT.value
        )
        field.add_argument("--log-base", choices=sorted(LOG_BASES), default="e")

        mass = router.leaf(commands, ("metrics", "mass"), self.mass, "Mass from mean density and volume.")
        mass.add_argument("--sidecar", type=Path, required=True)
        mass.add_argument("--volume", type=float, required=True, help="Object volume in m^3.")

        dist = router.leaf(commands, ("metrics", "dist"), self.dist, "Distribution distances between triplet sets.")
        dist.add_argument("--pred", type=Path, required=True)
        dist.add_argument("--gt", type=Path, required=True)
        dist.add_argument("--bins", type=int, default=64)
        dist.add_argument("--model", type=Path, help="Measure in this model's normalized space.")

    def field(self, args: argparse.Namespace) -> int:
        gt, object_ids = tables.read_sidecar(args.gt)
        pred, _ = tables.read_sidecar(args.pred, len(gt))
        report = metrics_service.field_report(
            pred, gt, object_ids, Aggregation(args.aggregation), LOG_BASES[args.log_base]
        )
        if args.format == "csv":
            common.emit(tables.metric_frame(report.rows()), args.format)
        else:
            common.emit(report.to_dict(), args.format)
        return common.EXIT_OK

    def mass(self, args: argparse.Namespace) -> int:
        materials, _ = tables.read_sidecar(args.sidecar)
        mass = metrics_service.mass_estimate(materials[:, 2], args.volume)
        common.emit({"mass_kg": mass, "volume_m3": args.volume, "voxels": len(materials)}, args.format)
        return common.EXIT_OK

    def dist(self, args: argparse.Namespace) -> int:
        pred = triplets_to_array(tables.read_triplets(args.pred))
        gt = triplets_to_array(tables.read_triplets(args.gt))
        normalizer = matvae_service.load_checkpoint(args.model).normalizer if args.model is not None else None
        common.emit(metrics_service.distribution_report(pred, gt, normalizer, args.bins), args.format)
        return common.EXIT_OK


class ElasticityCommands:
    def __init__(self, settings: Settings) -> None:
        self.settings = settings

    def register(self, router: "Router", areas: argparse._SubParsersAction) -> None:
        commands = router.group(areas, "elasticity", "Pointwise elasticity and material transfer.")

        evaluate = router.leaf(commands, ("elasticity", "eval"), self.evaluate, "Energy density and stress at F.")
        evaluate.add_argument("--triplet", required=True, help="E,nu,rho")
        evaluate.add_argument("--F", dest="deformation", default="1,0,0,0,1,0,0,0,1", help="Row-major 3x3.")
        evaluate.add_argument("--model", choices=ELASTICITY_MODELS, action="append", dest="models")
        evaluate.add_argument("--splats", type=Path, help="Also deform these splats' covariances.")
        evaluate.add_argument("--eps", type=float, default=1e-9)
        evaluate.add_argument("--scale-multiplier", type=float, default=1.0)

        transfer = router.leaf(commands, ("elasticity", "transfer"), self.transfer, "Nearest-voxel materials at points.")
        transfer.add_argument("--voxels", type=Path, required=True)
        transfer.add_argument("--sidecar", type=Path, required=True)
        transfer.add_argument("--points", type=Path, required=True, help="Query CSV with x,y,z.")
        transfer.add_argument("--merge", action="store_true", help="Merge near-equal materials first.")
        transfer.add_argument("--out", type=Path, required=True)

    def evaluate(self, args: argparse.Namespace) -> int:
        triplet = common.parse_triplet(args.triplet)
        F = common.parse_matrix(args.deformation)
        lam, mu = transfer_service.lame(triplet.e, triplet.nu)
        report: Dict[str, object] = {"lambda": lam, "mu": mu}
        for name in args.models or ELASTICITY_MODELS:
            energy, stress = transfer_service.evaluate_elasticity(triplet, F, name)
            report[name] = {"energy": energy, "stress": stress}
        if args.splats is not None:
            report["covariances"] = [
                transfer_service.pack_covariance(
                    transfer_service.deform_splat_covariance(splat, F, args.eps, args.scale_multiplier)
                )
                for splat in tables.read_splats(args.splats)
            ]
        common.emit(report, args.format)
        return common.EXIT_OK

    def transfer(self, args: argparse.Namespace) -> int:
        voxels = voxel_codec.read_voxels(args.voxels)
        materials, _ = tables.read_sidecar(args.sidecar, len(voxels))
        field = MaterialField(voxels=voxels, materials=materials)
        points = tables.read_points(args.points)
        values = transfer_service.transfer_field(field, points, merge=args.merge)
        tables.write_point_materials(args.out, points, values)
        return common.EXIT_OK
