"""``voxelize`` commands for segmented meshes and Gaussian splats."""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import TYPE_CHECKING

from cli import common
from config import Settings
from services import voxel_service
from storage import scene_io, tables, voxel_codec

if TYPE_CHECKING:
    from cli.routing import Router


class VoxelCommands:
    def __init__(self, settings: Settings) -> None:
        self.settings = settings

    def register(self, router: "Router", areas: argparse._SubParsersAction) -> None:
        commands = router.group(areas, "voxelize", "Solid voxelization.")

        mesh = router.leaf(commands, ("voxelize", "mesh"), self.mesh, "Voxelize a segmented OBJ mesh.")
        mesh.add_argument("mesh", type=Path)
        mesh.add_argument("--r", type=int, required=True, help="Grid resolution per axis.")
        mesh.add_argument("--k-seg", type=int, help="Per-segment voxel cap.")
        mesh.add_argument("--k-all", type=int, help="Overall voxel cap.")
        mesh.add_argument("--seed", type=int, help="Required with either cap.")
        mesh.add_argument("--out", type=Path, required=True)

        splats = router.leaf(commands, ("voxelize", "splats"), self.splats, "Voxelize a splat CSV.")
        splats.add_argument("splats", type=Path)
        splats.add_argument("--r", type=int, required=True)
        splats.add_argument("--views", type=int, default=voxel_service.DEFAULT_VIEW_COUNT)
        splats.add_argument("--pixels-per-cell", type=int, help="Defaults to MATFIELD_CARVE_PIXELS_PER_CELL.")
        splats.add_argument("--padding", type=float, default=voxel_service.DEFAULT_SPLAT_PADDING)
        splats.add_argument("--out", type=Path, required=True)

    @staticmethod
    def _check_resolution(r: int) -> None:
        if r < 1:
            raise common.CliUsageError(f"--r must be positive, got {r}.")

    def mesh(self, args: argparse.Namespace) -> int:
        self._check_resolution(args.r)
        seed = None
        if args.k_seg is not None or args.k_all is not None:
            seed = common.require_seed(args)
        segmented = scene_io.read_obj(args.mesh)
        voxels = voxel_service.voxelize_segmented(segmented, args.r, args.k_seg, args.k_all, seed)
        voxel_codec.write_voxels(args.out, voxels)
        return common.EXIT_OK

    def splats(self, args: argparse.Namespace) -> int:
        self._check_resolution(args.r)
        pixels = args.pixels_per_cell or self.settings.carve_pixels_per_cell
        voxels = voxel_service.voxelize_splats(
            tables.read_splats(args.splats),
            args.r,
            n_views=args.views,
            pixels_per_cell=pixels,
            padding=args.padding,
        )
        voxel_codec.write_voxels(args.out, voxels)
        return common.EXIT_OK
