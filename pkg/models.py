"""Core dataclasses and enums representing the material-field domain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

# Poisson's ratio upper clamp applied to decoded materials.
NU_DECODE_MAX = 0.4999

# 99th percentile ellipsoid of a 3-D Gaussian.
CHI2_3_Q99 = float(chi2.ppf(0.99, df=3))


class Property(str, Enum):
    E = "e"
    NU = "nu"
    RHO = "rho"


class Aggregation(str, Enum):
    PER_OBJECT = "per-object"
    GLOBAL = "global"


class InvalidTripletError(ValueError):
    """Raised when a material triplet violates physical admissibility."""


@dataclass(frozen=True)
class MaterialTriplet:
    e: float
    nu: float
    rho: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.e) and math.isfinite(self.nu) and math.isfinite(self.rho)):
            raise InvalidTripletError(f"Non-finite triplet {self.as_tuple()}.")
        if self.e <= 0:
            raise InvalidTripletError(f"Young's modulus must be positive, got {self.e}.")
        if self.rho <= 0:
            raise InvalidTripletError(f"Density must be positive, got {self.rho}.")
        if not 0.0 <= self.nu < 0.5:
            raise InvalidTripletError(f"Poisson's ratio must lie in [0, 0.5), got {self.nu}.")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.e, self.nu, self.rho)

    def to_dict(self) -> Dict[str, float]:
        return {"e_pa": self.e, "nu": self.nu, "rho_kgm3": self.rho}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MaterialTriplet":
        return cls(e=float(data["e_pa"]), nu=float(data["nu"]), rho=float(data["rho_kgm3"]))


def triplets_to_array(triplets: Sequence[MaterialTriplet]) -> np.ndarray:
    """Stack triplets into an (N, 3) float64 array of (E, nu, rho)."""
    if not triplets:
        return np.zeros((0, 3), dtype=np.float64)
    return np.array([t.as_tuple() for t in triplets], dtype=np.float64)


def array_to_triplets(values: np.ndarray) -> List[MaterialTriplet]:
    return [MaterialTriplet(float(e), float(nu), float(rho)) for e, nu, rho in np.asarray(values, dtype=np.float64)]


@dataclass(frozen=True)
class MaterialRange:
    name: str
    e_lo: float
    e_hi: float
    nu_lo: float
    nu_hi: float
    rho_lo: float
    rho_hi: float

    def lows(self) -> np.ndarray:
        return np.array([self.e_lo, self.nu_lo, self.rho_lo], dtype=np.float64)

    def highs(self) -> np.ndarray:
        return np.array([self.e_hi, self.nu_hi, self.rho_hi], dtype=np.float64)

    def size(self) -> float:
        """Log-domain extent used to allocate samples across ranges."""
        return (
            (math.log10(self.e_hi) - math.log10(self.e_lo))
            + (self.nu_hi - self.nu_lo) / 0.5
            + (math.log10(self.rho_hi) - math.log10(self.rho_lo))
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "e_pa": [self.e_lo, self.e_hi],
            "nu": [self.nu_lo, self.nu_hi],
            "rho_kgm3": [self.rho_lo, self.rho_hi],
        }


@dataclass(frozen=True)
class MaterialRangeDb:
    ranges: Tuple[MaterialRange, ...]

    def __len__(self) -> int:
        return len(self.ranges)

    def names(self) -> List[str]:
        return [item.name for item in self.ranges]

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (lows, highs) as (R, 3) arrays."""
        lows = np.stack([item.lows() for item in self.ranges])
        highs = np.stack([item.highs() for item in self.ranges])
        return lows, highs

    def to_dict(self) -> List[Dict[str, object]]:
        return [item.to_dict() for item in self.ranges]


@dataclass(frozen=True)
class Normalizer:
    """Log min-max transform for E and rho, plain min-max for nu."""

    e_log_min: float
    e_log_max: float
    nu_min: float
    nu_max: float
    rho_log_min: float
    rho_log_max: float

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.e_log_min, self.nu_min, self.rho_log_min], dtype=np.float64)

    @property
    def spans(self) -> np.ndarray:
        return np.array(
            [self.e_log_max - self.e_log_min, self.nu_max - self.nu_min, self.rho_log_max - self.rho_log_min],
            dtype=np.float64,
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "e_log_min": self.e_log_min,
            "e_log_max": self.e_log_max,
            "nu_min": self.nu_min,
            "nu_max": self.nu_max,
            "rho_log_min": self.rho_log_min,
            "rho_log_max": self.rho_log_max,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Normalizer":
        return cls(**{key: float(data[key]) for key in cls.__dataclass_fields__})


@dataclass
class Hyperparams:
    epochs: int = 850
    batch_size: int = 256
    lr: float = 1e-4
    final_lr: float = 1e-5
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    kl_anneal_epochs: int = 200
    hidden: int = 256
    dropout: float = 0.05
    gamma_mi: float = 1.0
    beta_tc: float = 2.0
    alpha_kl: float = 1.0
    free_nats: float = 0.1
    estimator: str = "mss"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("epochs", "batch_size", "lr", "final_lr", "grad_clip", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Hyperparameter {name} must be positive.")
        if self.kl_anneal_epochs < 0 or self.weight_decay < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("Invalid annealing, weight decay or dropout setting.")

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Hyperparams":
        known = {key: value for key, value in data.items() if key in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class HeadHyperparams:
    epochs: int = 300
    batch_size: int = 1024
    lr: float = 1e-3
    final_lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    hidden: int = 128
    l_n: int = 32768

    def __post_init__(self) -> None:
        for name in ("epochs", "batch_size", "lr", "final_lr", "grad_clip", "hidden", "l_n"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Hyperparameter {name} must be positive.")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HeadHyperparams":
        known = {key: value for key, value in data.items() if key in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class LossBreakdown:
    recon: float
    mi: float
    tc: float
    dim_kl: Tuple[float, float]
    total: float


@dataclass
class MeshSegment:
    segment_id: str
    faces: List[Tuple[int, ...]]


@dataclass
class SegmentedMesh:
    vertices: np.ndarray
    segments: List[MeshSegment]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        seen = set()
        count = len(self.vertices)
        for segment in self.segments:
            if segment.segment_id in seen:
                raise ValueError(f"Duplicate segment id {segment.segment_id!r}.")
            seen.add(segment.segment_id)
            for face in segment.faces:
                if len(set(face)) < 3:
                    raise ValueError(f"Face {face} in segment {segment.segment_id!r} has fewer than 3 distinct vertices.")
                if min(face) < 0 or max(face) >= count:
                    raise ValueError(f"Face {face} in segment {segment.segment_id!r} indexes outside the vertex list.")

    def all_faces(self) -> List[Tuple[int, ...]]:
        return [face for segment in self.segments for face in segment.faces]


@dataclass
class VoxelGrid:
    resolution: int
    origin: np.ndarray
    surface: np.ndarray
    exterior: np.ndarray
    interior: np.ndarray

    @property
    def pitch(self) -> float:
        return 1.0 / self.resolution

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.surface.shape)  # type: ignore[return-value]


@dataclass
class OccupancyGrid:
    """Occupancy over the r^3 lattice aligned with [-0.5, 0.5]^3."""

    occupied: np.ndarray

    def __post_init__(self) -> None:
        self.occupied = np.asarray(self.occupied, dtype=bool)
        if self.occupied.ndim != 3 or len(set(self.occupied.shape)) != 1:
            raise ValueError(f"Occupancy must be a cubic r^3 array, got shape {self.occupied.shape}.")

    @property
    def resolution(self) -> int:
        return int(self.occupied.shape[0])

    @property
    def pitch(self) -> float:
        return 1.0 / self.resolution

    def centers(self) -> np.ndarray:
        idx = np.argwhere(self.occupied)
        return (idx + 0.5) * self.pitch - 0.5


@dataclass
class SolidVoxelization:
    resolution: int
    centers: np.ndarray
    segment_ids: Optional[List[str]] = None
    discretized: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(len(self.centers))


@dataclass(frozen=True)
class GaussianSplat:
    mean: Tuple[float, float, float]
    quaternion: Tuple[float, float, float, float]
    scales: Tuple[float, float, float]
    opacity: float = 1.0

    def __post_init__(self) -> None:
        norm = math.sqrt(sum(q * q for q in self.quaternion))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"Splat quaternion must be unit length, got norm {norm}.")
        if min(self.scales) <= 0:
            raise ValueError(f"Splat scales must be positive, got {self.scales}.")

    def rotation(self) -> np.ndarray:
        w, x, y, z = self.quaternion
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=np.float64,
        )


@dataclass
class CameraView:
    world_to_camera: np.ndarray
    fov_y_deg: float
    width: int
    height: int

    def __post_init__(self) -> None:
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        rotation = self.world_to_camera[:3, :3]
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("Camera rotation block is not orthonormal.")
        if not 0.0 < self.fov_y_deg < 180.0:
            raise ValueError(f"Vertical field of view must lie in (0, 180) degrees, got {self.fov_y_deg}.")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("Camera resolution must be positive.")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def eye(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> Dict[str, object]:
        return {
            "world_to_camera": [float(v) for v in self.world_to_camera.ravel()],
            "fov_y_deg": float(self.fov_y_deg),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraView":
        return cls(
            world_to_camera=np.asarray(data["world_to_camera"], dtype=np.float64).reshape(4, 4),
            fov_y_deg=float(data["fov_y_deg"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )


@dataclass
class FeatureMap:
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"Feature map must be n x n x c, got shape {self.data.shape}.")
        if self.data.shape[0] < 2:
            raise ValueError("Feature map side must be at least 2.")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Feature map contains non-finite values.")

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def c(self) -> int:
        return int(self.data.shape[2])


@dataclass
class VoxelFeatures:
    features: np.ndarray
    visible: np.ndarray

    def __len__(self) -> int:
        return int(len(self.features))

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])


@dataclass
class AnnotatedVoxelSet:
    voxels: SolidVoxelization
    features: VoxelFeatures
    materials: np.ndarray
    object_ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.materials = np.asarray(self.materials, dtype=np.float64).reshape(-1, 3)
        if not (len(self.voxels) == len(self.features) == len(self.materials)):
            raise ValueError(
                f"Annotated set is misaligned: {len(self.voxels)} voxels, "
                f"{len(self.features)} feature rows, {len(self.materials)} materials."
            )

    def __len__(self) -> int:
        return len(self.voxels)


@dataclass
class MaterialField:
    voxels: SolidVoxelization
    materials: np.ndarray

    def __post_init__(self) -> None:
        self.materials = np.asarray(self.materials, dtype=np.float64).reshape(-1, 3)
        if len(self.materials) != len(self.voxels):
            raise ValueError("Material field is misaligned with its voxels.")

    def __len__(self) -> int:
        return len(self.voxels)


@dataclass
class DerivedModuli:
    shear: float
    bulk: float
    e_over_rho: float
    ashby_stiff: float
    ashby_energy: float


@dataclass
class FieldErrorReport:
    aggregation: Aggregation
    values: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def rows(self) -> List[Tuple[str, str, str, float]]:
        return [
            (prop, metric, self.aggregation.value, value)
            for prop, metrics in self.values.items()
            for metric, value in metrics.items()
        ]

    def to_dict(self) -> Dict[str, object]:
        return {"aggregation": self.aggregation.value, "values": self.values}
