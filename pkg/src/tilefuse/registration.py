"""Affine transform algebra and coarse intensity-based affine registration.

Transforms map world-mm coordinates to world-mm coordinates as homogeneous
4x4 matrices. Registration optimizes normalized cross-correlation with a
derivative-free simplex over a 3-level resolution pyramid; it is a
functional stand-in for an external affine registration tool and is
deterministic for fixed inputs and config.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DegenerateInputError,
    OptimizationFailureError,
    SingularTransformError,
)
from ._interp import block_mean, sample_trilinear

if TYPE_CHECKING:
    from .volume import Volume

log = logging.getLogger(__name__)

_DET_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Invertible world-to-world affine; bottom row pinned to (0, 0, 0, 1)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine bottom row must be exactly (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) <= _DET_EPS:
            raise SingularTransformError(
                f"upper 3x3 determinant {np.linalg.det(m[:3, :3]):.3e} is too small"
            )
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def from_translation(cls, t) -> "AffineTransform":
        m = np.eye(4)
        m[:3, 3] = t
        return cls(m)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """Map points of shape (3, n) through the transform."""
        p = np.asarray(points, dtype=np.float64)
        return self.matrix[:3, :3] @ p + self.matrix[:3, 3:4]

    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3].copy()


def invert(t: AffineTransform) -> AffineTransform:
    """Exact inverse; composition with t is identity to ~1e-9."""
    r = t.matrix[:3, :3]
    if abs(np.linalg.det(r)) <= _DET_EPS:
        raise SingularTransformError("transform is near-singular")
    rinv = np.linalg.inv(r)
    m = np.eye(4)
    m[:3, :3] = rinv
    m[:3, 3] = -rinv @ t.matrix[:3, 3]
    return AffineTransform(m)


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Matrix product a @ b: applying the result equals applying b, then a."""
    m = a.matrix @ b.matrix
    m[3] = [0.0, 0.0, 0.0, 1.0]
    return AffineTransform(m)


def save_transform(t: AffineTransform, path) -> None:
    """Write the 16 matrix entries row-major as plain text, one per token."""
    with open(path, "w") as fh:
        for row in t.matrix:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_transform(path) -> AffineTransform:
    with open(path) as fh:
        values = [float(tok) for tok in fh.read().split()]
    if len(values) != 16:
        raise ValueError(f"{path}: expected 16 numbers, found {len(values)}")
    return AffineTransform(np.array(values, dtype=np.float64).reshape(4, 4))


@dataclass(frozen=True)
class RegistrationConfig:
    dof: int = 12          # 9 = translation+rotation+scale, 12 adds shear
    levels: int = 3        # pyramid factors 2**(levels-1) ... 1
    max_iters: int = 150   # simplex iterations per pyramid level

    def __post_init__(self):
        if self.dof not in (9, 12):
            raise ValueError("dof must be 9 or 12")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


# Internal parameters are dimensionless; one unit corresponds to:
_T_UNIT = 10.0   # mm of translation
_R_UNIT = 0.1    # rad of rotation
_S_UNIT = 0.1    # fractional scale / shear


def _rotation_xyz(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def params_to_transform(u: np.ndarray, base_translation: np.ndarray,
                        center: np.ndarray, dof: int) -> AffineTransform:
    """Build the moving-world -> fixed-world affine from scaled parameters.

    Rotation (Euler XYZ), scale and shear act about `center` (fixed-volume
    center in world mm); translation adds on top of `base_translation`.
    """
    t = base_translation + u[0:3] * _T_UNIT
    rot = _rotation_xyz(*(u[3:6] * _R_UNIT))
    scale = np.diag(1.0 + u[6:9] * _S_UNIT)
    a = rot @ scale
    if dof == 12:
        hxy, hxz, hyz = u[9:12] * _S_UNIT
        shear = np.array([[1, hxy, hxz], [0, 1, hyz], [0, 0, 1]], dtype=np.float64)
        a = a @ shear
    m = np.eye(4)
    m[:3, :3] = a
    m[:3, 3] = t + center - a @ center
    return AffineTransform(m)


def _center_of_mass_world(vol: "Volume") -> np.ndarray:
    w = vol.data.astype(np.float64) - float(vol.data.min())
    total = w.sum()
    if total <= 0:
        raise DegenerateInputError("volume has no intensity variation")
    com = np.empty(3)
    for ax in range(3):
        other = tuple(i for i in range(3) if i != ax)
        profile = w.sum(axis=other)
        com[ax] = np.dot(profile, np.arange(vol.dims[ax])) / total
    return vol.voxel_to_world.apply_points(com.reshape(3, 1))[:, 0]


def _volume_center_world(vol: "Volume") -> np.ndarray:
    c = (np.array(vol.dims, dtype=np.float64) - 1.0) / 2.0
    return vol.voxel_to_world.apply_points(c.reshape(3, 1))[:, 0]


# objective evaluations subsample the fixed grid beyond this many voxels
# per axis; the final similarity is always full resolution
_EVAL_MAX_PER_AXIS = 48


class _Level:
    """One pyramid level: downsampled arrays plus index/world geometry."""

    def __init__(self, vol: "Volume", factor: int):
        self.data = block_mean(vol.data, factor)
        # block centers sit at original index factor*i + (factor-1)/2
        scale = np.diag([factor, factor, factor, 1.0]).astype(np.float64)
        scale[:3, 3] = (factor - 1) / 2.0
        self.voxel_to_world = AffineTransform(vol.voxel_to_world.matrix @ scale)
        self.world_to_voxel = invert(self.voxel_to_world)

    def eval_grid(self, max_per_axis: int | None = None):
        """(values, world coords) of the fixed samples driving the objective."""
        shape = self.data.shape
        strides = [1, 1, 1]
        if max_per_axis is not None:
            strides = [-(-s // max_per_axis) for s in shape]
        axes = [np.arange(0, shape[i], strides[i]) for i in range(3)]
        ix, iy, iz = np.meshgrid(*axes, indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()]).astype(np.float64)
        values = self.data[ix, iy, iz].ravel()
        return values, self.voxel_to_world.apply_points(idx)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b)) / denom


def ncc_similarity(moving: "Volume", fixed: "Volume",
                   transform: AffineTransform) -> float:
    """NCC between fixed and moving pulled onto the fixed grid via transform."""
    mov = _Level(moving, 1)
    values, world = _Level(fixed, 1).eval_grid()
    return _ncc_at(mov, values, world, transform)


def _ncc_at(mov: _Level, fixed_flat: np.ndarray, fixed_world: np.ndarray,
            transform: AffineTransform) -> float:
    pull = compose(mov.world_to_voxel, invert(transform))
    coords = pull.apply_points(fixed_world)
    values, valid = sample_trilinear(mov.data, coords)
    if valid.mean() < 0.1:
        return -1.0
    return _ncc(values[valid], fixed_flat[valid])


def estimate_affine(moving: "Volume", fixed: "Volume",
                    config: RegistrationConfig = RegistrationConfig(),
                    ) -> tuple[AffineTransform, float]:
    """Estimate the moving-world -> fixed-world affine maximizing NCC.

    Pipeline: center-of-mass translation init, then Nelder-Mead over the
    scaled parameters at each pyramid level (coarse to fine). Returns the
    transform and the final full-resolution NCC in [-1, 1].
    """
    for name, vol in (("moving", moving), ("fixed", fixed)):
        if float(vol.data.std()) == 0.0:
            raise DegenerateInputError(f"{name} volume has zero intensity variance")

    t0 = _center_of_mass_world(fixed) - _center_of_mass_world(moving)
    center = _volume_center_world(fixed)
    n_params = 9 if config.dof == 9 else 12
    u = np.zeros(n_params)

    factors = [2 ** i for i in range(config.levels - 1, 0, -1)] + [1]
    for li, factor in enumerate(factors):
        mov = _Level(moving, factor)
        fix = _Level(fixed, factor)
        fixed_flat, fixed_world = fix.eval_grid(_EVAL_MAX_PER_AXIS)

        def objective(params: np.ndarray) -> float:
            t = params_to_transform(params, t0, center, config.dof)
            return -_ncc_at(mov, fixed_flat, fixed_world, t)

        # a fresh-simplex restart at the finest level recovers from
        # collapsed simplexes; everything stays deterministic
        restarts = 2 if factor == 1 else 1
        for attempt in range(restarts):
            step = 0.5 / (2 ** (li + attempt))
            simplex = np.tile(u, (n_params + 1, 1))
            for i in range(n_params):
                simplex[i + 1, i] += step
            res = minimize(
                objective, u, method="Nelder-Mead",
                options={
                    "maxiter": config.max_iters,
                    "xatol": 1e-4,
                    "fatol": np.inf,
                    "initial_simplex": simplex,
                },
            )
            if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
                raise OptimizationFailureError(
                    f"objective became non-finite at pyramid factor {factor}"
                )
            u = res.x
            log.debug("pyramid factor %d (pass %d): ncc=%.4f after %d iters",
                      factor, attempt, -res.fun, res.nit)

    transform = params_to_transform(u, t0, center, config.dof)
    similarity = ncc_similarity(moving, fixed, transform)
    if not np.isfinite(similarity):
        raise OptimizationFailureError("final similarity is non-finite")
    return transform, similarity
