"""Rigid registration by normalized cross-correlation, coarse to fine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage, optimize

from .imaging import Volume


class RegistrationFailure(RuntimeError):
    """No usable alignment found at the coarsest pyramid level."""


@dataclass
class RigidTransform:
    rotation: Tuple[float, float, float]  # Euler angles x, y, z (radians)
    translation: Tuple[float, float, float]  # mm

    def matrix(self) -> np.ndarray:
        ax, ay, az = self.rotation
        rx = np.array(
            [[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]]
        )
        ry = np.array(
            [[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]]
        )
        rz = np.array(
            [[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]]
        )
        return rz @ ry @ rx

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0))

    def to_params(self) -> np.ndarray:
        return np.array(self.rotation + self.translation, dtype=np.float64)

    @classmethod
    def from_params(cls, params: Sequence[float]) -> "RigidTransform":
        p = [float(v) for v in params]
        return cls(rotation=tuple(p[:3]), translation=tuple(p[3:6]))


@dataclass
class RegistrationConfig:
    pyramid_factors: Tuple[int, ...] = (4, 2, 1)
    max_iterations: int = 200
    angle_step: float = 0.05  # radians, initial Powell direction scale
    translation_step_voxels: float = 1.0


@dataclass
class RegistrationResult:
    resampled: Volume
    transform: RigidTransform
    ncc: float
    converged: bool


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Global normalized cross-correlation of two equal-shape grids."""
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.dot(a, b) / denom)


def resample_rigid(moving: Volume, transform: RigidTransform, out_shape=None) -> np.ndarray:
    """Sample `moving` through the rigid transform about the grid center.

    A fixed-space point p (mm, center-relative) is read from the moving
    volume at R @ p + t. Trilinear interpolation, zero outside the grid.
    """
    shape = out_shape if out_shape is not None else moving.shape
    spacing = np.array(moving.spacing)
    center = (np.array(shape) - 1) / 2.0
    rot = transform.matrix()
    t = np.array(transform.translation)
    # voxel-space affine: m = S^-1 R S (o - c) + S^-1 t + c
    matrix = np.diag(1.0 / spacing) @ rot @ np.diag(spacing)
    offset = -matrix @ center + t / spacing + center
    return ndimage.affine_transform(
        moving.voxels, matrix, offset=offset, output_shape=shape, order=1, mode="constant", cval=0.0
    )


def _downsample(voxels: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return voxels
    shape = voxels.shape
    trimmed = voxels[
        : shape[0] - shape[0] % factor,
        : shape[1] - shape[1] % factor,
        : shape[2] - shape[2] % factor,
    ]
    x, y, z = (s // factor for s in trimmed.shape)
    return trimmed.reshape(x, factor, y, factor, z, factor).mean(axis=(1, 3, 5))


def register_rigid(
    moving: Volume, fixed: Volume, config: RegistrationConfig | None = None
) -> RegistrationResult:
    """Optimize 6 rigid parameters maximizing NCC, coarse to fine."""
    config = config or RegistrationConfig()
    if moving.shape != fixed.shape or moving.spacing != fixed.spacing:
        resampled = ndimage.zoom(
            moving.voxels,
            [ms / fs * fsh / msh for ms, fs, fsh, msh in zip(
                moving.spacing, fixed.spacing, fixed.shape, moving.shape)],
            order=1,
        )
        # crude grid harmonization; exact shapes enforced below
        resampled = resampled[: fixed.shape[0], : fixed.shape[1], : fixed.shape[2]]
        pad = [(0, f - s) for f, s in zip(fixed.shape, resampled.shape)]
        resampled = np.pad(resampled, pad)
        moving = Volume(resampled, spacing=fixed.spacing, subject_id=moving.subject_id)

    params = RigidTransform.identity().to_params()
    converged = True
    for level_idx, factor in enumerate(config.pyramid_factors):
        mov_level = Volume(
            _downsample(moving.voxels, factor),
            spacing=tuple(s * factor for s in moving.spacing),
        )
        fix_level = _downsample(fixed.voxels, factor)

        fov = np.array(mov_level.shape) * np.array(mov_level.spacing)

        def objective(p, mov=mov_level, fix=fix_level, fov=fov):
            # scans share a scanner FOV: keep the search near rough alignment
            angles = np.abs(p[:3])
            shifts = np.abs(p[3:])
            penalty = 10.0 * np.sum(np.maximum(angles - np.pi / 2, 0.0) ** 2)
            penalty += 0.01 * np.sum(np.maximum(shifts - 0.5 * fov, 0.0) ** 2)
            resampled = resample_rigid(mov, RigidTransform.from_params(p))
            if resampled.max() == resampled.min():
                return 1.0 + penalty  # no overlap: worse than any alignment
            return -ncc(resampled, fix) + penalty

        steps = np.concatenate(
            [
                np.full(3, config.angle_step),
                config.translation_step_voxels * np.array(mov_level.spacing),
            ]
        )
        result = optimize.minimize(
            objective,
            params,
            method="Powell",
            options={
                "direc": np.diag(steps),
                "maxiter": config.max_iterations,
                "xtol": 1e-3,
                "ftol": 1e-6,
            },
        )
        if level_idx == 0:
            best = RigidTransform.from_params(result.x)
            coarse_ncc = ncc(resample_rigid(mov_level, best), fix_level)
            if coarse_ncc < 0:
                raise RegistrationFailure(
                    f"no usable alignment at coarsest level (NCC {coarse_ncc:.3f} < 0)"
                )
        if not result.success:
            converged = False
        params = result.x

    transform = RigidTransform.from_params(params)
    aligned = resample_rigid(moving, transform, out_shape=fixed.shape)
    return RegistrationResult(
        resampled=Volume(aligned, spacing=fixed.spacing, subject_id=moving.subject_id),
        transform=transform,
        ncc=ncc(aligned, fixed.voxels),
        converged=converged,
    )
