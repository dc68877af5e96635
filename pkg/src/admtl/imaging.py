"""Volume container, NIfTI-1 I/O, intensity normalization, bias correction."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

FOREGROUND_FRACTION = 0.05  # mask threshold as a fraction of the volume max

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 16, np.dtype(np.float64): 64}


class VolumeIOError(IOError):
    """Malformed or unreadable volume file."""


class UnsupportedShapeError(VolumeIOError):
    """The file does not hold a single-channel 3D volume."""


class ImagingConfigError(ValueError):
    """Invalid preprocessing parameter."""


@dataclass
class Volume:
    voxels: np.ndarray  # shape (X, Y, Z)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    subject_id: str | None = None

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise UnsupportedShapeError(
                f"expected a 3D grid, got shape {self.voxels.shape}"
            )
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxel values")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin_offset = tuple(float(o) for o in self.origin_offset)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return replace(self, voxels=voxels)


def load_volume(path: Path | str) -> Volume:
    """Read a single-channel 3D NIfTI-1 volume. No intensity rescaling."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeIOError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE or raw[344:348] != NIFTI_MAGIC:
        raise VolumeIOError(f"{path}: not a single-file NIfTI-1 volume")
    dim = struct.unpack_from("<8h", raw, 40)
    (datatype,) = struct.unpack_from("<h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    qoffset = struct.unpack_from("<3f", raw, 268)

    ndim = dim[0]
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedShapeError(f"{path}: {ndim}D data is not supported")
    if ndim < 3:
        raise UnsupportedShapeError(f"{path}: expected 3 dimensions, got {ndim}")
    if datatype not in _DTYPES:
        raise VolumeIOError(f"{path}: unsupported datatype code {datatype}")

    shape = tuple(dim[1:4])
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=_DTYPES[datatype], count=count, offset=int(vox_offset))
    voxels = data.reshape(shape, order="F").astype(np.float64)
    return Volume(
        voxels=voxels,
        spacing=tuple(float(p) for p in pixdim[1:4]),
        origin_offset=tuple(float(q) for q in qoffset),
        subject_id=path.stem.split(".")[0],
    )


def save_volume(volume: Volume, path: Path | str, dtype=np.float32) -> None:
    """Write a NIfTI-1 single-file volume."""
    code = _DTYPE_CODES.get(np.dtype(dtype))
    if code is None:
        raise VolumeIOError(f"unsupported output dtype {dtype}")
    header = bytearray(NIFTI_HEADER_SIZE + 4)  # header + 4 bytes extension flag
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *volume.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *volume.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(NIFTI_HEADER_SIZE + 4))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<h", header, 252, 1)  # qform_code
    struct.pack_into("<3f", header, 268, *volume.origin_offset)
    header[344:348] = NIFTI_MAGIC
    data = np.asarray(volume.voxels, dtype=dtype).tobytes(order="F")
    Path(path).write_bytes(bytes(header) + data)


def normalize_intensity(volume: Volume) -> Volume:
    """Per-scan min-max scaling to [0, 1]; constant input maps to zeros."""
    vmin = float(volume.voxels.min())
    vmax = float(volume.voxels.max())
    if vmax == vmin:
        warnings.warn(
            f"constant volume (value {vmin}); normalization is degenerate",
            RuntimeWarning,
            stacklevel=2,
        )
        return volume.with_voxels(np.zeros_like(volume.voxels))
    return volume.with_voxels((volume.voxels - vmin) / (vmax - vmin))


def foreground_mask(voxels: np.ndarray) -> np.ndarray:
    vmax = voxels.max()
    if vmax <= 0:
        return np.zeros(voxels.shape, dtype=bool)
    return voxels > FOREGROUND_FRACTION * vmax


def coefficient_of_variation(voxels: np.ndarray, mask: np.ndarray) -> float:
    values = voxels[mask]
    if values.size == 0 or values.mean() == 0:
        return 0.0
    return float(values.std() / values.mean())


def correct_bias_field(volume: Volume, smoothing_scale: float) -> Volume:
    """Suppress a smooth multiplicative intensity field.

    Positive foreground voxels are log-transformed; a mask-normalized
    Gaussian estimate of the low-frequency component at `smoothing_scale`
    (mm) is subtracted, the result exponentiated, and the output rescaled to
    preserve the foreground mean. Background voxels pass through unchanged.
    """
    if smoothing_scale <= 0:
        raise ImagingConfigError(f"smoothing_scale must be > 0, got {smoothing_scale}")
    if volume.voxels.min() < 0:
        raise ValueError("bias correction requires non-negative voxel values")

    mask = foreground_mask(volume.voxels)
    if not mask.any():
        return volume.with_voxels(volume.voxels.copy())

    sigma = [smoothing_scale / s for s in volume.spacing]
    log_v = np.zeros_like(volume.voxels)
    log_v[mask] = np.log(volume.voxels[mask])

    smooth_log = ndimage.gaussian_filter(log_v, sigma=sigma)
    smooth_mask = ndimage.gaussian_filter(mask.astype(np.float64), sigma=sigma)
    # Normalized convolution so the field estimate ignores background zeros.
    field = np.zeros_like(smooth_log)
    valid = smooth_mask > 1e-12
    field[valid] = smooth_log[valid] / smooth_mask[valid]

    corrected = volume.voxels.copy()
    corrected[mask] = np.exp(log_v[mask] - field[mask])
    corrected_mean = corrected[mask].mean()
    if corrected_mean > 0:
        corrected[mask] *= volume.voxels[mask].mean() / corrected_mean
    return volume.with_voxels(corrected)
