"""Volumetric grids, world/voxel coordinate mapping, plane resampling and file I/O.

Arrays are indexed ``[i, j, k]`` along ``(x, y, z)``.  On disk the payload is
written x-fastest, which is Fortran order for these arrays.  World positions
refer to voxel *centers*: voxel ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

AIR_HU = -1000

_MET_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_UCHAR": np.dtype("u1"),
}
_MET_NAMES = {np.dtype("int16"): "MET_SHORT", np.dtype("uint16"): "MET_USHORT", np.dtype("uint8"): "MET_UCHAR"}


class VolumeFormatError(ValueError):
    """Malformed or unsupported image file."""


def _triple(values, name, positive=False):
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    if not all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite: {out}")
    if positive and not all(v > 0 for v in out):
        raise ValueError(f"{name} must be strictly positive: {out}")
    return out


@dataclass(frozen=True)
class Geometry:
    """Lattice description shared by volumes and masks."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def world_to_voxel(self, p) -> np.ndarray:
        """Continuous voxel coordinate of world point(s) ``p`` (``(..., 3)`` mm)."""
        return (np.asarray(p, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, ijk) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(ijk, dtype=float) * np.asarray(self.spacing)

    def contains_index(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.asarray(self.dims)), axis=-1)

    def nearest_index(self, p) -> np.ndarray:
        """Integer index of the voxel whose cell contains world point(s) ``p``."""
        return np.floor(self.world_to_voxel(p) + 0.5).astype(np.int64)

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]


def world_to_voxel(geometry: Geometry, p) -> np.ndarray:
    return geometry.world_to_voxel(p)


def voxel_to_world(geometry: Geometry, ijk) -> np.ndarray:
    return geometry.voxel_to_world(ijk)


class _Grid:
    values: np.ndarray
    geometry: Geometry

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    def world_to_voxel(self, p):
        return self.geometry.world_to_voxel(p)

    def voxel_to_world(self, ijk):
        return self.geometry.voxel_to_world(ijk)


class Volume(_Grid):
    """Scalar grid of 16-bit samples (HU for CT data, uint16 for label maps)."""

    def __init__(self, values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        values = np.asarray(values)
        if values.ndim != 3:
            raise ValueError(f"volume values must be 3D, got shape {values.shape}")
        if values.dtype not in (np.dtype("int16"), np.dtype("uint16")):
            if np.issubdtype(values.dtype, np.integer) or np.issubdtype(values.dtype, np.floating):
                values = np.clip(np.rint(values), -32768, 32767).astype(np.int16)
            else:
                raise ValueError(f"unsupported volume dtype {values.dtype}")
        values = values.copy()
        values.flags.writeable = False
        self.values = values
        self.geometry = Geometry(values.shape, spacing, origin)

    def __repr__(self):
        g = self.geometry
        return f"Volume(dims={g.dims}, spacing={g.spacing}, origin={g.origin}, dtype={self.values.dtype})"

    def with_values(self, values) -> "Volume":
        return Volume(values, self.spacing, self.origin)


class Mask(_Grid):
    """Binary grid; geometry matches the volume it was derived from."""

    def __init__(self, values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        values = np.asarray(values)
        if values.ndim != 3:
            raise ValueError(f"mask values must be 3D, got shape {values.shape}")
        values = values.astype(bool, copy=True)
        values.flags.writeable = False
        self.values = values
        self.geometry = Geometry(values.shape, spacing, origin)

    @classmethod
    def like(cls, grid: _Grid, values) -> "Mask":
        return cls(values, grid.spacing, grid.origin)

    def __repr__(self):
        g = self.geometry
        return f"Mask(dims={g.dims}, spacing={g.spacing}, origin={g.origin}, n={int(self.values.sum())})"

    def count(self) -> int:
        return int(self.values.sum())


def require_same_geometry(a: _Grid, b: _Grid) -> None:
    if a.geometry != b.geometry:
        raise ValueError(f"geometry mismatch: {a.geometry} vs {b.geometry}")


# --------------------------------------------------------------------------
# File I/O


def save_volume(grid: Volume | Mask, path) -> None:
    """Write ``grid`` as MetaImage (``.mha``/``.mhd``) or raw+JSON (``.json``)."""
    path = Path(path)
    if isinstance(grid, Mask):
        data = grid.values.astype(np.uint8)
    else:
        data = grid.values
    dtype = data.dtype
    met = _MET_NAMES[np.dtype(dtype.name)]
    payload = np.ascontiguousarray(data.ravel(order="F"), dtype=_MET_TYPES[met]).tobytes()
    g = grid.geometry
    suffix = path.suffix.lower()
    if suffix == ".json":
        raw_path = path.with_suffix(".raw")
        header = {
            "format_version": 1,
            "dims": list(g.dims),
            "spacing": list(g.spacing),
            "origin": list(g.origin),
            "element_type": met,
            "kind": "mask" if isinstance(grid, Mask) else "volume",
            "byte_order": "little",
            "data_file": raw_path.name,
        }
        raw_path.write_bytes(payload)
        path.write_text(json.dumps(header, indent=2) + "\n")
        return
    if suffix not in (".mha", ".mhd"):
        raise VolumeFormatError(f"unsupported extension {path.suffix!r} (use .mha, .mhd or .json)")
    data_file = "LOCAL" if suffix == ".mha" else path.with_suffix(".raw").name
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = " + " ".join(repr(v) for v in g.origin),
        "CenterOfRotation = 0 0 0",
        "ElementSpacing = " + " ".join(repr(v) for v in g.spacing),
        "DimSize = " + " ".join(str(d) for d in g.dims),
        f"ElementType = {met}",
        f"ElementDataFile = {data_file}",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    if data_file == "LOCAL":
        path.write_bytes(header + payload)
    else:
        path.with_suffix(".raw").write_bytes(payload)
        path.write_bytes(header)


def _parse_meta_header(blob: bytes):
    fields = {}
    offset = 0
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise VolumeFormatError("MetaImage header has no ElementDataFile entry")
        line = blob[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"bad header line: {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            return fields, offset


def _build(values_flat, dims, spacing, origin, met, kind):
    expected = dims[0] * dims[1] * dims[2]
    if values_flat.size != expected:
        raise VolumeFormatError(
            f"payload holds {values_flat.size} samples but header declares {dims} ({expected})"
        )
    arr = values_flat.reshape(dims, order="F")
    if kind == "mask" or (kind is None and met == "MET_UCHAR"):
        return Mask(arr != 0, spacing, origin)
    return Volume(arr.astype(arr.dtype.newbyteorder("=")), spacing, origin)


def load_volume(path) -> Volume | Mask:
    """Read a volume or mask written by :func:`save_volume` (or any plain MetaImage)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".json":
        header = json.loads(path.read_text())
        met = header.get("element_type")
        if met not in _MET_TYPES:
            raise VolumeFormatError(f"unsupported element type {met!r}")
        dtype = _MET_TYPES[met]
        if header.get("byte_order", "little") == "big":
            dtype = dtype.newbyteorder(">")
        raw = (path.parent / header["data_file"]).read_bytes()
        if len(raw) % dtype.itemsize:
            raise VolumeFormatError("payload length is not a whole number of samples")
        flat = np.frombuffer(raw, dtype=dtype)
        return _build(flat, tuple(header["dims"]), header["spacing"], header["origin"], met, header.get("kind"))

    blob = path.read_bytes()
    fields, offset = _parse_meta_header(blob)
    try:
        ndims = int(fields.get("NDims", "3"))
        dims = tuple(int(v) for v in fields["DimSize"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"bad MetaImage header: {exc}") from exc
    if ndims != 3 or len(dims) != 3:
        raise VolumeFormatError(f"only 3D images are supported (NDims={ndims})")
    if fields.get("CompressedData", "False").lower() == "true":
        raise VolumeFormatError("compressed MetaImage payloads are not supported")
    met = fields.get("ElementType")
    if met not in _MET_TYPES:
        raise VolumeFormatError(f"unsupported element type {met!r}")
    spacing = [float(v) for v in fields.get("ElementSpacing", fields.get("ElementSize", "1 1 1")).split()]
    origin = [float(v) for v in fields.get("Offset", fields.get("Origin", "0 0 0")).split()]
    dtype = _MET_TYPES[met]
    msb = fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    if msb.lower() == "true":
        dtype = dtype.newbyteorder(">")
    data_file = fields["ElementDataFile"]
    raw = blob[offset:] if data_file == "LOCAL" else (path.parent / data_file).read_bytes()
    if len(raw) % dtype.itemsize:
        raise VolumeFormatError("payload length is not a whole number of samples")
    flat = np.frombuffer(raw, dtype=dtype)
    return _build(flat, dims, spacing, origin, met, None)


# --------------------------------------------------------------------------
# Plane resampling


def orthonormal_basis(normal, hint=None):
    """Two unit vectors spanning the plane orthogonal to ``normal``.

    ``hint`` (if given and not parallel to the normal) fixes the first axis
    after projection; otherwise the coordinate axis least aligned with the
    normal is used.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if hint is not None:
        u = np.asarray(hint, dtype=float) - np.dot(hint, n) * n
        if np.linalg.norm(u) < 1e-9:
            hint = None
    if hint is None:
        e = np.zeros(3)
        e[int(np.argmin(np.abs(n)))] = 1.0
        u = e - np.dot(e, n) * n
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class PlaneFrame:
    """A square resampled cut through a volume.

    Pixel ``(a, b)`` of ``samples`` sits at
    ``center + (a*pitch - half_width)*axis_u + (b*pitch - half_width)*axis_v``.
    """

    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_width: float
    pixel_pitch: float
    samples: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        n = self.samples.shape[0]
        return np.arange(n) * self.pixel_pitch - self.half_width

    def pixel_to_world(self, ab) -> np.ndarray:
        ab = np.asarray(ab, dtype=float)
        a = ab[..., 0:1] * self.pixel_pitch - self.half_width
        b = ab[..., 1:2] * self.pixel_pitch - self.half_width
        return self.center + a * self.axis_u + b * self.axis_v


def plane_points(center, axis_u, axis_v, half_width, pixel_pitch):
    n = int(round(2.0 * half_width / pixel_pitch)) + 1
    offs = np.arange(n) * pixel_pitch - half_width
    a, b = np.meshgrid(offs, offs, indexing="ij")
    return (np.asarray(center, float)[None, None, :]
            + a[..., None] * np.asarray(axis_u)[None, None, :]
            + b[..., None] * np.asarray(axis_v)[None, None, :])


def sample_world(volume: Volume, points, fill=AIR_HU) -> np.ndarray:
    """Trilinear samples of ``volume`` at world points ``(..., 3)``; ``fill`` outside."""
    pts = np.asarray(points, dtype=float)
    ijk = volume.world_to_voxel(pts.reshape(-1, 3)).T
    out = ndimage.map_coordinates(volume.values.astype(np.float32), ijk, order=1,
                                  mode="constant", cval=float(fill))
    return out.reshape(pts.shape[:-1])


def resample_plane(volume: Volume, center, normal, half_width: float, pixel_pitch: float,
                   axis_u=None) -> PlaneFrame:
    """Trilinearly resample a square plane of ``volume`` orthogonal to ``normal``.

    Positions outside the volume read as air (-1000 HU).
    """
    normal = np.asarray(normal, dtype=float)
    length = float(np.linalg.norm(normal))
    if not np.isfinite(length) or length < 1e-9:
        raise ValueError("degenerate plane normal")
    if half_width <= 0 or pixel_pitch <= 0:
        raise ValueError("half_width and pixel_pitch must be positive")
    normal = normal / length
    u, v = orthonormal_basis(normal, axis_u)
    center = np.asarray(center, dtype=float)
    pts = plane_points(center, u, v, half_width, pixel_pitch)
    samples = sample_world(volume, pts)
    return PlaneFrame(center, normal, u, v, float(half_width), float(pixel_pitch), samples)


def ball_offsets(spacing, radius_mm: float) -> np.ndarray:
    """Boolean structuring element: voxel offsets whose world length is <= ``radius_mm``."""
    sp = np.asarray(spacing, dtype=float)
    half = np.floor(radius_mm / sp + 1e-9).astype(int)
    axes = [np.arange(-h, h + 1) * s for h, s in zip(half, sp)]
    dx, dy, dz = np.meshgrid(*axes, indexing="ij")
    return dx * dx + dy * dy + dz * dz <= radius_mm * radius_mm + 1e-9


def write_json(path, obj) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
    os.replace(tmp, path)
