"""Dense 3D voxel grids for CT-like volumes and small-integer label masks.

Conventions used throughout the package:

* arrays are indexed ``data[x, y, z]``; ``dims`` is ``(nx, ny, nz)``
* ``spacing`` is millimetres per voxel along each axis
* volumes are float32 in Hounsfield-like units, masks are uint8 labels
* the sagittal mid-plane sits at ``x = nx // 2``; mid-plane voxels
  belong to the *right* part when splitting paired structures
* on disk a grid is a raw little-endian payload (x varying fastest)
  next to a JSON sidecar describing dims/spacing/dtype
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyRegionError, ShapeError


class InvalidWindowError(ValueError):
    """HU clip window with lo >= hi."""


class ModeError(ValueError):
    """Resampling mode not valid for the grid type."""


_SIDECAR_ORDER = "x-fastest"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_grid(data: np.ndarray, spacing) -> tuple:
    if data.ndim != 3:
        raise ShapeError(f"grid: expected 3-d array, got shape {data.shape}")
    if min(data.shape) < 1:
        raise ShapeError(f"grid: every dim must be >= 1, got {data.shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"grid: spacing must be 3 positive floats, got {spacing}")
    return spacing


@dataclass
class Volume3D:
    """Scalar intensity grid (float32)."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = _check_grid(self.data, self.spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape


@dataclass
class Mask3D:
    """Label grid (uint8); 0 is background."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.spacing = _check_grid(self.data, self.spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape


@dataclass
class Component:
    """One connected component of a mask label.

    ``voxels`` is an (n, 3) int array in lexicographic (x, y, z) order,
    so ``voxels[0]`` is the smallest voxel of the component. ``centroid``
    is the voxel-space mean (multiply by spacing for mm).
    """

    label: int
    voxels: np.ndarray
    centroid: np.ndarray
    voxel_count: int


# ---------------------------------------------------------------------------
# intensity ops


def clip_hu(volume: Volume3D, lo: float = -218.0, hi: float = 600.0) -> Volume3D:
    """Clamp intensities to the window [lo, hi]."""
    if not lo < hi:
        raise InvalidWindowError(f"clip_hu: lo must be < hi, got [{lo}, {hi}]")
    return Volume3D(np.clip(volume.data, lo, hi), volume.spacing)


# ---------------------------------------------------------------------------
# cropping and resampling


def crop_patch(volume: Volume3D, center, size, pad_value: float) -> Volume3D:
    """Crop a ``size`` window whose start is ``center - size // 2`` per axis.

    Out-of-bounds voxels are filled with ``pad_value``; spacing is kept.
    """
    out = _crop_array(volume.data, center, size, pad_value, np.float32)
    return Volume3D(out, volume.spacing)


def crop_mask_patch(mask: Mask3D, center, size, pad_value: int = 0) -> Mask3D:
    out = _crop_array(mask.data, center, size, pad_value, np.uint8)
    return Mask3D(out, mask.spacing)


def _crop_array(data, center, size, pad_value, dtype):
    center = tuple(int(c) for c in center)
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ShapeError(f"crop: size must be positive, got {size}")
    start = [c - s // 2 for c, s in zip(center, size)]
    out = np.full(size, pad_value, dtype=dtype)
    src, dst = [], []
    for ax in range(3):
        lo = max(start[ax], 0)
        hi = min(start[ax] + size[ax], data.shape[ax])
        if lo >= hi:
            return out  # window entirely outside
        src.append(slice(lo, hi))
        dst.append(slice(lo - start[ax], hi - start[ax]))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    # half-pixel centre alignment; identity when n_src == n_dst
    ratio = n_src / n_dst
    return (np.arange(n_dst, dtype=np.float64) + 0.5) * ratio - 0.5


def resize(grid, target_dims, mode: str):
    """Resample to ``target_dims``; spacing rescales so extent is kept.

    ``mode`` is "trilinear" (volumes only) or "nearest". Trilinear output
    is computed in float64 lerp form, so constants are preserved exactly
    and values never leave the input range.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if any(d < 1 for d in target_dims):
        raise ShapeError(f"resize: target dims must be >= 1, got {target_dims}")
    if mode not in ("trilinear", "nearest"):
        raise ModeError(f"resize: unknown mode {mode!r}")
    if isinstance(grid, Mask3D) and mode != "nearest":
        raise ModeError("resize: masks support only nearest mode")

    data = grid.data
    new_spacing = tuple(
        s * (n_src / n_dst)
        for s, n_src, n_dst in zip(grid.spacing, data.shape, target_dims)
    )
    coords = [_axis_coords(data.shape[ax], target_dims[ax]) for ax in range(3)]

    if mode == "nearest":
        idx = [
            np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1)
            for c, n in zip(coords, data.shape)
        ]
        out = data[np.ix_(*idx)]
        if isinstance(grid, Mask3D):
            return Mask3D(out, new_spacing)
        return Volume3D(out, new_spacing)

    out = _trilinear_grid(data.astype(np.float64), coords)
    return Volume3D(out.astype(np.float32), new_spacing)


def _trilinear_grid(data: np.ndarray, coords) -> np.ndarray:
    """Separable trilinear sample at the outer product of per-axis coords."""
    i0, fr = [], []
    for c, n in zip(coords, data.shape):
        c = np.clip(c, 0.0, n - 1.0)
        lo = np.floor(c).astype(np.intp)
        lo = np.minimum(lo, n - 2) if n > 1 else np.zeros_like(lo)
        i0.append(lo)
        fr.append(c - lo)
    i1 = [np.minimum(lo + 1, n - 1) for lo, n in zip(i0, data.shape)]

    def corner(ax_idx):
        sel = [i1[ax] if ax_idx[ax] else i0[ax] for ax in range(3)]
        return data[np.ix_(*sel)]

    fx = fr[0][:, None, None]
    fy = fr[1][None, :, None]
    fz = fr[2][None, None, :]
    # lerp chain keeps constants exact and output within [min, max]
    c00 = corner((0, 0, 0)) + fz * (corner((0, 0, 1)) - corner((0, 0, 0)))
    c01 = corner((0, 1, 0)) + fz * (corner((0, 1, 1)) - corner((0, 1, 0)))
    c10 = corner((1, 0, 0)) + fz * (corner((1, 0, 1)) - corner((1, 0, 0)))
    c11 = corner((1, 1, 0)) + fz * (corner((1, 1, 1)) - corner((1, 1, 0)))
    c0 = c00 + fy * (c01 - c00)
    c1 = c10 + fy * (c11 - c10)
    return c0 + fx * (c1 - c0)


def trilinear_sample(data: np.ndarray, coords: np.ndarray, pad_value: float) -> np.ndarray:
    """Sample ``data`` at arbitrary float coords (3, n); OOB -> pad_value."""
    if coords.ndim != 2 or coords.shape[0] != 3:
        raise ShapeError(f"trilinear_sample: coords must be (3, n), got {coords.shape}")
    nx, ny, nz = data.shape
    inside = np.ones(coords.shape[1], dtype=bool)
    for ax, n in enumerate((nx, ny, nz)):
        inside &= (coords[ax] >= 0.0) & (coords[ax] <= n - 1.0)
    cl = [np.clip(coords[ax], 0.0, data.shape[ax] - 1.0) for ax in range(3)]
    i0 = []
    fr = []
    for c, n in zip(cl, data.shape):
        lo = np.floor(c).astype(np.intp)
        lo = np.minimum(lo, n - 2) if n > 1 else np.zeros_like(lo)
        i0.append(lo)
        fr.append(c - lo)
    i1 = [np.minimum(lo + 1, n - 1) for lo, n in zip(i0, data.shape)]

    def corner(bx, by, bz):
        return data[
            i1[0] if bx else i0[0],
            i1[1] if by else i0[1],
            i1[2] if bz else i0[2],
        ]

    fx, fy, fz = fr
    c00 = corner(0, 0, 0) + fz * (corner(0, 0, 1) - corner(0, 0, 0))
    c01 = corner(0, 1, 0) + fz * (corner(0, 1, 1) - corner(0, 1, 0))
    c10 = corner(1, 0, 0) + fz * (corner(1, 0, 1) - corner(1, 0, 0))
    c11 = corner(1, 1, 0) + fz * (corner(1, 1, 1) - corner(1, 1, 0))
    c0 = c00 + fy * (c01 - c00)
    c1 = c10 + fy * (c11 - c10)
    out = c0 + fx * (c1 - c0)
    return np.where(inside, out, pad_value)


def affine_resample(
    data: np.ndarray, matrix: np.ndarray, out_dims, pad_value: float, shift=None
) -> np.ndarray:
    """Warp ``data`` with the voxel-space map src = M @ (dst - c) + c + shift.

    ``c`` is the grid centre of each array; used for train-time patch
    augmentation. Out-of-bounds samples take ``pad_value``.
    """
    out_dims = tuple(int(d) for d in out_dims)
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in out_dims], indexing="ij")
    dst = np.stack([g.ravel() for g in grids])
    c_dst = (np.array(out_dims, dtype=np.float64) - 1.0) / 2.0
    c_src = (np.array(data.shape, dtype=np.float64) - 1.0) / 2.0
    src = np.asarray(matrix, dtype=np.float64) @ (dst - c_dst[:, None]) + c_src[:, None]
    if shift is not None:
        src += np.asarray(shift, dtype=np.float64)[:, None]
    vals = trilinear_sample(np.asarray(data, dtype=np.float64), src, pad_value)
    return vals.reshape(out_dims)


# ---------------------------------------------------------------------------
# connected components


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: np.ones((3, 3, 3), dtype=bool),
}


def connected_components(mask: Mask3D, label: int, connectivity: int = 26) -> list:
    """Connected components of ``mask == label``.

    Returns components sorted by descending voxel count, ties broken by
    the lexicographically smallest voxel. Component labels are 1-based
    in that order.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connected_components: connectivity must be 6 or 26, got {connectivity}")
    binary = mask.data == label
    labelled, n = ndimage.label(binary, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    vox = np.argwhere(labelled > 0)  # lexicographic (x, y, z) order
    ids = labelled[tuple(vox.T)]
    order = np.argsort(ids, kind="stable")
    vox = vox[order]
    ids = ids[order]
    bounds = np.searchsorted(ids, np.arange(1, n + 2))
    comps = []
    for i in range(n):
        v = vox[bounds[i] : bounds[i + 1]]
        comps.append((v.shape[0], tuple(v[0]), v))
    comps.sort(key=lambda t: (-t[0], t[1]))
    return [
        Component(
            label=i + 1,
            voxels=v,
            centroid=v.mean(axis=0),
            voxel_count=count,
        )
        for i, (count, _, v) in enumerate(comps)
    ]


# ---------------------------------------------------------------------------
# left/right splitting of paired structures


def split_label_map(paired_labels, n_classes: int = 7) -> dict:
    """Deterministic relabeling for splitting paired structures.

    Input labels 1..n_classes are visited in ascending order; a paired
    label claims two output slots (left first), an unpaired label one.
    With 7 classes and 5 paired labels this yields the 12-slot scheme.
    """
    paired = set(int(p) for p in paired_labels)
    bad = [p for p in paired if not 1 <= p <= n_classes]
    if bad:
        raise ValueError(f"split_label_map: paired labels {bad} outside 1..{n_classes}")
    mapping = {}
    nxt = 1
    for lab in range(1, n_classes + 1):
        if lab in paired:
            mapping[lab] = (nxt, nxt + 1)
            nxt += 2
        else:
            mapping[lab] = (nxt,)
            nxt += 1
    return mapping


def split_left_right(stations: Mask3D, paired_labels, n_classes: int = 7) -> Mask3D:
    """Split paired station labels at the sagittal mid-plane.

    Voxels with ``x < nx // 2`` go to the left slot; the mid-plane
    column and everything beyond go to the right slot.
    """
    mapping = split_label_map(paired_labels, n_classes=n_classes)
    data = stations.data
    out = np.zeros_like(data)
    mid = data.shape[0] // 2
    left = np.zeros(data.shape, dtype=bool)
    left[:mid] = True
    for lab, slots in mapping.items():
        sel = data == lab
        if len(slots) == 1:
            out[sel] = slots[0]
        else:
            out[sel & left] = slots[0]
            out[sel & ~left] = slots[1]
    return Mask3D(out, stations.spacing)


# ---------------------------------------------------------------------------
# measurements


def mask_centroid(mask: Mask3D, label: int) -> np.ndarray:
    """Centroid of ``mask == label`` in mm (voxel mean times spacing)."""
    vox = np.argwhere(mask.data == label)
    if vox.shape[0] == 0:
        raise EmptyRegionError(f"mask_centroid: label {label} has no voxels")
    return vox.mean(axis=0) * np.asarray(mask.spacing)


def short_axis_mm(component: Component, spacing) -> float:
    """Shortest in-plane (x, y) extent of the tight bounding box, in mm."""
    if component.voxel_count == 0:
        raise EmptyRegionError("short_axis_mm: empty component")
    v = component.voxels
    ext_x = (int(v[:, 0].max()) - int(v[:, 0].min()) + 1) * float(spacing[0])
    ext_y = (int(v[:, 1].max()) - int(v[:, 1].min()) + 1) * float(spacing[1])
    return min(ext_x, ext_y)


# ---------------------------------------------------------------------------
# file IO: raw payload + JSON sidecar


def save_grid(grid, stem) -> None:
    """Write ``<stem>.raw`` (LE payload, x fastest) and ``<stem>.json``."""
    stem = Path(stem)
    if isinstance(grid, Volume3D):
        dtype_name = "f32"
    elif isinstance(grid, Mask3D):
        dtype_name = "u8"
    else:
        raise TypeError(f"save_grid: expected Volume3D or Mask3D, got {type(grid)!r}")
    payload = np.ascontiguousarray(grid.data.ravel(order="F")).astype(_DTYPES[dtype_name])
    stem.parent.mkdir(parents=True, exist_ok=True)
    (stem.with_suffix(".raw")).write_bytes(payload.tobytes())
    sidecar = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "dtype": dtype_name,
        "order": _SIDECAR_ORDER,
    }
    (stem.with_suffix(".json")).write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def _load_grid(stem):
    stem = Path(stem)
    sidecar = json.loads((stem.with_suffix(".json")).read_text())
    if sidecar.get("order") != _SIDECAR_ORDER:
        raise ValueError(f"load_grid: unsupported payload order {sidecar.get('order')!r}")
    dtype = _DTYPES[sidecar["dtype"]]
    dims = tuple(sidecar["dims"])
    raw = (stem.with_suffix(".raw")).read_bytes()
    n_expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != n_expected:
        raise ValueError(
            f"load_grid: payload has {len(raw)} bytes, sidecar implies {n_expected}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    return data, tuple(sidecar["spacing"]), sidecar["dtype"]


def load_volume(stem) -> Volume3D:
    data, spacing, dtype_name = _load_grid(stem)
    if dtype_name != "f32":
        raise ValueError(f"load_volume: sidecar dtype is {dtype_name!r}, not f32")
    return Volume3D(data.copy(), spacing)


def load_mask(stem) -> Mask3D:
    data, spacing, dtype_name = _load_grid(stem)
    if dtype_name != "u8":
        raise ValueError(f"load_mask: sidecar dtype is {dtype_name!r}, not u8")
    return Mask3D(data.copy(), spacing)
