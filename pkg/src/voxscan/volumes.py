"""Volume ingestion, preprocessing, synthetic data, and dataset management.

NIfTI-1 support is the single-file subset: 348-byte header, magic "n+1\\0",
data at vox_offset, datatype codes 2/4/16/64, scl_slope/scl_inter scaling,
either endianness (detected from the sizeof_hdr field). No extensions, no
compression, 3D only.

Axis convention: voxels are indexed [D, H, W] in C order, so the W axis varies
fastest - exactly the file's x axis. spacing_mm is (sx, sy, sz) in file-axis
order, i.e. sx is the spacing along W, sy along H, sz along D.

The synthetic generator is a stand-in for a real cohort: Gaussian background
around 0.2, one bright sphere whose radius shrinks with disease severity
(CN > MCI > AD), one dark ellipsoid that grows with it (AD largest). Class
signal is monotone by construction, so a classifier that learns anything at
all can separate the classes.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import os
import struct

import numpy as np

from .errors import NiftiFormatError, ValidationError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# datatype code -> (numpy kind, bitpix)
_DTYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32), 64: ("f8", 64)}


class ClassLabel(enum.IntEnum):
    AD = 0
    MCI = 1
    CN = 2

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        try:
            return cls[text]
        except KeyError:
            raise ValidationError(f"unknown class label {text!r}; expected "
                                  f"AD, MCI, or CN") from None


@dataclasses.dataclass
class Volume:
    voxels: np.ndarray            # [D, H, W], float64
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.voxels, dtype=np.float64)
        if arr.ndim != 3:
            raise ValidationError(f"volume must be 3-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains non-finite voxels")
        self.voxels = arr
        sp = tuple(float(s) for s in self.spacing_mm)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValidationError(f"spacing must be three positive reals, got "
                                  f"{self.spacing_mm}")
        self.spacing_mm = sp

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def write_nifti(v: Volume) -> bytes:
    """Single-file NIfTI-1, float32 little-endian, scl_slope=1, scl_inter=0."""
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")  # "regular" flag, conventional
    d, h, w = v.voxels.shape
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)   # datatype float32
    struct.pack_into("<h", hdr, 72, 32)   # bitpix
    sx, sy, sz = v.spacing_mm
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[123] = 2  # spatial units: millimeters
    descrip = v.source_id.encode()[:79]
    hdr[148:148 + len(descrip)] = descrip
    hdr[344:348] = MAGIC_SINGLE
    # 4 zero bytes: no header extensions; data starts at 352.
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + \
        v.voxels.astype("<f4").tobytes()


def read_nifti(data: bytes, source_id: str = "") -> Volume:
    if len(data) < VOX_OFFSET:
        raise NiftiFormatError(f"stream too short for a NIfTI-1 file "
                               f"({len(data)} bytes)")
    if struct.unpack_from("<i", data, 0)[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise NiftiFormatError("sizeof_hdr is not 348 in either byte order")
    magic = data[344:348]
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"bad magic {magic!r}; only the single-file "
                               f"'n+1' form is supported")
    dim = struct.unpack_from(f"{bo}8h", data, 40)
    if dim[0] != 3:
        raise NiftiFormatError(f"only 3-d volumes supported, dim[0]={dim[0]}")
    w, h, d = dim[1], dim[2], dim[3]
    if min(w, h, d) < 1:
        raise NiftiFormatError(f"non-positive dims {(w, h, d)}")
    datatype, bitpix = struct.unpack_from(f"{bo}2h", data, 70)
    if datatype not in _DTYPES:
        raise NiftiFormatError(f"unsupported datatype code {datatype}")
    kind, expected_bits = _DTYPES[datatype]
    if bitpix != expected_bits:
        raise NiftiFormatError(f"bitpix {bitpix} inconsistent with datatype "
                               f"{datatype} (expected {expected_bits})")
    pixdim = struct.unpack_from(f"{bo}8f", data, 76)
    spacing = (pixdim[1], pixdim[2], pixdim[3])
    if any(not math.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiFormatError(f"non-positive voxel spacing {spacing}")
    vox_offset = int(struct.unpack_from(f"{bo}f", data, 108)[0])
    if vox_offset < HEADER_SIZE:
        raise NiftiFormatError(f"vox_offset {vox_offset} inside the header")
    slope, inter = struct.unpack_from(f"{bo}2f", data, 112)
    count = w * h * d
    nbytes = count * (expected_bits // 8)
    if len(data) < vox_offset + nbytes:
        raise NiftiFormatError("truncated data section")
    raw = np.frombuffer(data, dtype=bo + kind, count=count, offset=vox_offset)
    voxels = raw.astype(np.float64).reshape(d, h, w)
    if slope != 0.0:
        voxels = slope * voxels + inter
    return Volume(voxels, spacing, source_id)


def read_nifti_file(path: str) -> Volume:
    with open(path, "rb") as fh:
        return read_nifti(fh.read(), source_id=os.path.basename(path))


def write_nifti_file(v: Volume, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(write_nifti(v))


def normalize01(v: Volume) -> Volume:
    """(v - min) / (max - min); a constant volume maps to all zeros."""
    lo = float(v.voxels.min())
    hi = float(v.voxels.max())
    if hi == lo:
        out = np.zeros_like(v.voxels)
    else:
        out = (v.voxels - lo) / (hi - lo)
    return Volume(out, v.spacing_mm, v.source_id)


def _lerp_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr
    if n_in == 1:
        return np.repeat(arr, n_out, axis=axis)
    pos = np.linspace(0.0, n_in - 1, n_out)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - i0
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a0 * (1.0 - frac) + a1 * frac


def resize_to(v: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Separable trilinear resample, corner-aligned: output sample k along an
    axis sits at input coordinate k*(n_in-1)/(n_out-1)."""
    if len(target_dims) != 3 or any(int(t) < 1 for t in target_dims):
        raise ValidationError(f"target dims must be three positive ints, got "
                              f"{target_dims}")
    target = tuple(int(t) for t in target_dims)
    out = v.voxels
    for axis in range(3):
        out = _lerp_axis(out, target[axis], axis)
    # spacing follows the corner-aligned stretch; index 0 of spacing_mm is the
    # W axis (voxel axis 2), index 2 the D axis (voxel axis 0).
    spacing = list(v.spacing_mm)
    for axis in range(3):
        n_in, n_out = v.voxels.shape[axis], target[axis]
        if n_in > 1 and n_out > 1:
            spacing[2 - axis] = v.spacing_mm[2 - axis] * (n_in - 1) / (n_out - 1)
    return Volume(np.ascontiguousarray(out), tuple(spacing), v.source_id)


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (32, 32, 16)
    noise_sigma: float = 0.05
    base_radius: float = 5.0
    # indexed by ClassLabel value (AD, MCI, CN)
    radius_factors: tuple[float, float, float] = (0.5, 0.75, 1.0)
    ellipsoid_axes: tuple[float, float, float] = (3.5, 2.5, 2.0)
    ellipsoid_scales: tuple[float, float, float] = (1.4, 1.0, 0.7)
    intensity_bias: float = 0.0
    seed: int = 0

    _JITTER = 2          # max |voxel| center jitter per axis
    _SIZE_SPREAD = 0.1   # radius multiplier drawn from 1 +- this

    def validate(self) -> None:
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ValidationError(f"dims too small: {self.dims}")
        ad, mci, cn = self.radius_factors
        if not (cn > mci > ad > 0):
            raise ValidationError("radius factors must satisfy CN > MCI > AD > 0")
        ead, emci, ecn = self.ellipsoid_scales
        if not (ead > emci > ecn > 0):
            raise ValidationError("ellipsoid scales must satisfy AD > MCI > CN > 0")
        if self.noise_sigma < 0 or self.base_radius <= 0:
            raise ValidationError("noise_sigma must be >= 0 and base_radius > 0")
        slack = self._JITTER
        r_max = self.base_radius * cn * (1 + self._SIZE_SPREAD)
        center = [d / 2.0 for d in self.dims]
        for c, d in zip(center, self.dims):
            if c - r_max - slack < 0 or c + r_max + slack > d:
                raise ValidationError(f"sphere (radius up to {r_max:.1f}) exceeds "
                                      f"dims {self.dims}")
        e_center = self._ellipsoid_center()
        for ax, c, d in zip(self.ellipsoid_axes, e_center, self.dims):
            ext = ax * ead * (1 + self._SIZE_SPREAD)
            if c - ext - slack < 0 or c + ext + slack > d:
                raise ValidationError(f"ellipsoid (extent up to {ext:.1f}) exceeds "
                                      f"dims {self.dims}")

    def _ellipsoid_center(self) -> tuple[float, float, float]:
        d, h, w = self.dims
        return (d / 2.0 + d / 4.0, h / 2.0 - h / 4.0, w / 2.0)


def synth_generate(label: ClassLabel, spec: SynthSpec) -> Volume:
    """Deterministic synthetic volume for one class. Same (label, spec), same bits."""
    spec.validate()
    label = ClassLabel(label)
    rng = np.random.default_rng(spec.seed)
    d, h, w = spec.dims
    field = 0.2 + spec.intensity_bias + spec.noise_sigma * rng.standard_normal(spec.dims)

    jitter = rng.integers(-spec._JITTER, spec._JITTER + 1, size=3)
    size_mult = rng.uniform(1 - spec._SIZE_SPREAD, 1 + spec._SIZE_SPREAD)
    e_jitter = rng.integers(-spec._JITTER, spec._JITTER + 1, size=3)
    e_mult = rng.uniform(1 - spec._SIZE_SPREAD, 1 + spec._SIZE_SPREAD)

    grid = np.indices(spec.dims, dtype=np.float64)

    center = np.array([d / 2.0, h / 2.0, w / 2.0]) + jitter
    radius = spec.base_radius * spec.radius_factors[label] * size_mult
    dist2 = sum((grid[i] - center[i]) ** 2 for i in range(3))
    field[dist2 <= radius * radius] += 0.6

    e_center = np.asarray(spec._ellipsoid_center()) + e_jitter
    axes = np.asarray(spec.ellipsoid_axes) * spec.ellipsoid_scales[label] * e_mult
    e_dist = sum(((grid[i] - e_center[i]) / axes[i]) ** 2 for i in range(3))
    field[e_dist <= 1.0] -= 0.18

    np.clip(field, 0.0, 1.0, out=field)
    return Volume(field, source_id=f"synth:{label.name}:{spec.seed}")


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: ClassLabel
    split: str


@dataclasses.dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int | None = None

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(paths) != len(set(paths)):
            raise ValidationError("manifest paths must be unique")

    def class_counts(self) -> dict[ClassLabel, int]:
        counts = {label: 0 for label in ClassLabel}
        for e in self.entries:
            counts[e.label] += 1
        return counts


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    lines = [f"{e.path}\t{e.label.name}\t{e.split}" for e in manifest.entries]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(path: str) -> DatasetManifest:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{ln}: expected path<TAB>label<TAB>"
                                      f"split, got {line!r}")
            p, label, split = parts
            if not split:
                raise ValidationError(f"{path}:{ln}: empty split tag")
            entries.append(ManifestEntry(p, ClassLabel.parse(label), split))
    return DatasetManifest(entries)


def stratified_split(manifest: DatasetManifest, fraction: float = 0.8,
                     seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Per class: seeded shuffle, floor(fraction*count) into train, rest into test.

    Output manifests preserve the input's entry order within each side.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"fraction must lie in [0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in ClassLabel:
        members = [i for i, e in enumerate(manifest.entries) if e.label == label]
        perm = rng.permutation(len(members))
        k = math.floor(fraction * len(members))
        train_idx.extend(members[j] for j in perm[:k])
        test_idx.extend(members[j] for j in perm[k:])
    train = [dataclasses.replace(manifest.entries[i], split="train")
             for i in sorted(train_idx)]
    test = [dataclasses.replace(manifest.entries[i], split="test")
            for i in sorted(test_idx)]
    return DatasetManifest(train, seed=seed), DatasetManifest(test, seed=seed)


def load_dataset(manifest: DatasetManifest, target_dims: tuple[int, int, int],
                 base_dir: str = ".") -> list[tuple[np.ndarray, ClassLabel]]:
    """Read, resize to target dims, normalize to [0, 1]. Paths resolve against
    base_dir when relative."""
    out = []
    for e in manifest.entries:
        path = e.path if os.path.isabs(e.path) else os.path.join(base_dir, e.path)
        vol = read_nifti_file(path)
        vol = resize_to(vol, target_dims)
        vol = normalize01(vol)
        out.append((vol.voxels, e.label))
    return out
