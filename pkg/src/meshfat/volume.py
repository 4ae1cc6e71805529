"""Binary voxel volumes: morphology, projection, file I/O and synthetic bodies.

Volumes are stored as boolean arrays indexed ``data[x, y, z]``.  The linear
voxel index used for tie-breaking and on disk is x-fastest,
``x + nx * (y + ny * z)``.  Voxel ``(i, j, k)`` sits at ``(i*sx, j*sy, k*sz)``
in millimetres.

Body axes follow the usual anatomical convention: x runs left-right, y runs
posterior-anterior and z runs inferior-superior.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "VoxelVolume",
    "Silhouette",
    "Superellipsoid",
    "Capsule",
    "Ellipsoid",
    "ShellField",
    "SyntheticBodySpec",
    "SubjectLabels",
    "ContainmentError",
    "erode",
    "dilate",
    "close",
    "largest_component",
    "segment_body",
    "silhouette",
    "silhouette_image",
    "generate_synthetic_body",
    "visceral_mask",
    "shell_volume",
    "sample_body_spec",
    "cohort_dims",
    "write_volume",
    "read_volume",
    "write_silhouette",
    "read_silhouette",
]

ENCODING = "bitpack-x-fastest"


@dataclass(eq=False)
class VoxelVolume:
    """Binary occupancy grid with physical voxel spacing (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data: np.ndarray) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing)

    def pad(self, width: int) -> "VoxelVolume":
        return self.with_data(np.pad(self.data, width))

    def linear(self) -> np.ndarray:
        """Flat occupancy in x-fastest order."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, VoxelVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(eq=False)
class Silhouette:
    """Binary max-projection of a volume; ``data`` is indexed ``[w, h]``."""

    axis: str
    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.axis not in ("coronal", "sagittal"):
            raise ValueError(f"unknown silhouette axis {self.axis!r}")
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 2:
            raise ValueError("silhouette data must be 2-D")

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Silhouette):
            return NotImplemented
        return (self.axis == other.axis and tuple(self.spacing) == tuple(other.spacing)
                and np.array_equal(self.data, other.data))


# ---------------------------------------------------------------------------
# Morphology (6-connected discrete ball of radius r, i.e. an L1 ball)
# ---------------------------------------------------------------------------

def _check_radius(r):
    if int(r) != r or r < 0:
        raise ValueError(f"radius must be a non-negative integer, got {r}")
    return int(r)


def _erode_once(a: np.ndarray) -> np.ndarray:
    # voxels outside the grid count as empty
    p = np.pad(a, 1, constant_values=False)
    out = a.copy()
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        out &= p[tuple(lo)]
        out &= p[tuple(hi)]
    return out


def _dilate_once(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, constant_values=False)
    out = a.copy()
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        out |= p[tuple(lo)]
        out |= p[tuple(hi)]
    return out


def erode(v: VoxelVolume, r: int) -> VoxelVolume:
    """Erode by the 6-connected ball of radius ``r``."""
    r = _check_radius(r)
    a = v.data
    for _ in range(r):
        if not a.any():
            break
        a = _erode_once(a)
    return v.with_data(a.copy() if r == 0 else a)


def dilate(v: VoxelVolume, r: int) -> VoxelVolume:
    """Dilate by the 6-connected ball of radius ``r``; growth is clipped at the grid."""
    r = _check_radius(r)
    a = v.data
    for _ in range(r):
        if not a.any():
            break
        a = _dilate_once(a)
    return v.with_data(a.copy() if r == 0 else a)


def close(v: VoxelVolume, r: int) -> VoxelVolume:
    """Morphological closing, ``erode(dilate(v, r), r)``."""
    return erode(dilate(v, r), r)


def largest_component(v: VoxelVolume) -> VoxelVolume:
    """Keep the largest 26-connected component.

    Ties go to the component holding the smallest x-fastest linear index.
    """
    labels, n = ndimage.label(v.data, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return v.with_data(np.zeros_like(v.data))
    flat = labels.ravel(order="F")
    sizes = np.bincount(flat, minlength=n + 1)
    sizes[0] = 0
    _, first = np.unique(flat, return_index=True)  # first[i] for label i (label 0 included)
    best = max(range(1, n + 1), key=lambda lab: (sizes[lab], -first[lab]))
    return v.with_data(labels == best)


def segment_body(v: VoxelVolume, close_radius: int = 2) -> VoxelVolume:
    """Default cleanup chain: closing followed by largest-component selection."""
    return largest_component(close(v, close_radius))


# ---------------------------------------------------------------------------
# Silhouettes
# ---------------------------------------------------------------------------

def silhouette(v: VoxelVolume, axis: str) -> Silhouette:
    """Max-projection: coronal along y, sagittal along x."""
    sx, sy, sz = v.spacing
    if axis == "coronal":
        return Silhouette(axis, v.data.any(axis=1), (sx, sz))
    if axis == "sagittal":
        return Silhouette(axis, v.data.any(axis=0), (sy, sz))
    raise ValueError(f"unknown silhouette axis {axis!r}")


def stack_silhouettes(coronal: Silhouette, sagittal: Silhouette, width: int | None = None) -> np.ndarray:
    """Two-channel ``(2, nz, width)`` float image: coronal then sagittal.

    Both projections are centred horizontally on a canvas ``width`` pixels
    wide (default: the wider footprint) so they can be stacked as channels.
    """
    if coronal.axis != "coronal" or sagittal.axis != "sagittal":
        raise ValueError("expected a coronal and a sagittal silhouette")
    if coronal.dims[1] != sagittal.dims[1]:
        raise ValueError("silhouettes differ in height")
    footprint = max(coronal.dims[0], sagittal.dims[0])
    width = footprint if width is None else int(width)
    if width < footprint:
        raise ValueError(f"canvas width {width} smaller than volume footprint {footprint}")
    out = np.zeros((2, coronal.dims[1], width))
    for c, sil in enumerate((coronal, sagittal)):
        img = sil.data.T  # (nz, w)
        off = (width - img.shape[1]) // 2
        out[c, :, off:off + img.shape[1]] = img
    return out


def silhouette_image(v: VoxelVolume, width: int | None = None) -> np.ndarray:
    """Coronal and sagittal silhouettes of ``v`` stacked as in :func:`stack_silhouettes`."""
    return stack_silhouettes(silhouette(v, "coronal"), silhouette(v, "sagittal"), width)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _pack(data: np.ndarray) -> bytes:
    # rows along x, padded to a byte boundary, iterated y then z
    rows = np.ascontiguousarray(data.transpose(2, 1, 0))
    return np.packbits(rows, axis=-1, bitorder="little").tobytes()


def _unpack(raw: bytes, dims) -> np.ndarray:
    nx, ny, nz = dims
    row_bytes = (nx + 7) // 8
    buf = np.frombuffer(raw, dtype=np.uint8)
    if buf.size != row_bytes * ny * nz:
        raise ValueError(f"payload has {buf.size} bytes, expected {row_bytes * ny * nz}")
    bits = np.unpackbits(buf.reshape(nz, ny, row_bytes), axis=-1, bitorder="little")
    return bits[..., :nx].astype(bool).transpose(2, 1, 0)


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".volhdr", ".volraw") else p


def write_volume(path, v: VoxelVolume, **extra) -> Path:
    """Write ``<path>.volhdr`` (JSON) and ``<path>.volraw`` (bit-packed payload)."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {"dims": list(v.dims), "spacing": list(v.spacing), "encoding": ENCODING}
    header.update(extra)
    stem.with_suffix(".volhdr").write_text(json.dumps(header, indent=2) + "\n")
    stem.with_suffix(".volraw").write_bytes(_pack(v.data))
    return stem


def _read_pair(path):
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".volhdr").read_text())
    if header.get("encoding") != ENCODING:
        raise ValueError(f"unsupported volume encoding {header.get('encoding')!r}")
    data = _unpack(stem.with_suffix(".volraw").read_bytes(), header["dims"])
    return header, data


def read_volume(path) -> VoxelVolume:
    header, data = _read_pair(path)
    return VoxelVolume(data, tuple(header["spacing"]))


def write_silhouette(path, s: Silhouette) -> Path:
    w, h = s.dims
    vol = VoxelVolume(s.data.reshape(w, h, 1), (*s.spacing, 1.0))
    return write_volume(path, vol, axis=s.axis)


def read_silhouette(path) -> Silhouette:
    header, data = _read_pair(path)
    if header["dims"][2] != 1:
        raise ValueError("silhouette payload must have nz == 1")
    return Silhouette(header["axis"], data[:, :, 0], tuple(header["spacing"][:2]))


# ---------------------------------------------------------------------------
# Synthetic bodies
# ---------------------------------------------------------------------------

class ContainmentError(ValueError):
    """The visceral ellipsoid is not inside the torso."""


@dataclass(frozen=True)
class Superellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    exponent: float = 2.0

    def implicit(self, p: np.ndarray) -> np.ndarray:
        """``sum |q_i / a_i|^e``; at most 1 inside."""
        q = (p - np.asarray(self.center)) / np.asarray(self.semi_axes)
        return (np.abs(q) ** self.exponent).sum(axis=-1)

    def radius(self, u: np.ndarray) -> np.ndarray:
        """Distance from the centre to the surface along unit directions ``u``."""
        return self.implicit(u + np.asarray(self.center)) ** (-1.0 / self.exponent)


@dataclass(frozen=True)
class Capsule:
    p0: tuple[float, float, float]
    p1: tuple[float, float, float]
    radius: float

    def distance(self, p: np.ndarray) -> np.ndarray:
        a, b = np.asarray(self.p0), np.asarray(self.p1)
        ab = b - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        return np.linalg.norm(p - a - t[..., None] * ab, axis=-1)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    @property
    def volume(self) -> float:
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * math.pi * a * b * c

    def contains(self, p: np.ndarray) -> np.ndarray:
        q = (p - np.asarray(self.center)) / np.asarray(self.semi_axes)
        return (q * q).sum(axis=-1) <= 1.0


@dataclass(frozen=True)
class ShellField:
    """Radial shell thickness ``base * (1 + m0*u_y + m1*u_z + m2*(u_x^2 - u_y^2))``."""

    base: float
    modulation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def thickness(self, u: np.ndarray) -> np.ndarray:
        m0, m1, m2 = self.modulation
        ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
        return self.base * (1.0 + m0 * uy + m1 * uz + m2 * (ux * ux - uy * uy))

    @property
    def min_thickness(self) -> float:
        # lower bound over the unit sphere
        m0, m1, m2 = self.modulation
        return self.base * (1.0 - abs(m0) - abs(m1) - abs(m2))


@dataclass(frozen=True)
class SyntheticBodySpec:
    """Parameters of one synthetic subject, all lengths in millimetres.

    Primitives live in a body frame; ``origin`` and ``yaw`` (degrees about z)
    place that frame in the volume.
    """

    seed: int
    torso: Superellipsoid
    limbs: tuple[Capsule, ...]
    visceral: Ellipsoid
    shell: ShellField
    sex_tag: str
    height: float
    weight: float
    age: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0

    def check(self, n_samples: int = 4096):
        if self.sex_tag not in ("F", "M"):
            raise ValueError(f"sex_tag must be 'F' or 'M', got {self.sex_tag!r}")
        if self.shell.min_thickness <= 0:
            raise ValueError("shell thickness must be strictly positive everywhere")
        u = _fibonacci_sphere(n_samples)
        pts = np.asarray(self.visceral.center) + u * np.asarray(self.visceral.semi_axes)
        worst = float(self.torso.implicit(pts).max())
        if worst >= 1.0:
            raise ContainmentError(
                f"visceral ellipsoid leaves the torso (implicit value {worst:.3f} >= 1)")


@dataclass(frozen=True)
class SubjectLabels:
    subject_id: str
    vat_mm3: float
    asat_mm3: float
    sex_tag: str
    height: float
    weight: float
    age: float

    def __post_init__(self):
        if self.vat_mm3 < 0 or self.asat_mm3 < 0:
            raise ValueError("label volumes must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("subject_id", "vat_mm3", "asat_mm3", "sex_tag", "height", "weight", "age")}


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _rot_z(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _grid_points(dims, spacing, lo=(0, 0, 0)):
    axes = [(np.arange(n) + o) * s for n, s, o in zip(dims, spacing, lo)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _body_frame_points(spec: SyntheticBodySpec, dims, spacing, lo=(0, 0, 0)) -> np.ndarray:
    p = _grid_points(dims, spacing, lo) - np.asarray(spec.origin)
    # row-vector form of R^T (p - origin)
    return p @ _rot_z(spec.yaw)


def _box_slices(spec: SyntheticBodySpec, lo_mm, hi_mm, dims, spacing):
    """Index window covering a body-frame box after placement in the grid."""
    corners = np.array([[x, y, z] for x in (lo_mm[0], hi_mm[0])
                        for y in (lo_mm[1], hi_mm[1]) for z in (lo_mm[2], hi_mm[2])])
    world = corners @ _rot_z(spec.yaw).T + np.asarray(spec.origin)
    sp = np.asarray(spacing)
    i0 = np.clip(np.floor(world.min(axis=0) / sp).astype(int) - 1, 0, dims)
    i1 = np.clip(np.ceil(world.max(axis=0) / sp).astype(int) + 2, 0, dims)
    return tuple(slice(a, b) for a, b in zip(i0, i1))


def _paint(occ, spec, lo_mm, hi_mm, spacing, inside):
    win = _box_slices(spec, lo_mm, hi_mm, occ.shape, spacing)
    shape = tuple(w.stop - w.start for w in win)
    if min(shape) <= 0:
        return
    q = _body_frame_points(spec, shape, spacing, tuple(w.start for w in win))
    occ[win] |= inside(q)


def _outer_torso(spec: SyntheticBodySpec, q: np.ndarray) -> np.ndarray:
    d = q - np.asarray(spec.torso.center)
    r = np.linalg.norm(d, axis=-1)
    u = d / np.where(r > 0, r, 1.0)[..., None]
    u[r == 0] = (0.0, 0.0, 1.0)
    return r <= spec.torso.radius(u) + spec.shell.thickness(u)


def shell_volume(torso: Superellipsoid, shell: ShellField, step: float) -> float:
    """Volume between the torso surface and the offset shell surface.

    Integrates ``((R + T)^3 - R^3) / 3`` over the unit sphere with
    Gauss-Legendre nodes in ``cos(theta)`` and a uniform rule in ``phi``;
    ``step`` is the largest arc length (mm) between samples on the outer surface.
    """
    r_max = max(torso.semi_axes) + shell.base * (1 + sum(abs(m) for m in shell.modulation))
    n_phi = max(64, int(math.ceil(2 * math.pi * r_max / step)))
    n_theta = max(32, n_phi // 2)
    mu, w_mu = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * (2 * math.pi / n_phi)
    cphi, sphi = np.cos(phi), np.sin(phi)
    total = 0.0
    for m, w in zip(mu, w_mu):
        s = math.sqrt(max(0.0, 1.0 - m * m))
        u = np.stack([s * cphi, s * sphi, np.full_like(phi, m)], axis=1)
        rt = torso.radius(u)
        ro = rt + shell.thickness(u)
        total += w * ((ro ** 3 - rt ** 3).sum() / 3.0)
    return float(total * (2 * math.pi / n_phi))


def generate_synthetic_body(spec: SyntheticBodySpec, dims, spacing,
                            subject_id: str | None = None):
    """Voxelise torso, shell and limbs; return ``(VoxelVolume, SubjectLabels)``.

    The visceral label is the closed-form ellipsoid volume.  The subcutaneous
    label integrates the shell thickness field numerically at four times the
    finest voxel resolution.
    """
    spec.check()
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    occ = np.zeros(dims, dtype=bool)
    reach = np.asarray(spec.torso.semi_axes) + spec.shell.base * (
        1.0 + sum(abs(m) for m in spec.shell.modulation))
    tc = np.asarray(spec.torso.center)
    _paint(occ, spec, tc - reach, tc + reach, spacing, lambda q: _outer_torso(spec, q))
    for limb in spec.limbs:
        lo = np.minimum(limb.p0, limb.p1) - limb.radius
        hi = np.maximum(limb.p0, limb.p1) + limb.radius
        _paint(occ, spec, lo, hi, spacing, lambda q, limb=limb: limb.distance(q) <= limb.radius)
    margin = 2
    border = np.ones(dims, dtype=bool)
    border[margin:-margin, margin:-margin, margin:-margin] = False
    if (occ & border).any():
        raise ValueError(f"body does not fit in dims {dims} with a {margin}-voxel margin")
    vol = VoxelVolume(occ, spacing)
    labels = SubjectLabels(
        subject_id=subject_id or f"subj{spec.seed:06d}",
        vat_mm3=spec.visceral.volume,
        asat_mm3=shell_volume(spec.torso, spec.shell, min(spacing) / 4.0),
        sex_tag=spec.sex_tag,
        height=spec.height,
        weight=spec.weight,
        age=spec.age,
    )
    return vol, labels


def visceral_mask(spec: SyntheticBodySpec, dims, spacing) -> VoxelVolume:
    """Voxelisation of the visceral ellipsoid alone (not part of the body volume)."""
    q = _body_frame_points(spec, tuple(dims), tuple(spacing))
    return VoxelVolume(spec.visceral.contains(q), tuple(spacing))


# Per-sex generator distributions.  Visceral size is larger for M, shell
# thickness larger for F.
_SEX_PARAMS = {
    "M": dict(height=(1760.0, 65.0), frame=(1.06, 0.05), visceral=(0.60, 0.18),
              shell=(17.0, 5.0)),
    "F": dict(height=(1630.0, 60.0), frame=(0.95, 0.05), visceral=(0.35, 0.15),
              shell=(27.0, 7.0)),
}

_BODY_EXTENT = np.array([900.0, 520.0, 1240.0])  # mm, generous bounding box of any body


def cohort_dims(spacing: Sequence[float]) -> tuple[int, int, int]:
    """Grid dimensions that fit every sampled body at the given spacing."""
    return tuple(int(math.ceil(e / s)) + 6 for e, s in zip(_BODY_EXTENT, spacing))


def sample_body_spec(seed: int, sex_tag: str | None = None, dims=None,
                     spacing=None) -> SyntheticBodySpec:
    """Draw a synthetic subject.

    Height, frame size, visceral factor, shell thickness and age are drawn
    from sex-specific distributions; torso and limb geometry follow from
    them.  When ``dims``/``spacing`` are given the body is centred in that
    grid with a small random offset and yaw.
    """
    rng = np.random.default_rng(seed)
    if sex_tag is None:
        sex_tag = "M" if rng.random() < 0.5 else "F"
    p = _SEX_PARAMS[sex_tag]
    height = float(np.clip(rng.normal(*p["height"]), 1480.0, 1960.0))
    frame = float(np.clip(rng.normal(*p["frame"]), 0.85, 1.18))
    age = float(rng.uniform(40.0, 80.0))
    visc = float(np.clip(rng.normal(*p["visceral"]) + 0.004 * (age - 60.0), 0.0, 1.0))
    shell_base = float(np.clip(rng.normal(*p["shell"]), 6.0, 45.0))
    exponent = float(rng.uniform(2.2, 3.0))
    modulation = tuple(float(m) for m in rng.uniform(-0.15, 0.15, size=3))

    scale_h = height / 1700.0
    a = 140.0 * frame * (1.0 + 0.08 * visc)
    b = 95.0 * frame * (1.0 + 0.35 * visc)
    c = 290.0 * scale_h
    torso = Superellipsoid((0.0, 0.0, 0.0), (a, b, c), exponent)

    vs = 0.45 + 0.35 * visc
    visceral = Ellipsoid((0.0, 0.12 * b, -0.25 * c),
                         (0.62 * a * vs, 0.66 * b * vs, 0.45 * c * vs))

    shell = ShellField(shell_base, modulation)
    leg_r = 68.0 * frame + 0.5 * shell_base
    arm_r = 38.0 * frame + 0.3 * shell_base
    leg_len = 440.0 * scale_h
    hip_z = -0.78 * c
    legs = tuple(
        Capsule((s * 0.42 * a, 0.0, hip_z), (s * 0.62 * a, 0.0, hip_z - leg_len), leg_r)
        for s in (-1.0, 1.0))
    arm_len = 520.0 * scale_h
    ang = math.radians(22.0)
    shoulder_z = 0.72 * c
    arms = tuple(
        Capsule((s * 0.80 * a, 0.0, shoulder_z),
                (s * (0.80 * a + arm_len * math.sin(ang)), 0.0, shoulder_z - arm_len * math.cos(ang)),
                arm_r)
        for s in (-1.0, 1.0))
    limbs = legs + arms

    # mass at 1 g/cm^3 from analytic part volumes (limb/torso overlap ignored)
    torso_vol = _superellipsoid_volume(torso) + shell_volume(torso, shell, 40.0)
    limb_vol = sum(math.pi * l.radius ** 2 * np.linalg.norm(np.subtract(l.p1, l.p0))
                   + 4.0 / 3.0 * math.pi * l.radius ** 3 for l in limbs)
    weight = float((torso_vol + 0.6 * limb_vol) * 1e-6)

    origin = (0.0, 0.0, 0.0)
    yaw = 0.0
    if dims is not None and spacing is not None:
        centre = np.array([(n - 1) * s / 2.0 for n, s in zip(dims, spacing)])
        # vertical centre of the neck-to-knee span
        top = c + shell_base * 1.3
        bottom = hip_z - leg_len - leg_r
        centre[2] -= (top + bottom) / 2.0
        origin = tuple(float(x) for x in centre + rng.uniform(-10.0, 10.0, size=3))
        yaw = float(rng.uniform(-4.0, 4.0))

    return SyntheticBodySpec(seed=int(seed), torso=torso, limbs=limbs, visceral=visceral,
                             shell=shell, sex_tag=sex_tag, height=height, weight=weight,
                             age=age, origin=origin, yaw=yaw)


def _superellipsoid_volume(t: Superellipsoid) -> float:
    # 8abc * Gamma(1+1/e)^3 / Gamma(1+3/e) for equal exponents
    a, b, c = t.semi_axes
    g = math.gamma(1.0 + 1.0 / t.exponent)
    return 8.0 * a * b * c * g ** 3 / math.gamma(1.0 + 3.0 / t.exponent)
