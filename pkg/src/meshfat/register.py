"""Rigid point-to-point ICP and reference-subject selection."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .surface.mesh import TriangleMesh
from .volume import SubjectLabels

ORTHO_TOL = 1e-9


class RegistrationError(ValueError):
    pass


class ReferenceDegeneracyWarning(UserWarning):
    """Height, weight and age are all constant over the cohort."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> rotation @ x + translation`` with a proper rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("transform entries must be finite")
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation": [float(x) for x in self.rotation.ravel()],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        rot, tr = d["rotation"], d["translation"]
        if len(rot) != 9 or len(tr) != 3:
            raise ValueError("transform JSON needs 9 rotation and 3 translation numbers")
        return cls(np.array(rot, dtype=float).reshape(3, 3), np.array(tr, dtype=float))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))


@dataclass
class IcpReport:
    transform: RigidTransform
    iterations: int
    rmsd: float
    converged: bool
    history: list = field(default_factory=list)  # rmsd before the first and after every fit


def write_transform(path, t: RigidTransform) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(t.to_dict(), indent=1))
    return path


def read_transform(path) -> RigidTransform:
    return RigidTransform.from_dict(json.loads(Path(path).read_text()))


def apply_transform(m: TriangleMesh, t: RigidTransform) -> TriangleMesh:
    return TriangleMesh(t.apply(m.vertices), m.faces.copy())


def _check_points(p: np.ndarray, name: str):
    if len(p) < 3:
        raise RegistrationError(f"{name} needs at least 3 vertices")
    c = p - p.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise RegistrationError(f"{name} vertices are collinear")


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid map of ``src`` onto ``dst`` (reflection corrected)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # re-orthonormalise to clear round-off before validation
    uu, _, ww = np.linalg.svd(r)
    r = uu @ ww
    return RigidTransform(r, cd - r @ cs)


def icp(source: TriangleMesh, target: TriangleMesh, max_iters: int = 50,
        tol: float = 1e-6) -> IcpReport:
    """Register ``source`` onto ``target`` by point-to-point ICP.

    The centroid-aligning translation is taken as the starting pose unless it
    starts further from the target than the identity does.  Stops when the
    RMSD improves by less than ``tol`` (mm) or after ``max_iters`` fits.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    src = source.vertices
    dst = target.vertices
    _check_points(src, "source")
    _check_points(dst, "target")
    tree = cKDTree(dst)

    def nn(t: RigidTransform):
        d, idx = tree.query(t.apply(src))
        return float(np.sqrt(np.mean(d * d))), idx

    current = RigidTransform.identity()
    rmsd, idx = nn(current)
    shift = RigidTransform(np.eye(3), dst.mean(axis=0) - src.mean(axis=0))
    rmsd_shift, idx_shift = nn(shift)
    if rmsd_shift <= rmsd:
        current, rmsd, idx = shift, rmsd_shift, idx_shift
    history = [rmsd]
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        cand = kabsch(src, dst[idx])
        new_rmsd, new_idx = nn(cand)
        if new_rmsd > rmsd:
            # only round-off can raise the error; keep the better pose
            history.append(rmsd)
            converged = True
            break
        improvement = rmsd - new_rmsd
        current, rmsd, idx = cand, new_rmsd, new_idx
        history.append(rmsd)
        if improvement < tol:
            converged = True
            break
    return IcpReport(current, iterations, rmsd, converged, history)


def reference_distances(cohort: Sequence[SubjectLabels]) -> tuple[np.ndarray, bool]:
    """Distance of each subject to the cohort mean in z-scored (height, weight, age).

    Constant attributes contribute nothing.  The flag is True when all three
    are constant.
    """
    if len(cohort) == 0:
        raise ValueError("cohort is empty")
    a = np.array([[s.height, s.weight, s.age] for s in cohort], dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("height, weight and age must be finite for every subject")
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    live = sd > 0
    z = np.zeros_like(a)
    z[:, live] = (a[:, live] - mu[live]) / sd[live]
    return np.sqrt((z * z).sum(axis=1)), not live.any()


def select_reference(cohort: Sequence[SubjectLabels]) -> str:
    """Subject id of the most average subject (ties: smallest id).

    Emits :class:`ReferenceDegeneracyWarning` when the cohort has no spread
    in any attribute; the smallest id is returned then.
    """
    dist, degenerate = reference_distances(cohort)
    ids = [s.subject_id for s in cohort]
    if degenerate:
        warnings.warn("height, weight and age are constant; using the smallest subject id",
                      ReferenceDegeneracyWarning, stacklevel=2)
        return min(ids)
    best = dist.min()
    tied = dist <= best + 1e-12 * max(1.0, best)
    return min(i for i, t in zip(ids, tied) if t)
