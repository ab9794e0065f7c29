"""Pinhole camera model, projection and linear multi-view triangulation.

Conventions
-----------
* Extrinsics map world to camera: ``X_cam = R @ X_world + t``.
* World units are millimeters, image units are full-resolution pixels.
* No lens distortion. Calibration documents that carry distortion fields are
  rejected instead of being silently ignored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from .errors import ConfigError, DegenerateDepth, DegenerateGeometry, InsufficientViews

DEPTH_EPS = 1e-9
CONDITION_LIMIT = 1e10

CAMERA_KEYS = ("name", "image_size", "intrinsics", "rotation", "translation")
TOP_LEVEL_KEYS = ("cameras", "units")
DISTORTION_KEYS = frozenset(
    {"distortion", "dist", "dist_coeffs", "distortion_coefficients", "k1", "k2", "k3", "p1", "p2"}
)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Calibrated pinhole camera.

    Parameters
    ----------
    name : str
        Camera identifier, unique within a rig.
    intrinsics : (3, 3) array
        Upper-triangular calibration matrix in pixels.
    rotation : (3, 3) array
        World-to-camera rotation.
    translation : (3,) array
        World-to-camera translation in millimeters.
    image_size : (width, height)
    """

    name: str
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        w, h = (int(v) for v in self.image_size)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ConfigError(f"camera {self.name!r}: non-finite calibration values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ConfigError(f"camera {self.name!r}: rotation is not orthonormal", key="rotation")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
            raise ConfigError(f"camera {self.name!r}: focal entries must be positive", key="intrinsics")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ConfigError(
                f"camera {self.name!r}: intrinsics must be upper triangular", key="intrinsics"
            )
        if w <= 0 or h <= 0:
            raise ConfigError(f"camera {self.name!r}: image_size must be positive", key="image_size")
        for attr, value in (("intrinsics", K), ("rotation", R), ("translation", t)):
            value.setflags(write=False)
            object.__setattr__(self, attr, value)
        object.__setattr__(self, "image_size", (w, h))
        P = K @ np.hstack([R, t[:, None]])
        P.setflags(write=False)
        object.__setattr__(self, "projection", P)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "image_size": list(self.image_size),
            "intrinsics": self.intrinsics.ravel().tolist(),
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "CameraModel":
        name = doc.get("name", "<unnamed>")
        for key in doc:
            if key in DISTORTION_KEYS:
                raise ConfigError(
                    f"camera {name!r}: lens distortion ({key!r}) is not supported; "
                    "undistort centroids upstream",
                    key=key,
                )
            if key not in CAMERA_KEYS:
                raise ConfigError(f"camera {name!r}: unknown key {key!r}", key=key)
        for key in CAMERA_KEYS:
            if key not in doc:
                raise ConfigError(f"camera {name!r}: missing key {key!r}", key=key)
        shapes = {"intrinsics": 9, "rotation": 9, "translation": 3, "image_size": 2}
        for key, n in shapes.items():
            if len(doc[key]) != n:
                raise ConfigError(f"camera {name!r}: {key!r} needs {n} numbers", key=key)
        return cls(
            name=str(doc["name"]),
            intrinsics=np.array(doc["intrinsics"], dtype=np.float64).reshape(3, 3),
            rotation=np.array(doc["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(doc["translation"], dtype=np.float64),
            image_size=(int(doc["image_size"][0]), int(doc["image_size"][1])),
        )


def project(camera: CameraModel, point: Sequence[float]) -> np.ndarray:
    """Project a world point (mm) to pixel coordinates.

    Raises
    ------
    DegenerateDepth
        If the point's camera-frame depth is not above ``DEPTH_EPS``.
    """
    X = np.asarray(point, dtype=np.float64).reshape(3)
    cam = camera.rotation @ X + camera.translation
    if cam[2] <= DEPTH_EPS:
        raise DegenerateDepth(f"point has depth {cam[2]:.3g} in camera {camera.name!r}")
    uvw = camera.intrinsics @ cam
    return uvw[:2] / uvw[2]


def project_many(camera: CameraModel, points: np.ndarray) -> np.ndarray:
    """Vectorised projection of ``(N, 3)`` points. Rows with bad depth become NaN."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = X @ camera.rotation.T + camera.translation
    uvw = cam @ camera.intrinsics.T
    out = np.full((len(X), 2), np.nan)
    ok = cam[:, 2] > DEPTH_EPS
    out[ok] = uvw[ok, :2] / uvw[ok, 2:3]
    return out


def reprojection_error(camera: CameraModel, point: Sequence[float], observed: Sequence[float]) -> float:
    """Euclidean pixel distance between the projection of ``point`` and ``observed``."""
    uv = project(camera, point)
    return float(np.hypot(*(uv - np.asarray(observed, dtype=np.float64).reshape(2))))


def _normalizing_transform(cameras: Iterable[CameraModel]) -> np.ndarray:
    # world = center + scale * local; conditions the DLT system
    centers = np.array([c.center for c in cameras])
    mid = centers.mean(axis=0)
    scale = float(np.sqrt(((centers - mid) ** 2).sum(axis=1).mean()))
    if scale <= 0:
        scale = 1.0
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = mid
    return T


def dlt_system(projections: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Stack the two DLT constraint rows for each view, rows scaled to unit norm.

    ``projections`` is ``(N, 3, 4)``, ``pixels`` is ``(N, 2)``; returns ``(2N, 4)``.
    """
    u = pixels[:, 0:1]
    v = pixels[:, 1:2]
    rows = np.concatenate(
        [u * projections[:, 2] - projections[:, 0], v * projections[:, 2] - projections[:, 1]],
        axis=0,
    )
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return rows / norms


def solve_dlt(A: np.ndarray) -> np.ndarray:
    """Smallest right singular vector of ``A`` after the rank check; homogeneous 4-vector."""
    _, s, vt = np.linalg.svd(A)
    if s[2] <= 0 or s[0] / s[2] > CONDITION_LIMIT:
        raise DegenerateGeometry(f"triangulation system is rank deficient (singular values {s})")
    return vt[-1]


def triangulate_dlt(observations: Sequence[tuple[CameraModel, Sequence[float]]]) -> np.ndarray:
    """Linear least-squares triangulation from two or more calibrated views.

    Parameters
    ----------
    observations : sequence of (CameraModel, pixel)

    Returns
    -------
    (3,) array
        World point in millimeters.
    """
    if len(observations) < 2:
        raise InsufficientViews(f"need at least 2 views, got {len(observations)}")
    cameras = [cam for cam, _ in observations]
    T = _normalizing_transform(cameras)
    P = np.stack([cam.projection @ T for cam in cameras])
    uv = np.array([np.asarray(px, dtype=np.float64).reshape(2) for _, px in observations])
    X = solve_dlt(dlt_system(P, uv))
    if abs(X[3]) <= 1e-12 * np.linalg.norm(X):
        raise DegenerateGeometry("triangulated point is at infinity")
    local = X[:3] / X[3]
    return T[:3, :3] @ local + T[:3, 3]


def load_calibration(path: str | Path) -> list[CameraModel]:
    """Read a calibration document (JSON or YAML) into a list of cameras."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read calibration file {path}: {exc}", key="calibration") from exc
    try:
        doc = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse calibration file {path}: {exc}", key="calibration") from exc
    return parse_calibration(doc)


def parse_calibration(doc: Any) -> list[CameraModel]:
    if not isinstance(doc, dict):
        raise ConfigError("calibration document must be a mapping", key="cameras")
    for key in doc:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(f"calibration: unknown key {key!r}", key=key)
    if "cameras" not in doc:
        raise ConfigError("calibration: missing key 'cameras'", key="cameras")
    units = doc.get("units", "mm")
    if units != "mm":
        raise ConfigError(f"calibration: units must be 'mm', got {units!r}", key="units")
    cams = [CameraModel.from_dict(c) for c in doc["cameras"]]
    names = [c.name for c in cams]
    if len(set(names)) != len(names):
        raise ConfigError("calibration: duplicate camera names", key="name")
    return cams


def dump_calibration(cameras: Sequence[CameraModel], path: str | Path) -> None:
    """Write JSON, or YAML when ``path`` ends in ``.yaml``/``.yml``."""
    path = Path(path)
    doc = {"units": "mm", "cameras": [c.to_dict() for c in cameras]}
    if path.suffix in (".yaml", ".yml"):
        path.write_text(yaml.safe_dump(doc, sort_keys=False))
    else:
        path.write_text(json.dumps(doc, indent=2) + "\n")
