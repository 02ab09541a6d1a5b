"""Pinhole cameras, rays, orbit poses, and pose interpolation.

Conventions, used consistently across the package:

* World frame is right-handed with +z up. Azimuth is measured in the xy
  plane from +x, elevation from the xy plane toward +z. Scene content lives
  inside the axis-aligned cube [-0.5, 0.5]^3.
* Camera frame: x right, y down, z forward; the camera looks down its +z
  axis. `rotation` maps world to camera coordinates (its rows are the camera
  axes expressed in world coordinates) and `translation` is the world origin
  in camera coordinates, so p_cam = R @ p_world + t and the camera center is
  C = -R^T @ t.
* Pixel (row i, col j) has continuous image coordinates (u, v) = (j, i);
  rays are cast through these pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


class BehindCameraError(ValueError):
    """A point to be projected lies at or behind the camera plane."""


class DegenerateLookAtError(ValueError):
    """View direction is parallel to the up vector."""


class PoseInterpolationError(ValueError):
    """Endpoint poses are not compatible for the requested interpolation."""


class PoseFileError(ValueError):
    """Malformed pose file."""


@dataclass(frozen=True)
class CameraPose:
    """Intrinsics + world-to-camera extrinsics + image size.

    Validates on construction: positive focal lengths and image size,
    rotation orthonormal with determinant +1 (within 1e-9).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"CameraPose: focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"CameraPose: image size must be positive, got {self.width}x{self.height}")
        err = np.abs(r @ r.T - np.eye(3)).max()
        det = float(np.linalg.det(r))
        if err > _ORTHO_TOL or abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(
                f"CameraPose: rotation not orthonormal with det +1 "
                f"(orthogonality error {err:.3e}, det {det:.12f})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Ray:
    """Unit-direction ray with a valid sampling interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "t_near", float(self.t_near))
        object.__setattr__(self, "t_far", float(self.t_far))
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError(f"Ray: direction must be unit length, |d| = {np.linalg.norm(d)!r}")
        if not (0.0 < self.t_near < self.t_far):
            raise ValueError(f"Ray: need 0 < t_near < t_far, got [{self.t_near}, {self.t_far}]")

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction if t.ndim else self.origin + t * self.direction


# ---------------------------------------------------------------------------
# Projection


def project_with_depth(pose: CameraPose, points) -> tuple[np.ndarray, np.ndarray]:
    """Project points to (u, v) and return camera-space depth alongside.

    No behind-camera check; callers that need per-point validity (feature
    lifting) mask on the returned depth instead. Depths at or below zero
    yield non-finite or meaningless uv entries, which such callers discard.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    p_cam = pts.reshape(-1, 3) @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pose.fx * p_cam[:, 0] / z + pose.cx
        v = pose.fy * p_cam[:, 1] / z + pose.cy
    uv = np.stack([u, v], axis=-1)
    if single:
        return uv[0], z[0]
    return uv, z


def project(pose: CameraPose, points) -> np.ndarray:
    """Project world points to image coordinates (u, v).

    Raises BehindCameraError if any point has camera-space depth <= 1e-9.

    >>> eye = CameraPose(100, 100, 64, 64, np.eye(3), np.zeros(3), 128, 128)
    >>> project(eye, [0.0, 0.0, 2.0])
    array([64., 64.])
    >>> project(eye, [1.0, 0.0, 2.0])
    array([114.,  64.])
    """
    uv, z = project_with_depth(pose, points)
    zs = np.atleast_1d(z)
    if np.any(zs <= 1e-9):
        n_bad = int(np.sum(zs <= 1e-9))
        raise BehindCameraError(
            f"project: {n_bad} point(s) at or behind the camera plane (min depth {zs.min():.3e})")
    return uv


def pixel_to_ray(pose: CameraPose, u: float, v: float,
                 t_near: float = 1e-3, t_far: float = 10.0) -> Ray:
    """Ray through image coordinates (u, v), origin at the camera center.

    Inverts `project` exactly (up to float error): for any t in the ray's
    interval, project(pose, ray.at(t)) returns (u, v) back.
    """
    d_cam = np.array([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, 1.0])
    d_world = pose.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(pose.center, d_world, t_near, t_far)


def generate_rays(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Unit rays through every pixel center: (origins [H*W,3], dirs [H*W,3]).

    Row-major pixel order; origins are all the camera center, repeated so
    callers can index both arrays uniformly.
    """
    us = np.arange(pose.width, dtype=np.float64)
    vs = np.arange(pose.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    d_cam = np.stack([
        (uu.ravel() - pose.cx) / pose.fx,
        (vv.ravel() - pose.cy) / pose.fy,
        np.ones(pose.width * pose.height),
    ], axis=-1)
    d_world = d_cam @ pose.rotation  # R^T applied to rows
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, d_world.shape).copy()
    return origins, d_world


# ---------------------------------------------------------------------------
# Pose construction


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *,
            fx: float, fy: float, cx: float, cy: float,
            width: int, height: int) -> CameraPose:
    """Pose at `position` looking toward `target`, image-up opposite `up`."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise DegenerateLookAtError("look_at: position coincides with target")
    forward /= norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise DegenerateLookAtError("look_at: view direction parallel to up vector")
    right /= rnorm
    down = np.cross(forward, right)  # camera +y (image down)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ position
    return CameraPose(fx, fy, cx, cy, rotation, translation, width, height)


def orbit_pose(azimuth: float, elevation: float, radius: float, *,
               fx: float, fy: float, cx: float, cy: float,
               width: int, height: int) -> CameraPose:
    """Origin-facing pose on the orbit sphere (angles in radians)."""
    ce = math.cos(elevation)
    position = radius * np.array([ce * math.cos(azimuth), ce * math.sin(azimuth),
                                  math.sin(elevation)])
    return look_at(position, fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def azimuth_elevation_radius(pose: CameraPose) -> tuple[float, float, float]:
    """Spherical coordinates of the camera center (z-up)."""
    c = pose.center
    r = float(np.linalg.norm(c))
    if r < 1e-12:
        raise ValueError("azimuth_elevation_radius: camera at the origin")
    return math.atan2(c[1], c[0]), math.asin(min(1.0, max(-1.0, c[2] / r))), r


# ---------------------------------------------------------------------------
# Pose interpolation


def _sym_lerp(a: float, b: float, i: int, n: int) -> float:
    # (a*(n+1-i) + b*i) / (n+1) is bitwise symmetric under (a,b,i)->(b,a,n+1-i)
    # because IEEE addition and multiplication are commutative.
    return (a * (n + 1 - i) + b * i) / (n + 1)


def _mat_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                      (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                      0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def _quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def interpolate_poses(start: CameraPose, end: CameraPose, n: int,
                      mode: str = "spherical") -> list[CameraPose]:
    """n poses strictly between start and end, at fractions i/(n+1).

    Endpoints are excluded; n=0 returns []. Intrinsics and image size come
    from `start`.

    "spherical" walks the origin-facing orbit sphere: azimuth along the
    shorter arc (exact 180-degree ties go in the positive direction),
    elevation and radius linearly, each pose re-derived by look-at. The two
    endpoint orbit radii must agree within 1%. "linear" interpolates camera
    centers linearly and rotations by quaternion slerp.

    For endpoint pairs whose azimuth path does not cross the +-pi seam,
    swapping start and end returns the reversed pose list exactly (bitwise):
    every interpolated quantity is computed in a form symmetric under the
    swap.
    """
    if n < 0:
        raise ValueError(f"interpolate_poses: n must be >= 0, got {n}")
    if mode not in ("spherical", "linear"):
        raise ValueError(f"interpolate_poses: unknown mode {mode!r}")
    if n == 0:
        return []
    intr = dict(fx=start.fx, fy=start.fy, cx=start.cx, cy=start.cy,
                width=start.width, height=start.height)

    if mode == "spherical":
        az_a, el_a, r_a = azimuth_elevation_radius(start)
        az_b, el_b, r_b = azimuth_elevation_radius(end)
        mismatch = abs(r_a - r_b) / ((r_a + r_b) * 0.5)
        if mismatch >= 0.01:
            raise PoseInterpolationError(
                f"interpolate_poses: orbit radii differ by {100 * mismatch:.2f}% "
                f"({r_a:.6f} vs {r_b:.6f}); spherical mode needs a shared orbit")
        d = az_b - az_a
        if d > math.pi or d == -math.pi:
            # shorter arc wraps (or exact tie: go in the positive direction)
            az_b = az_a + (d - 2 * math.pi if d > math.pi else math.pi)
        elif d < -math.pi:
            az_b = az_b + 2 * math.pi
        poses = []
        for i in range(1, n + 1):
            az = _sym_lerp(az_a, az_b, i, n)
            el = _sym_lerp(el_a, el_b, i, n)
            r = _sym_lerp(r_a, r_b, i, n)
            poses.append(orbit_pose(az, el, r, **intr))
        return poses

    c_a, c_b = start.center, end.center
    q_a, q_b = _mat_to_quat(start.rotation), _mat_to_quat(end.rotation)
    if float(q_a @ q_b) < 0.0:
        q_b = -q_b
    dot = min(1.0, max(-1.0, float(q_a @ q_b)))
    omega = math.acos(dot)
    poses = []
    for i in range(1, n + 1):
        center = np.array([_sym_lerp(c_a[k], c_b[k], i, n) for k in range(3)])
        if omega < 1e-8:
            q = q_a * (n + 1 - i) + q_b * i  # nearly identical: lerp, then normalize
        else:
            q = q_a * math.sin(omega * (n + 1 - i) / (n + 1)) + q_b * math.sin(omega * i / (n + 1))
        q = q / np.linalg.norm(q)
        rot = _quat_to_mat(q)
        poses.append(CameraPose(rotation=rot, translation=-rot @ center, **intr))
    return poses


# ---------------------------------------------------------------------------
# Pose file io: one pose per line,
# "fx fy cx cy w h r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2"


def save_poses(path, poses: list[CameraPose]) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fields = [repr(p.fx), repr(p.fy), repr(p.cx), repr(p.cy),
                      str(p.width), str(p.height)]
            fields += [repr(float(v)) for v in p.rotation.ravel()]
            fields += [repr(float(v)) for v in p.translation]
            fh.write(" ".join(fields) + "\n")


def load_poses(path) -> list[CameraPose]:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 18:
                raise PoseFileError(f"{path}:{lineno}: expected 18 fields, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as e:
                raise PoseFileError(f"{path}:{lineno}: non-numeric field") from e
            fx, fy, cx, cy, w, h = vals[:6]
            if w != int(w) or h != int(h):
                raise PoseFileError(f"{path}:{lineno}: image size must be integral")
            try:
                poses.append(CameraPose(fx, fy, cx, cy,
                                        np.array(vals[6:15]).reshape(3, 3),
                                        np.array(vals[15:18]), int(w), int(h)))
            except ValueError as e:
                raise PoseFileError(f"{path}:{lineno}: {e}") from e
    return poses
