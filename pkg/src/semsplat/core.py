"""Scene data model and screen-space projection of 3D Gaussians.

A scene is a growable set of anisotropic 3D Gaussians. Each Gaussian carries
geometry (position, log-scale, quaternion), appearance (opacity logit, RGB
color) and a d-dimensional semantic embedding. Projection follows the EWA
splatting recipe: the 3D covariance is pushed through the local affine
approximation of the perspective map and dilated by a small low-pass constant
before inversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Low-pass dilation added to the 2D covariance (pixels^2), 3DGS convention.
COV2D_DILATION = 0.3
# Cutoff radius of a splat, in units of the max 2D standard deviation.
RADIUS_MULTIPLIER = 3.0
DEFAULT_NEAR_CLIP = 0.01


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


def normalize_quaternions(q):
    """Normalize quaternions (scalar-first, shape (..., 4)) to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion")
    return q / norm


def quat_to_rotmat(q):
    """Convert unit quaternions (w, x, y, z) to rotation matrices.

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3). Quaternions
    are normalized internally, so q and -q map to the same matrix.
    """
    q = normalize_quaternions(q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R[0] if single else R


def build_covariance(scale, rotation):
    """3D covariance Sigma = R S S^T R^T from activated scales and a quaternion.

    Args:
        scale: (3,) or (N, 3) positive scales (already activated, not log).
        rotation: (4,) or (N, 4) quaternion, normalized internally.

    Returns:
        (3, 3) or (N, 3, 3) symmetric positive semi-definite covariance.
    """
    scale = np.asarray(scale, dtype=np.float64)
    single = scale.ndim == 1
    scale = np.atleast_2d(scale)
    if np.any(scale <= 0.0):
        raise ValueError("scales must be strictly positive")
    R = quat_to_rotmat(rotation)
    if R.ndim == 2:
        R = R[None]
    A = R * scale[:, None, :]  # columns of R scaled: A = R @ diag(s)
    cov = A @ np.swapaxes(A, 1, 2)
    return cov[0] if single else cov


@dataclass
class Gaussian:
    """One primitive. Scale is stored as log, opacity as a pre-sigmoid logit;
    color is unconstrained and clamped to [0, 1] at render time."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    semantic: np.ndarray

    @property
    def scale(self):
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


class Scene:
    """Growable set of Gaussians stored as structure-of-arrays.

    Single-writer: render calls never mutate the scene, and mutation
    (densify/prune) must not overlap a render call.
    """

    def __init__(self, positions, log_scales, rotations, opacity_logits,
                 colors, semantics, background_color=(0.0, 0.0, 0.0),
                 class_count=2):
        self.positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(rotations, dtype=np.float64))
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        self.semantics = np.asarray(semantics, dtype=np.float64)
        if self.semantics.ndim == 1:
            self.semantics = self.semantics.reshape(len(self.opacity_logits), -1)
        self.background_color = np.asarray(background_color, dtype=np.float64).reshape(3)
        self.class_count = int(class_count)
        self.validate()

    @classmethod
    def empty(cls, semantic_dim=3, background_color=(0.0, 0.0, 0.0), class_count=2):
        z = np.zeros((0, 1))
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros((0, 3)), np.zeros((0, semantic_dim)),
                   background_color, class_count)

    def validate(self):
        n = len(self)
        shapes = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "colors": (n, 3),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.semantics.shape[0] != n:
            raise ValueError("semantics row count mismatch")
        if self.semantic_dim < 1:
            raise ValueError("semantic_dim must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if n > 0 and np.any(np.linalg.norm(self.rotations, axis=1) == 0.0):
            raise ValueError("zero-norm rotation quaternion")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def semantic_dim(self):
        return self.semantics.shape[1]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def gaussian_at(self, i):
        return Gaussian(self.positions[i].copy(), self.log_scales[i].copy(),
                        self.rotations[i].copy(), float(self.opacity_logits[i]),
                        self.colors[i].copy(), self.semantics[i].copy())

    def append(self, g: Gaussian):
        if np.asarray(g.semantic).size != self.semantic_dim:
            raise ValueError("semantic dimension mismatch")
        self.positions = np.vstack([self.positions, np.asarray(g.position, dtype=np.float64)])
        self.log_scales = np.vstack([self.log_scales, np.asarray(g.log_scale, dtype=np.float64)])
        self.rotations = np.vstack([self.rotations, np.asarray(g.rotation, dtype=np.float64)])
        self.opacity_logits = np.append(self.opacity_logits, float(g.opacity_logit))
        self.colors = np.vstack([self.colors, np.asarray(g.color, dtype=np.float64)])
        self.semantics = np.vstack([self.semantics, np.asarray(g.semantic, dtype=np.float64)])

    def copy(self):
        return Scene(self.positions.copy(), self.log_scales.copy(),
                     self.rotations.copy(), self.opacity_logits.copy(),
                     self.colors.copy(), self.semantics.copy(),
                     self.background_color.copy(), self.class_count)

    def replace_semantics(self, semantics):
        """Scene sharing geometry/appearance but with different per-Gaussian
        feature vectors (used e.g. to render indicator channels)."""
        return Scene(self.positions, self.log_scales, self.rotations,
                     self.opacity_logits, self.colors,
                     np.asarray(semantics, dtype=np.float64),
                     self.background_color, self.class_count)


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Convention: camera looks down +z in camera space; a world point maps to
    cam = R @ p + t and projects to (fx*x/z + cx, fy*y/z + cy) in pixels,
    with the origin at the top-left image corner and pixel centers at
    integer + 0.5 coordinates.
    """

    focal: np.ndarray          # (fx, fy) in pixels
    principal_point: np.ndarray  # (cx, cy) in pixels
    width: int
    height: int
    rotation: np.ndarray       # (3, 3) world-to-camera rotation
    translation: np.ndarray    # (3,)
    near_clip: float = DEFAULT_NEAR_CLIP

    def __post_init__(self):
        self.focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be >= 1")
        if self.near_clip <= 0.0:
            raise ValueError("near_clip must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max error {err:.2e})")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, scale):
        """Camera rendering the same frustum at a different resolution."""
        w = max(1, int(round(self.width * scale)))
        h = max(1, int(round(self.height * scale)))
        sx = w / self.width
        sy = h / self.height
        return Camera(self.focal * (sx, sy), self.principal_point * (sx, sy),
                      w, h, self.rotation.copy(), self.translation.copy(),
                      self.near_clip)


def look_at_camera(position, target, focal, width, height, up=(0.0, 0.0, 1.0),
                   near_clip=DEFAULT_NEAR_CLIP):
    """Camera at `position` looking toward `target`, principal point centered."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise ValueError("camera position coincides with target")
    z_axis = forward / norm
    x_axis = np.cross(z_axis, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x_axis)
    if xn < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x_axis = x_axis / xn
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis])
    t = -R @ position
    focal = np.broadcast_to(np.asarray(focal, dtype=np.float64), (2,))
    return Camera(focal, (width / 2.0, height / 2.0), width, height, R, t,
                  near_clip)


@dataclass
class Splat2D:
    """Screen-space footprint of one projected Gaussian."""

    mean2d: np.ndarray       # (2,) pixels
    conic: np.ndarray        # (a, b, c): inverse 2D covariance, upper triangle
    depth: float             # camera-space z
    source_index: int
    screen_radius: float     # cutoff radius in pixels


def project_arrays(positions, log_scales, rotations, camera):
    """Vectorized EWA projection of many Gaussians into one camera.

    Returns (valid, mean2d, conic, depth, radius) over the input rows; rows
    with valid == False carry unspecified values in the other arrays.
    """
    n = positions.shape[0]
    valid = np.zeros(n, dtype=bool)
    mean2d = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    depth = np.zeros(n)
    radius = np.zeros(n)
    if n == 0:
        return valid, mean2d, conic, depth, radius

    R = camera.rotation
    cam = positions @ R.T + camera.translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    front = z > camera.near_clip
    depth[:] = z
    if not np.any(front):
        return valid, mean2d, conic, depth, radius

    fx, fy = camera.focal
    cx, cy = camera.principal_point
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = np.where(front, 1.0 / z, 0.0)
    mean2d[:, 0] = fx * x * inv_z + cx
    mean2d[:, 1] = fy * y * inv_z + cy

    cov3d = build_covariance(np.exp(log_scales), rotations)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * x * inv_z * inv_z
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * y * inv_z * inv_z
    M = J @ R
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius[:] = RADIUS_MULTIPLIER * np.sqrt(np.maximum(lam_max, 0.0))

    ok = front & (det > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_det = np.where(ok, 1.0 / det, 0.0)
    conic[:, 0] = c * inv_det
    conic[:, 1] = -b * inv_det
    conic[:, 2] = a * inv_det

    on_screen = ((mean2d[:, 0] + radius >= 0.0) & (mean2d[:, 0] - radius <= camera.width) &
                 (mean2d[:, 1] + radius >= 0.0) & (mean2d[:, 1] - radius <= camera.height))
    valid[:] = ok & on_screen
    return valid, mean2d, conic, depth, radius


def project(gaussian: Gaussian, camera: Camera):
    """Project one Gaussian; returns a Splat2D or None when culled.

    Culling (depth <= near_clip, or the cutoff disc missing the image
    rectangle) is expressed as absence, not as an error.
    """
    valid, mean2d, conic, depth, radius = project_arrays(
        np.asarray(gaussian.position, dtype=np.float64).reshape(1, 3),
        np.asarray(gaussian.log_scale, dtype=np.float64).reshape(1, 3),
        np.asarray(gaussian.rotation, dtype=np.float64).reshape(1, 4),
        camera)
    if not valid[0]:
        return None
    return Splat2D(mean2d[0], conic[0], float(depth[0]), 0, float(radius[0]))


def project_scene(scene: Scene, camera: Camera):
    """Project all Gaussians of a scene; rows are scene indices."""
    return project_arrays(scene.positions, scene.log_scales, scene.rotations,
                          camera)


# ---------------------------------------------------------------------------
# SGS1 scene file format: text header "SGS1 <count> <d> <C>", then one
# whitespace-separated record per Gaussian:
#   3 position, 3 log-scale, 4 quaternion, 1 opacity logit, 3 color, d semantic
# ---------------------------------------------------------------------------

def save_scene(scene: Scene, path):
    with open(path, "w") as f:
        f.write(f"SGS1 {len(scene)} {scene.semantic_dim} {scene.class_count}\n")
        for i in range(len(scene)):
            rec = np.concatenate([
                scene.positions[i], scene.log_scales[i], scene.rotations[i],
                [scene.opacity_logits[i]], scene.colors[i], scene.semantics[i]])
            f.write(" ".join(repr(float(v)) for v in rec) + "\n")


def load_scene(path, background_color=(0.0, 0.0, 0.0)):
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "SGS1":
            raise ValueError(f"{path}: not an SGS1 file")
        count, d, c = int(header[1]), int(header[2]), int(header[3])
        values = f.read().split()
    per_record = 14 + d
    if len(values) != count * per_record:
        raise ValueError(f"{path}: expected {count} records of {per_record} values, "
                         f"got {len(values)} values")
    if count == 0:
        return Scene.empty(semantic_dim=d, background_color=background_color,
                           class_count=c)
    data = np.array(values, dtype=np.float64).reshape(count, per_record)
    return Scene(data[:, 0:3], data[:, 3:6], data[:, 6:10], data[:, 10],
                 data[:, 11:14], data[:, 14:], background_color, c)
