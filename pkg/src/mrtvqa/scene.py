"""Procedural scene sampling and orbit-camera geometry.

World frame (pinned): right-handed, z up, ground plane z = 0. The canonical
camera sits on the -y axis at azimuth 0, elevation 30 degrees, radius 7.5,
looking at the origin. With that convention the canonical right vector is
+x and the ground-projected forward vector is +y, which fixes the meaning
of left/right/front/behind for the answer oracle.

Raw camera form c = (theta_x, theta_y, theta_z, tx, ty, tz): Euler angles of
the camera-to-world rotation under the R = Rz Ry Rx composition, plus the
camera position in world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import SHAPES, COLORS, SIZES, MATERIALS

SIZE_RADIUS = {"small": 0.35, "large": 0.7}
PLACEMENT_LIMIT = 3.0
PLACEMENT_MARGIN = 0.1
AXIS_SEPARATION = 0.05  # no two objects may nearly tie along x or y
CANONICAL_AZIMUTH = 0.0
CANONICAL_ELEVATION = 30.0
ORBIT_RADIUS = 7.5


class GenerationError(RuntimeError):
    """Placement sampling exhausted its attempt budget."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    material: str
    x: float
    y: float

    @property
    def radius(self):
        return SIZE_RADIUS[self.size]

    @property
    def z(self):
        return self.radius  # objects rest on the ground plane

    @property
    def position(self):
        return np.array([self.x, self.y, self.z])


def _deg2rad(a):
    return a * np.pi / 180.0


def rotation_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rotation_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rotation_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def matrix_to_euler_zyx(R):
    """Angles (ax, ay, az) with R = Rz(az) @ Ry(ay) @ Rx(ax).

    Elevations here stay well away from the gimbal singularity at |ay|=90.
    """
    ay = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(R[2, 0]) < 1.0 - 1e-9:
        ax = np.arctan2(R[2, 1], R[2, 2])
        az = np.arctan2(R[1, 0], R[0, 0])
    else:
        ax = np.arctan2(-R[1, 2], R[1, 1])
        az = 0.0
    return float(ax), float(ay), float(az)


@dataclass(frozen=True)
class CameraPose:
    azimuth: float  # degrees
    elevation: float  # degrees
    radius: float = ORBIT_RADIUS

    def position(self):
        az, el = _deg2rad(self.azimuth), _deg2rad(self.elevation)
        ce = np.cos(el)
        return np.array(
            [self.radius * ce * np.sin(az), -self.radius * ce * np.cos(az), self.radius * np.sin(el)]
        )

    def basis(self):
        """(right, up, forward) unit vectors; forward points at the origin."""
        pos = self.position()
        fwd = -pos / np.linalg.norm(pos)
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def rotation_c2w(self):
        """Camera-to-world rotation; the camera looks along its -z axis."""
        right, up, fwd = self.basis()
        return np.stack([right, up, -fwd], axis=1)

    def raw6(self):
        """c = (theta_x, theta_y, theta_z, tx, ty, tz) in world coordinates."""
        ax, ay, az = matrix_to_euler_zyx(self.rotation_c2w())
        pos = self.position()
        return np.array([ax, ay, az, pos[0], pos[1], pos[2]], dtype=np.float64)


CANONICAL_CAMERA = CameraPose(CANONICAL_AZIMUTH, CANONICAL_ELEVATION, ORBIT_RADIUS)


@dataclass
class SceneGraph:
    scene_id: int
    objects: list
    canonical: CameraPose = field(default_factory=lambda: CANONICAL_CAMERA)
    seed: int = 0

    def __post_init__(self):
        if not (1 <= len(self.objects)):
            raise ValueError("scene must contain at least one object")


@dataclass
class GenConfig:
    min_objects: int = 3
    max_objects: int = 6
    sizes: tuple = ("large",)  # v1 keeps all objects large; v2 adds small
    max_attempts: int = 1000

    def validate(self):
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError(f"bad object count bounds {self.min_objects}..{self.max_objects}")
        for s in self.sizes:
            if s not in SIZES:
                raise ValueError(f"unknown size {s!r}")
        return self


def _placement_ok(x, y, radius, placed):
    if abs(x) > PLACEMENT_LIMIT or abs(y) > PLACEMENT_LIMIT:
        return False
    for other in placed:
        dx, dy = x - other.x, y - other.y
        if np.hypot(dx, dy) < radius + other.radius + PLACEMENT_MARGIN:
            return False
        # near-ties along either canonical axis would make relations ambiguous
        if abs(dx) < AXIS_SEPARATION or abs(dy) < AXIS_SEPARATION:
            return False
    return True


def generate_scene(rng, config, scene_id=0):
    """Rejection-sample object placements until the no-overlap invariant holds."""
    config.validate()
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        size = config.sizes[rng.integers(len(config.sizes))]
        material = MATERIALS[rng.integers(len(MATERIALS))]
        radius = SIZE_RADIUS[size]
        for attempt in range(config.max_attempts):
            x = float(rng.uniform(-PLACEMENT_LIMIT, PLACEMENT_LIMIT))
            y = float(rng.uniform(-PLACEMENT_LIMIT, PLACEMENT_LIMIT))
            if _placement_ok(x, y, radius, objects):
                objects.append(SceneObject(shape, color, size, material, x, y))
                break
        else:
            raise GenerationError(
                f"could not place object {len(objects) + 1}/{n} after {config.max_attempts} attempts"
            )
    return SceneGraph(scene_id=scene_id, objects=objects)


def sample_views(scene, n_views, mode, rng):
    """Orbiting viewpoint cameras: azimuth uniform; elevation fixed at 30
    degrees (v1) or uniform in [20, 30] (v2)."""
    if mode not in ("v1", "v2"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    if n_views < 2:
        raise ValueError("need at least two views per scene (contrastive pairs)")
    poses = []
    for _ in range(n_views):
        az = float(rng.uniform(0.0, 360.0))
        el = CANONICAL_ELEVATION if mode == "v1" else float(rng.uniform(20.0, 30.0))
        poses.append(CameraPose(az, el, ORBIT_RADIUS))
    return poses
