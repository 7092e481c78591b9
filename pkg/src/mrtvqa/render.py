"""Per-pixel ray-cast renderer for the three primitive shapes.

Pinhole perspective projection, z-buffered analytic ray intersections,
Lambertian shading from a single centered overhead light with a specular
highlight for metal. The ground plane and background are uniform colors so
the backdrop carries no azimuth cues. No shadows.
"""

from __future__ import annotations

import numpy as np

from .scene import SceneObject

FOV_DEGREES = 50.0
LIGHT_POS = np.array([0.0, 0.0, 10.0])
GROUND_COLOR = np.array([0.58, 0.58, 0.58])
BACKGROUND_COLOR = np.array([0.80, 0.80, 0.80])
AMBIENT = 0.35
DIFFUSE = 0.65

RGB = {
    "gray": (87, 87, 87),
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "brown": (129, 74, 25),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "yellow": (255, 238, 51),
}

_INF = np.inf


def _ray_directions(camera, H, W):
    """World-space unit ray directions for every pixel center."""
    tan_half = np.tan(np.deg2rad(FOV_DEGREES) / 2.0)
    aspect = W / H
    xs = (2.0 * (np.arange(W) + 0.5) / W - 1.0) * tan_half * aspect
    ys = (1.0 - 2.0 * (np.arange(H) + 0.5) / H) * tan_half
    dirs_cam = np.empty((H, W, 3))
    dirs_cam[..., 0] = xs[None, :]
    dirs_cam[..., 1] = ys[:, None]
    dirs_cam[..., 2] = -1.0
    R = camera.rotation_c2w()
    dirs = dirs_cam @ R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs.reshape(-1, 3)


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    b = (d * oc).sum(axis=1)
    c = (oc * oc).sum() - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(hit & (t > 1e-6), t, _INF)
    p = o + t[:, None] * d
    n = (p - center) / radius
    return t, n


def _intersect_box(o, d, center, half):
    """Axis-aligned slab intersection with entry-face normals."""
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t1 = (lo - o) * inv
    t2 = (hi - o) * inv
    tin = np.minimum(t1, t2)
    tout = np.maximum(t1, t2)
    tnear = tin.max(axis=1)
    tfar = tout.min(axis=1)
    hit = (tnear <= tfar) & (tfar > 1e-6) & (tnear > 1e-6)
    t = np.where(hit, tnear, _INF)
    axis = np.argmax(tin, axis=1)
    n = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _intersect_cylinder(o, d, center, radius, half_h):
    """Vertical cylinder: quadratic side surface plus the two caps."""
    ox, oy = o[0] - center[0], o[1] - center[1]
    dx, dy = d[:, 0], d[:, 1]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - a * c
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_side = np.where(ok, (-b - sq) / np.where(a > 1e-12, a, 1.0), _INF)
    z_side = o[2] + t_side * d[:, 2]
    side_hit = ok & (t_side > 1e-6) & (np.abs(z_side - center[2]) <= half_h)
    t_side = np.where(side_hit, t_side, _INF)

    best_t = t_side
    n = np.zeros_like(d)
    p = o + t_side[:, None] * d
    n[:, 0] = np.where(side_hit, (p[:, 0] - center[0]) / radius, 0.0)
    n[:, 1] = np.where(side_hit, (p[:, 1] - center[1]) / radius, 0.0)

    dz = d[:, 2]
    for zcap, ncap in ((center[2] + half_h, 1.0), (center[2] - half_h, -1.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cap = (zcap - o[2]) / dz
        px = o[0] + t_cap * dx - center[0]
        py = o[1] + t_cap * dy - center[1]
        cap_hit = (np.abs(dz) > 1e-12) & (t_cap > 1e-6) & (px * px + py * py <= radius * radius)
        better = cap_hit & (t_cap < best_t)
        best_t = np.where(better, t_cap, best_t)
        n[better] = np.array([0.0, 0.0, ncap])
    return best_t, n


def _intersect_object(o, d, obj: SceneObject):
    r = obj.radius
    center = obj.position
    if obj.shape == "sphere":
        return _intersect_sphere(o, d, center, r)
    if obj.shape == "cube":
        return _intersect_box(o, d, center, np.array([r, r, r]))
    return _intersect_cylinder(o, d, center, r, r)


def _shade(points, normals, view_dirs, base_color, specular):
    to_light = LIGHT_POS - points
    to_light /= np.linalg.norm(to_light, axis=1, keepdims=True)
    lam = np.clip((normals * to_light).sum(axis=1), 0.0, None)
    rgb = base_color[None, :] * (AMBIENT + DIFFUSE * lam)[:, None]
    if specular:
        halfv = to_light - view_dirs
        halfv /= np.linalg.norm(halfv, axis=1, keepdims=True)
        spec = np.clip((normals * halfv).sum(axis=1), 0.0, None) ** 32
        rgb += 0.45 * spec[:, None]
    return rgb


def render_view(scene, camera, dims=(64, 64)):
    """Rasterize one view to an (H, W, 3) uint8 image."""
    H, W = dims
    if H < 32 or W < 32:
        raise ValueError(f"render dims must be >= 32x32, got {dims}")
    origin = camera.position()
    d = _ray_directions(camera, H, W)
    n_rays = d.shape[0]

    best_t = np.full(n_rays, _INF)
    rgb = np.broadcast_to(BACKGROUND_COLOR, (n_rays, 3)).copy()

    # uniform ground plane z=0 (unshaded: the backdrop must carry no cues)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -origin[2] / d[:, 2]
    ground_hit = (d[:, 2] < -1e-12) & (t_ground > 1e-6)
    best_t = np.where(ground_hit, t_ground, best_t)
    rgb[ground_hit] = GROUND_COLOR

    for obj in scene.objects:
        t, n = _intersect_object(origin, d, obj)
        closer = t < best_t
        if not closer.any():
            continue
        idx = np.where(closer)[0]
        p = origin + t[idx, None] * d[idx]
        base = np.array(RGB[obj.color], dtype=np.float64) / 255.0
        rgb[idx] = _shade(p, n[idx], d[idx], base, specular=(obj.material == "metal"))
        best_t = np.where(closer, t, best_t)

    img = np.clip(rgb, 0.0, 1.0).reshape(H, W, 3)
    return (img * 255.0).round().astype(np.uint8)
