"""Scenario presets: teach paths built from curvature profiles and corridor worlds around them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Trajectory, quat_from_euler
from .world import NEVER, Material, SmokeRegion, World, frame_rng

SENSOR_HEIGHT = 1.0

MATERIALS = (
    Material("concrete", 0.35, 0.60),
    Material("brick", 0.55, 1.30),
    Material("metal", 0.90, 2.60),
    Material("glass", 0.15, 0.20),
    Material("wood", 0.45, 0.70),
    Material("asphalt", 0.10, 0.25),
)
GROUND_MATERIAL = 5


@dataclass(frozen=True)
class PathSpec:
    """Piecewise path: ``("straight", length)`` or ``("turn", angle_deg, length)`` segments.

    Turns use a ``sin^2`` curvature profile so curvature is zero at both ends and
    peaks at the apex.
    """

    segments: tuple
    start: tuple = (0.0, 0.0, 0.0)  # x, y, yaw (deg)

    @property
    def length(self) -> float:
        return float(sum(s[1] if s[0] == "straight" else s[2] for s in self.segments))


def curvature_profile(spec: PathSpec, s: np.ndarray) -> np.ndarray:
    kappa = np.zeros_like(s)
    s0 = 0.0
    for seg in spec.segments:
        if seg[0] == "straight":
            L = seg[1]
        else:
            ang, L = np.deg2rad(seg[1]), seg[2]
            m = (s >= s0) & (s < s0 + L)
            kappa[m] = 2.0 * ang / L * np.sin(np.pi * (s[m] - s0) / L) ** 2
        s0 += L
    return kappa


def centerline(spec: PathSpec, ds: float = 0.005):
    """Dense ``(s, xy, yaw)`` by trapezoidal integration of the curvature profile."""
    n = int(np.ceil(spec.length / ds)) + 1
    s = np.linspace(0.0, spec.length, n)
    k = curvature_profile(spec, s)
    h = s[1] - s[0]
    yaw = np.deg2rad(spec.start[2]) + np.concatenate([[0.0], np.cumsum(0.5 * (k[1:] + k[:-1]) * h)])
    c, si = np.cos(yaw), np.sin(yaw)
    x = spec.start[0] + np.concatenate([[0.0], np.cumsum(0.5 * (c[1:] + c[:-1]) * h)])
    y = spec.start[1] + np.concatenate([[0.0], np.cumsum(0.5 * (si[1:] + si[:-1]) * h)])
    return s, np.stack([x, y], axis=1), yaw


def sample_path(spec: PathSpec, world: World | None = None, speed: float = 1.2, rate: float = 10.0) -> Trajectory:
    """Constant-speed odometry along the path at ``rate`` Hz."""
    s_d, xy_d, yaw_d = centerline(spec)
    n = int(np.floor(spec.length / speed * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    s = np.minimum(t * speed, spec.length)
    x = np.interp(s, s_d, xy_d[:, 0])
    y = np.interp(s, s_d, xy_d[:, 1])
    yaw = np.interp(s, s_d, yaw_d)
    z = (world.ground_height(x) if world is not None else np.zeros(n)) + SENSOR_HEIGHT
    quat = np.array([quat_from_euler(a) for a in yaw])
    return Trajectory(t, np.stack([x, y, z], axis=1), quat)


@dataclass
class _Builder:
    centers: list = field(default_factory=list)
    normals: list = field(default_factory=list)
    extents: list = field(default_factory=list)
    mats: list = field(default_factory=list)
    added: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    vel: list = field(default_factory=list)

    def add(self, c, n, r, m, added=0, removed=NEVER, vel=(0.0, 0.0, 0.0)):
        n = np.asarray(n, float)
        self.centers.append(np.asarray(c, float))
        self.normals.append(n / np.linalg.norm(n))
        self.extents.append(float(r))
        self.mats.append(int(m))
        self.added.append(int(added))
        self.removed.append(int(removed))
        self.vel.append(np.asarray(vel, float))

    def panel(self, p0, p1, z0, z1, normal_xy, m, spacing=1.0, **kw):
        """Vertical rectangle between ``p0`` and ``p1`` tiled by overlapping discs."""
        p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
        L = np.linalg.norm(p1 - p0)
        nu = max(1, int(np.ceil(L / spacing)))
        nz = max(1, int(np.ceil((z1 - z0) / spacing)))
        r = 0.75 * max(L / nu, (z1 - z0) / nz)
        n3 = np.array([normal_xy[0], normal_xy[1], 0.0])
        for i in range(nu):
            p = p0 + (i + 0.5) / nu * (p1 - p0)
            for j in range(nz):
                self.add([p[0], p[1], z0 + (j + 0.5) * (z1 - z0) / nz], n3, r, m, **kw)

    def box(self, cx, cy, sx, sy, z0, z1, m, **kw):
        hx, hy = sx / 2, sy / 2
        self.panel((cx + hx, cy - hy), (cx + hx, cy + hy), z0, z1, (1, 0), m, spacing=0.6, **kw)
        self.panel((cx - hx, cy - hy), (cx - hx, cy + hy), z0, z1, (-1, 0), m, spacing=0.6, **kw)
        self.panel((cx - hx, cy + hy), (cx + hx, cy + hy), z0, z1, (0, 1), m, spacing=0.6, **kw)
        self.panel((cx - hx, cy - hy), (cx + hx, cy - hy), z0, z1, (0, -1), m, spacing=0.6, **kw)

    def build(self, smoke=(), terrain=None, name="world", meta=None) -> World:
        return World(MATERIALS, np.array(self.centers).reshape(-1, 3), np.array(self.normals).reshape(-1, 3),
                     self.extents, self.mats, self.added, self.removed, np.array(self.vel).reshape(-1, 3),
                     smoke, terrain, name, meta)


def _ground_z(terrain, x):
    return np.interp(x, terrain["x"], terrain["z"])


def corridor_world(spec: PathSpec, seed: int = 0, width: float = 6.0, height: float = 3.0,
                   wall_spacing: float = 1.0, material_run: float = 8.0, features: bool = True,
                   terrain=None, name="corridor", narrow: tuple | None = None) -> tuple[World, _Builder]:
    """Walls on both sides of the path plus a ground strip and scattered boxes.

    ``narrow`` optionally gives ``(s0, s1, width)`` for a narrow passage.
    Returns the world and its builder so callers can append scene elements.
    """
    terrain = terrain or {"x": [-1e6, 1e6], "z": [0.0, 0.0]}
    rng = frame_rng(seed, 77)
    s_d, xy_d, yaw_d = centerline(spec)
    b = _Builder()
    n_steps = int(np.floor(spec.length / wall_spacing))
    run_mats = rng.integers(0, 5, size=int(spec.length / material_run) + 2)
    for side in (+1, -1):
        run_mats_side = np.roll(run_mats, 1 if side > 0 else 0)
        for i in range(n_steps + 1):
            s = min(i * wall_spacing, spec.length)
            k = min(int(round(s / (s_d[1] - s_d[0]))), len(s_d) - 1)
            half = width / 2
            if narrow is not None and narrow[0] <= s <= narrow[1]:
                half = narrow[2] / 2
            yaw = yaw_d[k]
            left = np.array([-np.sin(yaw), np.cos(yaw)])
            p = xy_d[k] + side * half * left
            gz = float(_ground_z(terrain, p[0]))
            m = int(run_mats_side[int(s // material_run)])
            for j in range(int(np.ceil(height / wall_spacing))):
                z = gz + (j + 0.5) * wall_spacing
                b.add([p[0], p[1], z], [*(-side * left), 0.0], 0.75 * wall_spacing, m)
    # ground strip
    g_step = 1.5
    for i in range(int(spec.length / g_step) + 1):
        s = i * g_step
        k = min(int(round(s / (s_d[1] - s_d[0]))), len(s_d) - 1)
        yaw = yaw_d[k]
        left = np.array([-np.sin(yaw), np.cos(yaw)])
        for off in np.arange(-width / 2 + 0.75, width / 2, g_step):
            p = xy_d[k] + off * left
            gz = float(_ground_z(terrain, p[0]))
            slope = float((_ground_z(terrain, p[0] + 0.05) - _ground_z(terrain, p[0] - 0.05)) / 0.1)
            b.add([p[0], p[1], gz], [-slope, 0.0, 1.0] / np.sqrt(1 + slope**2), 1.1, GROUND_MATERIAL)
    if features:
        # boxes tucked against the walls, clear of the driving lane
        s = 4.0 + rng.uniform(0, 3)
        while s < spec.length - 2:
            k = min(int(round(s / (s_d[1] - s_d[0]))), len(s_d) - 1)
            yaw = yaw_d[k]
            left = np.array([-np.sin(yaw), np.cos(yaw)])
            side = 1 if rng.random() < 0.5 else -1
            half = width / 2
            if narrow is not None and narrow[0] - 3 <= s <= narrow[1] + 3:
                s += 6.0
                continue
            sz = rng.uniform(0.4, 0.8)
            c = xy_d[k] + side * (half - sz / 2 - 0.1) * left
            gz = float(_ground_z(terrain, c[0]))
            b.box(c[0], c[1], sz, sz, gz, gz + rng.uniform(0.8, 2.0), int(rng.integers(0, 5)))
            s += rng.uniform(4.0, 9.0)
    if np.linalg.norm(xy_d[-1] - xy_d[0]) > 20.0:
        # close open corridors with end walls a few metres past each end
        for k, sgn in ((0, -1.0), (len(s_d) - 1, 1.0)):
            fwd = np.array([np.cos(yaw_d[k]), np.sin(yaw_d[k])])
            left = np.array([-fwd[1], fwd[0]])
            c = xy_d[k] + sgn * 3.0 * fwd
            gz = float(_ground_z(terrain, c[0]))
            b.panel(c - width / 2 * left, c + width / 2 * left, gz, gz + height, -sgn * fwd, 0)
    return b.build(terrain=terrain, name=name), b


# ------------------------------------------------------------ presets

def straight_spec(length: float = 50.0) -> PathSpec:
    return PathSpec((("straight", length),))


def loop_spec() -> PathSpec:
    """200 m rectangular loop with tight corners that stops 4 m short of its start."""
    return PathSpec((("straight", 62.0), ("turn", 90.0, 6.0), ("straight", 20.0), ("turn", 90.0, 6.0),
                     ("straight", 70.0), ("turn", 90.0, 6.0), ("straight", 20.0), ("turn", 90.0, 6.0),
                     ("straight", 4.0)))


def add_partition(b: _Builder, spec: PathSpec, s_at: float, width: float = 6.0, door: float = 1.2,
                  height: float = 3.0, material: int = 2) -> None:
    """Two-faced wall across the corridor at arclength ``s_at`` with a doorway on the path."""
    s_d, xy_d, yaw_d = centerline(spec)
    k = int(round(s_at / (s_d[1] - s_d[0])))
    yaw = yaw_d[k]
    fwd = np.array([np.cos(yaw), np.sin(yaw)])
    left = np.array([-fwd[1], fwd[0]])
    c = xy_d[k]
    for face, off in ((-1, -0.05), (1, 0.05)):
        base = c + off * fwd
        for sgn in (1, -1):
            b.panel(base + sgn * door / 2 * left, base + sgn * width / 2 * left, 0.0, height, face * fwd,
                    material, spacing=0.5)
        b.panel(base - door / 2 * left, base + door / 2 * left, 2.2, height, face * fwd, material, spacing=0.4)


def loop_world(seed: int = 0, partition_at: float | None = 30.0) -> tuple[World, PathSpec]:
    spec = loop_spec()
    _, b = corridor_world(spec, seed, name="loop")
    if partition_at is not None:
        add_partition(b, spec, partition_at)
    return b.build(name="loop"), spec


def smoke_world(seed: int = 0, length: float = 60.0, smoke_span=(20.0, 40.0), dropout: float = 0.9,
                attenuation: float = 60.0) -> tuple[World, PathSpec]:
    spec = straight_spec(length)
    _, b = corridor_world(spec, seed, name="smoke")
    smoke = [SmokeRegion((smoke_span[0], -3.5, -0.5), (smoke_span[1], 3.5, 4.0), attenuation, dropout, (1, NEVER))]
    return b.build(smoke=smoke, name="smoke"), spec


def change_world(seed: int = 0, length: float = 150.0, span=(45.0, 105.0), epoch: int = 1) -> tuple[World, PathSpec]:
    """Straight corridor where a 60 m stretch of one wall is fronted by new hoarding at ``epoch``."""
    spec = straight_spec(length)
    _, b = corridor_world(spec, seed, name="change")
    rng = frame_rng(seed, 91)
    x = span[0]
    while x < span[1]:
        w = rng.uniform(1.5, 3.0)
        depth = rng.uniform(0.3, 0.6)
        b.box(x + w / 2, -2.1 + depth / 2 - 0.6, w, depth, 0.0, rng.uniform(1.0, 1.8), int(rng.integers(0, 5)),
              added=epoch)
        x += w + rng.uniform(0.3, 1.2)
    return b.build(name="change", meta={"change_span": list(span), "change_epoch": epoch}), spec


def slope_world(seed: int = 0) -> tuple[World, PathSpec]:
    """Corridor with a 6 % ramp and a tight turn at its top."""
    spec = PathSpec((("straight", 20.0), ("straight", 25.0), ("turn", 90.0, 8.0), ("straight", 20.0)))
    terrain = {"x": [-1e6, 20.0, 45.0, 1e6], "z": [0.0, 0.0, 1.5, 1.5]}
    _, b = corridor_world(spec, seed, terrain=terrain, name="slope")
    return b.build(terrain=terrain, name="slope"), spec


def campus_world(seed: int = 0) -> tuple[World, PathSpec]:
    """Loop with a ramp, a narrow passage, a doorway and moving clutter."""
    spec = loop_spec()
    terrain = {"x": [-1e6, 10.0, 25.0, 1e6], "z": [0.0, 0.0, 0.75, 0.75]}
    _, b = corridor_world(spec, seed, narrow=(110.0, 125.0, 3.6), terrain=terrain, name="campus")
    add_partition(b, spec, 30.0)
    rng = frame_rng(seed, 13)
    s_d, xy_d, yaw_d = centerline(spec)
    for _ in range(6):
        s = rng.uniform(140.0, 190.0)
        k = int(round(s / (s_d[1] - s_d[0])))
        c = xy_d[k]
        v = rng.uniform(-0.6, 0.6, 2)
        for face in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            p = c + 0.25 * np.array(face)
            b.add([p[0], p[1], 0.9], [face[0], face[1], 0.0], 0.35, 4, added=1, vel=(v[0], v[1], 0.0))
    return b.build(terrain=terrain, name="campus"), spec


PRESETS = {
    "corridor": lambda seed: (lambda w, s: (w, s))(*_corridor_preset(seed)),
    "loop": lambda seed: loop_world(seed),
    "smoke": lambda seed: smoke_world(seed),
    "change": lambda seed: change_world(seed),
    "slope": lambda seed: slope_world(seed),
    "campus": lambda seed: campus_world(seed),
}


def _corridor_preset(seed):
    spec = straight_spec(50.0)
    w, _ = corridor_world(spec, seed)
    return w, spec


def make_preset(name: str, seed: int = 0) -> tuple[World, PathSpec]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    world, spec = PRESETS[name](seed)
    world.meta["path"] = [list(s) for s in spec.segments]
    world.meta["path_start"] = list(spec.start)
    world.meta["preset"] = name
    return world, spec


def spec_from_world(world: World) -> PathSpec:
    segs = tuple(tuple(s) for s in world.meta["path"])
    return PathSpec(segs, tuple(world.meta.get("path_start", (0.0, 0.0, 0.0))))
