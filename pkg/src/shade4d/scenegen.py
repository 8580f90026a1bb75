"""Synthetic dynamic scenes: analytic ground truth plus dataset I/O.

Scenes are a few moving spheres/boxes under Lambertian shading, ray-traced
in closed form, so training targets carry no approximation error. Datasets
use the synthetic-NeRF directory convention (transforms_train.json + PNG
frames) with a `time` field per frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .renderer import Camera, generate_rays, read_png, write_png

ORBIT_RADIUS = 4.0
DEFAULT_FOV_X = 0.6911


@dataclass
class MotionTrack:
    """Center position as a function of t in [0,1].

    sinusoid: base + amplitude * sin(pi*t) -- returns to base at t=1, so the
    canonical configuration (t=1) is the rest pose. linear: piecewise-linear
    through (knot_times, knot_positions). static: base everywhere.
    """

    kind: str = "static"
    base: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    knot_times: tuple = ()
    knot_positions: tuple = ()

    def position(self, t: float) -> np.ndarray:
        base = np.asarray(self.base, dtype=float)
        if self.kind == "static":
            return base
        if self.kind == "sinusoid":
            return base + np.asarray(self.amplitude) * np.sin(np.pi * t)
        if self.kind == "linear":
            kt = np.asarray(self.knot_times, dtype=float)
            kp = np.asarray(self.knot_positions, dtype=float)
            if kt.ndim != 1 or kp.shape != (len(kt), 3) or len(kt) < 2:
                raise ValueError("MotionTrack: linear track needs >=2 knots")
            return np.array([np.interp(t, kt, kp[:, i]) for i in range(3)])
        raise ValueError(f"MotionTrack: unknown kind {self.kind!r}")


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    albedo: tuple
    size: float | tuple  # sphere radius, or box half-extents (3,)
    track: MotionTrack = field(default_factory=MotionTrack)

    def extent(self) -> np.ndarray:
        if self.kind == "sphere":
            return np.full(3, float(self.size))
        return np.asarray(self.size, dtype=float)


@dataclass
class SceneSpec:
    primitives: list
    light_dir: tuple = (0.4, -0.3, 0.8)
    background: tuple = (1.0, 1.0, 1.0)
    phong: bool = False  # optional specular lobe, exponent 32
    phong_strength: float = 0.4

    def validate(self) -> None:
        """All primitives must stay inside [-1,1]^3 over the whole motion."""
        for i, prim in enumerate(self.primitives):
            if prim.kind not in ("sphere", "box"):
                raise ValueError(f"SceneSpec: unknown primitive kind {prim.kind!r}")
            ext = prim.extent()
            for t in np.linspace(0.0, 1.0, 100):
                c = prim.track.position(t)
                if np.any(c - ext < -1.0) or np.any(c + ext > 1.0):
                    raise ValueError(
                        f"SceneSpec: primitive {i} leaves [-1,1]^3 at t={t:.3f}"
                    )


def toy_scene_spec() -> SceneSpec:
    """The standard desk-scale test scene: one swinging sphere, one static box."""
    return SceneSpec(
        primitives=[
            Primitive(
                kind="sphere",
                albedo=(0.85, 0.25, 0.2),
                size=0.32,
                track=MotionTrack(
                    kind="sinusoid",
                    base=(0.05, -0.05, 0.0),
                    amplitude=(0.35, 0.15, 0.0),
                ),
            ),
            Primitive(
                kind="box",
                albedo=(0.2, 0.45, 0.85),
                size=(0.18, 0.18, 0.18),
                track=MotionTrack(kind="static", base=(-0.45, 0.42, -0.35)),
            ),
        ],
    )


def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    depth = np.where(t0 > 1e-6, t0, t1)
    ok = hit & (depth > 1e-6)
    return np.where(ok, depth, np.inf)


def _intersect_box(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tn = np.nanmax(np.minimum(t1, t2), axis=1)
    tf = np.nanmin(np.maximum(t1, t2), axis=1)
    depth = np.where(tn > 1e-6, tn, tf)
    ok = (tn <= tf) & (depth > 1e-6)
    return np.where(ok, depth, np.inf)


def _box_normal(points, center, ext):
    rel = (points - center) / ext
    axis = np.argmax(np.abs(rel), axis=1)
    n = np.zeros_like(points)
    n[np.arange(len(points)), axis] = np.sign(
        rel[np.arange(len(points)), axis]
    )
    return n


def oracle_render(spec: SceneSpec, cam: Camera, t: float) -> np.ndarray:
    """Analytic render of the scene at time t. Returns (H,W,3) in [0,1]."""
    origins, dirs = generate_rays(cam)
    n = origins.shape[0]
    best_depth = np.full(n, np.inf)
    best_idx = np.full(n, -1)
    centers = [p.track.position(t) for p in spec.primitives]
    for i, prim in enumerate(spec.primitives):
        if prim.kind == "sphere":
            depth = _intersect_sphere(origins, dirs, centers[i], float(prim.size))
        else:
            ext = prim.extent()
            depth = _intersect_box(origins, dirs, centers[i] - ext, centers[i] + ext)
        closer = depth < best_depth
        best_depth = np.where(closer, depth, best_depth)
        best_idx = np.where(closer, i, best_idx)

    out = np.tile(np.asarray(spec.background, dtype=float), (n, 1))
    light = np.asarray(spec.light_dir, dtype=float)
    light = light / np.linalg.norm(light)
    for i, prim in enumerate(spec.primitives):
        mask = best_idx == i
        if not np.any(mask):
            continue
        pts = origins[mask] + best_depth[mask, None] * dirs[mask]
        if prim.kind == "sphere":
            normals = (pts - centers[i]) / float(prim.size)
        else:
            normals = _box_normal(pts, centers[i], prim.extent())
        ndotl = np.clip(normals @ light, 0.0, None)
        shade = np.asarray(prim.albedo) * (0.2 + 0.8 * ndotl)[:, None]
        if spec.phong:
            refl = 2.0 * ndotl[:, None] * normals - light
            spec_term = np.clip(-np.einsum("ij,ij->i", refl, dirs[mask]), 0.0, None)
            shade = shade + spec.phong_strength * (spec_term**32)[:, None]
        out[mask] = np.clip(shade, 0.0, 1.0)
    return out.reshape(cam.height, cam.width, 3)


# -- dataset generation and loading -----------------------------------------


@dataclass
class FrameRecord:
    image_path: Path
    time: float
    c2w: np.ndarray


@dataclass
class SceneDataset:
    frames: list
    fov_x: float
    width: int
    height: int
    background: tuple = (1.0, 1.0, 1.0)

    def __len__(self) -> int:
        return len(self.frames)

    def camera(self, i: int) -> Camera:
        f = self.frames[i]
        return Camera(fov_x=self.fov_x, width=self.width, height=self.height, c2w=f.c2w)

    def load_image(self, i: int) -> np.ndarray:
        return read_png(self.frames[i].image_path, background=self.background)

    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])


def _orbit_camera(azimuth: float, elevation: float, radius: float = ORBIT_RADIUS):
    pos = radius * np.array(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ]
    )
    z = pos / np.linalg.norm(pos)  # camera +Z points away from the origin
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, pos
    return c2w


def _orbit_cameras(rng: np.random.Generator, n_views: int):
    azimuths = np.linspace(0.0, 2.0 * np.pi, n_views, endpoint=False)
    azimuths = azimuths + rng.uniform(-0.5, 0.5, size=n_views) * (np.pi / n_views)
    elevations = rng.uniform(np.deg2rad(15), np.deg2rad(50), size=n_views)
    return [_orbit_camera(a, e) for a, e in zip(azimuths, elevations)]


def _time_grid(n_times: int) -> np.ndarray:
    if n_times == 1:
        return np.array([1.0])  # single frame sits at the canonical time
    return np.linspace(0.0, 1.0, n_times)


def _write_split(
    spec, out_dir: Path, split: str, cams, times, width, height, fov_x
) -> list:
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    frames_meta = []
    idx = 0
    for cam_mtx in cams:
        cam = Camera(fov_x=fov_x, width=width, height=height, c2w=cam_mtx)
        for t in times:
            img = oracle_render(spec, cam, float(t))
            rel = f"./{split}/r_{idx}"
            write_png(out_dir / split / f"r_{idx}.png", img)
            frames_meta.append(
                {
                    "file_path": rel,
                    "time": float(t),
                    "transform_matrix": cam_mtx.tolist(),
                }
            )
            idx += 1
    meta = {"camera_angle_x": fov_x, "frames": frames_meta}
    with open(out_dir / f"transforms_{split}.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return frames_meta


def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "light_dir": list(spec.light_dir),
        "background": list(spec.background),
        "phong": spec.phong,
        "phong_strength": spec.phong_strength,
        "primitives": [
            {
                "kind": p.kind,
                "albedo": list(p.albedo),
                "size": p.size if isinstance(p.size, float) else list(p.size),
                "track": {
                    "kind": p.track.kind,
                    "base": list(p.track.base),
                    "amplitude": list(p.track.amplitude),
                    "knot_times": list(p.track.knot_times),
                    "knot_positions": [list(k) for k in p.track.knot_positions],
                },
            }
            for p in spec.primitives
        ],
    }


def spec_from_dict(d: dict) -> SceneSpec:
    prims = []
    for p in d["primitives"]:
        track = p.get("track", {})
        prims.append(
            Primitive(
                kind=p["kind"],
                albedo=tuple(p["albedo"]),
                size=p["size"] if isinstance(p["size"], (int, float)) else tuple(p["size"]),
                track=MotionTrack(
                    kind=track.get("kind", "static"),
                    base=tuple(track.get("base", (0, 0, 0))),
                    amplitude=tuple(track.get("amplitude", (0, 0, 0))),
                    knot_times=tuple(track.get("knot_times", ())),
                    knot_positions=tuple(
                        tuple(k) for k in track.get("knot_positions", ())
                    ),
                ),
            )
        )
    return SceneSpec(
        primitives=prims,
        light_dir=tuple(d.get("light_dir", (0.4, -0.3, 0.8))),
        background=tuple(d.get("background", (1.0, 1.0, 1.0))),
        phong=bool(d.get("phong", False)),
        phong_strength=float(d.get("phong_strength", 0.4)),
    )


def generate_dataset(
    spec: SceneSpec,
    n_views: int,
    n_times: int,
    image_size,
    seed: int,
    out_dir,
    n_test_views: int = 2,
    fov_x: float = DEFAULT_FOV_X,
) -> "SceneDataset":
    """Render and write a train split plus a held-out test split.

    Test cameras come from an independent seed substream, so datasets that
    differ only in n_views share the identical test views (fair sweeps).
    """
    if n_views < 1 or n_times < 1:
        raise ValueError("generate_dataset: need n_views >= 1 and n_times >= 1")
    spec.validate()
    width, height = (
        (int(image_size), int(image_size))
        if np.isscalar(image_size)
        else (int(image_size[0]), int(image_size[1]))
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    times = _time_grid(n_times)
    train_cams = _orbit_cameras(np.random.default_rng(train_ss), n_views)
    # offset test azimuths half a slot so they never coincide with train views
    test_rng = np.random.default_rng(test_ss)
    test_az = np.linspace(0.0, 2.0 * np.pi, max(n_test_views, 1), endpoint=False)
    test_az = test_az + np.pi / 7.0 + test_rng.uniform(-0.2, 0.2, size=len(test_az))
    test_el = test_rng.uniform(np.deg2rad(20), np.deg2rad(45), size=len(test_az))
    test_cams = [_orbit_camera(a, e) for a, e in zip(test_az, test_el)]

    _write_split(spec, out_dir, "train", train_cams, times, width, height, fov_x)
    if n_test_views > 0:
        _write_split(spec, out_dir, "test", test_cams, times, width, height, fov_x)
    with open(out_dir / "scene_spec.json", "w") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2)
    return load_dataset(out_dir, split="train", background=spec.background)


def load_dataset(root, split: str = "train", background=(1.0, 1.0, 1.0)) -> SceneDataset:
    """Read a transforms_<split>.json dataset.

    Camera-to-world matrices are OpenGL-style (camera looks down -Z); frame
    times are clamped to >=0 and normalized by the maximum if any exceed 1.
    """
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"load_dataset: missing {meta_path}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"load_dataset: malformed JSON in {meta_path}: {e}") from e
    if "camera_angle_x" not in meta:
        raise ValueError("load_dataset: metadata missing field 'camera_angle_x'")
    if "frames" not in meta or not meta["frames"]:
        raise ValueError("load_dataset: metadata missing or empty field 'frames'")

    frames = []
    for i, fr in enumerate(meta["frames"]):
        for key in ("file_path", "time", "transform_matrix"):
            if key not in fr:
                raise ValueError(f"load_dataset: frame {i} missing field '{key}'")
        rel = fr["file_path"]
        path = root / (rel if rel.endswith(".png") else rel + ".png")
        if not path.exists():
            raise FileNotFoundError(f"load_dataset: missing image {path}")
        c2w = np.asarray(fr["transform_matrix"], dtype=float)
        if c2w.shape != (4, 4):
            raise ValueError(
                f"load_dataset: frame {i} transform_matrix must be 4x4"
            )
        frames.append(FrameRecord(image_path=path, time=float(fr["time"]), c2w=c2w))

    times = np.array([f.time for f in frames])
    times = np.maximum(times, 0.0)
    if times.max() > 1.0:
        times = times / times.max()
    for f, t in zip(frames, times):
        f.time = float(t)

    first = read_png(frames[0].image_path)
    h, w = first.shape[:2]
    return SceneDataset(
        frames=frames,
        fov_x=float(meta["camera_angle_x"]),
        width=w,
        height=h,
        background=tuple(background),
    )
