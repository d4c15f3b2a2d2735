"""Procedural pinhole-camera scenes: RGB, metric depth and obstacle masks.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward. The depth map stores the camera
  z coordinate (planar depth, not Euclidean ray length), so a back-projected
  pixel is ``P = depth * ray`` with ``ray = ((u+0.5-cx)/f, (v+0.5-cy)/f, 1)``.
* Pixel (row v, col u) is sampled at its half-integer center ``(u+0.5, v+0.5)``;
  the default principal point is the image center (W/2, H/2). Under this
  convention a centered crop of width ``crop_w`` resampled back to ``W``
  is exactly equivalent to multiplying the focal length by ``W / crop_w``.
* World frame: the camera sits at the origin, pitched down by
  ``cam_pitch_deg``; the ground plane lies at world y = cam_height
  (y grows downward). The ground carries a meter-scale checker texture, a
  geometry-bound cue whose apparent scale changes with the effective focal
  length (unlike the distance-coded obstacle shading below).

Scenes are a ground plane plus boxes and vertical cylinders resting on it,
ray-cast analytically and shaded with a flat Lambertian term. Obstacle
surfaces additionally fade toward the horizon color with distance
(``fog_range_m``): obstacle appearance encodes distance independently of
apparent size, which is what lets a detector regress obstacle range from
looks rather than from scale-ambiguous geometry. The ground keeps a
constant color, so dense ground depth is only inferable from scene
geometry (rows, horizon, contact points) and therefore degrades when the
effective focal length changes — the miscalibration the detector-driven
correction is meant to fix. Depth saturates at the far clamp and every
obstacle pixel is strictly nearer than the clamp.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

DEFAULT_HFOV_DEG = 81.5
DEFAULT_FAR_CLAMP_M = 40.0
DEFAULT_OBSTACLE_RANGE_M = 20.0

_HORIZON_COLOR = np.array([0.75, 0.80, 0.85])
_LIGHT_DIR = np.array([0.35, -0.80, 0.45]) / np.linalg.norm([0.35, -0.80, 0.45])
_AMBIENT = 0.35


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; focal length in pixels, square pixels."""

    focal_px: float
    principal_point: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal_px must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        cx, cy = self.principal_point
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_deg: float = DEFAULT_HFOV_DEG):
        focal = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(focal, (width / 2.0, height / 2.0), width, height)

    def ray_grid(self, nrows: int, ncols: int) -> np.ndarray:
        """Unit-z ray directions for an nrows x ncols grid of pixel centers.

        Asking for more rows/cols than the image has extends the grid past
        the border, which is what the replicated-boundary tangent stencil
        needs.
        """
        cx, cy = self.principal_point
        u = (np.arange(ncols) + 0.5 - cx) / self.focal_px
        v = (np.arange(nrows) + 0.5 - cy) / self.focal_px
        rays = np.empty((nrows, ncols, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        rays[..., 2] = 1.0
        return rays


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one procedurally generated scene."""

    rng_seed: int
    object_count: int = 2
    object_size_range: tuple[float, float] = (1.0, 3.0)
    depth_range: tuple[float, float] = (3.0, 18.0)
    ground_plane: bool = True
    cam_height: float = 1.5
    cam_pitch_deg: float = 0.0
    fog_range_m: float = 15.0
    far_clamp_m: float = DEFAULT_FAR_CLAMP_M

    def validate(self):
        lo, hi = self.depth_range
        if not (0.0 < lo <= hi <= 40.0):
            raise ValueError(f"depth_range must lie within (0, 40], got {self.depth_range}")
        if self.object_count < 0:
            raise ValueError("object_count must be non-negative")
        slo, shi = self.object_size_range
        if not (0.0 < slo <= shi):
            raise ValueError(f"object_size_range must be positive, got {self.object_size_range}")
        if self.far_clamp_m <= 0:
            raise ValueError("far_clamp_m must be positive")


@dataclass
class Sample:
    """Aligned RGB in [0,1], metric depth (m, saturated at the far clamp)
    and binary obstacle mask."""

    rgb: np.ndarray  # (H, W, 3) float
    depth: np.ndarray  # (H, W) float
    seg: np.ndarray  # (H, W) uint8, 1 = obstacle


@dataclass(frozen=True)
class BoxObstacle:
    lo: tuple[float, float, float]  # world-frame min corner
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class CylinderObstacle:
    center_xz: tuple[float, float]
    radius: float
    y_top: float  # top of the cylinder (y grows downward, so y_top < y_bot)
    y_bot: float
    albedo: tuple[float, float, float]


def _pitch_matrix(pitch_deg: float) -> np.ndarray:
    """Camera-to-world rotation for a camera pitched down by pitch_deg."""
    t = math.radians(pitch_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _intersect_box(d: np.ndarray, box: BoxObstacle):
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / d
        t2 = hi / d
    # Rays parallel to a slab (d component == 0): inside iff the slab spans 0.
    par = d == 0.0
    inside = (lo <= 0.0) & (0.0 <= hi)
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    t_lo = np.where(par, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(par, np.where(inside, np.inf, -np.inf), t_hi)
    axis = np.argmax(t_lo, axis=-1)
    t_enter = np.take_along_axis(t_lo, axis[..., None], axis=-1)[..., 0]
    t_exit = t_hi.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_enter > 1e-9)
    # Entering face normal: opposite the ray along the entry axis.
    d_axis = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0]
    normal = np.zeros_like(d)
    np.put_along_axis(normal, axis[..., None], -np.sign(d_axis)[..., None], axis=-1)
    return np.where(hit, t_enter, np.inf), normal


def _intersect_cylinder(d: np.ndarray, cyl: CylinderObstacle):
    a, b = cyl.center_xz
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    qa = dx * dx + dz * dz
    qb = a * dx + b * dz
    qc = a * a + b * b - cyl.radius**2
    disc = qb * qb - qa * qc
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (qb - np.sqrt(np.maximum(disc, 0.0))) / qa
        y_side = t_side * dy
        side_ok = (disc >= 0.0) & (qa > 0.0) & (t_side > 1e-9)
        side_ok &= (y_side >= cyl.y_top) & (y_side <= cyl.y_bot)
        t_cap = np.where(dy != 0.0, cyl.y_top / dy, np.inf)
    px, pz = t_cap * dx - a, t_cap * dz - b
    cap_ok = (t_cap > 1e-9) & (px * px + pz * pz <= cyl.radius**2)
    t_side = np.where(side_ok, t_side, np.inf)
    t_cap = np.where(cap_ok, t_cap, np.inf)
    t = np.minimum(t_side, t_cap)
    use_cap = t_cap < t_side
    normal = np.zeros_like(d)
    normal[..., 0] = np.where(use_cap, 0.0, (t * dx - a) / cyl.radius)
    normal[..., 1] = np.where(use_cap, -1.0, 0.0)
    normal[..., 2] = np.where(use_cap, 0.0, (t * dz - b) / cyl.radius)
    return t, normal


def render_scene(
    objects,
    cam: CameraModel,
    *,
    ground_plane: bool = True,
    ground_albedo=(0.45, 0.42, 0.38),
    cam_height: float = 1.5,
    cam_pitch_deg: float = 0.0,
    fog_range_m: float = 15.0,
    far_clamp_m: float = DEFAULT_FAR_CLAMP_M,
) -> Sample:
    """Ray-cast a fixed object list through the camera.

    Exposed separately from generate_sample so tests can place exact
    geometry (e.g. a fronto-parallel plane at a known distance).
    """
    h, w = cam.height, cam.width
    rays = cam.ray_grid(h, w)
    d = rays @ _pitch_matrix(cam_pitch_deg).T

    t_best = np.full((h, w), np.inf)
    albedo = np.zeros((h, w, 3))
    normal = np.zeros((h, w, 3))
    is_obstacle = np.zeros((h, w), dtype=bool)

    if ground_plane:
        with np.errstate(divide="ignore", invalid="ignore"):
            t_g = np.where(d[..., 1] > 1e-9, cam_height / d[..., 1], np.inf)
        closer = t_g < t_best
        t_best = np.where(closer, t_g, t_best)
        # 1 m checkerboard in world (x, z) so the ground has geometry-bound
        # texture; 0.5 offsets keep cell borders off the lateral image center
        gx = np.where(np.isfinite(t_g), t_g, 0.0)[..., None] * d
        checker = (np.floor(gx[..., 0] + 0.5) + np.floor(gx[..., 2] + 0.5)) % 2.0
        tone = (0.8 + 0.4 * checker)[..., None]
        albedo = np.where(closer[..., None], np.asarray(ground_albedo) * tone, albedo)
        normal[closer] = (0.0, -1.0, 0.0)

    for obj in objects:
        if isinstance(obj, BoxObstacle):
            t, n = _intersect_box(d, obj)
        else:
            t, n = _intersect_cylinder(d, obj)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        albedo[closer] = obj.albedo
        normal[closer] = n[closer]
        is_obstacle = np.where(closer, True, is_obstacle)

    depth = np.minimum(t_best, far_clamp_m)
    seg = (is_obstacle & (t_best < far_clamp_m)).astype(np.uint8)

    shade = _AMBIENT + (1.0 - _AMBIENT) * np.clip((normal * _LIGHT_DIR).sum(-1), 0.0, 1.0)
    rgb = albedo * shade[..., None]
    # distance-coded obstacle appearance: fade toward the horizon color
    tau = np.exp(-depth / fog_range_m)[..., None]
    obstacle = is_obstacle[..., None]
    rgb = np.where(obstacle, tau * rgb + (1.0 - tau) * _HORIZON_COLOR, rgb)
    rgb[t_best == np.inf] = _HORIZON_COLOR
    return Sample(rgb=np.clip(rgb, 0.0, 1.0), depth=depth, seg=seg)


def _sample_objects(spec: SceneSpec, cam: CameraModel, rng: np.random.Generator):
    objects = []
    lo_s, hi_s = spec.object_size_range
    lo_z = max(spec.depth_range[0], 0.5)
    hi_z = min(spec.depth_range[1], spec.far_clamp_m)
    for _ in range(spec.object_count):
        z0 = rng.uniform(lo_z, hi_z)
        x_half = z0 * (cam.width / 2.0) / cam.focal_px
        x0 = rng.uniform(-0.8 * x_half, 0.8 * x_half)
        albedo = tuple(rng.uniform(0.15, 0.9, 3))
        if rng.random() < 0.5:
            sx, sy, sz = rng.uniform(lo_s, hi_s, 3)
            objects.append(
                BoxObstacle(
                    lo=(x0 - sx / 2, spec.cam_height - sy, z0 - sz / 2),
                    hi=(x0 + sx / 2, spec.cam_height, z0 + sz / 2),
                    albedo=albedo,
                )
            )
        else:
            radius = 0.5 * rng.uniform(lo_s, hi_s)
            height = rng.uniform(lo_s, hi_s)
            objects.append(
                CylinderObstacle(
                    center_xz=(x0, z0),
                    radius=radius,
                    y_top=spec.cam_height - height,
                    y_bot=spec.cam_height,
                    albedo=albedo,
                )
            )
    return objects


def generate_sample(spec: SceneSpec, cam: CameraModel) -> Sample:
    """Deterministic scene render for a (spec, cam) pair."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    ground_albedo = tuple(rng.uniform(0.25, 0.6, 3))
    objects = _sample_objects(spec, cam, rng)
    return render_scene(
        objects,
        cam,
        ground_plane=spec.ground_plane,
        ground_albedo=ground_albedo,
        cam_height=spec.cam_height,
        cam_pitch_deg=spec.cam_pitch_deg,
        fog_range_m=spec.fog_range_m,
        far_clamp_m=spec.far_clamp_m,
    )


def _crop_coords(out_size: int, crop_size: int, in_size: int) -> np.ndarray:
    """Source coordinates of output pixel centers for a centered crop."""
    scale = crop_size / in_size
    return (np.arange(out_size) + 0.5) * scale - 0.5 + (in_size - crop_size) / 2.0


def _resample_nearest(img: np.ndarray, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
    iu = np.clip(np.floor(su + 0.5).astype(int), 0, img.shape[1] - 1)
    iv = np.clip(np.floor(sv + 0.5).astype(int), 0, img.shape[0] - 1)
    return img[iv[:, None], iu[None, :]]

def _resample_bilinear(img: np.ndarray, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
    u0 = np.floor(su).astype(int)
    v0 = np.floor(sv).astype(int)
    fu = su - u0
    fv = sv - v0
    u0c = np.clip(u0, 0, img.shape[1] - 1)
    u1c = np.clip(u0 + 1, 0, img.shape[1] - 1)
    v0c = np.clip(v0, 0, img.shape[0] - 1)
    v1c = np.clip(v0 + 1, 0, img.shape[0] - 1)
    fu = fu[None, :, None]
    fv = fv[:, None, None]
    top = img[v0c[:, None], u0c[None, :]] * (1 - fu) + img[v0c[:, None], u1c[None, :]] * fu
    bot = img[v1c[:, None], u0c[None, :]] * (1 - fu) + img[v1c[:, None], u1c[None, :]] * fu
    return top * (1 - fv) + bot * fv


def center_crop_resample(s: Sample, crop_w: int, crop_h: int) -> Sample:
    """Center-crop (crop_w, crop_h) and resample back to the original size.

    RGB is bilinear; depth and seg are nearest-neighbor so no depth values
    are invented at silhouettes. Depth values are unchanged — only the
    apparent focal length grows, by W / crop_w.
    """
    h, w = s.depth.shape
    if crop_w > w or crop_h > h or crop_w < 1 or crop_h < 1:
        raise ValueError(f"crop {crop_w}x{crop_h} exceeds image {w}x{h}")
    if abs((crop_w / crop_h) / (w / h) - 1.0) > 0.01:
        raise ValueError(
            f"crop aspect {crop_w}/{crop_h} deviates more than 1% from image aspect {w}/{h}"
        )
    su = _crop_coords(w, crop_w, w)
    sv = _crop_coords(h, crop_h, h)
    rgb = _resample_bilinear(s.rgb, su, sv)
    depth = _resample_nearest(s.depth, su, sv)
    seg = _resample_nearest(s.seg, su, sv)
    return Sample(rgb=rgb, depth=depth, seg=seg)


def effective_focal(cam: CameraModel, crop_w: int) -> float:
    return cam.focal_px * (cam.width / crop_w)


# --- on-disk format -------------------------------------------------------
#
# <id>/rgb.ppm    binary P6, 8 bit
# <id>/depth.f32  16-byte ASCII header "F32 <W> <H>" padded to 15 chars + \n,
#                 then row-major little-endian float32
# <id>/seg.pgm    binary P5, obstacle pixels 255
# manifest.json   sample ids, camera intrinsics, clamp and obstacle ranges


def write_ppm(path, rgb: np.ndarray):
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    magic, w, h, maxval, data = _parse_pnm(raw, path)
    if magic != b"P6":
        raise ValueError(f"{path}: expected P6, got {magic!r}")
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


def write_pgm(path, seg: np.ndarray):
    data = (seg.astype(np.uint8) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    magic, w, h, _, data = _parse_pnm(raw, path)
    if magic != b"P5":
        raise ValueError(f"{path}: expected P5, got {magic!r}")
    img = np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)
    return (img > 127).astype(np.uint8)


def _parse_pnm(raw: bytes, path):
    fields = []
    pos = 2  # skip magic
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        fields.append(int(raw[start:pos]))
    return raw[:2], fields[0], fields[1], fields[2], raw[pos + 1 :]


def write_depth_f32(path, depth: np.ndarray):
    h, w = depth.shape
    header = f"F32 {w} {h}".ljust(15)
    if len(header) != 15:
        raise ValueError(f"image dimensions {w}x{h} do not fit the 16-byte header")
    with open(path, "wb") as f:
        f.write((header + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16).decode("ascii")
        parts = header.split()
        if len(parts) != 3 or parts[0] != "F32":
            raise ValueError(f"{path}: bad depth header {header!r}")
        w, h = int(parts[1]), int(parts[2])
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4").reshape(h, w)
    return data.astype(np.float64)


def write_sample(sample_dir, s: Sample):
    os.makedirs(sample_dir, exist_ok=True)
    write_ppm(os.path.join(sample_dir, "rgb.ppm"), s.rgb)
    write_depth_f32(os.path.join(sample_dir, "depth.f32"), s.depth)
    write_pgm(os.path.join(sample_dir, "seg.pgm"), s.seg)


def read_sample(sample_dir) -> Sample:
    return Sample(
        rgb=read_ppm(os.path.join(sample_dir, "rgb.ppm")),
        depth=read_depth_f32(os.path.join(sample_dir, "depth.f32")),
        seg=read_pgm(os.path.join(sample_dir, "seg.pgm")),
    )


def render_dataset(
    spec_list,
    cam: CameraModel,
    out_dir,
    far_clamp_m: float = DEFAULT_FAR_CLAMP_M,
    obstacle_range_m: float = DEFAULT_OBSTACLE_RANGE_M,
) -> dict:
    """Render every spec and write the on-disk layout plus manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    ids = []
    for i, spec in enumerate(spec_list):
        sid = f"{i:06d}"
        write_sample(os.path.join(out_dir, sid), generate_sample(spec, cam))
        ids.append(sid)
    manifest = {
        "samples": ids,
        "camera": {"focal_px": cam.focal_px, "width": cam.width, "height": cam.height},
        "far_clamp_m": far_clamp_m,
        "obstacle_range_m": obstacle_range_m,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


@dataclass
class Dataset:
    samples: list
    ids: list
    camera: CameraModel
    far_clamp_m: float
    obstacle_range_m: float


def load_dataset(data_dir) -> Dataset:
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    c = manifest["camera"]
    cam = CameraModel(
        focal_px=c["focal_px"],
        principal_point=(c["width"] / 2.0, c["height"] / 2.0),
        width=c["width"],
        height=c["height"],
    )
    samples = [read_sample(os.path.join(data_dir, sid)) for sid in manifest["samples"]]
    return Dataset(
        samples=samples,
        ids=list(manifest["samples"]),
        camera=cam,
        far_clamp_m=manifest["far_clamp_m"],
        obstacle_range_m=manifest["obstacle_range_m"],
    )
