"""Procedural toy benchmark: ray-cast scenes, domains, and file I/O.

Scenes place primitive solids on a ground plane around the camera and are
ray-cast per pixel, so the rendered image and the label map come from the
same hits and align exactly. The same scene seed renders under three
domain recipes:

    source-pinhole    perspective camera, textured appearance
    source-synthetic  equirectangular camera, flat appearance
    target-panoramic  equirectangular camera, textured appearance

Equirectangular renders inherit the latitude stretching of the
projection: per-pixel solid angle shrinks with cos(latitude), so objects
near the poles cover correspondingly more pixels.

Images are binary PPM (P6), labels binary PGM (P5) with 255 reserved as
the ignore value; the manifest is JSON. Both formats round-trip 8-bit
data losslessly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

IGNORE = 255
CLASS_NAMES = ("ground", "sky", "building-block", "post", "vehicle-blob")
CLS_GROUND, CLS_SKY, CLS_BUILDING, CLS_POST, CLS_VEHICLE = range(5)

DOMAINS = ("source-pinhole", "source-synthetic", "target-panoramic")

_BASE_COLORS = np.array([
    [105, 90, 70],    # ground
    [140, 180, 230],  # sky
    [170, 60, 60],    # building-block
    [235, 200, 60],   # post
    [60, 170, 90],    # vehicle-blob
], dtype=np.float64)

_SUN = np.array([0.35, 0.25, 0.9])
_SUN = _SUN / np.linalg.norm(_SUN)


class DataError(Exception):
    pass


# -- image / label files ------------------------------------------------------


def _write_pnm(path, magic, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes(order="C"))


def save_image(path, img):
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) image, got {img.shape}")
    _write_pnm(path, "P6", img)


def save_labels(path, labels):
    if labels.ndim != 2:
        raise DataError(f"expected (H, W) label map, got {labels.shape}")
    _write_pnm(path, "P5", labels)


def _read_pnm(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":  # comment to end of line
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header at byte offset {start}")
        return blob[start:pos], start

    got, off = token()
    if got != magic.encode("ascii"):
        raise DataError(f"{path}: bad magic {got!r} at byte offset {off}, expected {magic}")
    dims = []
    for _ in range(3):
        tok, off = token()
        if not tok.isdigit():
            raise DataError(f"{path}: non-numeric header field {tok!r} at byte offset {off}")
        dims.append(int(tok))
    w, h, maxval = dims
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (only 8-bit supported)")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == "P6" else 1
    need = w * h * channels
    if len(blob) - pos < need:
        raise DataError(
            f"{path}: truncated payload at byte offset {pos} (need {need} bytes, have {len(blob) - pos})"
        )
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def load_image(path):
    return _read_pnm(path, "P6")


def load_labels(path):
    return _read_pnm(path, "P5")


# -- scene construction -------------------------------------------------------


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    cls: int
    shade: float


@dataclass
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray
    cls: int
    shade: float


@dataclass
class Scene:
    objects: list
    camera_height: float = 1.6


@dataclass
class SceneSpec:
    """Deterministic scene + camera + appearance recipe."""

    seed: int
    width: int = 128
    height: int = 64
    camera: str = "equirectangular"  # or "pinhole"
    fov_deg: float = 90.0
    yaw: float = 0.0
    pitch: float = 0.0
    texture: str = "noisy-realistic"  # or "flat-synthetic"
    building_count: tuple = (3, 6)
    post_count: tuple = (3, 6)
    vehicle_count: tuple = (2, 4)

    def __post_init__(self):
        if self.camera not in ("pinhole", "equirectangular"):
            raise DataError(f"unknown camera model '{self.camera}'")
        if self.texture not in ("flat-synthetic", "noisy-realistic"):
            raise DataError(f"unknown texture mode '{self.texture}'")


def build_scene(rng, spec: SceneSpec) -> Scene:
    objects = []

    def place(radius_range):
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(*radius_range)
        return np.array([rad * math.cos(ang), rad * math.sin(ang)])

    for _ in range(rng.integers(*spec.building_count, endpoint=True)):
        cx, cy = place((5.0, 13.0))
        sx, sy = rng.uniform(1.5, 4.0, size=2)
        hgt = rng.uniform(3.0, 8.0)
        objects.append(Box(lo=np.array([cx - sx, cy - sy, 0.0]),
                           hi=np.array([cx + sx, cy + sy, hgt]),
                           cls=CLS_BUILDING, shade=rng.uniform(0.75, 1.1)))
    for _ in range(rng.integers(*spec.post_count, endpoint=True)):
        cx, cy = place((1.8, 5.0))
        r = rng.uniform(0.15, 0.3)
        hgt = rng.uniform(2.0, 4.0)
        objects.append(Box(lo=np.array([cx - r, cy - r, 0.0]),
                           hi=np.array([cx + r, cy + r, hgt]),
                           cls=CLS_POST, shade=rng.uniform(0.8, 1.1)))
    for _ in range(rng.integers(*spec.vehicle_count, endpoint=True)):
        cx, cy = place((2.5, 8.0))
        radii = np.array([rng.uniform(1.2, 2.2), rng.uniform(0.7, 1.1), rng.uniform(0.5, 0.9)])
        objects.append(Ellipsoid(center=np.array([cx, cy, radii[2] * 0.9]),
                                 radii=radii, cls=CLS_VEHICLE, shade=rng.uniform(0.8, 1.15)))
    return Scene(objects=objects)


def camera_rays(spec: SceneSpec):
    """Per-pixel unit directions in world frame (x forward, z up)."""
    h, w = spec.height, spec.width
    if spec.camera == "equirectangular":
        lon = (np.arange(w) + 0.5) / w * 2 * math.pi - math.pi
        lat = math.pi / 2 - (np.arange(h) + 0.5) / h * math.pi
        lon, lat = np.meshgrid(lon, lat)
        d = np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)
        return d
    tan_x = math.tan(math.radians(spec.fov_deg) / 2)
    xs = (2 * (np.arange(w) + 0.5) / w - 1) * tan_x
    ys = (1 - 2 * (np.arange(h) + 0.5) / h) * tan_x * h / w
    xs, ys = np.meshgrid(xs, ys)
    d = np.stack([np.ones_like(xs), -xs, ys], axis=-1)  # look along +x
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    cy, sy = math.cos(spec.yaw), math.sin(spec.yaw)
    cp, sp = math.cos(spec.pitch), math.sin(spec.pitch)
    pitch = np.array([[cp, 0, -sp], [0, 1, 0], [sp, 0, cp]])
    yawm = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return d @ pitch.T @ yawm.T


def _intersect_box(origin, dirs, box: Box):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (box.lo - origin) * inv
    t2 = (box.hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (far >= near) & (near > 1e-6)
    t = np.where(hit, near, np.inf)
    axis = tmin.argmax(axis=-1)
    normal = np.zeros(dirs.shape)
    rows = np.arange(dirs.shape[0])
    normal[rows, axis] = -np.sign(dirs[rows, axis])
    return t, normal


def _intersect_ellipsoid(origin, dirs, ell: Ellipsoid):
    q = (origin - ell.center) / ell.radii
    v = dirs / ell.radii
    a = (v * v).sum(axis=-1)
    b = 2 * (q * v).sum(axis=-1)
    c = (q * q).sum() - 1.0
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit = ok & (t > 1e-6)
    t = np.where(hit, t, np.inf)
    # normals only matter at hits; keep the non-hit rows finite
    p = origin + dirs * np.where(hit, t, 0.0)[:, None]
    normal = (p - ell.center) / (ell.radii**2)
    norm = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = normal / np.maximum(norm, 1e-12)
    return t, normal


def _value_noise(points, freq, phase):
    """Smooth deterministic texture field over world points."""
    p = points * freq
    return (np.sin(p[:, 0] * 1.7 + phase)
            + np.sin(p[:, 1] * 2.3 + 1.3 * phase)
            + np.sin((p[:, 0] + p[:, 1] + p[:, 2]) * 1.1 + 2.1 * phase)) / 3.0


def render(scene: Scene, dirs, texture, rng_texture):
    """Ray-cast a scene: returns (uint8 image HxWx3, uint8 label map HxW)."""
    h, w = dirs.shape[:2]
    flat = dirs.reshape(-1, 3)
    origin = np.array([0.0, 0.0, scene.camera_height])

    best_t = np.full(flat.shape[0], np.inf)
    cls = np.full(flat.shape[0], CLS_SKY, dtype=np.int64)
    shade = np.ones(flat.shape[0])
    normal = np.zeros_like(flat)

    # ground plane z=0
    dz = flat[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dz < -1e-9, -origin[2] / dz, np.inf)
    hit = tg < best_t
    best_t[hit] = tg[hit]
    cls[hit] = CLS_GROUND
    normal[hit] = [0.0, 0.0, 1.0]

    for obj in scene.objects:
        if isinstance(obj, Box):
            t, nrm = _intersect_box(origin, flat, obj)
        else:
            t, nrm = _intersect_ellipsoid(origin, flat, obj)
        closer = t < best_t
        best_t[closer] = t[closer]
        cls[closer] = obj.cls
        shade[closer] = obj.shade
        normal[closer] = nrm[closer]

    color = _BASE_COLORS[cls] * shade[:, None]
    lit = cls != CLS_SKY
    lambert = 0.65 + 0.35 * np.clip((normal * _SUN).sum(axis=-1), 0.0, 1.0)
    color[lit] *= lambert[lit, None]

    # sky: vertical gradient toward the horizon
    sky = ~lit
    color[sky] *= (0.75 + 0.25 * np.abs(flat[sky, 2]))[:, None]

    if texture == "noisy-realistic":
        hitpts = origin + flat * np.where(np.isfinite(best_t), best_t, 40.0)[:, None]
        phase = float(rng_texture.uniform(0, 2 * math.pi))
        freqs = {CLS_GROUND: 0.8, CLS_BUILDING: 1.6, CLS_POST: 2.5, CLS_VEHICLE: 4.0}
        for c, freq in freqs.items():
            sel = cls == c
            if sel.any():
                color[sel] *= (1.0 + 0.16 * _value_noise(hitpts[sel], freq, phase))[:, None]
        sel = cls == CLS_SKY
        color[sel] *= (1.0 + 0.05 * _value_noise(flat[sel] * 30.0, 0.5, phase))[:, None]
        color *= rng_texture.uniform(0.92, 1.08)
        color += rng_texture.normal(0.0, 3.0, size=color.shape)

    img = np.clip(color, 0, 255).astype(np.uint8).reshape(h, w, 3)
    labels = cls.astype(np.uint8).reshape(h, w)
    return img, labels


def gen_scene(spec: SceneSpec):
    """Deterministic render of the seeded scene under the spec's recipe.

    Layout and texture draw from independent child streams, so the same
    seed yields the same object layout under every camera/texture recipe.
    """
    ss = np.random.SeedSequence(spec.seed)
    layout_ss, texture_ss = ss.spawn(2)
    scene = build_scene(np.random.default_rng(layout_ss), spec)
    dirs = camera_rays(spec)
    return render(scene, dirs, spec.texture, np.random.default_rng(texture_ss))


# -- benchmark ----------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    seed: int = 0
    train_per_domain: int = 8
    val_per_domain: int = 4
    width: int = 128
    height: int = 64
    classes: tuple = CLASS_NAMES


def _domain_spec(scene_seed, domain, cfg: BenchmarkConfig, cam_rng):
    base = dict(seed=scene_seed, width=cfg.width, height=cfg.height)
    if domain == "source-pinhole":
        return SceneSpec(camera="pinhole", fov_deg=90.0,
                         yaw=float(cam_rng.uniform(0, 2 * math.pi)),
                         pitch=float(cam_rng.uniform(-0.12, 0.12)),
                         texture="noisy-realistic", **base)
    if domain == "source-synthetic":
        return SceneSpec(camera="equirectangular", texture="flat-synthetic", **base)
    return SceneSpec(camera="equirectangular", texture="noisy-realistic", **base)


def gen_benchmark(root, cfg: BenchmarkConfig | None = None):
    """Write matched domain splits over shared scene seeds; returns the manifest."""
    cfg = cfg or BenchmarkConfig()
    root = os.fspath(root)
    os.makedirs(root, exist_ok=True)
    ss = np.random.SeedSequence(cfg.seed)
    seed_rng, cam_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    n_total = cfg.train_per_domain + cfg.val_per_domain
    scene_seeds = seed_rng.integers(0, 2**31 - 1, size=n_total)

    samples = []
    for domain in DOMAINS:
        for i, scene_seed in enumerate(scene_seeds):
            split = "train" if i < cfg.train_per_domain else "val"
            spec = _domain_spec(int(scene_seed), domain, cfg,
                                np.random.default_rng([cfg.seed, DOMAINS.index(domain), i]))
            img, labels = gen_scene(spec)
            ddir = os.path.join(root, domain, split)
            os.makedirs(ddir, exist_ok=True)
            img_rel = os.path.join(domain, split, f"img_{i:04d}.ppm")
            lab_rel = os.path.join(domain, split, f"lab_{i:04d}.pgm")
            save_image(os.path.join(root, img_rel), img)
            save_labels(os.path.join(root, lab_rel), labels)
            samples.append({"image": img_rel, "label": lab_rel, "domain": domain, "split": split})

    manifest = {"classes": list(cfg.classes), "samples": samples}
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_manifest(path):
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    root = os.path.dirname(os.path.abspath(path))
    for sample in manifest["samples"]:
        for key in ("image", "label"):
            full = os.path.join(root, sample[key])
            if not os.path.exists(full):
                raise DataError(f"manifest references missing file: {full}")
    manifest["_root"] = root
    return manifest


def normalize_image(img):
    """uint8 HxWx3 -> float CxHxW in [-1, 1]."""
    return (np.asarray(img, dtype=np.float64) / 127.5 - 1.0).transpose(2, 0, 1)


def load_split(manifest, domain, split):
    """Stacked (images, labels) arrays for one domain/split."""
    root = manifest.get("_root", ".")
    images, labels = [], []
    for sample in manifest["samples"]:
        if sample["domain"] != domain or sample["split"] != split:
            continue
        img = load_image(os.path.join(root, sample["image"]))
        lab = load_labels(os.path.join(root, sample["label"]))
        if img.shape[:2] != lab.shape:
            raise DataError(f"image/label extents differ for {sample['image']}: {img.shape[:2]} vs {lab.shape}")
        images.append(normalize_image(img))
        labels.append(lab.astype(np.int64))
    if not images:
        raise DataError(f"no samples for domain={domain!r} split={split!r}")
    return np.stack(images), np.stack(labels)
