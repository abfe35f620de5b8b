"""Panoramic projection geometry.

Angle conventions (radians end to end; degrees only at CLI boundaries):
longitude spans (-pi, pi] across the equirectangular width, latitude spans
[-pi/2, pi/2] down the height with +pi/2 (zenith) at row 0. Pixel-center
sampling throughout: pixel (row, col) sits at
(lat = pi/2 - (row+0.5)/H*pi, lon = (col+0.5)/W*2pi - pi).

Cube faces use the horizontal/vertical face parameterization

    horizontal face i in {1,2,3,4}:  x =  (W/2) tan(lon - i*pi/2)
                                     y = -(H tan(lat)) / (2 cos(lon - i*pi/2))
    up/down face j in {0,1}:         x =  (W/2) cot(lat) sin(lon)
                                     y =  (H/2) cot(lat) cos(lon + j*pi)

with (x, y) in [-W/2, W/2] x [-H/2, H/2] over the 90-degree core of the
face. Faces are stored with a 91-degree field of view so that seam
coordinates stay inside the pixel grid and no sample is extrapolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FACE_ORDER = ("F", "R", "B", "L", "U", "D")
FACE_FOV_DEG = 91.0
_TAN_PAD = math.tan(math.radians(FACE_FOV_DEG / 2.0))


class GeometryError(Exception):
    pass


@dataclass(frozen=True)
class ProjectionSpec:
    """Reference angles and raster sizes for one projection setup."""

    erp_width: int
    erp_height: int
    face_size: int
    theta0: float = 0.0
    phi1: float = 0.0

    def __post_init__(self):
        if self.erp_width != 2 * self.erp_height:
            raise GeometryError(
                f"equirectangular frame must be 2:1, got {self.erp_width}x{self.erp_height}"
            )
        if self.face_size < 2:
            raise GeometryError(f"face_size must be >= 2, got {self.face_size}")


@dataclass
class ResampleLUT:
    """Per-pixel source assignment: face index plus continuous face coords."""

    face_size: int
    face_idx: np.ndarray  # (H, W) uint8, indexes FACE_ORDER
    rows: np.ndarray  # (H, W) float64 source row on the selected face
    cols: np.ndarray  # (H, W) float64 source col on the selected face


def erp_project(theta, phi, spec: ProjectionSpec):
    """Flatten sphere angles to plane coordinates.

    x = (theta - theta0) * cos(phi1), y = (phi - phi1); affine in both
    angles for a fixed spec. Total on its domain.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    x = (theta - spec.theta0) * math.cos(spec.phi1)
    y = phi - spec.phi1
    return x, y


def area_distortion(phi):
    """Per-location area scaling cos(phi)/|J| with |J| = 1 (identity x=theta, y=phi)."""
    return np.cos(np.asarray(phi, dtype=np.float64))


def _erp_angles(width, height):
    lon = (np.arange(width) + 0.5) / width * (2.0 * math.pi) - math.pi
    lat = math.pi / 2.0 - (np.arange(height) + 0.5) / height * math.pi
    return np.meshgrid(lon, lat)  # each (H, W)


def _tan_to_pixel(t, face_size):
    # map tan-space [-1, 1] (the 90-degree core) into the padded face raster
    return (t / _TAN_PAD + 1.0) / 2.0 * face_size - 0.5


def cubemap_to_erp_lut(spec: ProjectionSpec) -> ResampleLUT:
    """Assign every equirectangular pixel to exactly one cube face.

    Candidate coordinates are evaluated for all six faces; a face is valid
    when the pixel's direction points at it and its coordinates fall
    inside the face extent. Ties at seams go to the lowest face index.
    Rows within two pixels of a pole are forced onto the up/down faces so
    the cot(lat) blow-up is never consulted there.
    """
    h, w = spec.erp_height, spec.erp_width
    lon, lat = _erp_angles(w, h)
    n = spec.face_size
    slack = 1.0 + 1e-9

    tx = np.empty((6, h, w), dtype=np.float64)
    ty = np.empty((6, h, w), dtype=np.float64)
    valid = np.zeros((6, h, w), dtype=bool)

    tan_lat = np.tan(lat)
    for face, i in zip(FACE_ORDER[:4], (1, 2, 3, 4)):
        d = lon - i * math.pi / 2.0
        cos_d = np.cos(d)
        facing = cos_d > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            fx = np.tan(d)
            fy = -tan_lat / np.where(facing, cos_d, 1.0)
        k = FACE_ORDER.index(face)
        tx[k] = fx
        ty[k] = fy
        valid[k] = facing & (np.abs(fx) <= slack) & (np.abs(fy) <= slack)

    with np.errstate(divide="ignore", invalid="ignore"):
        cot = np.where(np.abs(tan_lat) > 1e-12, 1.0 / tan_lat, np.inf)
    for face, j in zip(("U", "D"), (0, 1)):
        fx = cot * np.sin(lon)
        fy = cot * np.cos(lon + j * math.pi)
        k = FACE_ORDER.index(face)
        tx[k] = fx
        ty[k] = fy
        pointing = lat > 1e-12 if face == "U" else lat < -1e-12
        valid[k] = pointing & (np.abs(fx) <= slack) & (np.abs(fy) <= slack)

    polar = np.abs(np.abs(lat) - math.pi / 2.0) < 2.0 * (math.pi / h)
    valid[:4][np.broadcast_to(polar, (4, h, w))] = False

    if not valid.any(axis=0).all():
        missing = np.argwhere(~valid.any(axis=0))[0]
        raise GeometryError(f"no face covers pixel (row={missing[0]}, col={missing[1]})")
    face_idx = np.argmax(valid, axis=0).astype(np.uint8)  # first True: lowest index wins

    sel = (face_idx, np.arange(h)[:, None], np.arange(w)[None, :])
    rows = _tan_to_pixel(ty[sel], n)
    cols = _tan_to_pixel(tx[sel], n)
    return ResampleLUT(face_size=n, face_idx=face_idx, rows=rows, cols=cols)


def _bilinear_clamped(img, rows, cols):
    """Sample with border replication; no extrapolation beyond edge pixels."""
    h, w = img.shape[:2]
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    if img.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    v00 = img[r0, c0]
    v01 = img[r0, c1]
    v10 = img[r1, c0]
    v11 = img[r1, c1]
    top = v00 * (1 - fc) + v01 * fc
    bot = v10 * (1 - fc) + v11 * fc
    return top * (1 - fr) + bot * fr


def resample(faces: dict, lut: ResampleLUT):
    """Bilinearly resample six cube faces into one equirectangular frame."""
    for key in FACE_ORDER:
        if key not in faces:
            raise GeometryError(f"missing face '{key}'")
    shapes = {faces[key].shape for key in FACE_ORDER}
    if len(shapes) != 1:
        raise GeometryError(f"faces disagree on resolution: {sorted(shapes)}")
    shape = next(iter(shapes))
    if shape[0] != lut.face_size or shape[1] != lut.face_size:
        raise GeometryError(f"face shape {shape} does not match LUT face_size {lut.face_size}")

    sample = next(iter(faces.values()))
    out_shape = lut.face_idx.shape + sample.shape[2:]
    out = np.zeros(out_shape, dtype=np.float64)
    for k, key in enumerate(FACE_ORDER):
        mask = lut.face_idx == k
        if not mask.any():
            continue
        img = np.asarray(faces[key], dtype=np.float64)
        out[mask] = _bilinear_clamped(img, lut.rows[mask], lut.cols[mask])
    return out


def face_directions(face: str, face_size: int):
    """Unit-sphere (lon, lat) of every pixel center on a padded face."""
    n = face_size
    t = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    t = t * _TAN_PAD
    tx, ty = np.meshgrid(t, t)
    if face in FACE_ORDER[:4]:
        i = FACE_ORDER.index(face) + 1
        d = np.arctan(tx)
        lon = d + i * math.pi / 2.0
        lat = np.arctan(-ty * np.cos(d))
    elif face == "U":
        rho = np.hypot(tx, ty)
        lat = np.arctan2(1.0, rho)
        lon = np.arctan2(tx, ty)
    elif face == "D":
        rho = np.hypot(tx, ty)
        lat = -np.arctan2(1.0, rho)
        lon = np.arctan2(-tx, ty)
    else:
        raise GeometryError(f"unknown face '{face}'")
    lon = np.mod(lon + math.pi, 2.0 * math.pi) - math.pi
    return lon, lat


def erp_to_cubemap(erp, face_size: int):
    """Inverse resampling: cut six padded faces out of an ERP frame.

    Longitude wraps around the frame edge; latitude clamps at the poles.
    """
    erp = np.asarray(erp, dtype=np.float64)
    h, w = erp.shape[:2]
    faces = {}
    for face in FACE_ORDER:
        lon, lat = face_directions(face, face_size)
        cols = (lon + math.pi) / (2.0 * math.pi) * w - 0.5
        rows = (math.pi / 2.0 - lat) / math.pi * h - 0.5
        cols = np.mod(cols, w)
        faces[face] = _bilinear_wrapped(erp, rows, cols)
    return faces


def _bilinear_wrapped(img, rows, cols):
    """Bilinear sample wrapping horizontally, clamping vertically."""
    h, w = img.shape[:2]
    r = np.clip(rows, 0.0, h - 1.0)
    r0 = np.floor(r).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    fr = r - r0
    c0 = np.floor(cols).astype(np.int64)
    fc = cols - c0
    c0 = np.mod(c0, w)
    c1 = np.mod(c0 + 1, w)
    if img.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    v00 = img[r0, c0]
    v01 = img[r0, c1]
    v10 = img[r1, c0]
    v11 = img[r1, c1]
    top = v00 * (1 - fc) + v01 * fc
    bot = v10 * (1 - fc) + v11 * fc
    return top * (1 - fr) + bot * fr


def fov_crop(erp, fov_degrees):
    """Horizontally centered band of width erp_width * fov/360, full height."""
    if not 0 < fov_degrees <= 360:
        raise GeometryError(f"fov must be in (0, 360], got {fov_degrees}")
    erp = np.asarray(erp)
    w = erp.shape[1]
    crop_w = int(round(w * fov_degrees / 360.0))
    crop_w = max(1, crop_w)
    start = (w - crop_w) // 2
    return erp[:, start : start + crop_w].copy()
