"""Software rendering: meshes, a pinhole camera and a z-buffer rasterizer.

Camera frame: the camera sits at the origin looking down ``-z`` with ``+y``
up. A camera-frame point ``(X, Y, Z)`` with ``Z < 0`` projects to pixel
coordinates ``u = cx + fx * X / -Z`` and ``v = cy - fy * Y / -Z``; pixel
``(row, col)`` is sampled at its center ``(col + 0.5, row + 0.5)``.

Fill rule: a sample exactly on an edge belongs to the triangle for which the
edge is a top or left edge, so shared edges are never drawn twice or missed.
Faces with any vertex closer than ``NEAR`` to the image plane are skipped.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose6DoF, quat_rotate

NEAR = 1e-3


class ObjParseError(ValueError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        self.normals = vertex_normals(self.vertices, self.faces)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_normals(self, vertices=None):
        v = self.vertices if vertices is None else vertices
        a, b, c = (v[self.faces[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)


def face_areas(vertices, faces):
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def vertex_normals(vertices, faces):
    """Area-weighted unit vertex normals (zero for unreferenced vertices)."""
    n = np.zeros_like(vertices)
    if len(faces):
        a, b, c = (vertices[faces[:, i]] for i in range(3))
        fn = np.cross(b - a, c - a)
        for i in range(3):
            np.add.at(n, faces[:, i], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


# ---------------------------------------------------------------------------
# OBJ ingestion
# ---------------------------------------------------------------------------


def load_obj(text):
    """Parse ``v`` and ``f`` records of a Wavefront OBJ document.

    Polygons are fanned into triangles ``(0, i, i+1)``; ``f`` tokens may use
    ``i``, ``i/t``, ``i//n`` or ``i/t/n`` forms with 1-based or negative
    indices. Other directives are ignored and zero-area faces are dropped.
    """
    verts = []
    faces = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise ObjParseError(lineno, "vertex needs three coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise ObjParseError(lineno, f"malformed number in {raw!r}") from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise ObjParseError(lineno, "face needs at least three vertices")
            idx = []
            for t in tok[1:]:
                try:
                    i = int(t.split("/", 1)[0])
                except ValueError:
                    raise ObjParseError(lineno, f"malformed index {t!r}") from None
                if i > 0:
                    i -= 1
                elif i < 0:
                    i += len(verts)
                else:
                    raise ObjParseError(lineno, "index 0 is not valid in OBJ")
                if not 0 <= i < len(verts):
                    raise ObjParseError(lineno, f"index {t} out of range ({len(verts)} vertices defined)")
                idx.append(i)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces):
        faces = faces[face_areas(verts, faces) > 0]
    return TriangleMesh(verts, faces)


def dump_obj(mesh):
    """OBJ text whose coordinates round-trip exactly through :func:`load_obj`."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Procedural meshes
# ---------------------------------------------------------------------------


def _cube(size):
    h = 0.5 * size
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    # vertex index = 4*ix + 2*iy + iz; outward winding
    f = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return v, np.array(f)


def _icosphere(subdiv, radius):
    p = (1.0 + math.sqrt(5.0)) / 2.0
    v = [
        (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
        (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
        (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(x, dtype=np.float64) for x in v]
    for _ in range(subdiv):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                verts.append(0.5 * (verts[a] + verts[b]))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    verts = np.array(verts)
    verts *= radius / np.linalg.norm(verts, axis=1, keepdims=True)
    return verts, np.array(f)


def _cylinder(segments, size):
    r = 0.5 * size
    h = 0.5 * size
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([r * np.cos(ang), np.zeros(segments), -r * np.sin(ang)], axis=1)
    bottom = ring + [0.0, -h, 0.0]
    top = ring + [0.0, h, 0.0]
    v = np.concatenate([bottom, top, [[0.0, -h, 0.0], [0.0, h, 0.0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for i in range(segments):
        j = (i + 1) % segments
        f += [(i, j, segments + j), (i, segments + j, segments + i)]
        f += [(cb, j, i), (ct, segments + i, segments + j)]
    return v, np.array(f)


def make_primitive(kind, size=1.0, subdiv=2, segments=16):
    """Watertight mesh centered at the origin.

    ``cube`` has edge ``size``; ``icosphere`` has radius ``size / 2``;
    ``cylinder`` (axis along y) has radius ``size / 2`` and height ``size``.
    """
    if size <= 0:
        raise ValueError("size must be positive")
    if kind == "cube":
        v, f = _cube(size)
    elif kind == "icosphere":
        if not 0 <= subdiv <= 4:
            raise ValueError("icosphere subdivision must be in [0, 4]")
        v, f = _icosphere(subdiv, 0.5 * size)
    elif kind == "cylinder":
        if segments < 3:
            raise ValueError("cylinder needs at least 3 segments")
        v, f = _cylinder(segments, size)
    else:
        raise ValueError(f"unknown primitive {kind!r}")
    return TriangleMesh(v, f)


# ---------------------------------------------------------------------------
# Camera, lights, rasterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    @classmethod
    def default(cls, size=64, fov_deg=40.0):
        f = 0.5 * size / math.tan(math.radians(0.5 * fov_deg))
        return cls(f, f, 0.5 * size, 0.5 * size, size, size)

    def project(self, pts):
        """Pixel coordinates ``(u, v)`` and depth ``-Z`` of camera-frame points."""
        depth = -pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * pts[:, 0] / depth
            v = self.cy - self.fy * pts[:, 1] / depth
        return u, v, depth

    def rays(self):
        """Per-pixel ray directions with ``z = -1``, shape ``(H, W, 3)``."""
        cols = np.arange(self.width) + 0.5
        rows = np.arange(self.height) + 0.5
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = ((cols - self.cx) / self.fx)[None, :]
        d[..., 1] = (-(rows - self.cy) / self.fy)[:, None]
        d[..., 2] = -1.0
        return d


@dataclass(frozen=True)
class Light:
    """Directional light (``param`` = unit travel direction) or point light
    (``param`` = position in camera coordinates, meters)."""

    kind: str
    param: tuple
    intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in ("directional", "point"):
            raise ValueError(f"unknown light kind {self.kind!r}")
        p = np.asarray(self.param, dtype=np.float64)
        if self.kind == "directional" and abs(np.linalg.norm(p) - 1.0) > 1e-6:
            raise ValueError("directional light needs a unit direction")


def lambertian_shade(points, normals, light, albedo=0.8):
    """Unclamped ``albedo * I * max(0, n.l)``; point lights fall off as 1/r^2."""
    if light.kind == "directional":
        l = -np.asarray(light.param, dtype=np.float64)
        return albedo * light.intensity * np.maximum(0.0, normals @ l)
    to_light = np.asarray(light.param, dtype=np.float64) - points
    r2 = np.sum(to_light * to_light, axis=-1)
    l = to_light / np.sqrt(r2)[..., None]
    return albedo * light.intensity * np.maximum(0.0, np.sum(normals * l, axis=-1)) / r2


def _owned(dx, dy):
    # top-left rule for positively oriented triangles in y-down pixel space
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize_faces(tri_uv, tri_cam, cam):
    """Z-buffered face ids and depths for camera-frame triangles.

    All (face, pixel) pairs inside each face's bounding box are tested at
    once. Depth ties go to the lower face index.

    Parameters
    ----------
    tri_uv : (F, 3, 2) projected vertices
    tri_cam : (F, 3, 3) camera-frame vertices

    Returns
    -------
    face_id : (H, W) int array, -1 for background
    depth : (H, W) float array, ``inf`` for background
    """
    h, w = cam.height, cam.width
    face_id = np.full(h * w, -1, dtype=np.int64)
    zbuf = np.full(h * w, np.inf)
    if len(tri_uv) == 0:
        return face_id.reshape(h, w), zbuf.reshape(h, w)
    ax, ay = tri_uv[:, 0, 0], tri_uv[:, 0, 1]
    bx, by = tri_uv[:, 1, 0].copy(), tri_uv[:, 1, 1].copy()
    cx, cy = tri_uv[:, 2, 0].copy(), tri_uv[:, 2, 1].copy()
    with np.errstate(invalid="ignore"):
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    ok = np.isfinite(area) & (area != 0)
    neg = area < 0
    bx[neg], cx[neg] = cx[neg], bx[neg].copy()
    by[neg], cy[neg] = cy[neg], by[neg].copy()
    with np.errstate(invalid="ignore"):
        c0 = np.maximum(np.ceil(np.minimum(np.minimum(ax, bx), cx) - 0.5), 0)
        c1 = np.minimum(np.floor(np.maximum(np.maximum(ax, bx), cx) - 0.5), w - 1)
        r0 = np.maximum(np.ceil(np.minimum(np.minimum(ay, by), cy) - 0.5), 0)
        r1 = np.minimum(np.floor(np.maximum(np.maximum(ay, by), cy) - 0.5), h - 1)
    ok &= (c0 <= c1) & (r0 <= r1)
    faces = np.nonzero(ok)[0]
    if len(faces) == 0:
        return face_id.reshape(h, w), zbuf.reshape(h, w)
    c0, r0 = c0[faces].astype(np.int64), r0[faces].astype(np.int64)
    bw = c1[faces].astype(np.int64) - c0 + 1
    bh = r1[faces].astype(np.int64) - r0 + 1
    counts = bw * bh
    fi = np.repeat(faces, counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(int(counts.sum())) - np.repeat(starts, counts)
    bwr = np.repeat(bw, counts)
    col = np.repeat(c0, counts) + k % bwr
    row = np.repeat(r0, counts) + k // bwr
    px = col + 0.5
    py = row + 0.5
    vx = (ax[fi], bx[fi], cx[fi])
    vy = (ay[fi], by[fi], cy[fi])
    inside = np.ones(len(fi), dtype=bool)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        dx = vx[j] - vx[i]
        dy = vy[j] - vy[i]
        e = dx * (py - vy[i]) - dy * (px - vx[i])
        inside &= (e > 0) | ((e == 0) & _owned(dx, dy))
    fi, col, row, px, py = fi[inside], col[inside], row[inside], px[inside], py[inside]
    v0 = tri_cam[:, 0]
    n = np.cross(tri_cam[:, 1] - v0, tri_cam[:, 2] - v0)
    nv0 = np.sum(n * v0, axis=1)
    dxr = (px - cam.cx) / cam.fx
    dyr = -(py - cam.cy) / cam.fy
    nf = n[fi]
    denom = dxr * nf[:, 0] + dyr * nf[:, 1] - nf[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = nv0[fi] / denom
    valid = t > 0
    fi, t, pix = fi[valid], t[valid], (row * w + col)[valid]
    order = np.lexsort((fi, t, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    sel = order[first]
    face_id[pix[sel]] = fi[sel]
    zbuf[pix[sel]] = t[sel]
    return face_id.reshape(h, w), zbuf.reshape(h, w)


def transform_mesh(mesh, pose):
    if isinstance(pose, Pose6DoF):
        return pose.apply(mesh.vertices)
    x = np.asarray(pose, dtype=np.float64)
    return quat_rotate(x[:4], mesh.vertices, check=False) + x[4:7]


def rasterize(mesh, pose, cam, mode="silhouette", light=None, albedo=0.8):
    """Render ``mesh`` placed at ``pose`` (object-to-camera transform).

    Modes
    -----
    silhouette
        ``(H, W)`` float32 coverage mask in {0, 1}.
    depth
        ``(H, W)`` float32 distance along the viewing axis, 0 for background.
    lambertian
        ``(3, H, W)`` float32 flat-shaded image under ``light`` with the given
        albedo (scalar or RGB triple), clamped to [0, 1]. Normals are taken
        two-sided, facing the camera.
    """
    pts = transform_mesh(mesh, pose)
    u, v, depth = cam.project(pts)
    faces = mesh.faces
    keep = np.all(depth[faces] > NEAR, axis=1)
    faces = faces[keep]
    tri_uv = np.stack([u[faces], v[faces]], axis=-1)
    tri_cam = pts[faces]
    fid, zbuf = rasterize_faces(tri_uv, tri_cam, cam)
    hit = fid >= 0
    if mode == "silhouette":
        return hit.astype(np.float32)
    if mode == "depth":
        return np.where(hit, zbuf, 0.0).astype(np.float32)
    if mode != "lambertian":
        raise ValueError(f"unknown render mode {mode!r}")
    if light is None:
        raise ValueError("lambertian mode needs a light")
    a, b, c = tri_cam[:, 0], tri_cam[:, 1], tri_cam[:, 2]
    fn = np.cross(b - a, c - a)
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    flip = np.sum(fn * a, axis=1) > 0
    fn[flip] *= -1.0
    rgb = np.zeros((3, cam.height, cam.width), dtype=np.float32)
    if hit.any():
        rays = cam.rays()[hit]
        p = rays * zbuf[hit][:, None]
        shade = lambertian_shade(p, fn[fid[hit]], light, 1.0)
        alb = np.broadcast_to(np.asarray(albedo, dtype=np.float64), (3,))
        for ch in range(3):
            rgb[ch][hit] = np.clip(alb[ch] * shade, 0.0, 1.0)
    return rgb


def silhouette_energy(y_sim, y_obs):
    """Mean squared pixel difference, i.e. the fraction of differing pixels."""
    y_sim = np.asarray(y_sim)
    y_obs = np.asarray(y_obs)
    if y_sim.shape != y_obs.shape:
        raise ValueError(f"image shapes differ: {y_sim.shape} vs {y_obs.shape}")
    d = y_sim.astype(np.float64) - y_obs.astype(np.float64)
    return float(np.mean(d * d))


image_energy = silhouette_energy


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def encode_pnm(img, maxval=255):
    """Binary PGM (``(H, W)``) or PPM (``(3, H, W)``) with samples in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        magic, data = b"P5", img
    elif img.ndim == 3 and img.shape[0] == 3:
        magic, data = b"P6", np.moveaxis(img, 0, -1)
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[-2:]
    q = np.rint(np.clip(data, 0.0, 1.0) * maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + q.astype(dtype).tobytes()


_PNM_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_pnm(data):
    m = _PNM_HEADER.match(data)
    if not m:
        raise ValueError("not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    dtype = ">u1" if maxval < 256 else ">u2"
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch * np.dtype(dtype).itemsize
    if len(data) - m.end() < need:
        raise ValueError(f"truncated pixel data: expected {need} bytes, found {len(data) - m.end()}")
    raw = np.frombuffer(data, dtype=dtype, offset=m.end(), count=w * h * ch)
    img = raw.astype(np.float64) / maxval
    if ch == 1:
        return img.reshape(h, w).astype(np.float32)
    return np.moveaxis(img.reshape(h, w, 3), -1, 0).astype(np.float32)


def write_pnm(path, img, maxval=255):
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img, maxval))


def read_pnm(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())
