"""Skeletons, forward kinematics and BVH ingestion.

Forward kinematics follows the parent-to-child recursion

    y[n] = y[parent(n)] + R(x[n]) (ref[n] - ref[parent(n)])

with the root pinned at its reference position. By default each ``x[n]`` is
a world-frame rotation of the bone that ends at joint ``n``
(``convention="world"``). ``convention="local"`` instead composes rotations
down the tree, ``G[n] = G[parent(n)] x[n]``, and rotates the bone by ``G[n]``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    _check_unit,
    axis_angle_to_quat,
    identity_quat,
    quat_from_euler,
    quat_mul,
    quat_rotate,
    random_unit_vector,
)


class BVHParseError(ValueError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class Skeleton:
    parents: np.ndarray
    ref: np.ndarray
    names: list = field(default=None)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.ref = np.asarray(self.ref, dtype=np.float64).reshape(-1, 3)
        n = len(self.parents)
        if n < 2:
            raise ValueError("a skeleton needs at least two joints")
        if len(self.ref) != n:
            raise ValueError("reference positions and parent list differ in length")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for i in range(1, n):
            if not 0 <= self.parents[i] < i:
                raise ValueError(f"joint {i} has parent {self.parents[i]}; parents must precede children")
        if self.names is None:
            self.names = [f"joint{i}" for i in range(n)]
        self.bones = self.ref - self.ref[np.maximum(self.parents, 0)]
        self.bones[0] = 0.0

    @property
    def n_joints(self):
        return len(self.parents)


def forward_kinematics(skel, x, convention="world", check=True):
    """Joint positions ``(N, 3)`` for per-joint unit quaternions ``x`` ``(N, 4)``.

    Also accepts a batch ``(B, N, 4)``, returning ``(B, N, 3)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != (skel.n_joints, 4):
        raise ValueError(f"expected rotations of shape (..., {skel.n_joints}, 4), got {x.shape}")
    if check:
        _check_unit(x, "joint rotations")
    if convention == "world":
        rot = x
    elif convention == "local":
        rot = np.empty_like(x)
        rot[..., 0, :] = x[..., 0, :]
        for n in range(1, skel.n_joints):
            rot[..., n, :] = quat_mul(rot[..., skel.parents[n], :], x[..., n, :])
    else:
        raise ValueError(f"unknown convention {convention!r}")
    offs = quat_rotate(rot, skel.bones, check=False)
    y = np.empty(x.shape[:-1] + (3,))
    y[..., 0, :] = skel.ref[0]
    for n in range(1, skel.n_joints):
        y[..., n, :] = y[..., skel.parents[n], :] + offs[..., n, :]
    return y


def fk_energy(y_sim, y_obs):
    """Sum of squared joint-coordinate differences."""
    y_sim = np.asarray(y_sim, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    if y_sim.shape != y_obs.shape:
        raise ValueError(f"joint arrays differ: {y_sim.shape} vs {y_obs.shape}")
    d = y_sim - y_obs
    return float(np.sum(d * d))


def rotation_jacobian(q, v):
    """d(R(q) v)/dq for the matrix form of R, shape ``(..., 3, 4)``.

    Valid at unit ``q``, where the matrix entries are quadratic in ``q``.
    """
    w, x, y, z = np.moveaxis(q, -1, 0)
    a, b, c = np.moveaxis(np.asarray(v, dtype=np.float64), -1, 0)
    a, b, c = np.broadcast_arrays(a, b, c)
    j = np.empty(np.broadcast(w, a).shape + (3, 4))
    # row 0: (1-2y^2-2z^2) a + 2(xy - wz) b + 2(xz + wy) c
    j[..., 0, 0] = 2 * (-z * b + y * c)
    j[..., 0, 1] = 2 * (y * b + z * c)
    j[..., 0, 2] = 2 * (-2 * y * a + x * b + w * c)
    j[..., 0, 3] = 2 * (-2 * z * a - w * b + x * c)
    # row 1: 2(xy + wz) a + (1-2x^2-2z^2) b + 2(yz - wx) c
    j[..., 1, 0] = 2 * (z * a - x * c)
    j[..., 1, 1] = 2 * (y * a - 2 * x * b - w * c)
    j[..., 1, 2] = 2 * (x * a + z * c)
    j[..., 1, 3] = 2 * (w * a - 2 * z * b + y * c)
    # row 2: 2(xz - wy) a + 2(yz + wx) b + (1-2x^2-2y^2) c
    j[..., 2, 0] = 2 * (-y * a + x * b)
    j[..., 2, 1] = 2 * (z * a + w * b - 2 * x * c)
    j[..., 2, 2] = 2 * (-w * a + z * b - 2 * y * c)
    j[..., 2, 3] = 2 * (x * a + y * b)
    return j


def fk_backward(skel, x, grad_y):
    """Gradient wrt world-frame rotations ``x`` given ``dL/dy`` (batched ok)."""
    g = np.array(grad_y, dtype=np.float64, copy=True)
    for n in range(skel.n_joints - 1, 0, -1):
        g[..., skel.parents[n], :] += g[..., n, :]
    jac = rotation_jacobian(x, skel.bones)
    gx = np.einsum("...ni,...nij->...nj", g, jac)
    gx[..., 0, :] = 0.0
    return gx


# ---------------------------------------------------------------------------
# Synthetic skeletons
# ---------------------------------------------------------------------------


def random_skeleton(rng, n_joints, bone_range=(0.05, 0.5), chain=False):
    """Random tree (or chain) with random bone directions and lengths."""
    parents = np.full(n_joints, -1)
    for i in range(1, n_joints):
        parents[i] = i - 1 if chain else rng.integers(0, i)
    lengths = rng.uniform(*bone_range, size=n_joints)
    dirs = random_unit_vector(rng, n_joints)
    ref = np.zeros((n_joints, 3))
    for i in range(1, n_joints):
        ref[i] = ref[parents[i]] + lengths[i] * dirs[i]
    return Skeleton(parents, ref)


def sample_joint_rotations(rng, n_joints, max_angle_deg=30.0):
    """Per-joint rotations about uniform axes with angle U(-max, max) degrees."""
    axes = random_unit_vector(rng, n_joints)
    angles = rng.uniform(-max_angle_deg, max_angle_deg, size=n_joints)
    return axis_angle_to_quat(axes, angles)


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------

_ROT_CHANNELS = {"Xrotation": "X", "Yrotation": "Y", "Zrotation": "Z"}
_POS_CHANNELS = {"Xposition", "Yposition", "Zposition"}


@dataclass
class BVHMotion:
    """MOTION block: raw frames plus per-joint channel layout."""

    channels: list
    frames: np.ndarray
    frame_time: float

    def euler(self, frame):
        """Per-joint ``(order, angles_deg)`` for a frame; end sites get ``None``."""
        row = self.frames[frame]
        out = []
        col = 0
        for chans in self.channels:
            rot = [(c, row[col + k]) for k, c in enumerate(chans) if c in _ROT_CHANNELS]
            col += len(chans)
            if rot:
                out.append(("".join(_ROT_CHANNELS[c] for c, _ in rot), np.array([a for _, a in rot])))
            else:
                out.append(None)
        return out

    def local_rotations(self, frame):
        """BVH local joint rotations as quaternions ``(N, 4)``."""
        q = []
        for item in self.euler(frame):
            if item is None:
                q.append(identity_quat())
            else:
                order, ang = item
                q.append(quat_from_euler(np.radians(ang), order))
        return np.array(q)

    def world_rotations(self, skel, frame):
        """Rotations in the world-frame bone convention of :func:`forward_kinematics`.

        In BVH a joint's rotation turns its children's offsets, so the bone
        ending at joint ``n`` is turned by the accumulated global rotation of
        its parent. The root's entry is its own global rotation.
        """
        local = self.local_rotations(frame)
        glob = np.empty_like(local)
        glob[0] = local[0]
        for n in range(1, skel.n_joints):
            glob[n] = quat_mul(glob[skel.parents[n]], local[n])
        out = np.empty_like(local)
        out[0] = glob[0]
        for n in range(1, skel.n_joints):
            out[n] = glob[skel.parents[n]]
        return out


def _tokens(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for tok in line.split():
            yield lineno, tok


def load_bvh(text):
    """Parse a BVH document into ``(Skeleton, BVHMotion or None)``.

    Joints are emitted in file order; End Site blocks become terminal joints
    named ``<parent>_end``. Reference positions are cumulative offsets.
    """
    toks = list(_tokens(text))
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (toks[-1][0] if toks else 0, None)

    def take(expected=None):
        nonlocal pos
        if pos >= len(toks):
            raise BVHParseError(peek()[0], f"unexpected end of file (expected {expected or 'token'})")
        lineno, tok = toks[pos]
        pos += 1
        if expected is not None and tok != expected:
            raise BVHParseError(lineno, f"expected {expected!r}, got {tok!r}")
        return lineno, tok

    def number():
        lineno, tok = take()
        try:
            return float(tok)
        except ValueError:
            raise BVHParseError(lineno, f"malformed number {tok!r}") from None

    names, parents, offsets, channels = [], [], [], []

    def parse_joint(parent, name, end_site=False):
        idx = len(names)
        names.append(name)
        parents.append(parent)
        channels.append([])
        offsets.append(None)
        take("{")
        while True:
            lineno, tok = take()
            if tok == "OFFSET":
                offsets[idx] = [number(), number(), number()]
            elif tok == "CHANNELS" and not end_site:
                cl, ctok = take()
                try:
                    count = int(ctok)
                except ValueError:
                    raise BVHParseError(cl, f"malformed channel count {ctok!r}") from None
                for _ in range(count):
                    l2, c = take()
                    if c not in _ROT_CHANNELS and c not in _POS_CHANNELS:
                        raise BVHParseError(l2, f"unknown channel {c!r}")
                    channels[idx].append(c)
            elif tok == "JOINT" and not end_site:
                _, child = take()
                parse_joint(idx, child)
            elif tok == "End" and not end_site:
                take("Site")
                parse_joint(idx, f"{name}_end", end_site=True)
            elif tok == "}":
                break
            else:
                raise BVHParseError(lineno, f"unexpected token {tok!r} in joint {name!r}")
        if offsets[idx] is None:
            raise BVHParseError(lineno, f"joint {name!r} has no OFFSET")

    take("HIERARCHY")
    take("ROOT")
    _, root = take()
    parse_joint(-1, root)

    ref = np.zeros((len(names), 3))
    for i, off in enumerate(offsets):
        ref[i] = (ref[parents[i]] if parents[i] >= 0 else 0.0) + np.asarray(off)
    skel = Skeleton(parents, ref, names)

    motion = None
    if pos < len(toks):
        take("MOTION")
        take("Frames:")
        fl, ftok = take()
        try:
            n_frames = int(ftok)
        except ValueError:
            raise BVHParseError(fl, f"malformed frame count {ftok!r}") from None
        take("Frame")
        take("Time:")
        frame_time = number()
        width = sum(len(c) for c in channels)
        rest = toks[pos:]
        lines = {}
        for lineno, tok in rest:
            lines.setdefault(lineno, []).append(tok)
        rows = []
        for lineno in sorted(lines):
            vals = lines[lineno]
            if len(vals) != width:
                raise BVHParseError(lineno, f"frame has {len(vals)} values, expected {width}")
            try:
                rows.append([float(v) for v in vals])
            except ValueError:
                raise BVHParseError(lineno, "malformed number in frame") from None
        if len(rows) != n_frames:
            raise BVHParseError(fl, f"declared {n_frames} frames, found {len(rows)}")
        motion = BVHMotion(channels, np.array(rows).reshape(n_frames, width), frame_time)
    return skel, motion


def dump_bvh(skel):
    """HIERARCHY-only BVH text reproducing ``skel`` exactly (``repr`` floats).

    Leaf joints are written as End Sites only when named ``<parent>_end``;
    every other joint carries three rotation channels.
    """
    children = [[] for _ in range(skel.n_joints)]
    for i in range(1, skel.n_joints):
        children[skel.parents[i]].append(i)
    lines = ["HIERARCHY"]

    def emit(i, depth):
        pad = "  " * depth
        off = skel.ref[i] - (skel.ref[skel.parents[i]] if i else 0.0)
        if i == 0:
            off = skel.ref[0]
        end = i > 0 and not children[i] and skel.names[i] == f"{skel.names[skel.parents[i]]}_end"
        if end:
            lines.append(f"{pad}End Site")
        else:
            lines.append(f"{pad}{'ROOT' if i == 0 else 'JOINT'} {skel.names[i]}")
        lines.append(pad + "{")
        lines.append(f"{pad}  OFFSET {float(off[0])!r} {float(off[1])!r} {float(off[2])!r}")
        if not end:
            lines.append(f"{pad}  CHANNELS 3 Zrotation Xrotation Yrotation")
        for c in children[i]:
            emit(c, depth + 1)
        lines.append(pad + "}")

    emit(0, 0)
    return "\n".join(lines) + "\n"
