"""Forward models, encodings, data generation and metrics for the three tasks.

Estimates are flat float64 vectors:

- pose: ``[qw, qx, qy, qz, tx, ty, tz]``; translation is the offset from the
  object anchor ``(0, 0, -1.5)`` in camera coordinates.
- light: a unit travel direction (directional) or an object-centered
  position (point), 3 values.
- ik: ``N`` joint quaternions, ``4N`` values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import (
    Pose6DoF,
    axis_angle_to_quat,
    identity_quat,
    quat_angle,
    quat_normalize,
    random_unit_vector,
)
from .kinematics import (
    Skeleton,
    fk_backward,
    fk_energy,
    forward_kinematics,
    random_skeleton,
    sample_joint_rotations,
)
from .render import Camera, Light, image_energy, make_primitive, rasterize, silhouette_energy

ANCHOR = np.array([0.0, 0.0, -1.5])
SPLIT_FRACTIONS = {"train": 0.7, "val": 0.1, "test": 0.2}


# ---------------------------------------------------------------------------
# Forward models
# ---------------------------------------------------------------------------


class PoseModel:
    """Silhouette of a mesh at a pose offset from the anchor."""

    def __init__(self, mesh, cam, anchor=ANCHOR):
        self.mesh = mesh
        self.cam = cam
        self.anchor = np.asarray(anchor, dtype=np.float64)

    def simulate(self, x):
        x = np.asarray(x, dtype=np.float64)
        pose = np.concatenate([x[:4], x[4:7] + self.anchor])
        return rasterize(self.mesh, pose, self.cam, "silhouette")

    def data_energy(self, y_sim, y_obs):
        return silhouette_energy(y_sim, y_obs)

    def project(self, x):
        x = np.array(x, dtype=np.float64)
        x[:4] = quat_normalize(x[:4])
        return x


class LightModel:
    """Lambertian render of a mesh at a fixed pose under a single light."""

    def __init__(self, mesh, cam, kind="directional", pose=None, albedo=0.8, anchor=ANCHOR):
        self.mesh = mesh
        self.cam = cam
        self.kind = kind
        self.anchor = np.asarray(anchor, dtype=np.float64)
        if pose is None:
            pose = Pose6DoF(identity_quat(), self.anchor)
        self.pose = pose
        self.albedo = albedo

    def light(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "directional":
            return Light("directional", tuple(x / np.linalg.norm(x)))
        return Light("point", tuple(x + self.anchor))

    def simulate(self, x):
        return rasterize(self.mesh, self.pose, self.cam, "lambertian", light=self.light(x), albedo=self.albedo)

    def data_energy(self, y_sim, y_obs):
        return image_energy(y_sim, y_obs)

    def project(self, x):
        x = np.array(x, dtype=np.float64)
        if self.kind == "directional":
            n = np.linalg.norm(x)
            if n == 0 or not np.isfinite(n):
                raise ValueError("directional light estimate collapsed to zero")
            x /= n
        return x


class IKModel:
    """Forward kinematics of a skeleton, observations are ``(N, 3)`` positions."""

    def __init__(self, skel, convention="world"):
        self.skel = skel
        self.convention = convention

    def simulate(self, x):
        q = np.asarray(x, dtype=np.float64).reshape(self.skel.n_joints, 4)
        return forward_kinematics(self.skel, q, self.convention)

    def data_energy(self, y_sim, y_obs):
        return fk_energy(y_sim, y_obs)

    def project(self, x):
        q = np.asarray(x, dtype=np.float64).reshape(-1, 4)
        return quat_normalize(q).reshape(-1)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def pose_metrics(pred, gt, trans_thresh=0.2, rot_thresh=30.0):
    """``(translation error m, rotation error deg, outlier)``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    te = float(np.linalg.norm(pred[4:7] - gt[4:7]))
    re = float(quat_angle(quat_normalize(pred[:4]), quat_normalize(gt[:4])))
    return te, re, bool(te > trans_thresh or re > rot_thresh)


def light_metrics(pred, gt, threshold=0.5):
    """``(mse, outlier)``; the outlier threshold is a free choice."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    mse = float(np.mean(d * d))
    return mse, bool(mse > threshold)


def ik_metrics(pred_rot, gt_rot, skel, convention="world"):
    """``(mean joint position error cm, mean joint angular error deg)``."""
    p = quat_normalize(np.asarray(pred_rot, dtype=np.float64).reshape(-1, 4))
    g = quat_normalize(np.asarray(gt_rot, dtype=np.float64).reshape(-1, 4))
    yp = forward_kinematics(skel, p, convention)
    yg = forward_kinematics(skel, g, convention)
    pos = 100.0 * float(np.mean(np.linalg.norm(yp - yg, axis=1)))
    ang = float(np.mean(quat_angle(p, g)))
    return pos, ang


def ik_loss(pred_rot, gt_rot, skel, w_pos=1.0, w_rot=1.0):
    """Position + double-cover-aware rotation loss and its gradient.

    ``pred_rot`` is ``(B, N, 4)`` (or ``(N, 4)``) and need not be normalized;
    it is normalized first and the gradient flows back through that step and
    through forward kinematics. The loss is the batch mean of
    ``w_pos * |FK(p) - FK(g)|^2 + w_rot * sum_n min(|p_n - g_n|^2, |p_n + g_n|^2)``.
    """
    raw = np.asarray(pred_rot, dtype=np.float64)
    single = raw.ndim == 2
    if single:
        raw = raw[None]
    g = np.asarray(gt_rot, dtype=np.float64).reshape(raw.shape)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    p = raw / norm
    bsz = raw.shape[0]

    yp = forward_kinematics(skel, p, check=False)
    yg = forward_kinematics(skel, g, check=False)
    dy = yp - yg
    pos = np.sum(dy * dy, axis=(1, 2))
    grad_p = w_pos * fk_backward(skel, p, 2.0 * dy)

    sign = np.where(np.sum(p * g, axis=-1, keepdims=True) >= 0, 1.0, -1.0)
    dq = p - sign * g
    rot = np.sum(dq * dq, axis=(1, 2))
    grad_p = grad_p + w_rot * 2.0 * dq

    loss = float(np.mean(w_pos * pos + w_rot * rot))
    grad_p /= bsz
    grad_raw = (grad_p - p * np.sum(p * grad_p, axis=-1, keepdims=True)) / norm
    return loss, (grad_raw[0] if single else grad_raw)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    x_gt: np.ndarray
    y: np.ndarray
    split: str
    scene: int = 0
    index: int = 0


def split_sizes(count):
    """Floor of 70/10/20 for val and test; the remainder goes to train."""
    val = int(np.floor(SPLIT_FRACTIONS["val"] * count))
    test = int(np.floor(SPLIT_FRACTIONS["test"] * count))
    return {"train": count - val - test, "val": val, "test": test}


def sample_pose(rng, max_angle=40.0, max_offset=0.2):
    """Rotation about a uniform axis by U(-40, 40) deg, offset U(-0.2, 0.2)^3 m."""
    axis = random_unit_vector(rng)
    angle = rng.uniform(-max_angle, max_angle)
    trans = rng.uniform(-max_offset, max_offset, size=3)
    return np.concatenate([axis_angle_to_quat(axis, angle), trans])


def sample_light(rng, kind="directional"):
    """Uniform point on the camera-side unit hemisphere (``z >= 0``).

    Directional lights return the unit vector from that point toward the
    origin; point lights return the point itself.
    """
    p = random_unit_vector(rng)
    p[2] = abs(p[2])
    return -p if kind == "directional" else p


class Task:
    """Common plumbing; subclasses define the forward models and encodings."""

    name = "task"
    default_stages = 1

    def __init__(self):
        self._models = {}

    # subclasses provide: dim, n_scenes, _make_model, sample, initial_estimate,
    # encode_batch, network_config, input_shape, aux_dim, metrics, metric_names

    def model(self, scene=0):
        if scene not in self._models:
            self._models[scene] = self._make_model(scene)
        return self._models[scene]

    def project(self, x, scene=0):
        return self.model(scene).project(x)

    def encode(self, x, y_t, y):
        inp, aux = self.encode_batch(np.asarray(x)[None], np.asarray(y_t)[None], np.asarray(y)[None])
        return inp[0], aux[0]

    def build_network(self, seed=0, **kw):
        return nn.Network(self.network_config(), self.input_shape, self.aux_dim, seed=seed, **kw)

    def loss(self, pred, gt):
        """Batch loss of ``pred = x_t + g`` against ``x_gt`` and its gradient."""
        pred = np.asarray(pred, dtype=np.float64)
        return nn.mse_loss(pred, self.align_target(pred, gt))

    def align_target(self, pred, gt):
        return np.asarray(gt, dtype=np.float64)

    def error(self, pred, gt, scene=0):
        """Scalar error used for stage summaries (first metric)."""
        return self.metrics(pred, gt, scene)[self.metric_names[0]]

    def update_fn(self, net):
        return NetworkUpdate(self, net)


def _image_stack(y, y_t):
    y = np.asarray(y, dtype=np.float32)
    y_t = np.asarray(y_t, dtype=np.float32)
    if y.shape != y_t.shape:
        raise ValueError(f"observation {y.shape} and simulation {y_t.shape} differ")
    if y.ndim == 3:
        y, y_t = y[:, None], y_t[:, None]
    return np.concatenate([y, y_t, y - y_t], axis=1)


class PoseTask(Task):
    """6-DoF pose from a binary silhouette of a known mesh."""

    name = "pose"
    default_stages = 5
    dim = 7
    metric_names = ("trans", "rot")

    def __init__(self, meshes=None, resolution=64, fov_deg=50.0, object_size=0.5):
        super().__init__()
        if meshes is None:
            meshes = default_meshes(object_size)
        self.meshes = list(meshes)
        self.resolution = resolution
        self.cam = Camera.default(resolution, fov_deg)
        self.fov_deg = fov_deg
        self.input_shape = (3, resolution, resolution)
        self.aux_dim = self.dim

    @property
    def n_scenes(self):
        return len(self.meshes)

    def _make_model(self, scene):
        return PoseModel(self.meshes[scene], self.cam)

    def sample(self, rng):
        scene = int(rng.integers(self.n_scenes)) if self.n_scenes > 1 else 0
        return sample_pose(rng), scene

    def initial_estimate(self, scene=0):
        return np.concatenate([identity_quat(), np.zeros(3)])

    def encode_batch(self, x, y_t, y):
        stack = _image_stack(y, y_t)
        if stack.shape[1:] != self.input_shape:
            raise ValueError(f"pose input {stack.shape[1:]} does not match {self.input_shape}")
        return stack, np.asarray(x, dtype=np.float32).reshape(len(stack), self.dim)

    def network_config(self):
        return pose_network_config(self.dim)

    def align_target(self, pred, gt):
        gt = np.array(gt, dtype=np.float64)
        flip = np.sum(pred[:, :4] * gt[:, :4], axis=1) < 0
        gt[flip, :4] *= -1.0
        return gt

    def metrics(self, pred, gt, scene=0):
        te, re, out = pose_metrics(pred, gt)
        return {"trans": te, "rot": re, "outlier": out}

    def energy_function(self, y, scene=0):
        return _EnergyOfModel(self.model(scene), y)


class LightTask(Task):
    """Light direction (or position) from a Lambertian RGB image."""

    name = "light"
    default_stages = 7
    dim = 3
    metric_names = ("mse",)

    def __init__(self, kind="directional", meshes=None, resolution=64, fov_deg=50.0, object_size=0.5,
                 albedo=0.8, outlier_threshold=0.5):
        super().__init__()
        if meshes is None:
            meshes = [make_primitive("icosphere", object_size, subdiv=2), make_primitive("cube", object_size)]
        self.kind = kind
        self.meshes = list(meshes)
        self.resolution = resolution
        self.fov_deg = fov_deg
        self.cam = Camera.default(resolution, fov_deg)
        self.albedo = albedo
        self.outlier_threshold = outlier_threshold
        rot = axis_angle_to_quat([1.0, -1.0, 0.0], 35.0)
        self.object_pose = Pose6DoF(rot, ANCHOR.copy())
        self.input_shape = (9, resolution, resolution)
        self.aux_dim = self.dim

    @property
    def n_scenes(self):
        return len(self.meshes)

    def _make_model(self, scene):
        return LightModel(self.meshes[scene], self.cam, self.kind, self.object_pose, self.albedo)

    def sample(self, rng):
        scene = int(rng.integers(self.n_scenes)) if self.n_scenes > 1 else 0
        return sample_light(rng, self.kind), scene

    def initial_estimate(self, scene=0):
        pole = np.array([0.0, 0.0, 1.0])
        return -pole if self.kind == "directional" else pole

    def encode_batch(self, x, y_t, y):
        stack = _image_stack(y, y_t)
        if stack.shape[1:] != self.input_shape:
            raise ValueError(f"light input {stack.shape[1:]} does not match {self.input_shape}")
        return stack, np.asarray(x, dtype=np.float32).reshape(len(stack), self.dim)

    def network_config(self):
        return pose_network_config(self.dim)

    def metrics(self, pred, gt, scene=0):
        mse, out = light_metrics(pred, gt, self.outlier_threshold)
        return {"mse": mse, "outlier": out}


class IKTask(Task):
    """Joint rotations from target joint positions of a fixed skeleton."""

    name = "ik"
    default_stages = 3
    metric_names = ("pos", "rot")

    def __init__(self, skeleton=None, n_joints=8, seed=0, max_angle=30.0, convention="world",
                 w_pos=1.0, w_rot=1.0, hidden=256):
        super().__init__()
        if skeleton is None:
            skeleton = random_skeleton(np.random.default_rng(seed), n_joints, chain=True)
        self.skel = skeleton
        self.max_angle = max_angle
        self.convention = convention
        self.w_pos = w_pos
        self.w_rot = w_rot
        self.hidden = hidden
        n = self.skel.n_joints
        self.dim = 4 * n
        self.input_shape = (9 * n,)
        self.aux_dim = 4 * n

    n_scenes = 1

    def _make_model(self, scene):
        return IKModel(self.skel, self.convention)

    def sample(self, rng):
        q = sample_joint_rotations(rng, self.skel.n_joints, self.max_angle)
        return q.reshape(-1), 0

    def initial_estimate(self, scene=0):
        return identity_quat(self.skel.n_joints).reshape(-1)

    def encode_batch(self, x, y_t, y):
        y = np.asarray(y, dtype=np.float32).reshape(len(y), -1)
        y_t = np.asarray(y_t, dtype=np.float32).reshape(len(y_t), -1)
        if y.shape != y_t.shape or y.shape[1] != 3 * self.skel.n_joints:
            raise ValueError(f"ik positions {y.shape} / {y_t.shape} do not match {self.skel.n_joints} joints")
        return np.concatenate([y, y_t, y - y_t], axis=1), np.asarray(x, dtype=np.float32).reshape(len(y), self.dim)

    def network_config(self):
        return ik_network_config(self.dim, self.hidden)

    def loss(self, pred, gt):
        n = self.skel.n_joints
        pred = np.asarray(pred, dtype=np.float64)
        loss, grad = ik_loss(pred.reshape(-1, n, 4), np.asarray(gt).reshape(-1, n, 4), self.skel,
                             self.w_pos, self.w_rot)
        return loss, grad.reshape(pred.shape)

    def metrics(self, pred, gt, scene=0):
        pos, ang = ik_metrics(pred, gt, self.skel, self.convention)
        return {"pos": pos, "rot": ang}


def default_meshes(size=0.5):
    return [
        make_primitive("cube", size),
        make_primitive("icosphere", size, subdiv=2),
        make_primitive("cylinder", size, segments=16),
    ]


def pose_network_config(out_dim, channels=(8, 16), kernel=5, hidden=128):
    return [
        ("conv", channels[0], kernel),
        ("relu",),
        ("pool", 2),
        ("conv", channels[1], kernel),
        ("relu",),
        ("pool", 2),
        ("flatten",),
        ("concat",),
        ("dense", hidden),
        ("relu",),
        ("dense", out_dim),
    ]


def ik_network_config(out_dim, hidden=256, layers=3):
    cfg = [("concat",)]
    for _ in range(layers):
        cfg += [("dense", hidden), ("relu",)]
    return cfg + [("dense", out_dim)]


def conv_param_count(input_shape, aux_dim, out_dim, channels=(8, 16), kernel=5, hidden=128):
    """Closed-form parameter count of :func:`pose_network_config`."""
    c, h, w = input_shape
    n = 0
    for ch in channels:
        n += ch * c * kernel * kernel + ch
        h, w = (h - kernel + 1) // 2, (w - kernel + 1) // 2
        c = ch
    flat = c * h * w + aux_dim
    return n + flat * hidden + hidden + hidden * out_dim + out_dim


def mlp_param_count(in_dim, aux_dim, out_dim, hidden=256, layers=3):
    n, d = 0, in_dim + aux_dim
    for _ in range(layers):
        n += d * hidden + hidden
        d = hidden
    return n + d * out_dim + out_dim


class _EnergyOfModel:
    def __init__(self, model, y):
        self.model = model
        self.y = y

    def __call__(self, x):
        return self.model.data_energy(self.model.simulate(self.model.project(x)), self.y)


class NetworkUpdate:
    """Adapts a :class:`~deepfeedback.nn.Network` to the solver's update signature."""

    def __init__(self, task, net):
        self.task = task
        self.net = net

    def __call__(self, x, y_t, y):
        inp, aux = self.task.encode(x, y_t, y)
        out = self.net.forward(inp[None], aux[None])
        return out[0].astype(np.float64)

    def batch(self, x, y_t, y, chunk=32):
        out = []
        for i in range(0, len(x), chunk):
            inp, aux = self.task.encode_batch(x[i : i + chunk], y_t[i : i + chunk], y[i : i + chunk])
            out.append(self.net.forward(inp, aux).astype(np.float64))
        return np.concatenate(out) if out else np.zeros((0, self.task.dim))


def perfect_update(x_gt):
    """Debug update network that jumps straight to ``x_gt``."""
    x_gt = np.asarray(x_gt, dtype=np.float64)
    return lambda x, y_t, y: x_gt - x


def zero_update(x, y_t, y):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    task: Task
    samples: list = field(default_factory=list)
    seed: int = 0

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    def sizes(self):
        return {k: len(self.split(k)) for k in ("train", "val", "test")}


def generate_dataset(task, count, seed):
    """Deterministic samples with per-sample generators seeded by ``(seed, i)``."""
    if count < 10:
        raise ValueError("count must be at least 10")
    sizes = split_sizes(count)
    tags = ["train"] * sizes["train"] + ["val"] * sizes["val"] + ["test"] * sizes["test"]
    samples = []
    for i, tag in enumerate(tags):
        rng = np.random.default_rng([seed, i])
        x_gt, scene = task.sample(rng)
        y = task.model(scene).simulate(x_gt)
        samples.append(Sample(x_gt, y, tag, scene, i))
    return Dataset(task, samples, seed)


def make_task(name, **kw):
    if name == "pose":
        return PoseTask(**kw)
    if name == "light":
        return LightTask(**kw)
    if name == "ik":
        return IKTask(**kw)
    raise ValueError(f"unknown task {name!r}")
