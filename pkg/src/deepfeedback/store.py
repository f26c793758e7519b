"""On-disk datasets, task configs and weight directories.

A dataset directory holds::

    task.cfg        flat ``key = value`` task description
    manifest.csv    index,split,scene,obs,x0..x{d-1} (shortest round-trip floats)
    meshes/         scene{k}.obj (pose, light)
    skeleton.bvh    hierarchy (ik)
    obs/            one observation per sample: PGM, 16-bit PPM or text positions

Everything is written in a fixed order with fixed formatting so two runs with
the same seed produce byte-identical directories.
"""
from __future__ import annotations

import csv
import os

import numpy as np

from . import nn
from .kinematics import dump_bvh, load_bvh
from .render import TriangleMesh, dump_obj, load_obj, read_pnm, write_pnm
from .tasks import Dataset, IKTask, LightTask, PoseTask, Sample


class ConfigError(ValueError):
    pass


class ObservationParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


def fmt(v):
    """Shortest round-trip text for a float."""
    return repr(float(v))


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def dump_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


def read_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), path)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


def task_config(task):
    if isinstance(task, PoseTask):
        return {"task": "pose", "resolution": task.resolution, "fov_deg": fmt(task.fov_deg),
                "scenes": task.n_scenes}
    if isinstance(task, LightTask):
        return {"task": "light", "kind": task.kind, "resolution": task.resolution,
                "fov_deg": fmt(task.fov_deg), "albedo": fmt(task.albedo), "scenes": task.n_scenes}
    if isinstance(task, IKTask):
        return {"task": "ik", "joints": task.skel.n_joints, "max_angle": fmt(task.max_angle),
                "convention": task.convention, "w_pos": fmt(task.w_pos), "w_rot": fmt(task.w_rot),
                "hidden": task.hidden}
    raise TypeError(f"unsupported task {type(task).__name__}")


def write_task(task, out):
    """Write ``task.cfg`` plus meshes or skeleton into directory ``out``."""
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "task.cfg"), "w") as fh:
        fh.write(dump_config(task_config(task)))
    if isinstance(task, IKTask):
        with open(os.path.join(out, "skeleton.bvh"), "w") as fh:
            fh.write(dump_bvh(task.skel))
    else:
        os.makedirs(os.path.join(out, "meshes"), exist_ok=True)
        for k, mesh in enumerate(task.meshes):
            with open(os.path.join(out, "meshes", f"scene{k}.obj"), "w") as fh:
                fh.write(dump_obj(mesh))


def read_task(path):
    """Rebuild a task from a directory written by :func:`write_task`."""
    cfg_path = os.path.join(path, "task.cfg")
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(f"no task.cfg in {path}")
    cfg = read_config(cfg_path)
    try:
        name = cfg["task"]
        if name == "ik":
            with open(os.path.join(path, "skeleton.bvh")) as fh:
                skel, _ = load_bvh(fh.read())
            if skel.n_joints != int(cfg["joints"]):
                raise ConfigError(f"skeleton has {skel.n_joints} joints, task.cfg says {cfg['joints']}")
            return IKTask(skel, max_angle=float(cfg["max_angle"]), convention=cfg["convention"],
                          w_pos=float(cfg["w_pos"]), w_rot=float(cfg["w_rot"]), hidden=int(cfg["hidden"]))
        meshes = []
        for k in range(int(cfg["scenes"])):
            with open(os.path.join(path, "meshes", f"scene{k}.obj")) as fh:
                m = load_obj(fh.read())
            meshes.append(TriangleMesh(m.vertices, m.faces))
        if name == "pose":
            return PoseTask(meshes, int(cfg["resolution"]), float(cfg["fov_deg"]))
        if name == "light":
            return LightTask(cfg["kind"], meshes, int(cfg["resolution"]), float(cfg["fov_deg"]),
                             albedo=float(cfg["albedo"]))
    except KeyError as e:
        raise ConfigError(f"{cfg_path}: missing key {e.args[0]}") from None
    raise ConfigError(f"{cfg_path}: unknown task {name!r}")


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


def obs_suffix(task):
    if isinstance(task, IKTask):
        return ".txt"
    return ".pgm" if isinstance(task, PoseTask) else ".ppm"


def write_observation(path, task, y):
    if isinstance(task, IKTask):
        with open(path, "w") as fh:
            fh.write("".join(f"{fmt(a)} {fmt(b)} {fmt(c)}\n" for a, b, c in np.asarray(y)))
    elif isinstance(task, PoseTask):
        write_pnm(path, y, 255)
    else:
        write_pnm(path, y, 65535)


def read_positions(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ObservationParseError(path, lineno, f"expected 3 coordinates, found {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ObservationParseError(path, lineno, "malformed number") from None
    if not rows:
        raise ObservationParseError(path, 1, "no joint positions")
    return np.array(rows)


def read_observation(path, task=None):
    """Load an observation; images by magic number, anything else as positions."""
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head in (b"P5", b"P6"):
        try:
            y = read_pnm(path)
        except ValueError as e:
            raise ObservationParseError(path, 1, str(e)) from None
        if task is not None and not isinstance(task, IKTask):
            want = (task.resolution, task.resolution)
            if y.shape[-2:] != want:
                raise ObservationParseError(path, 2, f"image is {y.shape[-2:]}, task expects {want}")
        return y
    y = read_positions(path)
    if task is not None and isinstance(task, IKTask) and len(y) != task.skel.n_joints:
        raise ObservationParseError(path, len(y), f"{len(y)} positions for {task.skel.n_joints} joints")
    return y


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def write_dataset(ds, out):
    task = ds.task
    write_task(task, out)
    os.makedirs(os.path.join(out, "obs"), exist_ok=True)
    suffix = obs_suffix(task)
    with open(os.path.join(out, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "split", "scene", "obs"] + [f"x{i}" for i in range(task.dim)])
        for s in ds.samples:
            name = f"obs/{s.index:06d}{suffix}"
            write_observation(os.path.join(out, name), task, s.y)
            w.writerow([s.index, s.split, s.scene, name] + [fmt(v) for v in s.x_gt])
    with open(os.path.join(out, "dataset.cfg"), "w") as fh:
        fh.write(dump_config({"count": len(ds.samples), "seed": ds.seed}))


def read_dataset(path):
    """Load ``(task, Dataset)``; observations come from the stored files."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    task = read_task(path)
    manifest = os.path.join(path, "manifest.csv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.csv in {path}")
    seed = int(read_config(os.path.join(path, "dataset.cfg")).get("seed", 0))
    samples = []
    with open(manifest, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if len(header) != 4 + task.dim:
            raise ConfigError(f"{manifest}: {len(header) - 4} estimate columns, task has {task.dim}")
        for lineno, row in enumerate(rows, 2):
            try:
                idx, split, scene, obs = int(row[0]), row[1], int(row[2]), row[3]
                x = np.array([float(v) for v in row[4:]])
            except (ValueError, IndexError):
                raise ConfigError(f"{manifest}:{lineno}: malformed row") from None
            y = read_observation(os.path.join(path, obs), task)
            samples.append(Sample(x, y, split, scene, idx))
    return task, Dataset(task, samples, seed)


def write_weights(nets, out):
    os.makedirs(out, exist_ok=True)
    for t, net in enumerate(nets):
        with open(os.path.join(out, f"stage{t}.dfnw"), "wb") as fh:
            fh.write(nn.save_weights(net))


def read_weights(task, path, stages=None):
    """Load ``stage{t}.dfnw`` for ``t = 0..`` (all present, or the first ``stages``)."""
    nets = []
    t = 0
    while stages is None or t < stages:
        f = os.path.join(path, f"stage{t}.dfnw")
        if not os.path.exists(f):
            break
        with open(f, "rb") as fh:
            nets.append(nn.load_weights(fh.read(), task.build_network()))
        t += 1
    if not nets:
        raise FileNotFoundError(f"no stage0.dfnw in {path}")
    if stages is not None and len(nets) < stages:
        raise FileNotFoundError(f"{path} holds {len(nets)} stages, {stages} requested")
    return nets
