"""Stage-wise training of per-stage update networks.

Stage ``t`` is trained on ``(x_t, f(x_t), y) -> x_gt`` where ``x_t`` comes
from rolling every training sample through the already-trained (frozen)
stages ``0..t-1`` without damping. Each stage minimizes its own loss on
``x_t + g_t(...)``; there is no back-propagation through time.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class StagePlan:
    stages: int = 1
    epochs: int = 50
    lr: float = 1e-3
    batch: int = 32
    patience: int = 10
    seed: int = 0
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")


@dataclass
class StageData:
    """Materialized inputs for one stage."""

    x: np.ndarray
    y_t: list
    y: list
    x_gt: np.ndarray
    scenes: np.ndarray
    inp: np.ndarray = None
    aux: np.ndarray = None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, stage, train_loss, val_loss):
        self.rows.append((epoch, stage, train_loss, val_loss))

    def best_val(self, stage):
        return min(r[3] for r in self.rows if r[1] == stage)

    def first_val(self, stage):
        return next(r[3] for r in self.rows if r[1] == stage)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "stage", "train_loss", "val_loss"])
        for e, s, tl, vl in self.rows:
            w.writerow([e, s, f"{tl:.6g}", f"{vl:.6g}"])
        return buf.getvalue()


def _initial_states(task, samples):
    return np.stack([task.initial_estimate(s.scene) for s in samples]) if samples else np.zeros((0, task.dim))


def simulate_all(task, x, scenes):
    return [task.model(int(sc)).simulate(xi) for xi, sc in zip(x, scenes)]


def project_all(task, x, scenes):
    return np.stack([task.model(int(sc)).project(xi) for xi, sc in zip(x, scenes)]) if len(x) else x


def build_stage_data(task, samples, x):
    scenes = np.array([s.scene for s in samples], dtype=np.int64)
    y = [s.y for s in samples]
    y_t = simulate_all(task, x, scenes)
    data = StageData(np.asarray(x, dtype=np.float64), y_t, y,
                     np.stack([s.x_gt for s in samples]) if samples else np.zeros((0, task.dim)), scenes)
    if samples:
        data.inp, data.aux = task.encode_batch(x, np.stack(y_t), np.stack(y))
    return data


def predict(net, data, chunk=32):
    out = []
    for i in range(0, len(data.x), chunk):
        out.append(net.forward(data.inp[i : i + chunk], data.aux[i : i + chunk]).astype(np.float64))
    return np.concatenate(out) if out else np.zeros_like(data.x)


def advance(task, net, data):
    """Apply one undamped stage: ``project(x + g(x, f(x), y))``."""
    return project_all(task, data.x + predict(net, data), data.scenes)


def eval_loss(task, net, data, chunk=32):
    if not len(data.x):
        return float("nan")
    pred = data.x + predict(net, data, chunk)
    loss, _ = task.loss(pred, data.x_gt)
    return loss


def _fit(task, net, datasets, val_sets, plan, rng, log_rows, stage, regenerate=None):
    """Mini-batch Adam over ``datasets``; keeps the best-validation weights."""
    opt = nn.AdamState.for_params(net.params, lr=plan.lr)
    best_val, best_params, stale = np.inf, None, 0
    for epoch in range(plan.epochs):
        if regenerate is not None:
            datasets, val_sets = regenerate(net)
        inp = np.concatenate([d.inp for d in datasets])
        aux = np.concatenate([d.aux for d in datasets])
        x = np.concatenate([d.x for d in datasets])
        gt = np.concatenate([d.x_gt for d in datasets])
        order = rng.permutation(len(x))
        total, count = 0.0, 0
        for i in range(0, len(order), plan.batch):
            b = order[i : i + plan.batch]
            net.zero_grad()
            out = net.forward(inp[b], aux[b])
            loss, grad = task.loss(x[b] + out.astype(np.float64), gt[b])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at stage {stage}, epoch {epoch}")
            net.backward(grad, input_grad=False)
            nn.adam_step(opt, net.params, net.grads)
            total += loss * len(b)
            count += len(b)
        train_loss = total / max(count, 1)
        val_loss = float(np.mean([eval_loss(task, net, v) for v in val_sets])) if val_sets else train_loss
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at stage {stage}, epoch {epoch}")
        log_rows.add(epoch, stage, train_loss, val_loss)
        log.info("stage %d epoch %d train %.6g val %.6g", stage, epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_params, stale = val_loss, [p.copy() for p in net.params], 0
        else:
            stale += 1
            if stale >= plan.patience:
                break
        opt.lr *= plan.lr_decay
    for p, b in zip(net.params, best_params):
        p[...] = b
    return net


def train_stagewise(task, dataset, plan):
    """Train ``plan.stages`` networks one after another.

    Returns
    -------
    nets : list of Network
    log : TrainLog
        One row per epoch per stage.
    """
    train = dataset.split("train")
    val = dataset.split("val")
    if not train:
        raise ValueError("dataset has no training samples")
    x_tr = _initial_states(task, train)
    x_va = _initial_states(task, val)
    nets, logs, sums = [], TrainLog(), []
    for t in range(plan.stages):
        d_tr = build_stage_data(task, train, x_tr)
        d_va = build_stage_data(task, val, x_va)
        net = task.build_network(seed=plan.seed + t)
        rng = np.random.default_rng([plan.seed, t])
        _fit(task, net, [d_tr], [d_va] if val else [], plan, rng, logs, t)
        for prev, cs in zip(nets, sums):
            if prev.checksum() != cs:
                raise TrainingError("an earlier stage changed while training a later one")
        nets.append(net)
        sums.append(net.checksum())
        if t + 1 < plan.stages:
            x_tr = advance(task, net, d_tr)
            x_va = advance(task, net, d_va) if val else x_va
    return nets, logs


def train_shared(task, dataset, plan):
    """Train one network on all stages, re-rolling the stage data every epoch."""
    train = dataset.split("train")
    val = dataset.split("val")
    if not train:
        raise ValueError("dataset has no training samples")
    x0_tr = _initial_states(task, train)
    x0_va = _initial_states(task, val)

    def rollout(net, samples, x0):
        out, x = [], x0
        for t in range(plan.stages):
            d = build_stage_data(task, samples, x)
            out.append(d)
            if t + 1 < plan.stages:
                x = advance(task, net, d)
        return out

    def regenerate(net):
        return rollout(net, train, x0_tr), (rollout(net, val, x0_va) if val else [])

    net = task.build_network(seed=plan.seed)
    rng = np.random.default_rng([plan.seed, 0])
    logs = TrainLog()
    regen = regenerate if plan.stages > 1 else None
    if regen is None:
        d_tr, d_va = regenerate(net)
        _fit(task, net, d_tr, d_va, plan, rng, logs, 0)
    else:
        _fit(task, net, None, None, plan, rng, logs, 0, regenerate=regen)
    return net, logs


def regression_baseline(task, dataset, plan=None):
    """Single-shot regressor: the stage-0 network, trained alone."""
    plan = plan or StagePlan()
    plan = StagePlan(1, plan.epochs, plan.lr, plan.batch, plan.patience, plan.seed, plan.lr_decay)
    nets, logs = train_stagewise(task, dataset, plan)
    return nets[0], logs


def rollout_errors(task, nets, samples):
    """Per-stage task errors for undamped rollouts of ``samples``.

    Returns a list (length ``len(nets) + 1``) of per-sample metric dicts.
    """
    x = _initial_states(task, samples)
    out = []
    for t in range(len(nets) + 1):
        out.append([task.metrics(xi, s.x_gt, s.scene) for xi, s in zip(x, samples)])
        if t < len(nets):
            d = build_stage_data(task, samples, x)
            x = advance(task, nets[t], d)
    return out
