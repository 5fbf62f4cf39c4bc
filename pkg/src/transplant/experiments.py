"""Architecture presets, teacher pretraining, evaluation and plan sweeps on shape-world data."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np

from . import graph as G
from . import layers as L
from .data import ShapeWorldSpec, make_split
from .train import (ConfigError, TrainConfig, head_loss_backward, optimizer_step, task_of,
                    train_adapter)
from .tensor import make_rng

log = logging.getLogger(__name__)

EXPERIMENTS = ("exp1-adapter-insertion", "exp3-seg-transplant", "exp2-cls-sequence")


class QualityGateError(RuntimeError):
    """A pretrained teacher missed its validation gate."""


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class ArchPreset:
    name: str = "small"
    channels: tuple = (8, 16, 16, 16)
    task_channels: int = 16
    image_size: int = 32
    cls_pool: bool = True
    seg_relu: bool = False        # two stacked convs, linear up to the sigmoid

    @property
    def junction_shape(self) -> tuple:
        return (self.channels[-1], self.image_size // 4, self.image_size // 4)


PRESETS = {"small": ArchPreset()}


def category_specs(p: ArchPreset) -> list:
    c1, c2, c3, c4 = p.channels
    # the first pool comes early: full-resolution convs dominate CPU time
    return [L.Conv(1, c1), L.ReLU(), L.MaxPool(2), L.Conv(c1, c2), L.ReLU(),
            L.Conv(c2, c3), L.ReLU(), L.MaxPool(2), L.Conv(c3, c4), L.ReLU()]


def task_specs(p: ArchPreset, task: str) -> list:
    c, h, w = p.junction_shape
    t = p.task_channels
    if task == "cls":
        if p.cls_pool:
            return [L.Conv(c, t), L.ReLU(), L.MaxPool(2), L.Conv(t, t), L.ReLU(), L.Flatten(),
                    L.Dense(t * (h // 2) * (w // 2), 2)]
        return [L.Conv(c, t), L.ReLU(), L.Flatten(), L.Dense(t * h * w, 2)]
    if task == "seg":
        mid = [L.ReLU()] if p.seg_relu else []
        return [L.Conv(c, t), *mid, L.Conv(t, 1), L.UpsampleNearest(4), L.SigmoidHead()]
    raise ValueError(f"unknown task {task!r}")


def build_teacher(category: str, task: str, preset: ArchPreset, rng, dtype=np.float32) -> G.TeacherNet:
    f = G.build_module(f"f.{category}.{task}", "category", category_specs(preset),
                       (1, preset.image_size, preset.image_size), rng, dtype)
    g = G.build_module(f"g.{category}.{task}", "task", task_specs(preset, task), f.output_shape, rng, dtype)
    return G.TeacherNet(f, g)


@dataclass(frozen=True)
class PretrainBudget:
    steps: Optional[int] = None   # None: per-task default below
    batch_size: int = 32
    lr: float = 2e-3
    init_seed: int = 1234     # shared by every teacher: a common "pretrained" starting point
    data_seed: int = 0
    cls_error_gate: float = 5.0
    seg_accuracy_gate: float = 90.0

    def steps_for(self, task: str) -> int:
        if self.steps is not None:
            return self.steps
        return {"cls": 1500, "seg": 600}[task]


# ---------------------------------------------------------------------------
# metrics


def predict_path(path: G.Path, images: np.ndarray, batch: int = 200, start: int = 0) -> np.ndarray:
    outs = [path.forward(images[i:i + batch], start=start)[0] for i in range(0, len(images), batch)]
    return np.concatenate(outs) if outs else np.zeros((0,) + tuple(path.output_shape))


def classification_error(logits: np.ndarray, labels: np.ndarray) -> float:
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) != labels))


def pixel_accuracy(probs: np.ndarray, masks: np.ndarray) -> float:
    if probs.shape != masks.shape:
        raise ValueError(f"prediction {probs.shape} vs masks {masks.shape}")
    return 100.0 * float(np.mean((probs >= 0.5) == (masks >= 0.5)))


def mask_iou(probs: np.ndarray, masks: np.ndarray) -> float:
    p = probs >= 0.5
    m = masks >= 0.5
    union = np.logical_or(p, m).sum()
    return float(np.logical_and(p, m).sum() / union) if union else 1.0


def score(outputs: np.ndarray, labels: np.ndarray, task: str) -> float:
    return classification_error(outputs, labels) if task == "cls" else pixel_accuracy(outputs, labels)


def evaluate(path: G.Path, spec: ShapeWorldSpec, category: str, split: str, task: str,
             count: Optional[int] = None) -> float:
    """Classification error % (cls) or pixel accuracy % (seg) of ``path`` on a split."""
    images, labels, masks = eval_split(spec, category, split, task, count)
    out = predict_path(path, images)
    return score(out, labels if task == "cls" else masks, task)


def eval_split(spec: ShapeWorldSpec, category: str, split: str, task: str, count=None):
    return make_split(spec, category, split, count, positives_only=(task == "seg"))


# ---------------------------------------------------------------------------
# teacher pretraining


def _train_full(teacher: G.TeacherNet, images, targets, task: str, budget: PretrainBudget, seed: int):
    path = teacher.path()
    cfg = TrainConfig(strategy="direct-learn", samples=1, lr=budget.lr)
    params = {}
    for i, p in enumerate(path.params):
        for name, arr in p.arrays().items():
            params[(i, name)] = arr
    rng = make_rng(seed)
    state: dict = {}
    n = len(images)
    order, cursor = rng.permutation(n), 0
    for step in range(budget.steps_for(task)):
        if cursor + budget.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = np.sort(order[cursor:cursor + budget.batch_size])
        cursor += budget.batch_size
        y, trace = path.forward(images[idx])
        loss, grads = head_loss_backward(path, trace, y, targets[idx], task, 0)
        flat = {(i, name): a for i, gp in grads.items() for name, a in gp.arrays().items()}
        optimizer_step(params, flat, state, cfg)
        if step % 250 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss)


def pretrain_teacher(category: str, task: str, preset: ArchPreset = PRESETS["small"],
                     spec: Optional[ShapeWorldSpec] = None, budget: PretrainBudget = PretrainBudget(),
                     out_dir=None, check_gate: bool = True):
    """Train a teacher (category + task module) end to end; returns ``(teacher, metrics)``."""
    spec = spec or ShapeWorldSpec()
    rng = make_rng(budget.init_seed)
    teacher = build_teacher(category, task, preset, rng)
    images, labels, masks = make_split(spec, category, "train", positives_only=(task == "seg"))
    targets = labels if task == "cls" else masks
    t0 = time.time()
    _train_full(teacher, images, targets, task, budget, budget.data_seed)
    path = teacher.path()
    metric = evaluate(path, spec, category, "val", task)
    metrics = {"category": category, "task": task, "val_metric": metric,
               "metric": "error" if task == "cls" else "pixel_accuracy", "seconds": time.time() - t0}
    if task == "seg":
        vi, _, vm = eval_split(spec, category, "val", task, 20)
        metrics["val_iou_20"] = mask_iou(predict_path(path, vi), vm)
    ok = metric <= budget.cls_error_gate if task == "cls" else metric >= budget.seg_accuracy_gate
    metrics["gate_passed"] = bool(ok)
    if out_dir is not None:
        G.save_teacher(out_dir, teacher, meta={"metrics": metrics, "spec": spec.to_dict(),
                                               "budget": asdict(budget), "preset": asdict(preset)})
    if check_gate and not ok:
        raise QualityGateError(f"teacher {category}/{task} missed its gate: val {metrics['metric']} {metric:.2f}")
    return teacher, metrics


class TeacherStore:
    """On-disk cache of pretrained teachers keyed by (category, task, settings)."""

    def __init__(self, root, spec: ShapeWorldSpec, preset: ArchPreset = PRESETS["small"],
                 budget: PretrainBudget = PretrainBudget()):
        self.root = FsPath(root)
        self.spec, self.preset, self.budget = spec, preset, budget
        key = json.dumps([spec.to_dict(), asdict(preset), asdict(budget)], sort_keys=True)
        self.key = hashlib.sha256(key.encode()).hexdigest()[:12]
        self._mem: dict = {}

    def path_for(self, category: str, task: str) -> FsPath:
        return self.root / f"teacher-{task}-{category}-{self.key}"

    def get(self, category: str, task: str) -> G.TeacherNet:
        k = (category, task)
        if k not in self._mem:
            d = self.path_for(category, task)
            if not (d / "manifest.json").exists():
                pretrain_teacher(category, task, self.preset, self.spec, self.budget, out_dir=d)
            self._mem[k] = G.load_teacher(d)[0]
        return self._mem[k]

    def metrics(self, category: str, task: str) -> dict:
        self.get(category, task)
        return G.load(self.path_for(category, task))[1]["metrics"]


# ---------------------------------------------------------------------------
# single transplant runs


def student_net(teacher: G.TeacherNet, task_module: G.NetModule, depth: int, seed: int,
                init: str = "he", category_id: Optional[str] = None, kernel: int = 1):
    """Transplant net holding ``task_module`` with the teacher's category module grafted on."""
    net = G.TransplantNet()
    g = task_module.copy()
    net.add_task(g)
    cid = category_id or teacher.category.id
    G.graft(net, teacher, g.id, cid, adapter_init=init, depth=depth, rng=make_rng(seed), kernel=kernel)
    return net, (cid, g.id)


def transplant_run(teacher: G.TeacherNet, task_module: G.NetModule, spec: ShapeWorldSpec, category: str,
                   cfg: TrainConfig, depth: int = 1, eval_split_name: str = "test",
                   eval_count: Optional[int] = None, init: str = "he", kernel: int = 1):
    """Graft, train the adapter and evaluate; returns ``(metric, net, pair, log)``."""
    task = task_of(task_module)
    net, pair = student_net(teacher, task_module, depth, seed=10_000 + cfg.seed, init=init, kernel=kernel)
    data = None
    if cfg.samples > 0:
        imgs, labels, masks = make_split(spec, category, "train", cfg.samples, positives_only=(task == "seg"))
        data = (imgs, labels if task == "cls" else masks)
    _, tlog = train_adapter(net, teacher, pair, data, cfg)
    metric = evaluate(G.compose_path(net, *pair), spec, category, eval_split_name, task, eval_count)
    return metric, net, pair, tlog


def sequential_transplant(store: "TeacherStore", categories: Sequence[str], cfg: TrainConfig,
                          donor: Optional[str] = None, depth: int = 1, eval_count: Optional[int] = None,
                          kernel: int = 1):
    """Transplant ``categories`` one after another onto one shared classification task module.

    After each transplant every category grafted so far is re-evaluated, so
    ``history[i][c]`` is the test error of ``c`` after the ``i``-th transplant.
    """
    donor = donor or categories[0]
    net = G.TransplantNet()
    g = store.get(donor, "cls").task.copy()
    net.add_task(g)
    history, ids = [], {}
    for i, c in enumerate(categories):
        teacher = store.get(c, "cls")
        G.graft(net, teacher, g.id, teacher.category.id, depth=depth, rng=make_rng(10_000 + cfg.seed + i),
                kernel=kernel)
        data = None
        if cfg.samples > 0:
            imgs, labels, _ = make_split(store.spec, c, "train", cfg.samples)
            data = (imgs, labels)
        pair = ids[c] = (teacher.category.id, g.id)
        _, tlog = train_adapter(net, teacher, pair, data, cfg)
        if not tlog.audit_ok:
            raise RuntimeError(f"frozen modules changed while transplanting {c}")
        history.append({k: evaluate(G.compose_path(net, *ids[k]), store.spec, k, "test", "cls", eval_count)
                        for k in ids})
    return net, history


# ---------------------------------------------------------------------------
# plans


@dataclass
class ExperimentPlan:
    experiment: str = "exp1-adapter-insertion"
    depth: int = 1
    samples: tuple = (0, 10, 20, 50, 100)
    categories: tuple = ("disk", "cross", "triangle", "ring", "bar")
    strategies: tuple = ("direct-learn", "back-distill")
    seeds: tuple = (0, 1, 2)
    generic_category: str = "disk"     # task module donor for exp3
    train: dict = field(default_factory=dict)   # TrainConfig overrides
    eval_count: Optional[int] = None
    adapter_kernel: int = 1
    adapter_init: str = "he"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        for k in ("samples", "categories", "strategies", "seeds"):
            setattr(self, k, tuple(getattr(self, k)))
        if self.experiment == "exp3-seg-transplant" and self.generic_category in self.categories:
            raise ConfigError("exp3 transplants categories other than the generic task-module donor")

    @property
    def task(self) -> str:
        return "seg" if self.experiment == "exp3-seg-transplant" else "cls"

    def cells(self) -> list:
        return [(s, n, c, seed) for n in self.samples for s in self.strategies
                for c in self.categories for seed in self.seeds]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("samples", "categories", "strategies", "seeds"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)


def _cell_valid(strategy: str, n: int) -> bool:
    return not (strategy in ("direct-learn", "distill") and n == 0)


def run_cell(plan: ExperimentPlan, store: TeacherStore, strategy: str, n: int, category: str, seed: int) -> dict:
    cell = {"strategy": strategy, "samples": n, "category": category, "seed": seed, "depth": plan.depth}
    if not _cell_valid(strategy, n):
        cell.update(status="n/a", value=None)
        return cell
    try:
        teacher = store.get(category, plan.task)
        if plan.experiment != "exp1-adapter-insertion":
            task_module = store.get(plan.generic_category, plan.task).task
        else:
            task_module = teacher.task
        cfg = TrainConfig.from_dict({**plan.train, "strategy": strategy, "samples": n, "seed": seed})
        t0 = time.time()
        metric, net, pair, tlog = transplant_run(teacher, task_module, store.spec, category, cfg,
                                                  plan.depth, eval_count=plan.eval_count,
                                                  init=plan.adapter_init, kernel=plan.adapter_kernel)
        cell.update(status="ok", value=metric, seconds=time.time() - t0, audit_ok=tlog.audit_ok,
                    final_loss=tlog.rows[-1]["total_loss"], initial_loss=tlog.rows[0]["total_loss"],
                    frozen_hashes=tlog.frozen_after)
    except Exception as e:  # recorded per cell; the plan continues
        log.exception("cell %s failed", cell)
        cell.update(status="failed", value=None, error=f"{type(e).__name__}: {e}")
    return cell


def _run_cell_job(args):
    plan_d, store_args, cell = args
    plan = ExperimentPlan.from_dict(plan_d)
    store = TeacherStore(*store_args)
    return run_cell(plan, store, *cell)


def run_plan(plan: ExperimentPlan, store: TeacherStore, workers: int = 1) -> dict:
    """Run every cell; returns a grid dict with per-cell records and per-(strategy, N, category) means."""
    cells = plan.cells()
    if workers > 1:
        for c in {(plan.generic_category if plan.task == "seg" else None)} | set(plan.categories):
            if c is not None:
                store.get(c, plan.task)
        args = [(plan.to_dict(), (store.root, store.spec, store.preset, store.budget), c) for c in cells]
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_run_cell_job, args))
    else:
        records = [run_cell(plan, store, *c) for c in cells]
    return {"plan": plan.to_dict(), "task": plan.task,
            "metric": "error" if plan.task == "cls" else "pixel_accuracy",
            "cells": records, "means": grid_means(records)}


def grid_means(records: list) -> dict:
    """``{"strategy|N|category": mean over seeds}``; None when no seed succeeded."""
    acc: dict = {}
    for r in records:
        acc.setdefault(f"{r['strategy']}|{r['samples']}|{r['category']}", []).append(r["value"])
    return {k: (float(np.mean(v)) if all(x is not None for x in v) else None) for k, v in acc.items()}


def save_grid(grid: dict, out_dir, name: Optional[str] = None) -> FsPath:
    d = FsPath(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    p = d / f"grid-{name or grid['plan']['experiment']}.json"
    p.write_text(json.dumps(grid, indent=2, sort_keys=True) + "\n")
    return p
