"""Adapter training: back-distill, direct-learn and distill, plus the optimizers."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path as FsPath
from typing import Optional

import numpy as np

from . import backback as B
from .graph import NetModule, Path, TeacherNet, TransplantNet, compose_path
from .layers import PseudoRules, _sigmoid
from .tensor import NonFiniteError, resolve_dtype

log = logging.getLogger(__name__)

STRATEGIES = ("back-distill", "direct-learn", "distill")
LOG_FIELDS = ("step", "total_loss", "task_loss", "distill_loss", "alpha", "grad_norm")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "back-distill"
    lam: Optional[float] = None           # None: 1.0 without labels, balanced with labels
    lam_balance: float = 1.0              # lambda * distill / task at step 0 when lam is None
    alpha_mode: str = "fixed-1"
    per_seed_alpha: bool = False
    seeds_per_step: int = 8
    seed_kind: str = "random-normal"
    samples: int = 0
    optimizer: str = "adam"
    lr: float = 1e-2
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    relu_rule: str = "identity"
    sigmoid_rule: str = "identity"
    precision: str = "single"
    divergence_factor: float = 100.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.alpha_mode not in B.ALPHA_MODES:
            raise ConfigError(f"unknown alpha mode {self.alpha_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.seed_kind not in ("random-normal", "one-hot"):
            raise ConfigError(f"unknown seed kind {self.seed_kind!r}")
        if self.samples < 0:
            raise ConfigError("samples must be >= 0")
        if self.strategy in ("direct-learn", "distill") and self.samples < 1:
            raise ConfigError(f"strategy {self.strategy} needs at least one labeled sample")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lam_balance <= 0:
            raise ConfigError("lam_balance must be > 0")
        if self.steps < 1 or self.seeds_per_step < 1 or self.batch_size < 1:
            raise ConfigError("steps, seeds_per_step and batch_size must be positive")
        try:
            PseudoRules(self.relu_rule, self.sigmoid_rule)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def resolved_lam(self) -> Optional[float]:
        """Fixed lambda, or None when it is balanced against the task loss at step 0."""
        if self.lam is not None:
            return float(self.lam)
        return 1.0 if self.samples == 0 else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["resolved_lam"] = self.resolved_lam
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "resolved_lam"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray     # class indices (cls) or masks shaped like the output (seg)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# losses


def softmax_xent(logits: np.ndarray, target: np.ndarray):
    """Mean softmax cross-entropy; ``target`` is class indices or a probability matrix."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    if target.ndim == 1:
        if target.min() < 0 or target.max() >= logits.shape[1]:
            raise ValueError(f"label out of range for {logits.shape[1]} classes")
        t = np.zeros_like(logits)
        t[np.arange(n), target] = 1.0
    else:
        t = target
    loss = -float(np.sum(t * logp)) / n
    grad = (np.exp(logp) - t) / n
    return loss, grad


def bce_with_logits(logits: np.ndarray, target: np.ndarray):
    """Mean per-pixel binary cross-entropy; gradient w.r.t. the logits."""
    if logits.shape != target.shape:
        raise ValueError(f"mask shape {target.shape} does not match output {logits.shape}")
    loss = np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    n = logits.size
    return float(loss.sum()) / n, (_sigmoid(logits) - target) / n


def task_loss(y: np.ndarray, target: np.ndarray, task: str = "cls", eps: float = 1e-7):
    """Task loss of the output ``y``: softmax CE on logits (cls) or BCE on sigmoid outputs (seg)."""
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target)
    if task == "cls":
        return softmax_xent(y, target)
    if task == "seg":
        if y.shape != target.shape:
            raise ValueError(f"mask shape {target.shape} does not match output {y.shape}")
        p = np.clip(y, eps, 1 - eps)
        n = y.size
        loss = -float(np.sum(target * np.log(p) + (1 - target) * np.log(1 - p))) / n
        return loss, (p - target) / (p * (1 - p)) / n
    raise ValueError(f"unknown task {task!r}")


def task_of(module: NetModule) -> str:
    return "seg" if module.layers[-1].kind == "SigmoidHead" else "cls"


def head_loss_backward(path: Path, trace: list, y: np.ndarray, target: np.ndarray, task: str,
                       start: int):
    """Loss at the path output and parameter gradients for layers ``start:``.

    For sigmoid heads the loss is evaluated from the logits so saturated
    outputs still receive gradient.
    """
    if task == "seg":
        logits = trace[-1].x
        loss, g = bce_with_logits(logits.astype(np.float64), target.astype(np.float64))
        stop = len(path) - 1
        _, grads = path.backward(trace[:-1], g.astype(y.dtype), start, stop, input_grad=False)
    else:
        loss, g = softmax_xent(y.astype(np.float64), target)
        _, grads = path.backward(trace, g.astype(y.dtype), start, input_grad=False)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizers


def optimizer_step(params: dict, grads: dict, state: dict, cfg: TrainConfig):
    """Update ``params`` (key -> array, mutated in place) from ``grads``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    t = state.get("t", 0) + 1
    state["t"] = t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if cfg.optimizer == "sgd":
            if cfg.momentum:
                v = state.setdefault(("v", k), np.zeros_like(p))
                v *= cfg.momentum
                v += g
                g = v
            p -= (cfg.lr * g).astype(p.dtype, copy=False)
        else:
            b1, b2 = cfg.betas
            m = state.setdefault(("m", k), np.zeros(p.shape, np.float64))
            v = state.setdefault(("v", k), np.zeros(p.shape, np.float64))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)
    return params, state


def adapter_param_dict(adapter: NetModule, offset: int) -> dict:
    out = {}
    for i, p in enumerate(adapter.params):
        for name, arr in p.arrays().items():
            out[(offset + i, name)] = arr
    return out


def flatten_grads(grads: dict) -> dict:
    out = {}
    for i, gp in grads.items():
        for name, arr in gp.arrays().items():
            out[(i, name)] = arr
    return out


def _add_grads(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + v if k in out else v
    return out


# ---------------------------------------------------------------------------
# training log


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    frozen_before: dict = field(default_factory=dict)
    frozen_after: dict = field(default_factory=dict)
    lam: Optional[float] = None           # lambda actually used

    def append(self, **row):
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def audit_ok(self) -> bool:
        return self.frozen_before == self.frozen_after

    def write_csv(self, path) -> None:
        p = FsPath(path)
        new = not p.exists()
        with p.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new:
                w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in LOG_FIELDS})


def _labeled(data, cfg: TrainConfig) -> Optional[LabeledBatch]:
    if cfg.samples == 0:
        return None
    if data is None:
        raise ConfigError(f"strategy {cfg.strategy} with samples={cfg.samples} needs labeled data")
    if not isinstance(data, LabeledBatch):
        data = LabeledBatch(*data)
    if len(data) != cfg.samples:
        raise ConfigError(f"config says {cfg.samples} samples but data holds {len(data)}")
    return data


def _seed_batch(shape, cfg: TrainConfig, rng: np.random.Generator, dtype):
    if cfg.seed_kind == "one-hot":
        n = int(np.prod(shape))
        return B.one_hot_seeds(shape, rng.integers(0, n, size=cfg.seeds_per_step), dtype)
    return B.random_seeds(shape, cfg.seeds_per_step, rng, dtype)


def train_adapter(net: TransplantNet, teacher: TeacherNet, pair: tuple, data=None,
                  cfg: Optional[TrainConfig] = None, log_path=None):
    """Train the adapter keyed by ``pair`` in place; returns ``(adapter, TrainLog)``.

    Only adapter parameters are updated. ``data`` is a LabeledBatch (or an
    ``(images, labels)`` tuple) holding exactly ``cfg.samples`` samples and
    is never touched when ``cfg.samples == 0``.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    data = _labeled(data, cfg)
    cid, tid = pair
    path = compose_path(net, cid, tid)
    adapter = net.adapters[(cid, tid)]
    tpath = teacher.path()
    if tpath.junction_shape != path.junction_shape:
        raise B.ShapeError(f"teacher junction {tpath.junction_shape} != student junction {path.junction_shape}")
    task = task_of(net.tasks[tid])
    dtype = resolve_dtype(cfg.precision)
    # separate streams so the seed draws never shift the minibatch order
    seed_rng, data_rng = (np.random.Generator(np.random.PCG64(s))
                          for s in np.random.SeedSequence(cfg.seed).spawn(2))
    lam = cfg.resolved_lam
    rules = PseudoRules(cfg.relu_rule, cfg.sigmoid_rule)
    j = path.junction_layer
    params = adapter_param_dict(adapter, j)
    if cfg.alpha_mode == "learnable":
        params[("alpha",)] = np.ones(1, dtype=np.float64)

    tlog = TrainLog(config=cfg.to_dict())
    tlog.frozen_before = net.frozen_hashes()
    tlog.frozen_before.update({f"teacher:{m.id}": m.param_hash() for m in teacher.path().modules})

    use_distill_term = cfg.strategy == "back-distill"
    graph = B.build_graph(path, rules) if use_distill_term else None
    feats = y_teacher = None
    if data is not None:
        feats = path.features(data.images.astype(dtype))
        if cfg.strategy == "distill":
            y_teacher = tpath.predict(data.images.astype(dtype)).astype(np.float64)
            if task == "cls":
                z = y_teacher - y_teacher.max(axis=1, keepdims=True)
                y_teacher = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    order = np.array([], dtype=np.int64)
    cursor = 0
    state: dict = {}
    init_loss = None
    for step in range(cfg.steps):
        grads: dict = {}
        tl = dl = 0.0
        alpha = float("nan")
        if use_distill_term:
            seeds = _seed_batch(path.output_shape, cfg, seed_rng, dtype)
            d_t = B.pseudo_gradient(tpath, seeds, rules)
            a_cur = float(params[("alpha",)][0]) if cfg.alpha_mode == "learnable" else None
            # until lambda is balanced, evaluate the raw term and rescale below
            dl, g, info = B.distill_loss_and_grad(graph, d_t, seeds, cfg.alpha_mode,
                                                  1.0 if lam is None else lam, a_cur, cfg.per_seed_alpha)
            grads = flatten_grads(g)
            alpha = info["alpha"]
            if cfg.alpha_mode == "learnable":
                grads[("alpha",)] = np.array([info["alpha_grad"]])
        if data is not None:
            bs = min(cfg.batch_size, len(data))
            if cursor + bs > len(order):
                order = data_rng.permutation(len(data))
                cursor = 0
            idx = np.sort(order[cursor:cursor + bs])
            cursor += bs
            y, trace = path.forward(feats[idx], start=j)
            if cfg.strategy == "distill":
                tl, g = head_loss_backward(path, trace, y, y_teacher[idx], task, j)
            else:
                tl, g = head_loss_backward(path, trace, y, data.labels[idx], task, j)
            if use_distill_term and lam is None:
                lam = cfg.lam_balance * tl / dl if dl > 0 else 1.0
                dl *= lam
                grads = {k: v * lam for k, v in grads.items()}
            grads = _add_grads(grads, {k: v for k, v in flatten_grads(g).items() if k in params})
        total = tl + dl
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {step} ({cfg.strategy})")
        if init_loss is None:
            init_loss = total
        elif init_loss > 0 and total > cfg.divergence_factor * init_loss:
            raise DivergenceError(f"loss {total:.4g} grew over {cfg.divergence_factor}x the initial "
                                  f"{init_loss:.4g} at step {step}")
        gnorm = float(np.sqrt(sum(float(np.sum(np.square(v))) for v in grads.values())))
        tlog.append(step=step, total_loss=total, task_loss=tl, distill_loss=dl, alpha=alpha, grad_norm=gnorm)
        optimizer_step(params, grads, state, cfg)

    tlog.lam = lam if use_distill_term else 0.0
    tlog.frozen_after = net.frozen_hashes()
    tlog.frozen_after.update({f"teacher:{m.id}": m.param_hash() for m in teacher.path().modules})
    if not tlog.audit_ok:
        raise RuntimeError("frozen module parameters changed during adapter training")
    if log_path is not None:
        tlog.write_csv(log_path)
    return adapter, tlog
