"""Pseudo-gradients at the junction and their derivatives w.r.t. adapter weights.

The pseudo-backward pass of the layers above the junction is a linear map of
the output-gradient seed. :class:`BackwardGraph` reifies that map as a list of
stages bound to the live parameter arrays, so the distillation loss on its
output can itself be backpropagated to the adapter weights.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from .graph import Path
from .layers import DEFAULT_RULES, LayerParams, PseudoRules, ShapeError
from .tensor import check_finite

ALPHA_MODES = ("ls", "fixed-1", "learnable")
_seed_counter = itertools.count()


@dataclass(frozen=True)
class GradSeed:
    """Output-space gradient ``dJ/dy`` of an implicit scalar probe ``J``."""

    value: np.ndarray
    provenance: str = "custom"
    id: int = -1

    @classmethod
    def make(cls, value, provenance="custom"):
        return cls(np.asarray(value), provenance, next(_seed_counter))


def random_seeds(shape, k: int, rng: np.random.Generator, dtype=np.float64) -> list:
    vals = rng.standard_normal((k,) + tuple(shape)).astype(dtype, copy=False)
    return [GradSeed.make(v, "random-normal") for v in vals]


def one_hot_seeds(shape, indices: Sequence[int], dtype=np.float64) -> list:
    out = []
    n = int(np.prod(shape))
    for i in indices:
        v = np.zeros(n, dtype=dtype)
        v[i] = 1.0
        out.append(GradSeed.make(v.reshape(shape), f"one-hot({i})"))
    return out


def stack_seeds(seeds) -> tuple:
    if isinstance(seeds, GradSeed):
        seeds = [seeds]
    return np.stack([s.value for s in seeds]), tuple(s.id for s in seeds)


@dataclass
class PseudoGradient:
    """A batch of junction gradients, one row per seed."""

    value: np.ndarray
    seed_ids: tuple = ()

    def __post_init__(self):
        check_finite(self.value, "pseudo-gradient")


@dataclass
class Stage:
    layer: int
    spec: L.LayerSpec
    params: LayerParams  # bound by reference to the module's live arrays
    in_shape: tuple      # input shape of the layer = output shape of the stage
    trainable: bool
    rules: PseudoRules = DEFAULT_RULES


class BackwardGraph:
    """Reified pseudo-backward pass from the path output down to the junction."""

    def __init__(self, stages: list, seed_shape: tuple, junction_shape: tuple,
                 rules: PseudoRules = DEFAULT_RULES):
        self.stages = stages
        self.seed_shape = tuple(seed_shape)
        self.junction_shape = tuple(junction_shape)
        self.rules = rules

    def __len__(self):
        return len(self.stages)

    @property
    def trainable_layers(self) -> list:
        return [s.layer for s in self.stages if s.trainable and s.spec.has_params]

    def _seed_array(self, seeds):
        if isinstance(seeds, np.ndarray):
            g, ids = seeds, ()
        else:
            g, ids = stack_seeds(seeds)
        if tuple(g.shape[1:]) != self.seed_shape:
            raise ShapeError(f"seed shape {g.shape[1:]} != path output shape {self.seed_shape}")
        return g, ids

    def evaluate(self, seeds, tape: Optional[list] = None) -> PseudoGradient:
        g, ids = self._seed_array(seeds)
        for st in self.stages:
            if tape is not None:
                tape.append(g)
            g = L.pseudo_backward(st.spec, st.params, g, st.in_shape, self.rules)
        return PseudoGradient(g, ids)

    def vjp(self, tape: list, r: np.ndarray) -> dict:
        """Gradients of ``<r, evaluate(seeds)>`` w.r.t. trainable stage parameters.

        Walks the stages in reverse, applying each stage's adjoint; stops once
        no trainable stage remains above.
        """
        grads = {}
        trainable = [i for i, st in enumerate(self.stages) if st.trainable and st.spec.has_params]
        if not trainable:
            return grads
        lowest = trainable[0]
        for i in range(len(self.stages) - 1, lowest - 1, -1):
            st = self.stages[i]
            u = tape[i]
            k = st.spec.kind
            if k == "Conv":
                if st.trainable:
                    # <r, convT(W, u)> = <u, conv(W, r)>  =>  dW = weight_grad(x=r, g=u)
                    grads[st.layer] = LayerParams(L.conv_weight_grad(st.spec, r, u),
                                                  None if st.params.bias is None else np.zeros_like(st.params.bias))
                if i > lowest:
                    r = L.conv_apply(st.spec, st.params.weight, r)
            elif k == "Dense":
                if st.trainable:
                    grads[st.layer] = LayerParams(u.T @ r,
                                                  None if st.params.bias is None else np.zeros_like(st.params.bias))
                if i > lowest:
                    r = r @ st.params.weight.T
            elif i > lowest:
                r = _adjoint_fixed(st, r, u.shape)
        return grads


def _adjoint_fixed(st: Stage, r: np.ndarray, u_shape) -> np.ndarray:
    """Adjoint of a parameter-free pseudo-backward stage."""
    k = st.spec.kind
    if k in ("MaxPool", "AvgPool"):
        _, _, ho, wo = u_shape
        win = L._pool_windows(r, st.spec.window, st.spec.stride, ho, wo)
        return win.mean(axis=(-2, -1))
    if k == "UpsampleNearest":
        f = st.spec.factor
        return r.repeat(f, axis=2).repeat(f, axis=3)
    if k == "Flatten":
        return r.reshape(u_shape)
    if k == "ReLU":
        return r * L.RELU_RULES[st.rules.relu]
    if k == "SigmoidHead":
        return r * L.SIGMOID_RULES[st.rules.sigmoid]
    raise ValueError(f"no adjoint for stage kind {k}")


def build_graph(path: Path, rules: PseudoRules = DEFAULT_RULES) -> BackwardGraph:
    """Reify the pseudo-backward pass of ``path`` above its junction."""
    stages = []
    for i in reversed(path.upper_range):
        spec = path.specs[i]
        if spec.kind not in L.KINDS:
            raise ValueError(f"unsupported layer kind {spec.kind}")
        stages.append(Stage(i, spec, path.params[i], tuple(path.in_shapes[i]), not path.frozen[i], rules))
    return BackwardGraph(stages, path.output_shape, path.junction_shape, rules)


def pseudo_gradient(path: Path, seeds, rules: PseudoRules = DEFAULT_RULES) -> PseudoGradient:
    """D' at the junction: layer-by-layer pseudo-backward, no image or trace involved."""
    if isinstance(seeds, np.ndarray):
        g, ids = seeds, ()
    else:
        g, ids = stack_seeds(seeds)
    if tuple(g.shape[1:]) != tuple(path.output_shape):
        raise ShapeError(f"seed shape {g.shape[1:]} != path output shape {path.output_shape}")
    for i in reversed(path.upper_range):
        g = L.pseudo_backward(path.specs[i], path.params[i], g, path.in_shapes[i], rules)
    return PseudoGradient(g, ids)


def true_input_gradient(path: Path, trace: list, seeds, trace_start: int = 0) -> PseudoGradient:
    """Exact ``dJ/dx`` at the junction for ``J(y) = <seed, y>``.

    ``trace`` comes from ``path.forward(..., start=trace_start)`` and must cover
    every layer above the junction. A single-sample trace is reused for every
    seed; otherwise the trace batch must equal the seed count.
    """
    if isinstance(seeds, np.ndarray):
        g, ids = seeds, ()
    else:
        g, ids = stack_seeds(seeds)
    j = path.junction_layer
    if trace_start > j or len(trace) != len(path) - trace_start:
        raise ValueError("trace does not cover the layers above the junction of this path")
    upper = trace[j - trace_start:]
    for st, spec in zip(upper, path.specs[j:]):
        if st.kind != spec.kind:
            raise ValueError("trace was produced by a different path")
    b = upper[0].x.shape[0] if upper else 1
    if b == g.shape[0]:
        d, _ = path.backward(upper, g, j)
    elif b == 1:
        d = np.concatenate([path.backward(upper, g[k:k + 1], j)[0] for k in range(g.shape[0])])
    else:
        raise ValueError(f"trace batch {b} incompatible with {g.shape[0]} seeds")
    return PseudoGradient(d, ids)


def resolve_alpha(ds: np.ndarray, dt: np.ndarray, mode: str, alpha: Optional[float] = None,
                  per_seed: bool = False):
    if mode == "fixed-1":
        return np.ones(ds.shape[0]) if per_seed else 1.0
    if mode == "learnable":
        if alpha is None:
            raise ValueError("learnable alpha mode needs the current alpha value")
        return float(alpha)
    if mode != "ls":
        raise ValueError(f"unknown alpha mode {mode!r}")
    axes = tuple(range(1, ds.ndim))
    if per_seed:
        num = np.sum(ds * dt, axis=axes)
        den = np.sum(ds * ds, axis=axes)
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    den = float(np.sum(ds * ds))
    return float(np.sum(ds * dt)) / den if den > 0 else 1.0


def distill_loss_and_grad(student_graph: BackwardGraph, teacher_d: PseudoGradient, seeds,
                          alpha_mode: str = "fixed-1", lam: float = 1.0, alpha: Optional[float] = None,
                          per_seed_alpha: bool = False):
    """``lam * mean_k ||alpha D'_S,k - D'_T,k||^2`` and its gradient w.r.t. adapter weights.

    Returns ``(loss, grads, info)``; ``grads`` maps layer index to a
    LayerParams of gradients, ``info`` holds the alpha used and, in learnable
    mode, ``alpha_grad``. In ``ls`` mode alpha is the least-squares optimum and
    is held constant while differentiating.
    """
    g, ids = student_graph._seed_array(seeds)
    if g.shape[0] != teacher_d.value.shape[0]:
        raise ValueError(f"{g.shape[0]} seeds but teacher pseudo-gradient has {teacher_d.value.shape[0]} rows")
    if ids and teacher_d.seed_ids and tuple(ids) != tuple(teacher_d.seed_ids):
        raise ValueError("teacher and student pseudo-gradients were built from different seeds")
    if tuple(teacher_d.value.shape[1:]) != student_graph.junction_shape:
        raise ShapeError(f"junction shape mismatch: teacher {teacher_d.value.shape[1:]} "
                         f"vs student {student_graph.junction_shape}")
    k = g.shape[0]
    tape = []
    ds = student_graph.evaluate(g, tape).value
    dt = teacher_d.value
    a = resolve_alpha(ds, dt, alpha_mode, alpha, per_seed_alpha)
    a_b = np.reshape(a, (-1,) + (1,) * (ds.ndim - 1)) if np.ndim(a) else a
    resid = a_b * ds - dt
    loss = lam * float(np.sum(resid.astype(np.float64) ** 2)) / k
    info = {"alpha": float(np.mean(a))}
    if lam == 0.0:
        grads = {i: _zeros_like(student_graph, i) for i in student_graph.trainable_layers}
        if alpha_mode == "learnable":
            info["alpha_grad"] = 0.0
        return 0.0, grads, info
    r = (2.0 * lam / k) * a_b * resid
    grads = student_graph.vjp(tape, r.astype(ds.dtype, copy=False))
    if alpha_mode == "learnable":
        info["alpha_grad"] = 2.0 * lam / k * float(np.sum(resid * ds))
    return loss, grads, info


def _zeros_like(graph: BackwardGraph, layer: int) -> LayerParams:
    st = next(s for s in graph.stages if s.layer == layer)
    return LayerParams(np.zeros_like(st.params.weight),
                       None if st.params.bias is None else np.zeros_like(st.params.bias))
