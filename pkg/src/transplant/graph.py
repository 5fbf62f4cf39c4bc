"""Role-tagged modules, teacher and transplant nets, evaluable paths and checkpoints."""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from .layers import LayerParams, LayerSpec, ShapeError
from .tensor import DEFAULT_DTYPE, check_shape, precision_name, resolve_dtype

ROLES = ("category", "task", "adapter")
MAX_ADAPTER_CONVS = 3
FORMAT_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class JunctionError(ShapeError):
    """Two modules that should chain do not agree on the junction shape."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class NetModule:
    id: str
    role: str
    layers: list
    params: list
    input_shape: tuple
    frozen: Optional[bool] = None
    max_adapter_convs: int = MAX_ADAPTER_CONVS

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise ValueError(f"invalid module id {self.id!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.frozen is None:
            self.frozen = self.role != "adapter"
        self.input_shape = check_shape(self.input_shape)
        self.layers = list(self.layers)
        self.params = list(self.params)
        if len(self.layers) != len(self.params):
            raise ValueError("one LayerParams per layer required")
        if self.role == "adapter":
            n_conv = sum(s.kind == "Conv" for s in self.layers)
            if not 1 <= n_conv <= self.max_adapter_convs or any(s.kind not in ("Conv", "ReLU") for s in self.layers):
                raise ValueError(f"adapter {self.id!r} must hold 1-{self.max_adapter_convs} Conv(+ReLU) layers")
        self._shapes = self._infer_shapes()

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            try:
                L.check_params(spec, p)
                shapes.append(L.output_shape(spec, shapes[-1]))
            except ShapeError as e:
                raise ShapeError(f"module {self.id!r} layer {i} ({spec.kind}): {e}") from None
        return shapes

    @property
    def shapes(self) -> list:
        """Input shape of every layer followed by the module output shape."""
        return list(self._shapes)

    @property
    def output_shape(self) -> tuple:
        return self._shapes[-1]

    @property
    def dtype(self) -> np.dtype:
        for p in self.params:
            if p.weight is not None:
                return p.weight.dtype
        return np.dtype(DEFAULT_DTYPE)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            x, _ = L.forward(spec, p, x, index=i)
        return x

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            for name, arr in p.arrays().items():
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self, id: Optional[str] = None) -> "NetModule":
        return NetModule(id or self.id, self.role, list(self.layers), [p.copy() for p in self.params],
                         self.input_shape, self.frozen, self.max_adapter_convs)

    def astype(self, dtype) -> "NetModule":
        dt = resolve_dtype(dtype)
        params = [LayerParams(None if p.weight is None else p.weight.astype(dt),
                              None if p.bias is None else p.bias.astype(dt)) for p in self.params]
        return NetModule(self.id, self.role, self.layers, params, self.input_shape, self.frozen,
                         self.max_adapter_convs)


def build_module(id: str, role: str, specs: Sequence[LayerSpec], input_shape, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE, init: str = "he") -> NetModule:
    params = [L.init_params(s, rng, dtype, init=init) for s in specs]
    return NetModule(id, role, list(specs), params, input_shape)


def adapter_specs(in_channels: int, out_channels: int, depth: int = 1, kernel: int = 1) -> list:
    specs = []
    c = in_channels
    for _ in range(depth):
        specs += [L.Conv(c, out_channels, kernel), L.ReLU()]
        c = out_channels
    return specs


def identity_adapter(id: str, shape, depth: int = 1, kernel: int = 1, dtype=DEFAULT_DTYPE) -> NetModule:
    """Adapter computing relu(x), i.e. the identity on non-negative features."""
    c = shape[0]
    specs = adapter_specs(c, c, depth, kernel)
    params = []
    for s in specs:
        if s.kind == "Conv":
            params.append(LayerParams(L.identity_kernel(s, dtype), np.zeros(c, dtype=dtype)))
        else:
            params.append(LayerParams())
    return NetModule(id, "adapter", specs, params, shape)


@dataclass
class TeacherNet:
    category: NetModule
    task: NetModule

    def __post_init__(self):
        if self.category.output_shape != self.task.input_shape:
            raise JunctionError(f"teacher junction {self.category.id!r}->{self.task.id!r}: "
                                f"{self.category.output_shape} != {self.task.input_shape}")

    def path(self) -> "Path":
        return Path([self.category, self.task], junction=1)


@dataclass
class TransplantNet:
    categories: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)
    adapters: dict = field(default_factory=dict)

    def add_category(self, module: NetModule) -> None:
        if module.role != "category":
            raise ValueError(f"{module.id!r} is not a category module")
        if module.id in self.categories:
            raise ValueError(f"duplicate category id {module.id!r}")
        module.frozen = True
        self.categories[module.id] = module

    def add_task(self, module: NetModule) -> None:
        if module.role != "task":
            raise ValueError(f"{module.id!r} is not a task module")
        if module.id in self.tasks:
            raise ValueError(f"duplicate task id {module.id!r}")
        module.frozen = True
        self.tasks[module.id] = module

    def set_adapter(self, category_id: str, task_id: str, adapter: NetModule) -> None:
        f = self.categories[category_id]
        g = self.tasks[task_id]
        _check_junction(f, adapter)
        _check_junction(adapter, g)
        self.adapters[(category_id, task_id)] = adapter

    def modules(self) -> list:
        return list(self.categories.values()) + list(self.tasks.values()) + list(self.adapters.values())

    def frozen_hashes(self) -> dict:
        return {m.id: m.param_hash() for m in self.modules() if m.frozen}


def _check_junction(a: NetModule, b: NetModule) -> None:
    if a.output_shape != b.input_shape:
        raise JunctionError(f"junction {a.id!r}->{b.id!r}: output {a.output_shape} "
                            f"does not match input {b.input_shape}")


class Path:
    """Concatenated layer list over a chain of modules.

    ``junction`` is the index of the module whose input is the junction feature
    ``x`` (the output of the category module). Parameters are shared with the
    modules, never copied.
    """

    def __init__(self, modules: Sequence[NetModule], junction: int = 1):
        self.modules = list(modules)
        for a, b in zip(self.modules, self.modules[1:]):
            _check_junction(a, b)
        self.specs, self.params, self.frozen, self.owner, self.in_shapes = [], [], [], [], []
        self.junction_layer = 0
        for mi, m in enumerate(self.modules):
            if mi == junction:
                self.junction_layer = len(self.specs)
            for spec, p, shp in zip(m.layers, m.params, m.shapes):
                self.specs.append(spec)
                self.params.append(p)
                self.frozen.append(bool(m.frozen))
                self.owner.append(m.id)
                self.in_shapes.append(shp)
        if junction >= len(self.modules):
            self.junction_layer = len(self.specs)
        self.output_shape = self.modules[-1].output_shape

    def __len__(self):
        return len(self.specs)

    @property
    def junction_shape(self) -> tuple:
        if self.junction_layer == len(self.specs):
            return self.output_shape
        return self.in_shapes[self.junction_layer]

    @property
    def upper_range(self) -> range:
        return range(self.junction_layer, len(self.specs))

    def forward(self, x: np.ndarray, start: int = 0, stop: Optional[int] = None):
        """Run layers ``start:stop`` on a batch; returns ``(y, trace)``."""
        stop = len(self.specs) if stop is None else stop
        want = self.in_shapes[start] if start < len(self.specs) else self.output_shape
        if tuple(x.shape[1:]) != tuple(want):
            raise ShapeError(f"path input at layer {start} expects (B, {want}), got {x.shape}")
        trace = []
        for i in range(start, stop):
            x, ctx = L.forward(self.specs[i], self.params[i], x, index=i)
            trace.append(ctx)
        return x, trace

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images)[0]

    def features(self, images: np.ndarray) -> np.ndarray:
        """Junction features ``x = f(I)``."""
        return self.forward(images, 0, self.junction_layer)[0]

    def backward(self, trace, g_out: np.ndarray, start: int, stop: Optional[int] = None,
                 input_grad: bool = True):
        """Backprop through layers ``start:stop`` (``trace`` must cover them).

        Returns the gradient at the input of layer ``start`` (None when
        ``input_grad`` is false) and a dict of parameter gradients keyed by
        layer index.
        """
        stop = len(self.specs) if stop is None else stop
        if len(trace) != stop - start:
            raise ValueError(f"trace has {len(trace)} entries, expected {stop - start}")
        g = g_out
        grads = {}
        for i in range(stop - 1, start - 1, -1):
            g, gp = L.backward(self.specs[i], self.params[i], trace[i - start], g,
                               input_grad=input_grad or i > start)
            if self.specs[i].has_params:
                grads[i] = gp
        return g, grads


def compose_path(net: TransplantNet, category_id: str, task_id: str) -> Path:
    try:
        f = net.categories[category_id]
    except KeyError:
        raise KeyError(f"no category module {category_id!r}") from None
    try:
        g = net.tasks[task_id]
    except KeyError:
        raise KeyError(f"no task module {task_id!r}") from None
    try:
        h = net.adapters[(category_id, task_id)]
    except KeyError:
        raise KeyError(f"no adapter for ({category_id!r}, {task_id!r})") from None
    return Path([f, h, g], junction=1)


def graft(net: TransplantNet, teacher: TeacherNet, task_id: str, category_id: Optional[str] = None,
          adapter_init: str = "he", depth: int = 1, rng: Optional[np.random.Generator] = None,
          kernel: int = 1) -> TransplantNet:
    """Copy the teacher's category module into ``net`` and attach a fresh adapter to ``task_id``."""
    cid = category_id or teacher.category.id
    if cid in net.categories:
        raise ValueError(f"duplicate category id {cid!r}")
    g = net.tasks[task_id]
    fo = teacher.category.output_shape
    if fo[1:] != g.input_shape[1:]:
        raise JunctionError(f"cannot reconcile {cid!r} output {fo} with {task_id!r} input {g.input_shape}: "
                            "adapter convs preserve spatial extent")
    rng = rng if rng is not None else np.random.default_rng(0)
    f = teacher.category.copy(cid)
    f.frozen = True
    specs = adapter_specs(fo[0], g.input_shape[0], depth, kernel)
    if adapter_init == "identity":
        h = identity_adapter(f"h.{cid}.{task_id}", fo, depth, kernel, f.dtype)
    else:
        h = build_module(f"h.{cid}.{task_id}", "adapter", specs, fo, rng, f.dtype, init=adapter_init)
    net.add_category(f)
    net.set_adapter(cid, task_id, h)
    return net


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one little-endian blob per module


def _blob_bytes(m: NetModule):
    chunks, entries, off = [], [], 0
    for i, p in enumerate(m.params):
        for name, arr in p.arrays().items():
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            b = le.tobytes()
            entries.append({"layer": i, "name": name, "shape": list(arr.shape),
                            "dtype": precision_name(arr.dtype), "offset": off, "nbytes": len(b)})
            chunks.append(b)
            off += len(b)
    return b"".join(chunks), entries


def module_manifest(m: NetModule, blob_name: str, blob: bytes, entries: list) -> dict:
    return {
        "id": m.id, "role": m.role, "frozen": bool(m.frozen),
        "input_shape": list(m.input_shape), "output_shape": list(m.output_shape),
        "precision": precision_name(m.dtype),
        "layers": [s.to_dict() for s in m.layers],
        "params": entries, "blob": blob_name,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }


def save(ckpt_path, *modules: NetModule, meta: Optional[dict] = None) -> FsPath:
    """Write modules as ``manifest.json`` plus ``<id>.bin`` into directory ``ckpt_path``."""
    d = FsPath(ckpt_path)
    d.mkdir(parents=True, exist_ok=True)
    ids = [m.id for m in modules]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate module ids in checkpoint: {ids}")
    entries = []
    for m in modules:
        blob, params = _blob_bytes(m)
        name = f"{m.id}.bin"
        (d / name).write_bytes(blob)
        entries.append(module_manifest(m, name, blob, params))
    manifest = {"format_version": FORMAT_VERSION, "modules": entries, "meta": meta or {}}
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, d / "manifest.json")
    return d


def load(ckpt_path):
    """Return ``(modules, meta)``; modules in manifest order."""
    d = FsPath(ckpt_path)
    mf = d / "manifest.json"
    if not mf.exists():
        raise CheckpointError(f"no manifest.json in {d}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest in {d}: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {manifest.get('format_version')!r}")
    modules = []
    for e in manifest["modules"]:
        blob = (d / e["blob"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CheckpointError(f"hash mismatch for module {e['id']!r} blob {e['blob']}")
        specs = [LayerSpec.from_dict(s) for s in e["layers"]]
        params = [LayerParams() for _ in specs]
        for p in e["params"]:
            dt = np.dtype(resolve_dtype(p["dtype"])).newbyteorder("<")
            if p["offset"] + p["nbytes"] > len(blob):
                raise CheckpointError(f"truncated blob for module {e['id']!r}")
            arr = np.frombuffer(blob, dtype=dt, count=p["nbytes"] // dt.itemsize, offset=p["offset"])
            arr = arr.astype(dt.newbyteorder("="), copy=True).reshape(p["shape"])
            setattr(params[p["layer"]], p["name"], arr)
        m = NetModule(e["id"], e["role"], specs, params, tuple(e["input_shape"]), e["frozen"])
        if list(m.output_shape) != e["output_shape"]:
            raise CheckpointError(f"module {e['id']!r} output shape disagrees with manifest")
        modules.append(m)
    return modules, manifest.get("meta", {})


def save_teacher(ckpt_path, teacher: TeacherNet, meta: Optional[dict] = None) -> FsPath:
    meta = dict(meta or {})
    meta.update(kind="teacher", category=teacher.category.id, task=teacher.task.id)
    return save(ckpt_path, teacher.category, teacher.task, meta=meta)


def load_teacher(ckpt_path):
    mods, meta = load(ckpt_path)
    by_id = {m.id: m for m in mods}
    if meta.get("kind") != "teacher":
        raise CheckpointError(f"{ckpt_path} is not a teacher checkpoint")
    return TeacherNet(by_id[meta["category"]], by_id[meta["task"]]), meta


def save_net(ckpt_path, net: TransplantNet, meta: Optional[dict] = None) -> FsPath:
    meta = dict(meta or {})
    meta.update(kind="transplant-net",
                adapters=[[c, t, h.id] for (c, t), h in sorted(net.adapters.items())])
    return save(ckpt_path, *net.modules(), meta=meta)


def load_net(ckpt_path):
    mods, meta = load(ckpt_path)
    if meta.get("kind") != "transplant-net":
        raise CheckpointError(f"{ckpt_path} is not a transplant-net checkpoint")
    by_id = {m.id: m for m in mods}
    net = TransplantNet()
    for m in mods:
        if m.role == "category":
            net.categories[m.id] = m
        elif m.role == "task":
            net.tasks[m.id] = m
    for c, t, hid in meta["adapters"]:
        net.set_adapter(c, t, by_id[hid])
    return net, meta
