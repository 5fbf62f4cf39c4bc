import json
import shutil
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

from transplant import graph as G
from transplant import layers as L

GOLDEN = Path(__file__).parent / "golden"
sys.path.insert(0, str(GOLDEN))
from make_golden import golden_modules, output_hash, regression_path  # noqa: E402


def small_teacher(rng, cat="disk", dtype=np.float64):
    f = G.build_module(f"f.{cat}", "category", [L.Conv(1, 3, 3), L.ReLU(), L.MaxPool(2)], (1, 6, 6), rng, dtype)
    g = G.build_module(f"g.{cat}", "task", [L.Conv(3, 2, 3), L.ReLU(), L.Flatten(), L.Dense(18, 2)],
                       (3, 3, 3), rng, dtype)
    return G.TeacherNet(f, g)


def assert_modules_equal(a, b):
    assert a.id == b.id and a.role == b.role and a.layers == b.layers
    assert a.input_shape == b.input_shape and a.frozen == b.frozen
    for pa, pb in zip(a.params, b.params):
        for name, arr in pa.arrays().items():
            other = getattr(pb, name)
            assert arr.dtype == other.dtype and arr.tobytes() == other.tobytes()
        assert set(pa.arrays()) == set(pb.arrays())


# ---------------------------------------------------------------------------
# modules and nets


def test_adapter_role_limits(rng):
    with pytest.raises(ValueError):
        G.build_module("h.x", "adapter", [L.ReLU()], (2, 3, 3), rng)
    with pytest.raises(ValueError):
        G.build_module("h.x", "adapter", G.adapter_specs(2, 2, depth=4), (2, 3, 3), rng)
    with pytest.raises(ValueError):
        G.build_module("h.x", "adapter", [L.Conv(2, 2), L.MaxPool(1)], (2, 3, 3), rng)
    m = G.build_module("h.x", "adapter", G.adapter_specs(2, 2, depth=3), (2, 3, 3), rng)
    assert sum(s.kind == "Conv" for s in m.layers) == 3 and not m.frozen


def test_module_shape_error_names_layer(rng):
    with pytest.raises(L.ShapeError, match="layer 1"):
        G.build_module("f.x", "category", [L.Conv(1, 2), L.Conv(3, 2)], (1, 4, 4), rng)


def test_teacher_junction_checked(rng):
    t = small_teacher(rng)
    bad = G.build_module("g.bad", "task", [L.Flatten(), L.Dense(12, 2)], (3, 2, 2), rng)
    with pytest.raises(G.JunctionError):
        G.TeacherNet(t.category, bad)


def test_identity_adapter_reproduces_teacher(rng):
    t = small_teacher(rng, dtype=np.float32)
    net = G.TransplantNet()
    net.add_task(t.task.copy())
    G.graft(net, t, t.task.id, adapter_init="identity")
    path = G.compose_path(net, t.category.id, t.task.id)
    x = rng.standard_normal((5, 1, 6, 6)).astype(np.float32)
    assert np.max(np.abs(path.predict(x) - t.path().predict(x))) <= 1e-6


def test_adapter_channel_mismatch_is_a_junction_error(rng):
    t = small_teacher(rng)
    net = G.TransplantNet()
    net.add_task(t.task.copy())
    net.add_category(t.category.copy())
    h = G.build_module("h.x", "adapter", G.adapter_specs(3, 4), (3, 3, 3), rng)
    with pytest.raises(G.JunctionError, match="h.x"):
        net.set_adapter(t.category.id, t.task.id, h)


def test_compose_path_missing_module_errors(rng):
    net = G.TransplantNet()
    with pytest.raises(KeyError):
        G.compose_path(net, "f.none", "g.none")


def test_compose_path_shares_parameters(rng):
    t = small_teacher(rng)
    net = G.TransplantNet()
    net.add_task(t.task.copy())
    G.graft(net, t, t.task.id, rng=rng)
    before = {m.id: m.param_hash() for m in net.modules()}
    path = G.compose_path(net, t.category.id, t.task.id)
    path.predict(rng.standard_normal((2, 1, 6, 6)))
    assert {m.id: m.param_hash() for m in net.modules()} == before
    h = net.adapters[(t.category.id, t.task.id)]
    assert path.params[path.junction_layer] is h.params[0]
    assert path.frozen == [True] * 3 + [False, False] + [True] * 4


def test_path_forward_matches_golden_hash():
    path, x = regression_path()
    assert output_hash(path, x) == (GOLDEN / "path_output.sha256").read_text().strip()


def test_graft_keeps_existing_modules_and_copies_teacher(rng):
    t1, t2 = small_teacher(rng, "disk"), small_teacher(rng, "ring")
    net = G.TransplantNet()
    net.add_task(t1.task.copy("g.shared"))
    G.graft(net, t1, "g.shared", rng=rng)
    before = {m.id: m.param_hash() for m in net.modules()}
    G.graft(net, t2, "g.shared", rng=rng)
    after = {m.id: m.param_hash() for m in net.modules()}
    assert all(after[k] == v for k, v in before.items())
    f = net.categories["f.ring"]
    assert f.frozen and f is not t2.category and f.param_hash() == t2.category.param_hash()
    with pytest.raises(ValueError, match="duplicate"):
        G.graft(net, t2, "g.shared", rng=rng)


def test_graft_irreconcilable_spatial_shapes(rng):
    t = small_teacher(rng)
    g = G.build_module("g.big", "task", [L.Flatten(), L.Dense(48, 2)], (3, 4, 4), rng)
    net = G.TransplantNet()
    net.add_task(g)
    with pytest.raises(G.JunctionError):
        G.graft(net, t, "g.big")


def test_graft_then_train_evaluates_end_to_end(rng):
    from transplant.train import TrainConfig, train_adapter
    t = small_teacher(rng, dtype=np.float32)
    net = G.TransplantNet()
    net.add_task(t.task.copy())
    G.graft(net, t, t.task.id, rng=rng)
    train_adapter(net, t, (t.category.id, t.task.id), cfg=TrainConfig(steps=5))
    y = G.compose_path(net, t.category.id, t.task.id).predict(np.zeros((2, 1, 6, 6), np.float32))
    assert y.shape == (2, 2) and np.all(np.isfinite(y))


# ---------------------------------------------------------------------------
# checkpoints


def test_round_trip_every_module_type(tmp_path, rng):
    for dtype in (np.float32, np.float64):
        t = small_teacher(rng, dtype=dtype)
        h = G.build_module("h.rt", "adapter", G.adapter_specs(3, 3, depth=2, kernel=3), (3, 3, 3), rng, dtype)
        d = G.save(tmp_path / str(np.dtype(dtype)), t.category, t.task, h, meta={"k": 1})
        mods, meta = G.load(d)
        assert meta == {"k": 1}
        for a, b in zip([t.category, t.task, h], mods):
            assert_modules_equal(a, b)


def test_teacher_and_net_round_trip(tmp_path, rng):
    t = small_teacher(rng)
    t2, meta = G.load_teacher(G.save_teacher(tmp_path / "t", t))
    assert_modules_equal(t.category, t2.category)
    assert_modules_equal(t.task, t2.task)
    net = G.TransplantNet()
    net.add_task(t.task.copy())
    G.graft(net, t, t.task.id, rng=rng)
    net2, _ = G.load_net(G.save_net(tmp_path / "n", net))
    assert set(net2.adapters) == set(net.adapters)
    for a, b in zip(net.modules(), net2.modules()):
        assert_modules_equal(a, b)
    with pytest.raises(G.CheckpointError):
        G.load_net(tmp_path / "t")


def test_flipping_one_byte_fails_load(tmp_path, rng):
    d = G.save(tmp_path / "c", small_teacher(rng).category)
    blob = next(d.glob("*.bin"))
    raw = bytearray(blob.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    blob.write_bytes(bytes(raw))
    with pytest.raises(G.CheckpointError, match="hash"):
        G.load(d)


def test_truncated_blob_and_version_mismatch(tmp_path, rng):
    d = G.save(tmp_path / "c", small_teacher(rng).category)
    blob = next(d.glob("*.bin"))
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(G.CheckpointError):
        G.load(d)
    d2 = G.save(tmp_path / "d", small_teacher(rng).category)
    man = json.loads((d2 / "manifest.json").read_text())
    man["format_version"] = 99
    (d2 / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(G.CheckpointError, match="version"):
        G.load(d2)
    with pytest.raises(G.CheckpointError):
        G.load(tmp_path / "missing")


def test_manifest_lists_adapter_layers_in_order(tmp_path, rng):
    h = G.build_module("h.three", "adapter", [L.Conv(3, 3, 1), L.ReLU(), L.Conv(3, 3, 1)], (3, 2, 2), rng)
    man = json.loads((G.save(tmp_path / "h", h) / "manifest.json").read_text())
    assert [s["kind"] for s in man["modules"][0]["layers"]] == ["Conv", "ReLU", "Conv"]


def test_golden_checkpoint_bytes_are_reproduced(tmp_path):
    out = G.save(tmp_path / "g", *golden_modules(), meta={"purpose": "golden"})
    for f in sorted((GOLDEN / "ckpt_v1").iterdir()):
        assert (out / f.name).read_bytes() == f.read_bytes(), f.name


def test_golden_checkpoint_loads_with_fixed_layout():
    mods, meta = G.load(GOLDEN / "ckpt_v1")
    assert meta == {"purpose": "golden"}
    for a, b in zip(golden_modules(), mods):
        assert_modules_equal(a, b)
    raw = (GOLDEN / "ckpt_v1" / "f.golden.bin").read_bytes()
    # little-endian IEEE-754 single: first weight -3.0, then -2.875
    assert struct.unpack("<2f", raw[:8]) == (-3.0, -2.875)
    assert raw[:4] == bytes.fromhex("000040c0")
    g_raw = (GOLDEN / "ckpt_v1" / "g.golden.bin").read_bytes()
    assert struct.unpack("<d", g_raw[8:16])[0] == 1 / 24 - 0.5
    assert struct.unpack("<2d", g_raw[-16:]) == (1.0, -1.0)


def test_save_rejects_duplicate_ids(tmp_path, rng):
    c = small_teacher(rng).category
    with pytest.raises(ValueError):
        G.save(tmp_path / "x", c, c)
