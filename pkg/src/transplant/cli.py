"""Command-line entry point: ``transplant {pretrain,graft,transplant,eval,plan,report}``.

Settings resolve as flags > JSON config file > built-in defaults. The config
file holds optional sections ``train``, ``plan``, ``data``, ``pretrain``,
``preset`` and ``paths``; unknown keys anywhere are rejected. Every command
that writes an output directory also writes the fully resolved config there.

Exit codes: 0 ok, 1 usage or config error, 2 runtime error, 3 quality gate.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import graph as G
from .data import ShapeWorldSpec, make_split
from .experiments import (ArchPreset, ExperimentPlan, PretrainBudget, QualityGateError, TeacherStore,
                          evaluate, pretrain_teacher, run_plan, save_grid)
from .layers import ShapeError
from .report import NoResults, render_markdown, load_grids, write_report
from .tensor import NonFiniteError, make_rng
from .train import ConfigError, DivergenceError, TrainConfig, task_of, train_adapter

OUT_ENV = "TRANSPLANT_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GATE = 0, 1, 2, 3

SECTIONS = {"train": TrainConfig, "plan": ExperimentPlan, "data": ShapeWorldSpec,
            "pretrain": PretrainBudget, "preset": ArchPreset}
PATH_KEYS = ("out", "teacher", "task_from", "net", "teachers")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _defaults(cls) -> dict:
    inst = cls()
    out = {}
    for f in fields(cls):
        v = getattr(inst, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def read_config(path) -> dict:
    """Parse and shape-check a config file; returns ``{section: {key: value}}``."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: not valid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = set(raw) - set(SECTIONS) - {"paths"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        allowed = set(PATH_KEYS) if name == "paths" else {f.name for f in fields(SECTIONS[name])}
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
    return raw


def resolve(file_cfg: dict, flags: dict) -> dict:
    """Merge defaults, file and flags. ``flags`` maps ``section.key`` to a value or None."""
    cfg = {name: _defaults(cls) for name, cls in SECTIONS.items()}
    cfg["paths"] = {k: None for k in PATH_KEYS}
    for name, section in file_cfg.items():
        cfg[name].update(section)
    # a plan's own train overrides sit at file level, below the flags
    cfg["train"].update(cfg["plan"].get("train") or {})
    cfg["plan"]["train"] = {}
    for dotted, value in flags.items():
        if value is not None:
            name, key = dotted.split(".")
            cfg[name][key] = value
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _spec(cfg: dict) -> ShapeWorldSpec:
    return ShapeWorldSpec.from_dict(cfg["data"])


def _preset(cfg: dict) -> ArchPreset:
    return ArchPreset(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["preset"].items()})


def _fresh_dir(path) -> Path:
    d = Path(path)
    if d.exists() and any(d.iterdir()):
        raise ConfigError(f"output directory {d} is not empty; outputs always go to fresh paths")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo(cfg: dict, out_dir: Path) -> None:
    cfg["paths"]["out"] = str(out_dir)
    p = out_dir / "config.json"
    p.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=list) + "\n")
    print(f"config: {p}")


def _require(cfg: dict, key: str, flag: str) -> str:
    v = cfg["paths"][key]
    if not v:
        raise UsageError(f"{flag} is required")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, cfg) -> int:
    out = _fresh_dir(cfg["paths"]["out"] or default_out_root() / f"teacher-{args.task}-{args.category}")
    _echo(cfg, out)
    budget = PretrainBudget(**cfg["pretrain"])
    _, m = pretrain_teacher(args.category, args.task, _preset(cfg), _spec(cfg), budget, out_dir=out,
                            check_gate=False)
    print(f"val {m['metric']} {m['val_metric']:.4f}" + (f" iou20 {m['val_iou_20']:.4f}" if "val_iou_20" in m else ""))
    print(f"checkpoint: {out}")
    if not m["gate_passed"]:
        print(f"quality gate failed for {args.category}/{args.task}", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_graft(args, cfg) -> int:
    teacher, tmeta = G.load_teacher(_require(cfg, "teacher", "--teacher"))
    names = {}
    if cfg["paths"]["net"]:
        net, nmeta = G.load_net(cfg["paths"]["net"])
        names.update(nmeta.get("categories", {}))
    else:
        net = G.TransplantNet()
    donor = teacher
    if cfg["paths"]["task_from"]:
        donor, _ = G.load_teacher(cfg["paths"]["task_from"])
    if donor.task.id not in net.tasks:
        net.add_task(donor.task.copy())
    cid = args.category_id or tmeta.get("metrics", {}).get("category") or teacher.category.id
    G.graft(net, teacher, donor.task.id, cid, adapter_init=args.init, depth=args.depth,
            rng=make_rng(args.seed), kernel=args.kernel)
    out = _fresh_dir(cfg["paths"]["out"] or default_out_root() / f"net-{cid}")
    _echo(cfg, out)
    names[cid] = tmeta.get("metrics", {}).get("category")
    G.save_net(out, net, meta={"categories": names})
    print(f"grafted {cid} -> {donor.task.id} (adapter h.{cid}.{donor.task.id})")
    print(f"checkpoint: {out}")
    return EXIT_OK


def _category_name(meta: dict, cid: str, override) -> str:
    if override:
        return override
    name = meta.get("categories", {}).get(cid)
    if not name:
        raise ConfigError(f"cannot tell which shape-world category {cid!r} is; pass --category")
    return name


def cmd_transplant(args, cfg) -> int:
    net, meta = G.load_net(_require(cfg, "net", "--net"))
    teacher, tmeta = G.load_teacher(_require(cfg, "teacher", "--teacher"))
    tcfg = _train_config(cfg)
    cid = args.category_id or tmeta.get("metrics", {}).get("category") or teacher.category.id
    pairs = [p for p in net.adapters if p[0] == cid]
    if not pairs:
        raise ConfigError(f"net has no adapter for category {cid!r}; run graft first")
    pair = pairs[0]
    data = None
    if tcfg.samples > 0:
        name = _category_name(meta, cid, args.category)
        task = task_of(net.tasks[pair[1]])
        imgs, labels, masks = make_split(_spec(cfg), name, "train", tcfg.samples, positives_only=(task == "seg"))
        data = (imgs, labels if task == "cls" else masks)
    out = _fresh_dir(cfg["paths"]["out"] or default_out_root() / f"transplant-{cid}-{tcfg.strategy}-n{tcfg.samples}")
    _echo(cfg, out)
    _, tlog = train_adapter(net, teacher, pair, data, tcfg, log_path=out / "train_log.csv")
    for k in sorted(tlog.frozen_before):
        a, b = tlog.frozen_before[k], tlog.frozen_after[k]
        print(f"frozen-audit {k} {a[:16]} -> {b[:16]} {'ok' if a == b else 'CHANGED'}")
    G.save_net(out / "net", net, meta={k: v for k, v in meta.items() if k == "categories"})
    last = tlog.rows[-1]
    print(f"trained {pair[0]} -> {pair[1]}: loss {tlog.rows[0]['total_loss']:.6g} -> {last['total_loss']:.6g}"
          f" (lambda {tlog.lam:.4g})")
    print(f"checkpoint: {out / 'net'}")
    return EXIT_OK if tlog.audit_ok else EXIT_RUNTIME


def cmd_eval(args, cfg) -> int:
    spec = _spec(cfg)
    if cfg["paths"]["net"]:
        net, meta = G.load_net(cfg["paths"]["net"])
        cid = args.category_id or next(iter(net.categories))
        pairs = [p for p in net.adapters if p[0] == cid]
        if not pairs:
            raise ConfigError(f"net has no adapter for category {cid!r}")
        path = G.compose_path(net, *pairs[0])
        name = _category_name(meta, cid, args.category)
    else:
        teacher, tmeta = G.load_teacher(_require(cfg, "teacher", "--teacher or --net"))
        path = teacher.path()
        name = args.category or tmeta.get("metrics", {}).get("category")
        if not name:
            raise ConfigError("pass --category")
    task = task_of(path.modules[-1])
    value = evaluate(path, spec, name, args.split, task, args.count)
    print(f"{name} {args.split} {'error' if task == 'cls' else 'pixel_accuracy'} {value:.4f}")
    return EXIT_OK


def cmd_plan(args, cfg) -> int:
    try:
        plan = ExperimentPlan.from_dict(cfg["plan"])
    except TypeError as e:
        raise ConfigError(str(e)) from None
    TrainConfig.from_dict({**cfg["train"], "strategy": "back-distill", "samples": 0})
    root = default_out_root()
    out = _fresh_dir(cfg["paths"]["out"] or root / f"plan-{plan.experiment}-d{plan.depth}")
    _echo(cfg, out)
    store = TeacherStore(cfg["paths"]["teachers"] or root / "teachers", _spec(cfg), _preset(cfg),
                         PretrainBudget(**cfg["pretrain"]))
    plan.train = {k: v for k, v in cfg["train"].items() if k not in ("strategy", "samples", "seed")}
    grid = run_plan(plan, store, workers=args.workers)
    p = save_grid(grid, out)
    failed = [c for c in grid["cells"] if c["status"] == "failed"]
    print(render_markdown(grid))
    print(f"grid: {p}")
    if failed:
        print(f"{len(failed)} cell(s) failed; see the grid file", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    try:
        load_grids(args.results)
    except NoResults as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    for p in write_report(args.results, args.out):
        print(f"wrote {p}")
    print((Path(args.out or args.results) / "report.md").read_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _csv(kind):
    def parse(s):
        try:
            return [kind(x) for x in s.split(",") if x]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {s!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="transplant", description="Graft frozen modules through trainable adapters and train them by back-distillation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", dest="paths.out", help=f"output directory (default under ${OUT_ENV} or ./runs)")
        p.add_argument("--data-seed", dest="data.seed", type=int)

    def training(p):
        p.add_argument("--strategy", dest="train.strategy", choices=("back-distill", "direct-learn", "distill"))
        p.add_argument("--samples", dest="train.samples", type=int)
        p.add_argument("--steps", dest="train.steps", type=int)
        p.add_argument("--lr", dest="train.lr", type=float)
        p.add_argument("--lam", dest="train.lam", type=float)
        p.add_argument("--alpha-mode", dest="train.alpha_mode", choices=("ls", "fixed-1", "learnable"))
        p.add_argument("--seeds-per-step", dest="train.seeds_per_step", type=int)
        p.add_argument("--seed", dest="train.seed", type=int)

    p = sub.add_parser("pretrain", help="train a teacher end to end")
    common(p)
    p.add_argument("--task", required=True, choices=("cls", "seg"))
    p.add_argument("--category", required=True)
    p.add_argument("--pretrain-steps", dest="pretrain.steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("graft", help="copy a teacher's category module into a transplant net")
    common(p)
    p.add_argument("--teacher", dest="paths.teacher")
    p.add_argument("--task-from", dest="paths.task_from", help="teacher checkpoint donating the task module")
    p.add_argument("--net", dest="paths.net", help="existing transplant net to extend")
    p.add_argument("--category-id")
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--kernel", type=int, default=1)
    p.add_argument("--init", default="he", choices=("he", "identity", "near-identity"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_graft)

    p = sub.add_parser("transplant", help="train one adapter of a transplant net")
    common(p)
    training(p)
    p.add_argument("--net", dest="paths.net")
    p.add_argument("--teacher", dest="paths.teacher")
    p.add_argument("--category-id")
    p.add_argument("--category", help="shape-world category used for labeled samples")
    p.set_defaults(func=cmd_transplant)

    p = sub.add_parser("eval", help="evaluate a teacher or a transplanted path")
    common(p)
    p.add_argument("--net", dest="paths.net")
    p.add_argument("--teacher", dest="paths.teacher")
    p.add_argument("--category-id")
    p.add_argument("--category")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="run an experiment grid")
    common(p)
    training(p)
    p.add_argument("--experiment", dest="plan.experiment")
    p.add_argument("--depth", dest="plan.depth", type=int)
    p.add_argument("--sample-counts", dest="plan.samples", type=_csv(int))
    p.add_argument("--categories", dest="plan.categories", type=_csv(str))
    p.add_argument("--strategies", dest="plan.strategies", type=_csv(str))
    p.add_argument("--seeds", dest="plan.seeds", type=_csv(int))
    p.add_argument("--eval-count", dest="plan.eval_count", type=int)
    p.add_argument("--teachers", dest="paths.teachers", help="teacher cache directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("report", help="render grids as markdown and CSV tables")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"transplant: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:     # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if "." in k}
    try:
        cfg = resolve(read_config(getattr(args, "config", None)), flags)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"transplant: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except QualityGateError as e:
        print(f"transplant: {e}", file=sys.stderr)
        return EXIT_GATE
    except (ShapeError, G.CheckpointError, DivergenceError, NonFiniteError, FileNotFoundError,
            KeyError, ValueError) as e:
        print(f"transplant: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
