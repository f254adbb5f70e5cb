"""Command-line entry point: ``surfgen <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import downstream as ds
from . import metrics as mt
from .diffusion import SamplerConfig
from .mesh import (
    ObjFormatError,
    TopologyError,
    canonical_frame,
    load_named_rows,
    load_obj,
    order_rows,
    save_named_rows,
    save_obj,
    save_topology,
    upsample,
    vertex_normals,
)
from .model import ModelConfig
from .numerics import NonFiniteError
from .synthetic import build_topology, default_skeleton, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, TrainingDiverged, load_checkpoint, model_inputs, train, train_upsampler

log = logging.getLogger("surfgen")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# settings for the desk-scale synthetic bodies; a config file or --set overrides any of them
TRAIN_DEFAULTS = {
    "hidden_dim": 64,
    "n_layers": 3,
    "n_heads": 2,
    "mlp_ratio": 2,
    "attr_channels": 0,
    "use_long_skip": False,
    "pos_embed_kind": "template",
    "time_embed_kind": "token",
    "batch_size": 16,
    "epochs": 50,
    "lr": 2e-3,
    "lr_drop_epoch": -1,
    "checkpoint_every": 0,
    "ema_decay": 0.0,
    "joint_weight": 1.0,
    "up_steps": 1000,
    "up_lr": 1e-3,
    "up_batch": 64,
    "up_patience": 200,
}
METRICS = ("ra1nna", "1nna", "mmd", "cov", "chamfer")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """``key = value`` (or ``key value``) lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, val = parts
        values[key.strip()] = val.strip()
    return values


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _coerce(default, raw):
    if isinstance(default, bool):
        return str(raw).lower() in ("1", "true", "yes")
    return type(default)(raw)


def effective_train_config(config_file, overrides: dict[str, str]) -> dict:
    values = dict(TRAIN_DEFAULTS)
    given = read_config(config_file) if config_file else {}
    given.update(overrides)
    unknown = sorted(set(given) - set(values))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for k, raw in given.items():
        try:
            values[k] = _coerce(TRAIN_DEFAULTS[k], raw)
        except ValueError as exc:
            raise UsageError(f"config key {k}: cannot parse {raw!r}") from exc
    return values


def config_text(command: str, values: dict) -> str:
    lines = [f"# surfgen {command}"] + [f"{k} = {v}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def echo_config(command: str, values: dict, dest: Path | None) -> None:
    text = config_text(command, values)
    sys.stdout.write(text)
    if dest is not None:
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(text)


def _args_dict(args, skip=("func", "command", "out", "report")) -> dict:
    return {k: v for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: no such file")
    return p


def _load_model(path):
    ck = load_checkpoint(_require_file(path))
    if ck.topology is None or ck.upsampler is None:
        raise DataError(f"{path}: checkpoint lacks a topology or an up-sampler")
    return ck


def load_mesh_state(path, ck) -> tuple[np.ndarray, np.ndarray]:
    """Coarse vertices and joints of a mesh file; joints come from a sibling
    ``<stem>.joints.txt`` when present, else from the joint regressor."""
    topo = ck.topology
    obj = load_obj(_require_file(path))
    n = len(obj.vertices)
    if n == topo.n_dense:
        coarse = topo.downsample @ obj.vertices
    elif n == topo.n_coarse:
        coarse = obj.vertices
    else:
        raise DataError(f"{path}: {n} vertices match neither the coarse ({topo.n_coarse}) nor dense ({topo.n_dense}) mesh")
    side = Path(path).with_suffix(".joints.txt")
    if side.is_file():
        names, rows = load_named_rows(side, 3)
        joints = order_rows(names, rows, topo.joint_names)
    else:
        a, c = topo.regression_operator(ck.upsampler)
        joints = a @ coarse + c
    return coarse, joints


def load_joint_table(path, joint_names, ncols: int, require_all: bool):
    names, rows = load_named_rows(_require_file(path), ncols)
    unknown = [n for n in names if n not in joint_names]
    if unknown:
        raise DataError(f"{path}: unknown joint names {unknown}")
    if require_all:
        return order_rows(names, rows, joint_names)
    return {joint_names.index(n): r for n, r in zip(names, rows)}


def write_mesh(path: Path, coarse, joints, ck, write_coarse: Path | None = None) -> None:
    topo = ck.topology
    dense = upsample(np.asarray(coarse, dtype=np.float64), ck.upsampler)
    save_obj(path, dense, topo.faces_dense, vertex_normals(dense, topo.faces_dense))
    save_named_rows(path.with_suffix(".joints.txt"), topo.joint_names, joints)
    if write_coarse is not None:
        save_obj(write_coarse, coarse, topo.faces_coarse)


def load_shape_dir(root) -> tuple[np.ndarray, np.ndarray | None]:
    """Coarse vertex sets of a directory: ``coarse_*.obj`` if present, else a dataset."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: no such directory")
    coarse_files = sorted(root.glob("coarse_*.obj"))
    if coarse_files:
        return np.stack([load_obj(f).vertices for f in coarse_files]), None
    data = read_dataset(root)
    return data.coarse, data.joints


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    out = Path(args.out)
    echo_config("gen-data", _args_dict(args), out / "config.txt")
    spec = default_skeleton()
    data = generate_dataset(spec, args.samples, args.seed, build_topology(spec))
    write_dataset(out, data)


def cmd_train(args) -> None:
    values = effective_train_config(args.config, parse_overrides(args.set))
    out = Path(args.out)
    echo_config("train", {"data": args.data, "seed": args.seed, "resume": args.resume, **values}, out / "config.txt")
    data = read_dataset(args.data)
    if len(data) < 2:
        raise DataError(f"{args.data}: need at least two training samples")
    topo = data.topology
    model_cfg = ModelConfig.from_mapping(
        {"n_vertex_tokens": topo.n_coarse, "n_joint_tokens": topo.n_joints, **values}
    )
    train_keys = {f.name for f in fields(TrainConfig)}
    tc = TrainConfig(**{k: v for k, v in values.items() if k in train_keys}, seed=args.seed)
    up = train_upsampler(
        data.coarse, data.dense, topo, lr=values["up_lr"], max_steps=values["up_steps"],
        batch_size=values["up_batch"], seed=args.seed, patience=values["up_patience"],
    )
    x0, y0 = model_inputs(data.coarse, data.joints, data.normals, model_cfg)
    # geometric positional embedding: mean training joints, then mean coarse vertices
    template = np.concatenate([y0.mean(axis=0), x0[..., :3].mean(axis=0)])
    res = train(
        x0, y0, model_cfg, tc, out_dir=out, resume=args.resume, upsampler=up, topology=topo,
        on_epoch=lambda e, l: log.info("epoch %d loss %.5f", e, l), template=template,
    )
    log.info("finished at epoch %d, final loss %.5f", res.epoch, res.losses[-1] if res.losses else float("nan"))


def _sampler_args(p):
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)


def cmd_sample(args) -> None:
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.cfg is not None and args.joints is None:
        raise UsageError("--cfg needs --joints")
    out = Path(args.out)
    echo_config("sample", _args_dict(args), out / "config.txt")
    ck = _load_model(args.ckpt)
    topo, model, sched = ck.topology, ck.denoiser, ck.schedule
    if args.joints is None:
        gen = ds.generate(model, sched, SamplerConfig(steps=args.steps, seed=args.seed), args.n)
        coarse = gen.vertices[..., :3].astype(np.float64)
        joints = gen.joints.astype(np.float64)
    else:
        world = load_joint_table(args.joints, topo.joint_names, 3, require_all=True)
        frame = canonical_frame(world, topo.landmark_ids)
        scale = 0.0 if args.cfg is None else args.cfg
        gen = ds.generate_pose_conditioned(model, sched, frame.apply(world), scale, args.n, args.steps, args.seed)
        back = frame.inverse()
        coarse = back.apply(gen.vertices[..., :3].astype(np.float64))
        joints = np.repeat(world[None], args.n, axis=0)
    out.mkdir(parents=True, exist_ok=True)
    save_topology(out / "topology.txt", topo)
    for i in range(args.n):
        write_mesh(out / f"sample_{i:05d}.obj", coarse[i], joints[i], ck, out / f"coarse_{i:05d}.obj")


def parse_weights(text: str) -> list[float]:
    try:
        w = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--weights must be comma-separated numbers, got {text!r}") from exc
    if not w:
        raise UsageError("--weights is empty")
    return w


def _morph_end(spec: str, ck, steps: int):
    """Start noise of one morph end: ``seed:N`` draws it fresh, a mesh file is DDIM-inverted."""
    if spec.startswith("seed:"):
        try:
            seed = int(spec[5:])
        except ValueError as exc:
            raise UsageError(f"bad morph end {spec!r}; expected seed:N or a mesh file") from exc
        x, y, _ = ds.draw_start_noise(ck.denoiser, 1, seed)
        return x[0], y[0]
    v, j = load_mesh_state(spec, ck)
    return ds.invert(ck.denoiser, ck.schedule, v, j, steps)


def cmd_morph(args) -> None:
    weights = parse_weights(args.weights)
    out = Path(args.out)
    echo_config("morph", _args_dict(args), out / "config.txt")
    ck = _load_model(args.ckpt)
    model, sched = ck.denoiser, ck.schedule
    if model.config.attr_channels:
        raise DataError("morphing needs a model without normal channels")
    noise = [_morph_end(spec, ck, args.steps) for spec in (args.a, args.b)]
    frames = ds.morph(model, sched, noise[0], noise[1], weights, args.steps)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "weights.txt", "w") as fh:
        for i, w in enumerate(weights):
            fh.write(f"morph_{i:02d} {w:.6g}\n")
    for i, (x, y) in enumerate(frames):
        write_mesh(out / f"morph_{i:02d}.obj", x[:, :3], y, ck)


def _optim_args(p):
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--t-start", type=int, default=100)
    p.add_argument("--t-end", type=int, default=1)
    p.add_argument("--guidance", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    for name, default in (("sds", 1.0), ("edge", 1.0), ("lap", 1.0), ("consist", 1.0), ("cp", 10.0)):
        p.add_argument(f"--w-{name}", type=float, default=default)


def _optim_config(args):
    cfg = ds.OptimConfig(args.iters, args.lr, args.t_start, args.t_end, "x0", args.guidance, args.seed)
    weights = ds.DeformLossWeights(args.w_sds, args.w_edge, args.w_lap, args.w_consist, args.w_cp)
    return cfg, weights


def _write_result(path: Path, v, j, ck, report: ds.LoopReport, report_path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_mesh(path, v, j, ck)
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(report.to_text())


def cmd_deform(args) -> None:
    out = Path(args.out)
    echo_config("deform", _args_dict(args), out.with_name(out.stem + ".config.txt"))
    cfg, weights = _optim_config(args)
    ck = _load_model(args.ckpt)
    v, j = load_mesh_state(args.init, ck)
    targets = load_joint_table(args.targets, ck.topology.joint_names, 3, require_all=False)
    if not targets:
        raise DataError(f"{args.targets}: no control targets")
    v, j, report = ds.deform_control_points(
        ck.denoiser, ck.schedule, v, j, targets, ck.topology, ck.upsampler, weights, cfg
    )
    _write_result(out, v, j, ck, report, args.report)


def read_camera(path) -> ds.CameraModel:
    values = read_config(_require_file(path))
    try:
        return ds.CameraModel(float(values["scale"]), float(values.get("t_u", 0.0)), float(values.get("t_v", 0.0)))
    except KeyError as exc:
        raise DataError(f"{path}: camera file needs a 'scale' entry") from exc


def cmd_fit2d(args) -> None:
    out = Path(args.out)
    echo_config("fit2d", _args_dict(args), out.with_name(out.stem + ".config.txt"))
    cfg, weights = _optim_config(args)
    ck = _load_model(args.ckpt)
    v, j = load_mesh_state(args.init, ck)
    table = load_joint_table(args.kp2d, ck.topology.joint_names, 2, require_all=False)
    kp = np.zeros((ck.topology.n_joints, 2))
    visible = np.zeros(ck.topology.n_joints, bool)
    for k, row in table.items():
        kp[k] = row
        visible[k] = True
    camera = read_camera(args.camera)
    v, j, report = ds.fit_2d_keypoints(
        ck.denoiser, ck.schedule, v, j, kp, camera, ck.topology, ck.upsampler, visible, None, weights, cfg
    )
    _write_result(out, v, j, ck, report, args.report)


def evaluate(gen: np.ndarray, ref: np.ndarray, metrics, distance: str = "chamfer") -> dict[str, float]:
    """Metrics on coarse vertex sets scaled by the mean reference bounding-box diagonal."""
    scale = float(np.mean(mt.bbox_diagonal(ref)))
    gen = np.asarray(gen, dtype=np.float64) / scale
    ref = np.asarray(ref, dtype=np.float64) / scale
    out: dict[str, float] = {}
    cross = None
    for name in metrics:
        if name == "ra1nna":
            out[name] = mt.one_nna(gen, ref, distance, aligned=True)
        elif name == "1nna":
            out[name] = mt.one_nna(gen, ref, distance, aligned=False)
        else:
            if cross is None:
                cross = mt.pairwise_distances(gen, ref, distance)
            if name == "mmd":
                out[name] = mt.mmd_cov(gen, ref, distances=cross)[0]
            elif name == "cov":
                out[name] = 100.0 * mt.mmd_cov(gen, ref, distances=cross)[1]
            else:
                out[name] = float(cross.min(axis=1).mean())
    return out


def cmd_eval(args) -> None:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise UsageError(f"unknown metrics {bad}; choose from {', '.join(METRICS)}")
    out = Path(args.out)
    echo_config("eval", _args_dict(args), out.with_name(out.stem + ".config.txt"))
    gen, _ = load_shape_dir(args.gen)
    ref, _ = load_shape_dir(args.ref)
    if gen.shape[1:] != ref.shape[1:]:
        raise DataError(f"generated shapes {gen.shape[1:]} and reference shapes {ref.shape[1:]} differ")
    result = evaluate(gen, ref, metrics, args.distance)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("metric,value\n")
        for k, v in result.items():
            fh.write(f"{k},{v:.6f}\n")
    width = max(len(k) for k in result)
    print(f"{'metric':<{width}}  value   (gen {len(gen)}, ref {len(ref)})")
    for k, v in result.items():
        print(f"{k:<{width}}  {v:.4f}")


def cmd_inspect(args) -> None:
    ck = load_checkpoint(_require_file(args.ckpt))
    rows = sorted(ck.arrays.items())
    width = max(len(k) for k, _ in rows)
    print(f"{'tensor':<{width}}  dtype    shape            count")
    total = 0
    for k, v in rows:
        shape = "x".join(str(s) for s in v.shape) or "-"
        print(f"{k:<{width}}  {str(v.dtype):<8} {shape:<16} {v.size}")
        if k.startswith("param.") and k != "param.template":
            total += v.size
    print(f"trainable parameters: {total}")
    for k in sorted(ck.meta):
        print(f"meta {k} = {ck.meta[k]}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surfgen", description="Diffusion models over articulated surface meshes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic body dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit the up-sampler and the denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate meshes, optionally conditioned on joints")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=1)
    _sampler_args(s)
    s.add_argument("--joints", default=None)
    s.add_argument("--cfg", type=float, default=None, help="guidance scale for joint-conditioned sampling")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("morph", help="interpolate two meshes through their inverted noise")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--a", required=True, help="mesh file to invert, or seed:N for fresh noise")
    m.add_argument("--b", required=True, help="mesh file to invert, or seed:N for fresh noise")
    m.add_argument("--weights", default="-0.25,0,0.25,0.5,0.75,1,1.25")
    m.add_argument("--steps", type=int, default=10)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_morph)

    d = sub.add_parser("deform", help="move joints to targets under the learned prior")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--init", required=True)
    d.add_argument("--targets", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--report", default=None)
    _optim_args(d)
    d.set_defaults(func=cmd_deform)

    f = sub.add_parser("fit2d", help="fit a mesh to 2-D joint observations")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--init", required=True)
    f.add_argument("--kp2d", required=True)
    f.add_argument("--camera", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--report", default=None)
    _optim_args(f)
    f.set_defaults(func=cmd_fit2d)

    e = sub.add_parser("eval", help="generation metrics between two mesh directories")
    e.add_argument("--gen", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--metrics", default="ra1nna,mmd,cov,chamfer")
    e.add_argument("--distance", choices=mt.DISTANCES, default="chamfer")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="list the tensors and metadata of a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ObjFormatError, TopologyError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
