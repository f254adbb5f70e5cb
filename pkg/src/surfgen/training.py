"""Two-stream diffusion training in v-space, up-sampler fitting and checkpoints."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import numerics as nx
from .diffusion import NoiseSchedule, make_sigmoid_schedule, q_sample, v_target
from .mesh import MeshTopology, Upsampler, topology_arrays, topology_from_arrays
from .model import Denoiser, ModelConfig, forward, init_params, trainable
from .numerics import AdamState, GradTape, NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 400
    lr: float = 1e-4
    lr_drop_epoch: int = -1  # -1 means epochs // 2
    seed: int = 0
    T: int = 1000
    loss_space: str = "v"
    checkpoint_every: int = 0
    ema_decay: float = 0.0  # 0 disables the weight average
    joint_weight: float = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.loss_space != "v":
            raise ValueError("only v-space training is supported")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    @property
    def drop_epoch(self) -> int:
        return self.epochs // 2 if self.lr_drop_epoch < 0 else self.lr_drop_epoch

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        return self.lr * (0.1 if epoch > self.drop_epoch else 1.0)

    def to_meta(self) -> dict[str, str]:
        return {f"train.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = {"int": int, "float": float, "str": str}[f.type](values[f.name])
        return cls(**kwargs)


class NoiseDraw(NamedTuple):
    t_x: np.ndarray
    t_y: np.ndarray
    eps_x: np.ndarray
    eps_y: np.ndarray


def draw_noise(x_shape, y_shape, T: int, rng: np.random.Generator, dtype=np.float32) -> NoiseDraw:
    """Independent per-sample timesteps in [1, T] and Gaussian noise for both streams."""
    b = x_shape[0]
    t_x = rng.integers(1, T + 1, size=b)
    t_y = rng.integers(1, T + 1, size=b)
    eps_x = rng.standard_normal(x_shape).astype(dtype)
    eps_y = rng.standard_normal(y_shape).astype(dtype)
    return NoiseDraw(t_x, t_y, eps_x, eps_y)


def unidiffuser_loss(
    x0: np.ndarray,
    y0: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    draw: NoiseDraw | None = None,
    joint_weight: float = 1.0,
) -> Tensor:
    """MSE between predicted and target v for both streams, summed."""
    x0 = np.asarray(x0)
    y0 = np.asarray(y0)
    if x0.ndim != 3 or len(x0) == 0:
        raise ValueError("loss needs a non-empty (B, N, C) vertex batch")
    if len(y0) != len(x0):
        raise ValueError("vertex and joint batches differ in size")
    dtype = params["in_v.0.w"].data.dtype
    if draw is None:
        if rng is None:
            raise ValueError("pass either rng or a fixed noise draw")
        draw = draw_noise(x0.shape, y0.shape, schedule.T, rng, dtype)
    x0 = x0.astype(dtype, copy=False)
    y0 = y0.astype(dtype, copy=False)
    x_t = q_sample(x0, draw.t_x, draw.eps_x, schedule).astype(dtype, copy=False)
    y_t = q_sample(y0, draw.t_y, draw.eps_y, schedule).astype(dtype, copy=False)
    tgt_x = v_target(x0, draw.eps_x, draw.t_x, schedule).astype(dtype, copy=False)
    tgt_y = v_target(y0, draw.eps_y, draw.t_y, schedule).astype(dtype, copy=False)
    pred_x, pred_y = forward(x_t, y_t, draw.t_x, draw.t_y, params, config)
    loss_y = nx.mse(pred_y, Tensor(tgt_y, dtype=dtype))
    if joint_weight != 1.0:
        loss_y = nx.scale(loss_y, joint_weight)
    return nx.add(nx.mse(pred_x, Tensor(tgt_x, dtype=dtype)), loss_y)


def model_inputs(coarse: np.ndarray, joints: np.ndarray, normals: np.ndarray | None, config: ModelConfig):
    """Stack per-vertex channels (coordinates, then normals when configured)."""
    x0 = np.asarray(coarse, dtype=np.float32)
    if config.attr_channels:
        if normals is None:
            raise ValueError("model expects normal channels but none were given")
        x0 = np.concatenate([x0, np.asarray(normals, dtype=np.float32)], axis=-1)
    return x0, np.asarray(joints, dtype=np.float32)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    denoiser: Denoiser
    upsampler: Upsampler | None
    topology: MeshTopology | None
    schedule: NoiseSchedule
    meta: dict[str, str]
    arrays: dict[str, np.ndarray]


def schedule_meta(schedule: NoiseSchedule, **kw) -> dict[str, str]:
    meta = {"schedule.T": str(schedule.T)}
    meta.update({f"schedule.{k}": str(v) for k, v in kw.items()})
    return meta


def save_checkpoint(
    path,
    denoiser: Denoiser,
    schedule_kw: dict | None = None,
    upsampler: Upsampler | None = None,
    topology: MeshTopology | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict[str, str] | None = None,
) -> None:
    """Atomically write model, schedule settings, up-sampler and topology."""
    arrays = dict(denoiser.state_arrays())
    kw = {"T": denoiser.config.T, **(schedule_kw or {})}
    meta = {**denoiser.config.to_meta(), **{f"schedule.{k}": str(v) for k, v in kw.items()}}
    meta["model.trained"] = str(denoiser.trained)
    if upsampler is not None:
        arrays.update(upsampler.arrays())
        meta["upsampler.trained"] = str(upsampler.trained)
    if topology is not None:
        t_arr, t_meta = topology_arrays(topology)
        arrays.update(t_arr)
        meta.update(t_meta)
    arrays.update(extra_arrays or {})
    meta.update(extra_meta or {})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    nx.save_container(tmp, arrays, meta)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = nx.load_container(path)
    config = ModelConfig.from_meta(meta)
    denoiser = Denoiser.from_arrays(arrays, config, meta.get("model.trained", "True") == "True")
    sched = make_sigmoid_schedule(
        int(meta.get("schedule.T", config.T)),
        float(meta.get("schedule.lambda_start", -3.0)),
        float(meta.get("schedule.lambda_end", 3.0)),
        float(meta.get("schedule.alpha_bar_min", 1e-4)),
    )
    up = None
    if "upsampler.w1" in arrays:
        up = Upsampler.from_arrays(arrays, meta.get("upsampler.trained", "False") == "True")
    topo = topology_from_arrays(arrays, meta) if "topology.parents" in arrays else None
    return Checkpoint(denoiser, up, topo, sched, meta, arrays)


# ---------------------------------------------------------------------------
# diffusion training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    denoiser: Denoiser
    losses: list[float]
    lrs: list[float]
    epoch: int
    adam: AdamState


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _train_state(params, adam: AdamState, ema, epoch, losses, lrs) -> tuple[dict, dict]:
    arrays = {}
    for k, v in adam.m.items():
        arrays[f"adam.m.{k}"] = v
        arrays[f"adam.v.{k}"] = adam.v[k]
    for k, v in (ema or {}).items():
        arrays[f"ema.{k}"] = v
    arrays["history.loss"] = np.asarray(losses, dtype=np.float64)
    arrays["history.lr"] = np.asarray(lrs, dtype=np.float64)
    meta = {"train.epoch_done": str(epoch), "adam.step": str(adam.step)}
    return arrays, meta


def write_loss_csv(path, losses, lrs) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,lr\n")
        for e, (l, r) in enumerate(zip(losses, lrs), start=1):
            fh.write(f"{e},{l:.9g},{r:.9g}\n")


def train(
    x0: np.ndarray,
    y0: np.ndarray,
    model_config: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    init_seed: int | None = None,
    upsampler: Upsampler | None = None,
    topology: MeshTopology | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
    stop_after: int | None = None,
    template: np.ndarray | None = None,
) -> TrainResult:
    """Adam over shuffled minibatches; each epoch draws from its own seeded stream.

    Checkpoints (``ckpt_XXXX.sgc`` every ``checkpoint_every`` epochs, and
    ``last.sgc``) and ``loss.csv`` go to ``out_dir``. ``resume`` names a
    checkpoint written by this function. ``stop_after`` ends the run early at
    that epoch (used to emulate interruption). ``template`` ((J+N) x 3) seeds
    the geometric positional embedding when the config asks for one.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    y0 = np.asarray(y0, dtype=np.float32)
    if len(x0) == 0:
        raise ValueError("training set is empty")
    if len(x0) != len(y0):
        raise ValueError("vertex and joint arrays differ in sample count")
    schedule = make_sigmoid_schedule(cfg.T)
    if model_config.T != cfg.T:
        raise ValueError("model and training configs disagree on T")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    adam = AdamState()
    losses: list[float] = []
    lrs: list[float] = []
    start = 1
    ema = None
    if resume is not None:
        ck = load_checkpoint(resume)
        params = ck.denoiser.params
        adam.step = int(ck.meta["adam.step"])
        for k, v in ck.arrays.items():
            if k.startswith("adam.m."):
                adam.m[k[7:]] = v
            elif k.startswith("adam.v."):
                adam.v[k[7:]] = v
        if cfg.ema_decay:
            ema = {k[4:]: v for k, v in ck.arrays.items() if k.startswith("ema.")}
        losses = ck.arrays["history.loss"].tolist()
        lrs = ck.arrays["history.lr"].tolist()
        start = int(ck.meta["train.epoch_done"]) + 1
    else:
        params = init_params(model_config, cfg.seed if init_seed is None else init_seed, template)
        if cfg.ema_decay:
            ema = {k: p.data.copy() for k, p in trainable(params).items()}
    train_params = trainable(params)

    def snapshot(epoch: int, name: str):
        if out is None:
            return
        arrays, meta = _train_state(params, adam, ema, epoch, losses, lrs)
        meta.update(cfg.to_meta())
        save_checkpoint(out / name, Denoiser(params, model_config, True), None, upsampler, topology, arrays, meta)

    last = min(cfg.epochs, stop_after) if stop_after is not None else cfg.epochs
    for epoch in range(start, last + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cfg.lr_at(epoch)
        total, count = 0.0, 0
        for idx in _epoch_batches(len(x0), cfg.batch_size, rng):
            try:
                with GradTape() as tape:
                    loss = unidiffuser_loss(
                        x0[idx], y0[idx], params, model_config, schedule, rng, joint_weight=cfg.joint_weight
                    )
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}; last good checkpoint kept") from exc
            grads = nx.backward(loss, tape)
            named = {k: grads[p] for k, p in train_params.items() if p in grads}
            skipped = nx.adam_update(train_params, named, adam, lr)
            if skipped:
                raise TrainingDiverged(f"non-finite gradients for {skipped[:3]} in epoch {epoch}")
            if ema is not None:
                d = cfg.ema_decay
                for k, p in train_params.items():
                    ema[k] *= d
                    ema[k] += (1 - d) * p.data
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        lrs.append(lr)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            snapshot(epoch, f"ckpt_{epoch:04d}.sgc")
    done = max(start - 1, last)
    snapshot(done, "last.sgc")
    if out is not None:
        write_loss_csv(out / "loss.csv", losses, lrs)
    final = params
    if ema is not None:
        final = dict(params)
        for k, v in ema.items():
            final[k] = Tensor(v.copy(), True, k, v.dtype)
    return TrainResult(Denoiser(final, model_config, True), losses, lrs, done, adam)


# ---------------------------------------------------------------------------
# up-sampler fitting
# ---------------------------------------------------------------------------


def upsampler_error(up: Upsampler, coarse: np.ndarray, dense: np.ndarray) -> float:
    """Mean per-vertex Euclidean error."""
    pred = np.matmul(up.w2, np.matmul(up.w1, coarse) + up.b1) + up.b2
    return float(np.mean(np.linalg.norm(pred - dense, axis=-1)))


def train_upsampler(
    coarse: np.ndarray,
    dense: np.ndarray,
    topology: MeshTopology | None = None,
    lr: float = 1e-3,
    max_steps: int = 1000,
    batch_size: int = 64,
    seed: int = 0,
    patience: int = 200,
    init: Upsampler | None = None,
) -> Upsampler:
    """Adam on mean squared dense error; stops when the loss stops improving.

    Starts from ``init``, else from the topology's barycentric prolongation,
    else from small random weights. The learning rate halves whenever
    ``patience`` steps pass without a new best.
    """
    coarse = np.asarray(coarse, dtype=np.float64)
    dense = np.asarray(dense, dtype=np.float64)
    if len(coarse) != len(dense):
        raise ValueError(f"got {len(coarse)} coarse meshes but {len(dense)} dense meshes")
    if len(coarse) == 0:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(seed)
    if init is not None:
        start = init
    elif topology is not None:
        start = Upsampler.from_topology(topology)
    else:
        n, m = coarse.shape[1], dense.shape[1]
        mid = 2 * n
        start = Upsampler(
            rng.normal(0, 1 / np.sqrt(n), (mid, n)), np.zeros((mid, 3)), rng.normal(0, 1 / np.sqrt(mid), (m, mid)),
            np.zeros((m, 3)),
        )
    p = {
        "w1": Tensor(start.w1.copy(), True, dtype=np.float64),
        "b1": Tensor(start.b1.copy(), True, dtype=np.float64),
        "w2": Tensor(start.w2.copy(), True, dtype=np.float64),
        "b2": Tensor(start.b2.copy(), True, dtype=np.float64),
    }
    state = AdamState()
    best, best_w, since, rate = np.inf, None, 0, lr
    s = len(coarse)
    # batches are folded to (vertices, B, 3) so each map is a single GEMM
    cols_c = np.ascontiguousarray(coarse.transpose(1, 0, 2))
    cols_d = np.ascontiguousarray(dense.transpose(1, 0, 2))
    for step in range(max_steps):
        idx = np.sort(rng.choice(s, size=batch_size, replace=False)) if s > batch_size else np.arange(s)
        c, d = cols_c[:, idx], cols_d[:, idx]
        nb = len(idx)
        w1, w2 = p["w1"].data, p["w2"].data
        mid = (w1 @ c.reshape(len(c), -1)).reshape(len(w1), nb, 3) + p["b1"].data[:, None]
        r = (w2 @ mid.reshape(len(w1), -1)).reshape(len(w2), nb, 3) + p["b2"].data[:, None] - d
        loss = float(np.mean(r * r))
        g_pred = (2.0 / r.size) * r.reshape(len(w2), -1)
        g_mid = w2.T @ g_pred
        grads = {
            "w2": g_pred @ mid.reshape(len(w1), -1).T,
            "b2": g_pred.reshape(len(w2), nb, 3).sum(axis=1),
            "w1": g_mid @ c.reshape(len(c), -1).T,
            "b1": g_mid.reshape(len(w1), nb, 3).sum(axis=1),
        }
        if loss < best * (1 - 1e-4):
            best, since = loss, 0
            best_w = {k: v.data.copy() for k, v in p.items()}
        else:
            since += 1
            if since >= patience:
                rate *= 0.5
                since = 0
                if rate < lr * 1e-3:
                    break
        nx.adam_update(p, grads, state, rate)
    final = best_w or {k: v.data for k, v in p.items()}
    return Upsampler(final["w1"], final["b1"], final["w2"], final["b2"], trained=True)
