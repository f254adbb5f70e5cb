"""Two-stream denoising transformer over joint and coarse-vertex tokens.

Token order is ``[time_x, time_y, joints..., vertices...]``; the two time tokens
are dropped before the output heads. With ``time_embed_kind="add"`` there are
no time tokens and the embeddings are added to their modality's tokens instead.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor

TIME_FEATURES = 128


@dataclass
class ModelConfig:
    n_vertex_tokens: int
    n_joint_tokens: int
    n_layers: int = 7
    hidden_dim: int = 256
    n_heads: int = 4
    attr_channels: int = 0
    mlp_ratio: int = 4
    use_long_skip: bool = False
    pos_embed_kind: str = "learned"
    time_embed_kind: str = "token"
    T: int = 1000

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.pos_embed_kind not in ("learned", "template"):
            raise ValueError(f"unknown pos_embed_kind {self.pos_embed_kind!r}")
        if self.time_embed_kind not in ("token", "add"):
            raise ValueError(f"unknown time_embed_kind {self.time_embed_kind!r}")
        if self.attr_channels not in (0, 3):
            raise ValueError("attr_channels must be 0 or 3")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    @property
    def vertex_channels(self) -> int:
        return 3 + self.attr_channels

    @property
    def n_time_tokens(self) -> int:
        return 2 if self.time_embed_kind == "token" else 0

    @property
    def n_tokens(self) -> int:
        return self.n_time_tokens + self.n_joint_tokens + self.n_vertex_tokens

    def to_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"

    def to_meta(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("int",):
                kwargs[f.name] = int(raw)
            elif f.type == "bool":
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = str(raw)
        return cls(**kwargs)

    @classmethod
    def from_meta(cls, meta) -> "ModelConfig":
        return cls.from_mapping({k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")})


def _skip_layout(n_layers: int) -> tuple[int, int]:
    """(n_in, n_out) blocks around the single middle block when long skips are on."""
    n_in = (n_layers - 1) // 2
    return n_in, n_layers - 1 - n_in


def _block_count(h: int, ratio: int) -> int:
    return 2 * 2 * h + (h * 3 * h + 3 * h) + (h * h + h) + (h * ratio * h + ratio * h) + (ratio * h * h + h)


def count_params(config: ModelConfig) -> int:
    """Closed-form count of trainable scalars."""
    h = config.hidden_dim
    c = config.vertex_channels
    total = config.n_layers * _block_count(h, config.mlp_ratio)
    total += 2 * h  # final norm
    total += (c * h + h) + (h * h + h)  # vertex input MLP
    total += (3 * h + h) + (h * h + h)  # joint input MLP
    total += 2 * ((TIME_FEATURES * h + h) + (h * h + h))  # two time MLPs
    n_data_tokens = config.n_joint_tokens + config.n_vertex_tokens
    if config.pos_embed_kind == "learned":
        total += (config.n_time_tokens + n_data_tokens) * h
    else:
        total += config.n_time_tokens * h + (3 * h + h) + (h * h + h)
    total += (h * h + h) + (h * c + c)  # vertex head
    total += (h * h + h) + (h * 3 + 3)  # joint head
    if config.use_long_skip:
        n_in, n_out = _skip_layout(config.n_layers)
        total += min(n_in, n_out) * (2 * h * h + h)
    return total


def init_params(config: ModelConfig, seed: int = 0, template: np.ndarray | None = None, dtype=np.float32) -> dict[str, Tensor]:
    """Deterministic initialisation; output heads start at zero.

    ``template`` ((J+N) x 3 rest-pose joints then vertices) is required for
    ``pos_embed_kind="template"`` and stored as a non-trainable buffer.
    """
    rng = np.random.default_rng(seed)
    h = config.hidden_dim
    c = config.vertex_channels
    params: dict[str, Tensor] = {}

    def dense(name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
        params[f"{name}.w"] = Tensor(w, True, f"{name}.w", dtype)
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b", dtype)

    def norm(name):
        params[f"{name}.g"] = Tensor(np.ones(h), True, f"{name}.g", dtype)
        params[f"{name}.b"] = Tensor(np.zeros(h), True, f"{name}.b", dtype)

    dense("in_v.0", c, h)
    dense("in_v.1", h, h)
    dense("in_j.0", 3, h)
    dense("in_j.1", h, h)
    for key in ("time_x", "time_y"):
        dense(f"{key}.0", TIME_FEATURES, h)
        dense(f"{key}.1", h, h)
    n_data = config.n_joint_tokens + config.n_vertex_tokens
    if config.pos_embed_kind == "learned":
        params["pos"] = Tensor(rng.normal(0.0, 0.02, (config.n_time_tokens + n_data, h)), True, "pos", dtype)
    else:
        if template is None or np.shape(template) != (n_data, 3):
            raise ValueError(f"template positional embedding needs a ({n_data}, 3) template")
        if config.n_time_tokens:
            params["pos_time"] = Tensor(rng.normal(0.0, 0.02, (config.n_time_tokens, h)), True, "pos_time", dtype)
        dense("pos_mlp.0", 3, h)
        dense("pos_mlp.1", h, h)
        params["template"] = Tensor(template, False, "template", dtype)
    r = config.mlp_ratio
    for i in range(config.n_layers):
        norm(f"blk{i}.ln1")
        dense(f"blk{i}.qkv", h, 3 * h)
        dense(f"blk{i}.proj", h, h)
        norm(f"blk{i}.ln2")
        dense(f"blk{i}.fc1", h, r * h)
        dense(f"blk{i}.fc2", r * h, h)
    if config.use_long_skip:
        n_in, n_out = _skip_layout(config.n_layers)
        for k in range(min(n_in, n_out)):
            dense(f"skip{k}", 2 * h, h)
    norm("ln_out")
    dense("out_v.0", h, h)
    dense("out_v.1", h, c, zero=True)
    dense("out_j.0", h, h)
    dense("out_j.1", h, 3, zero=True)
    return params


def trainable(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: p for k, p in params.items() if p.requires_grad}


def timestep_features(t: np.ndarray, dim: int = TIME_FEATURES) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _mlp(x, params, name):
    x = nx.linear(x, params[f"{name}.0.w"], params[f"{name}.0.b"])
    return nx.linear(nx.gelu(x), params[f"{name}.1.w"], params[f"{name}.1.b"])


def _ln(x, params, name):
    return nx.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _attention(x, params, name, n_heads):
    b, s, h = x.shape
    dh = h // n_heads
    qkv = nx.linear(x, params[f"{name}.qkv.w"], params[f"{name}.qkv.b"])
    qkv = nx.transpose(nx.reshape(qkv, (b, s, 3, n_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dh)))
    out = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (b, s, h))
    return nx.linear(out, params[f"{name}.proj.w"], params[f"{name}.proj.b"])


def _block(x, params, i, n_heads):
    x = nx.add(x, _attention(_ln(x, params, f"blk{i}.ln1"), params, f"blk{i}", n_heads))
    hdn = nx.gelu(nx.linear(_ln(x, params, f"blk{i}.ln2"), params[f"blk{i}.fc1.w"], params[f"blk{i}.fc1.b"]))
    return nx.add(x, nx.linear(hdn, params[f"blk{i}.fc2.w"], params[f"blk{i}.fc2.b"]))


def _check_inputs(x_t, y_t, config):
    if x_t.ndim != 3 or x_t.shape[1:] != (config.n_vertex_tokens, config.vertex_channels):
        raise ValueError(
            f"vertex input shape {x_t.shape[1:]} does not match config ({config.n_vertex_tokens}, {config.vertex_channels})"
        )
    if y_t.ndim != 3 or y_t.shape[1:] != (config.n_joint_tokens, 3):
        raise ValueError(f"joint input shape {y_t.shape[1:]} does not match config ({config.n_joint_tokens}, 3)")
    if x_t.shape[0] != y_t.shape[0]:
        raise ValueError(f"batch sizes differ: {x_t.shape[0]} vs {y_t.shape[0]}")


def forward(x_t, y_t, t_x, t_y, params: dict[str, Tensor], config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Per-token predictions for a batch.

    ``x_t`` is (B, N, 3+D) or (N, 3+D), ``y_t`` is (B, J, 3) or (J, 3);
    ``t_x``/``t_y`` are scalars or length-B integer arrays in [0, T].
    Returns Tensors shaped like the inputs (batched).
    """
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t, dtype=params["in_v.0.w"].data.dtype)
    y_t = y_t if isinstance(y_t, Tensor) else Tensor(y_t, dtype=params["in_v.0.w"].data.dtype)
    if x_t.data.ndim == 2:
        x_t = nx.reshape(x_t, (1,) + x_t.shape)
    if y_t.data.ndim == 2:
        y_t = nx.reshape(y_t, (1,) + y_t.shape)
    _check_inputs(x_t.data, y_t.data, config)
    bsz = x_t.shape[0]
    t_x = np.broadcast_to(np.asarray(t_x), (bsz,))
    t_y = np.broadcast_to(np.asarray(t_y), (bsz,))
    if np.any(t_x < 0) or np.any(t_x > config.T) or np.any(t_y < 0) or np.any(t_y > config.T):
        raise ValueError(f"timesteps must lie in [0, {config.T}]")
    dt = params["in_v.0.w"].data.dtype
    h = config.hidden_dim

    v_tok = _mlp(x_t, params, "in_v")
    j_tok = _mlp(y_t, params, "in_j")
    ex = _mlp(Tensor(timestep_features(t_x), dtype=dt), params, "time_x")
    ey = _mlp(Tensor(timestep_features(t_y), dtype=dt), params, "time_y")
    ex = nx.reshape(ex, (bsz, 1, h))
    ey = nx.reshape(ey, (bsz, 1, h))

    if config.pos_embed_kind == "learned":
        pos = params["pos"]
        pos_time = pos[: config.n_time_tokens] if config.n_time_tokens else None
        pos_data = pos[config.n_time_tokens :]
    else:
        pos_time = params.get("pos_time")
        pos_data = _mlp(params["template"], params, "pos_mlp")
    nj = config.n_joint_tokens
    j_tok = nx.add(j_tok, pos_data[:nj])
    v_tok = nx.add(v_tok, pos_data[nj:])
    if config.time_embed_kind == "token":
        tokens = nx.concat([nx.add(ex, pos_time[0:1]), nx.add(ey, pos_time[1:2]), j_tok, v_tok], axis=1)
    else:
        tokens = nx.concat([nx.add(j_tok, ey), nx.add(v_tok, ex)], axis=1)

    if config.use_long_skip:
        n_in, n_out = _skip_layout(config.n_layers)
        skips = []
        for i in range(n_in):
            tokens = _block(tokens, params, i, config.n_heads)
            skips.append(tokens)
        tokens = _block(tokens, params, n_in, config.n_heads)
        for k in range(n_out):
            if skips:
                merged = nx.concat([tokens, skips.pop()], axis=2)
                tokens = nx.linear(merged, params[f"skip{k}.w"], params[f"skip{k}.b"])
            tokens = _block(tokens, params, n_in + 1 + k, config.n_heads)
    else:
        for i in range(config.n_layers):
            tokens = _block(tokens, params, i, config.n_heads)

    tokens = _ln(tokens, params, "ln_out")
    s0 = config.n_time_tokens
    pred_y = _mlp(tokens[:, s0 : s0 + nj], params, "out_j")
    pred_x = _mlp(tokens[:, s0 + nj :], params, "out_v")
    return pred_x, pred_y


class Denoiser:
    """Parameters plus config, exposing a numpy-in/numpy-out v-prediction."""

    def __init__(self, params: dict[str, Tensor], config: ModelConfig, trained: bool = True):
        h, c = config.hidden_dim, config.vertex_channels
        last = f"blk{config.n_layers - 1}.qkv.w"
        if (
            params["in_v.0.w"].shape != (c, h)
            or last not in params
            or f"blk{config.n_layers}.qkv.w" in params
            or params["in_j.0.w"].shape != (3, h)
        ):
            raise ValueError("parameters do not match the model config")
        self.params = params
        self.config = config
        self.trained = trained

    def __call__(self, x_t, y_t, t_x, t_y) -> tuple[np.ndarray, np.ndarray]:
        px, py = forward(x_t, y_t, t_x, t_y, self.params, self.config)
        if np.ndim(x_t) == 2:
            return px.data[0], py.data[0]
        return px.data, py.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param.{k}": p.data for k, p in self.params.items()}

    @classmethod
    def from_arrays(cls, arrays, config: ModelConfig, trained: bool = True) -> "Denoiser":
        params = {}
        for k, v in arrays.items():
            if k.startswith("param."):
                name = k[len("param."):]
                params[name] = Tensor(v, name != "template", name, v.dtype)
        return cls(params, config, trained)
