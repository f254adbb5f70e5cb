"""Noise schedule, forward noising, v-parameterisation, DDIM, guidance and SDS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MODES = ("marginal", "conditional_on_joints", "joint")


@dataclass
class NoiseSchedule:
    """Tables indexed by integer timestep 0..T (index 0 is the clean sample)."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.beta.shape != self.alpha_bar.shape:
            raise ValueError("beta and alpha_bar tables must have the same length")

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def coeffs(self, t):
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for integer t (scalar or array)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")
        ab = self.alpha_bar[t]
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# t beta alpha_bar\n")
            for t in range(1, self.T + 1):
                fh.write(f"{t} {self.beta[t]:.17g} {self.alpha_bar[t]:.17g}\n")

    @classmethod
    def read(cls, path) -> "NoiseSchedule":
        rows = np.loadtxt(path, comments="#", ndmin=2)
        if not np.array_equal(rows[:, 0], np.arange(1, len(rows) + 1)):
            raise ValueError(f"{path}: timesteps must run 1..T")
        beta = np.concatenate([[0.0], rows[:, 1]])
        alpha_bar = np.concatenate([[1.0], rows[:, 2]])
        return cls(beta, alpha_bar)


def make_sigmoid_schedule(T: int = 1000, lambda_start: float = -3.0, lambda_end: float = 3.0, alpha_bar_min: float = 1e-4) -> NoiseSchedule:
    """alpha_bar(t) = sigmoid(-lambda(t)), lambda linear in t, rescaled to [alpha_bar_min, 1]."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not lambda_start < lambda_end:
        raise ValueError("lambda_start must be below lambda_end")
    t = np.arange(T + 1, dtype=np.float64)
    lam = lambda_start + (lambda_end - lambda_start) * t / T
    raw = 1.0 / (1.0 + np.exp(lam))
    ab = alpha_bar_min + (1.0 - alpha_bar_min) * (raw - raw[-1]) / (raw[0] - raw[-1])
    ab[0], ab[-1] = 1.0, alpha_bar_min
    beta = np.zeros(T + 1)
    beta[1:] = np.clip(1.0 - ab[1:] / ab[:-1], 1e-6, 0.999)
    if np.any(beta[1:] <= 0) or np.any(beta[1:] >= 1):
        raise ValueError("schedule produced beta outside (0, 1)")
    return NoiseSchedule(beta, ab)


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Forward noising. ``t`` may be a scalar or one value per leading batch entry."""
    x0 = np.asarray(x0)
    a, s = schedule.coeffs(t)
    a, s = _expand(a, x0), _expand(s, x0)
    return (a * x0 + s * np.asarray(eps)).astype(x0.dtype, copy=False)


def _expand(c, like):
    c = np.asarray(c)
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (np.ndim(like) - c.ndim))


def v_target(x0, eps, t, schedule: NoiseSchedule):
    a, s = schedule.coeffs(t)
    x0 = np.asarray(x0)
    return (_expand(a, x0) * np.asarray(eps) - _expand(s, x0) * x0).astype(x0.dtype, copy=False)


def x0_from_v(x_t, v, t, schedule: NoiseSchedule):
    a, s = schedule.coeffs(t)
    x_t = np.asarray(x_t)
    return (_expand(a, x_t) * x_t - _expand(s, x_t) * np.asarray(v)).astype(x_t.dtype, copy=False)


def eps_from_v(x_t, v, t, schedule: NoiseSchedule):
    a, s = schedule.coeffs(t)
    x_t = np.asarray(x_t)
    return (_expand(s, x_t) * x_t + _expand(a, x_t) * np.asarray(v)).astype(x_t.dtype, copy=False)


def v_from_eps(x_t, eps, t, schedule: NoiseSchedule):
    # v = (eps - sqrt(1-ab) x_t) / sqrt(ab); only defined for ab > 0
    a, s = schedule.coeffs(t)
    x_t = np.asarray(x_t)
    return ((np.asarray(eps) - _expand(s, x_t) * x_t) / _expand(a, x_t)).astype(x_t.dtype, copy=False)


def ddim_step(x_t, v_pred, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from t to t_prev < t."""
    if not t_prev < t:
        raise ValueError(f"t_prev={t_prev} must be below t={t}")
    x0_hat = x0_from_v(x_t, v_pred, t, schedule)
    if t_prev == 0:
        return x0_hat
    eps_hat = eps_from_v(x_t, v_pred, t, schedule)
    a, s = schedule.coeffs(t_prev)
    return (a * x0_hat + s * eps_hat).astype(np.asarray(x_t).dtype, copy=False)


def ddim_inverse_step(x_t, v_pred, t: int, t_next: int, schedule: NoiseSchedule):
    """Deterministic DDIM inversion from t to t_next > t."""
    if not t_next > t:
        raise ValueError(f"t_next={t_next} must exceed t={t}")
    a, s = schedule.coeffs(t)
    if t == 0:
        x0_hat = np.asarray(x_t)
        eps_hat = np.asarray(v_pred)  # at t = 0, v equals eps
    else:
        x0_hat = x0_from_v(x_t, v_pred, t, schedule)
        eps_hat = eps_from_v(x_t, v_pred, t, schedule)
    a2, s2 = schedule.coeffs(t_next)
    return (a2 * x0_hat + s2 * eps_hat).astype(np.asarray(x_t).dtype, copy=False)


def timestep_subsequence(T: int, steps: int) -> list[int]:
    """Evenly spaced, strictly decreasing timesteps from T down to 1.

    A single step is just [T]; sampling always finishes with a jump to t = 0.
    """
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in [1, {T}]")
    if steps == 1:
        return [T]
    seq = np.round(np.linspace(T, 1, steps)).astype(int)
    out = sorted(set(seq.tolist()), reverse=True)
    if len(out) != steps:
        raise ValueError(f"cannot fit {steps} distinct steps into T={T}")
    return out


@dataclass
class SamplerConfig:
    steps: int = 10
    guidance_scale: float = 0.0
    mode: str = "joint"
    seed: int = 0
    step_subsequence: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")

    def subsequence(self, T: int) -> list[int]:
        seq = self.step_subsequence or timestep_subsequence(T, self.steps)
        if any(b >= a for a, b in zip(seq, seq[1:])) or seq[0] > T or seq[-1] < 1:
            raise ValueError("step subsequence must be strictly decreasing within [1, T]")
        return list(seq)


def cfg_combine(pred_cond, pred_uncond, s_g: float):
    """(1 + s_g) * cond - s_g * uncond."""
    if s_g < 0:
        raise ValueError("guidance scale must be non-negative")
    pred_cond = np.asarray(pred_cond)
    if s_g == 0:
        return pred_cond
    return (1.0 + s_g) * pred_cond - s_g * np.asarray(pred_uncond)


Weighting = Callable[[int, NoiseSchedule], float]


def constant_weighting(t: int, schedule: NoiseSchedule) -> float:
    return 1.0


def x0_weighting(t: int, schedule: NoiseSchedule) -> float:
    """sqrt((1-ab)/ab): turns (eps_hat - eps) into (X - x0_hat)."""
    ab = schedule.alpha_bar[t]
    return math.sqrt((1.0 - ab) / ab)


WEIGHTINGS: dict[str, Weighting] = {"constant": constant_weighting, "x0": x0_weighting}


def resolve_weighting(weighting) -> Weighting:
    if callable(weighting):
        return weighting
    try:
        return WEIGHTINGS[weighting]
    except KeyError:
        raise ValueError(f"unknown SDS weighting {weighting!r}") from None


def predict_eps(model, x_t, y_t, t_x, t_y, schedule: NoiseSchedule):
    """Model output converted from v to noise for both token streams."""
    vx, vy = model(x_t, y_t, t_x, t_y)
    return eps_from_v(x_t, vx, t_x, schedule), eps_from_v(y_t, vy, t_y, schedule)


def sds_gradient(
    vertices,
    joints,
    t: int,
    model,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    condition_joints=None,
    guidance_scale: float = 0.0,
    weighting="constant",
):
    """Score-distillation gradient on a (vertices, joints) state.

    Without a condition both streams are noised to the same t. With
    ``condition_joints`` the joint stream is held clean (t_y = 0), the
    vertex prediction is guided, and the joint block of the gradient is zero.
    Returns (grad_vertices, grad_joints) in the input layout.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"SDS timestep must lie in [1, {schedule.T}]")
    vertices = np.asarray(vertices)
    joints = np.asarray(joints)
    w = resolve_weighting(weighting)(t, schedule)
    eps_x = rng.standard_normal(vertices.shape).astype(vertices.dtype)
    x_t = q_sample(vertices, t, eps_x, schedule)
    if condition_joints is None:
        eps_y = rng.standard_normal(joints.shape).astype(joints.dtype)
        y_t = q_sample(joints, t, eps_y, schedule)
        ex, ey = predict_eps(model, x_t, y_t, t, t, schedule)
        return w * (ex - eps_x), w * (ey - eps_y)
    cond = np.asarray(condition_joints, dtype=vertices.dtype)
    noise_y = rng.standard_normal(cond.shape).astype(vertices.dtype)
    ex_c, _ = predict_eps(model, x_t, cond, t, 0, schedule)
    if guidance_scale > 0:
        ex_u, _ = predict_eps(model, x_t, noise_y, t, schedule.T, schedule)
        ex_c = cfg_combine(ex_c, ex_u, guidance_scale)
    return w * (ex_c - eps_x), np.zeros_like(joints)
