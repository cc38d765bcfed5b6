"""Closed-form diffusion math: cosine schedule, forward noising, posterior, sampling.

Every operation accepts either numpy arrays or torch tensors for the batch
arguments; per-step coefficients are gathered from float64 tables and cast
to the batch's dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_coef_x0: np.ndarray
    posterior_coef_xt: np.ndarray
    posterior_var: np.ndarray
    name: str = "cosine"

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta: np.ndarray, name: str) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        one_minus = 1.0 - alpha_bar
        return cls(
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            alpha_bar_prev=alpha_bar_prev,
            posterior_coef_x0=np.sqrt(alpha_bar_prev) * beta / one_minus,
            posterior_coef_xt=np.sqrt(alpha) * (1.0 - alpha_bar_prev) / one_minus,
            posterior_var=beta * (1.0 - alpha_bar_prev) / one_minus,
            name=name,
        )


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 2:
        raise ValueError("cosine schedule needs T >= 2")

    def f(u):
        return math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2

    beta = np.array([1.0 - f(i + 1) / f(i) for i in range(T)])
    return NoiseSchedule.from_betas(np.clip(beta, 1e-8, max_beta), "cosine")


SCHEDULES = {"cosine": cosine_schedule}


def make_schedule(name: str, T: int) -> NoiseSchedule:
    try:
        return SCHEDULES[name](T)
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}") from None


def _gather(table: np.ndarray, t, like):
    """Pick ``table[t_i]`` and shape it to broadcast against ``like`` ([b, ...])."""
    shape = (-1,) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        idx = torch.as_tensor(t, dtype=torch.long).cpu()
        vals = torch.as_tensor(table, dtype=torch.float64)[idx]
        return vals.to(dtype=like.dtype, device=like.device).reshape(shape)
    idx = t.cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.int64)
    return table[idx].reshape(shape)


def _check_steps(t, sched: NoiseSchedule, batch: int):
    arr = t.cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.shape != (batch,):
        raise ValueError(f"shape mismatch: step vector {arr.shape} for batch of {batch}")
    if arr.size and (arr.min() < 0 or arr.max() >= sched.T):
        raise ValueError(f"invalid diffusion step: steps must lie in [0, {sched.T - 1}]")
    return arr


def _sqrt(x):
    return x.sqrt() if isinstance(x, torch.Tensor) else np.sqrt(x)


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_steps(t, sched, x0.shape[0])
    ab = _gather(sched.alpha_bar, t, x0)
    return _sqrt(ab) * x0 + _sqrt(1.0 - ab) * eps


def reparam_x0(xt, eps, t, sched: NoiseSchedule):
    if tuple(xt.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: xt {tuple(xt.shape)} vs eps {tuple(eps.shape)}")
    ab = _gather(sched.alpha_bar, t, xt)
    return (xt - _sqrt(1.0 - ab) * eps) / _sqrt(ab)


def posterior_mean(xt, x0, t, sched: NoiseSchedule):
    arr = _check_steps(t, sched, xt.shape[0])
    if arr.size and arr.min() < 1:
        raise ValueError("posterior undefined at step zero")
    c0 = _gather(sched.posterior_coef_x0, t, xt)
    ct = _gather(sched.posterior_coef_xt, t, xt)
    return c0 * x0 + ct * xt


def reverse_step(x0_hat, xt, t, noise, sched: NoiseSchedule):
    """One ancestral step with ``sigma_t^2 = beta_t``; step 0 returns ``x0_hat``."""
    if tuple(noise.shape) != tuple(xt.shape):
        raise ValueError(f"shape mismatch: noise {tuple(noise.shape)} vs xt {tuple(xt.shape)}")
    arr = _check_steps(t, sched, xt.shape[0])
    final = arr == 0
    if final.all():
        return x0_hat
    # step 0 entries are handled below; substitute 1 so the posterior is defined
    safe_t = np.where(final, 1, arr)
    mean = posterior_mean(xt, x0_hat, safe_t, sched)
    out = mean + _sqrt(_gather(sched.beta, safe_t, xt)) * noise
    if final.any():
        mask = _gather(final.astype(np.float64), np.arange(len(arr)), xt) > 0
        out = torch.where(mask, x0_hat, out) if isinstance(out, torch.Tensor) else np.where(mask, x0_hat, out)
    return out


def sample_steps(b: int, T: int, strategy: str, rng: torch.Generator) -> torch.Tensor:
    """Training steps drawn from ``[1, T-1]``.

    ``uniform`` draws each entry independently; ``sss`` draws one step and
    repeats it across the batch.
    """
    if b < 1 or T < 2:
        raise ValueError("need b >= 1 and T >= 2")
    if strategy == "uniform":
        return torch.randint(1, T, (b,), generator=rng)
    if strategy == "sss":
        t1 = torch.randint(1, T, (1,), generator=rng)
        return t1.expand(b).clone()
    raise ValueError(f"unknown step strategy {strategy!r}")


@torch.no_grad()
@torch.no_grad()
def generate(model, n: int, sched: NoiseSchedule, rng: torch.Generator, chunk: int | None = None) -> torch.Tensor:
    """Ancestral sampling from pure noise, clipped to [-1, 1].

    ``model`` is any callable ``(x_t, t) -> x0_hat`` exposing ``length`` and
    ``features``. Noise for the whole batch is drawn once per step and the
    model is evaluated ``chunk`` samples at a time, so chunking only bounds
    activation memory and does not change which noise a sample sees.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    chunk = chunk or n
    dtype = _model_dtype(model)
    shape = (n, model.length, model.features)
    x = torch.randn(shape, generator=rng, dtype=dtype)
    for step in range(sched.T - 1, -1, -1):
        noise = torch.randn(shape, generator=rng, dtype=dtype) if step > 0 else torch.zeros(shape, dtype=dtype)
        t = torch.full((n,), step, dtype=torch.long)
        x0_hat = torch.cat([model(x[i:i + chunk], t[i:i + chunk]) for i in range(0, n, chunk)])
        x = reverse_step(x0_hat, x, t, noise, sched)
    return x.clamp(-1.0, 1.0)


def _model_dtype(model) -> torch.dtype:
    params = getattr(model, "parameters", None)
    if params is not None:
        for p in params():
            return p.dtype
    return torch.get_default_dtype()
