"""Diffusion arithmetic: noise schedules, closed-form noising, DDIM steps.

Steps are 0-based: ``alpha_bar[t]`` for ``t in 0..T-1``. The index ``CLEAN = -1``
is a virtual step with ``alpha_bar = 1`` (clean data), so a DDIM step that
targets ``CLEAN`` lands exactly on the clean-latent estimate.

Schedule tables are float64; latent tensors keep whatever dtype they arrive
in. Every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

CLEAN = -1


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


class StepOrderError(ValueError):
    """Step indices out of order or out of range."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def abar(self, t: int) -> float:
        """Cumulative alpha at step ``t`` as a Python float; ``CLEAN`` gives 1."""
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.T:
            raise StepOrderError(f"step {t} outside [0, {self.T})")
        return float(self.alpha_bar[t])

    def timesteps(self, stride: int = 20) -> list[int]:
        """Ascending strided sub-sequence ``0, stride, 2*stride, ... < T``."""
        if stride < 1:
            raise ScheduleError(f"stride must be >= 1, got {stride}")
        return list(range(0, self.T, stride))


@dataclass
class LatentCode:
    """Latent array plus the step it lives at.

    ``values`` may carry leading batch dimensions. Clean latents carry
    ``step == 0``.
    """

    values: torch.Tensor
    step: int = 0

    def __post_init__(self):
        if self.step < 0:
            raise ValueError(f"latent step annotation must be >= 0, got {self.step}")
        if not torch.isfinite(self.values).all():
            raise ValueError("latent contains non-finite entries")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


def build_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    """Build a beta schedule and its cumulative products.

    ``kind="scaled_linear"`` interpolates linearly in sqrt(beta), the
    Stable Diffusion convention. ``T=1`` allows a single beta with
    ``beta_start == beta_end``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start < 1.0:
        raise ScheduleError(f"beta_start must lie in (0, 1), got {beta_start}")
    if not 0.0 < beta_end < 1.0:
        raise ScheduleError(f"beta_end must lie in (0, 1), got {beta_end}")
    if T == 1:
        if beta_start != beta_end:
            raise ScheduleError("T=1 takes a single beta: beta_start must equal beta_end")
        betas = np.array([beta_start], dtype=np.float64)
    else:
        if not beta_start < beta_end:
            raise ScheduleError(
                f"beta_start ({beta_start}) must be < beta_end ({beta_end}) for a strictly increasing schedule"
            )
        if kind == "linear":
            betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        elif kind == "scaled_linear":
            betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
        else:
            raise ScheduleError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.empty(T, dtype=np.float64)
    acc = 1.0
    for i, b in enumerate(betas):
        acc = acc * (1.0 - float(b))
        alpha_bar[i] = acc
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


def _check_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} shape {tuple(b.shape)} does not match latent shape {tuple(a.shape)}")


def forward_noise(z0: LatentCode, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> LatentCode:
    """Sample ``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`` in one shot."""
    if z0.step != 0:
        raise ValueError(f"forward_noise expects a clean latent (step 0), got step {z0.step}")
    _check_shape(z0.values, eps, "eps")
    a = sched.abar(t)
    return LatentCode(math.sqrt(a) * z0.values + math.sqrt(1.0 - a) * eps, max(t, 0))


def estimate_clean(z_t: LatentCode, t: int, eps_pred: torch.Tensor, sched: NoiseSchedule) -> LatentCode:
    """One-shot clean-latent estimate from a noisy latent and predicted noise."""
    _check_shape(z_t.values, eps_pred, "eps_pred")
    a = sched.abar(t)
    return LatentCode(z_t.values / math.sqrt(a) - math.sqrt(1.0 - a) * eps_pred / math.sqrt(a), 0)


def _transfer(z: torch.Tensor, a_from: float, a_to: float, eps: torch.Tensor) -> torch.Tensor:
    # shared by sampling and inversion: clean estimate at a_from, re-noised to a_to with the same eps
    z0_hat = (z - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    return math.sqrt(a_to) * z0_hat + math.sqrt(1.0 - a_to) * eps


def ddim_step(
    z_t: LatentCode, t: int, t_prev: int, eps_pred: torch.Tensor, sched: NoiseSchedule
) -> LatentCode:
    """Deterministic DDIM update from step ``t`` down to ``t_prev``.

    ``t_prev`` may be ``CLEAN`` to finish on the clean-latent estimate.
    """
    if not t_prev < t:
        raise StepOrderError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    if not CLEAN <= t_prev or not t < sched.T:
        raise StepOrderError(f"steps ({t}, {t_prev}) outside [{CLEAN}, {sched.T})")
    _check_shape(z_t.values, eps_pred, "eps_pred")
    out = _transfer(z_t.values, sched.abar(t), sched.abar(t_prev), eps_pred)
    return LatentCode(out, max(t_prev, 0))


def ddim_invert_step(
    z_t: LatentCode, t: int, t_next: int, eps_pred: torch.Tensor, sched: NoiseSchedule
) -> LatentCode:
    """DDIM inversion from step ``t`` up to ``t_next`` (``t`` may be ``CLEAN``)."""
    if not t < t_next:
        raise StepOrderError(f"ddim_invert_step needs t < t_next, got t={t}, t_next={t_next}")
    if not CLEAN <= t or not t_next < sched.T:
        raise StepOrderError(f"steps ({t}, {t_next}) outside [{CLEAN}, {sched.T})")
    _check_shape(z_t.values, eps_pred, "eps_pred")
    out = _transfer(z_t.values, sched.abar(t), sched.abar(t_next), eps_pred)
    return LatentCode(out, t_next)
