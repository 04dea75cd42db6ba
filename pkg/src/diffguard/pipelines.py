"""End-to-end procedures: anonymize, hide identity, key-I generation, recovery."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
import torch

from .backends import Backends
from .guidance import (
    CalibrationResult,
    EnergyReport,
    GuidanceConfig,
    GuidanceError,
    calibrate_lambda,
    guided_step,
)
from .keyfile import KIND_KEY_E, KIND_KEY_I, KeyContainer, KeyFormatError, image_fingerprint
from .msi import ConditionalEmbeddingSet, StageEmbedding
from .schedule import CLEAN, LatentCode, ddim_invert_step, ddim_step, forward_noise
from .strategy import TAU_ANONYMIZE, TAU_HIDE, ScheduleStrategy

logger = logging.getLogger(__name__)

MODES = ("anonymize", "hide")
MODE_DEFAULTS = {
    "anonymize": {"s_ns": 0.6, "tau": TAU_ANONYMIZE, "lam": 1.0, "groups": 4},
    "hide": {"s_ns": 0.8, "tau": TAU_HIDE, "lam": None, "groups": 1},
}


class KeyBindingError(ValueError):
    """key-E, key-I and backends do not belong together."""


class InversionError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite latent during DDIM inversion at step {step}")
        self.step = step


@dataclass
class RunConfig:
    """Protection run settings; ``None`` fields take the mode defaults.

    ``lam=None`` in hide mode calibrates lambda on the input image so the
    output's identity cosine lands near ``target_cos``.
    """

    mode: str = "anonymize"
    s_ns: float | None = None
    tau: float | None = None
    lam: float | None = None
    seed: int = 0
    stride: int = 20
    groups: int | None = None
    branch: int = 0
    idis_weight: float = 1.0
    div_weight: float = 1.0
    pairs_mode: str = "as_written"
    target_cos: float = 0.95
    force: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        defaults = MODE_DEFAULTS[self.mode]
        for name in ("s_ns", "tau", "groups"):
            if getattr(self, name) is None:
                setattr(self, name, defaults[name])
        if self.lam is None and self.mode == "anonymize":
            self.lam = defaults["lam"]
        if not 0.0 < self.s_ns <= 1.0:
            raise ValueError(f"s_ns must lie in (0, 1], got {self.s_ns}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 <= self.branch < self.groups:
            raise ValueError(f"branch {self.branch} outside [0, {self.groups})")


@dataclass
class NoiseKey:
    """key-I: the DDIM-inverted terminal latent of the original image."""

    z_T: LatentCode
    T: int
    stride: int
    model_id: str
    image_fingerprint: str
    created_for: str = "anonymize"
    meta: dict = field(default_factory=dict)


@dataclass
class ProtectionResult:
    images: torch.Tensor
    key: NoiseKey
    trail: list[EnergyReport]
    start_step: int
    lam: float
    branch: int = 0
    calibration: CalibrationResult | None = None

    @property
    def image(self) -> torch.Tensor:
        return self.images[self.branch]


def noise_depth(s_ns: float, T: int) -> int:
    """Start step ``floor(s_ns*T)``, clamped to the last valid step."""
    return min(math.floor(Fraction(str(s_ns)) * T), T - 1)


def denoise_path(t_start: int, grid: list[int]) -> list[int]:
    """``t_start``, then every grid step below it, then ``CLEAN``."""
    return [t_start] + [g for g in reversed(grid) if g < t_start] + [CLEAN]


def _check_models(key_model_id: str, backends: Backends) -> None:
    if key_model_id != backends.model_id:
        raise KeyBindingError(f"key was made with backend {key_model_id!r}, got {backends.model_id!r}")


def check_binding(key_i: NoiseKey, key_e: ConditionalEmbeddingSet, backends: Backends | None = None) -> None:
    """Refuse mismatched key pairs from metadata alone."""
    if key_i.model_id != key_e.model_id:
        raise KeyBindingError(f"key-I model {key_i.model_id!r} != key-E model {key_e.model_id!r}")
    if key_i.image_fingerprint != key_e.image_fingerprint:
        raise KeyBindingError("key-I and key-E were made for different images")
    if backends is not None:
        _check_models(key_e.model_id, backends)


def make_key_i(
    z0: LatentCode,
    key_e: ConditionalEmbeddingSet,
    backends: Backends,
    stride: int = 20,
    created_for: str = "anonymize",
) -> NoiseKey:
    """DDIM-invert the clean latent to the last grid step, conditioning on the stage embedding of each step."""
    if z0.step != 0:
        raise ValueError("make_key_i expects a clean latent")
    sched = backends.sched
    z, prev = z0, CLEAN
    with torch.no_grad():
        for t in sched.timesteps(stride):
            t_eval = max(prev, 0)
            eps = backends.predictor.predict(z, t_eval, key_e.for_step(t_eval, sched.T).tokens)
            try:
                z = ddim_invert_step(z, prev, t, eps, sched)
            except ValueError as exc:
                raise InversionError(t) from exc
            prev = t
    return NoiseKey(z, sched.T, stride, key_e.model_id, key_e.image_fingerprint, created_for)


def recover_latent(key_i: NoiseKey, key_e: ConditionalEmbeddingSet, backends: Backends) -> LatentCode:
    check_binding(key_i, key_e, backends)
    sched = backends.sched
    grid = sched.timesteps(key_i.stride)
    if key_i.T != sched.T or grid[-1] != key_i.z_T.step:
        raise KeyBindingError(f"key-I ends at step {key_i.z_T.step}, backend grid ends at {grid[-1]}")
    path = denoise_path(grid[-1], grid)
    z = key_i.z_T
    with torch.no_grad():
        for t, t_prev in zip(path[:-1], path[1:]):
            eps = backends.predictor.predict(z, t, key_e.for_step(t, sched.T).tokens)
            z = ddim_step(z, t, t_prev, eps, sched)
    return z


def recover(key_i: NoiseKey, key_e: ConditionalEmbeddingSet, backends: Backends) -> torch.Tensor:
    """Sample from key-I with key-E's stage embeddings at every step and decode."""
    z = recover_latent(key_i, key_e, backends)
    with torch.no_grad():
        return backends.codec.decode(z).clamp(0.0, 1.0)


def reference_features(image: torch.Tensor, backends: Backends) -> torch.Tensor:
    with torch.no_grad():
        x = image.unsqueeze(0)
        if backends.align is not None:
            x = backends.align(x)
        return backends.embedder.features(x)[0]


def identity_cosine(image: torch.Tensor, outputs: torch.Tensor, backends: Backends) -> torch.Tensor:
    """Cosine between the reference image's identity and each output image's."""
    ref = reference_features(image, backends)
    with torch.no_grad():
        x = outputs.reshape(-1, *backends.image_shape)
        if backends.align is not None:
            x = backends.align(x)
        feats = backends.embedder.features(x)
    return feats @ ref.to(feats.dtype)


def _check_key_e(key_e: ConditionalEmbeddingSet, image: torch.Tensor, backends: Backends, force: bool) -> None:
    _check_models(key_e.model_id, backends)
    if key_e.image_fingerprint != image_fingerprint(image) and not force:
        raise KeyBindingError("key-E was trained on a different image (pass force=True to override)")


def _protect(image, key_e, cfg: RunConfig, backends: Backends, lam: float) -> ProtectionResult:
    sched = backends.sched
    z0 = backends.codec.encode(image)
    t_start = noise_depth(cfg.s_ns, sched.T)
    g = torch.Generator().manual_seed(cfg.seed)
    groups = cfg.groups
    eps = torch.randn((groups, *z0.shape), generator=g, dtype=torch.float64).to(z0.values.dtype)
    z = forward_noise(LatentCode(z0.values.expand(groups, *z0.shape).clone(), 0), t_start, eps, sched)
    strategy = ScheduleStrategy(cfg.tau, sched.T, StageEmbedding(backends.predictor.null_context(), None))
    gcfg = GuidanceConfig(
        lambda_t=lam,
        energy_kind=cfg.mode,
        group_count=max(groups, 2) if cfg.mode == "anonymize" else groups,
        idis_weight=cfg.idis_weight,
        div_weight=cfg.div_weight,
        pairs_mode=cfg.pairs_mode,
    )
    ref = reference_features(image, backends)
    trail: list[EnergyReport] = []
    path = denoise_path(t_start, sched.timesteps(cfg.stride))
    for t, t_prev in zip(path[:-1], path[1:]):
        try:
            z, report = guided_step(z, t, t_prev, key_e, strategy, gcfg, backends, ref)
        except GuidanceError as exc:
            exc.trail = trail + exc.trail
            raise
        trail.append(report)
    with torch.no_grad():
        images = backends.codec.decode(z).clamp(0.0, 1.0)
    key = make_key_i(z0, key_e, backends, cfg.stride, cfg.mode)
    key.meta.update({"tau": cfg.tau, "s_ns": cfg.s_ns, "seed": cfg.seed, "lambda": lam})
    return ProtectionResult(images, key, trail, t_start, lam, min(cfg.branch, groups - 1))


def anonymize(
    image: torch.Tensor, key_e: ConditionalEmbeddingSet, cfg: RunConfig | None, backends: Backends
) -> ProtectionResult:
    """Noise the image latent with four independent draws and denoise them under identity guidance.

    The energy pushes each branch's identity away from the original and the
    branches away from one another. key-I is the DDIM inversion of the
    original latent, computed independently of the guided trajectory.
    """
    cfg = cfg or RunConfig("anonymize")
    if cfg.mode != "anonymize":
        raise ValueError(f"anonymize got a {cfg.mode!r} run config")
    image = image.to(backends.dtype)
    _check_key_e(key_e, image, backends, cfg.force)
    return _protect(image, key_e, cfg, backends, cfg.lam)


def hide_identity(
    image: torch.Tensor, key_e: ConditionalEmbeddingSet, cfg: RunConfig | None, backends: Backends
) -> ProtectionResult:
    """Regenerate the face from deeper noise while keeping it machine-recognizable."""
    cfg = cfg or RunConfig("hide")
    if cfg.mode != "hide":
        raise ValueError(f"hide_identity got a {cfg.mode!r} run config")
    image = image.to(backends.dtype)
    _check_key_e(key_e, image, backends, cfg.force)
    calibration = None
    lam = cfg.lam
    if lam is None:
        calibration = calibrate_hide_lambda(cfg, backends, [(image, key_e)], cfg.target_cos)
        lam = calibration.lam
    result = _protect(image, key_e, cfg, backends, lam)
    result.calibration = calibration
    return result


def calibrate_hide_lambda(
    cfg: RunConfig,
    backends: Backends,
    probes: list[tuple[torch.Tensor, ConditionalEmbeddingSet]],
    target_cos: float = 0.95,
    **kwargs,
) -> CalibrationResult:
    """Pick the hide-mode lambda whose mean output cosine over ``probes`` is near ``target_cos``."""
    if not probes:
        raise ValueError("calibration needs at least one probe image")
    base = replace(cfg, mode="hide", lam=0.0, force=True)

    def measure(lam: float) -> float:
        cosines = []
        for image, key_e in probes:
            image = image.to(backends.dtype)
            res = _protect(image, key_e, replace(base, lam=lam), backends, lam)
            cosines.append(float(identity_cosine(image, res.images, backends).mean()))
        return float(np.mean(cosines))

    return calibrate_lambda(measure, target_cos, **kwargs)


# --------------------------------------------------------------------------
# Key files


def key_e_to_container(key_e: ConditionalEmbeddingSet) -> KeyContainer:
    meta = dict(key_e.meta)
    meta.update({"model_id": key_e.model_id, "image_fingerprint": key_e.image_fingerprint})
    return KeyContainer(KIND_KEY_E, meta, [key_e.stages.detach().cpu().numpy()])


def key_e_from_container(c: KeyContainer, dtype=torch.float32) -> ConditionalEmbeddingSet:
    if c.kind != KIND_KEY_E or len(c.arrays) != 1:
        raise KeyFormatError("not a key-E container")
    meta = dict(c.meta)
    model_id, fp = meta.pop("model_id"), meta.pop("image_fingerprint")
    return ConditionalEmbeddingSet(torch.from_numpy(c.arrays[0]).to(dtype), fp, model_id, meta)


def key_i_to_container(key: NoiseKey) -> KeyContainer:
    meta = dict(key.meta)
    meta.update(
        {
            "model_id": key.model_id,
            "image_fingerprint": key.image_fingerprint,
            "T": key.T,
            "stride": key.stride,
            "step": key.z_T.step,
            "created_for": key.created_for,
        }
    )
    return KeyContainer(KIND_KEY_I, meta, [key.z_T.values.detach().cpu().numpy()])


def key_i_from_container(c: KeyContainer, dtype=torch.float32) -> NoiseKey:
    if c.kind != KIND_KEY_I or len(c.arrays) != 1:
        raise KeyFormatError("not a key-I container")
    meta = dict(c.meta)
    try:
        z = LatentCode(torch.from_numpy(c.arrays[0]).to(dtype), int(meta.pop("step")))
        return NoiseKey(
            z,
            int(meta.pop("T")),
            int(meta.pop("stride")),
            meta.pop("model_id"),
            meta.pop("image_fingerprint"),
            meta.pop("created_for"),
            meta,
        )
    except KeyError as exc:
        raise KeyFormatError(f"key-I metadata lacks {exc}") from exc
