"""Energy-guided DDIM sampling with identity losses.

Each guided step predicts the noise, forms the clean-latent estimate,
decodes it, scores the decoded images with an identity energy and subtracts
``lambda_t`` times the energy gradient taken with respect to the clean-latent
estimate from the plain DDIM update.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .backends import Backends, IdentityEmbedding
from .msi import ConditionalEmbeddingSet
from .schedule import LatentCode, ddim_step, estimate_clean
from .strategy import ScheduleStrategy, select_embedding

logger = logging.getLogger(__name__)

ENERGY_KINDS = ("anonymize", "hide")
PAIRS_MODES = ("as_written", "unordered")


class GuidanceError(RuntimeError):
    """Non-finite energy or gradient; ``trail`` holds the reports up to the failure."""

    def __init__(self, message: str, trail: list["EnergyReport"] | None = None):
        super().__init__(message)
        self.trail = list(trail or [])


@dataclass
class EnergyReport:
    step: int
    energy_value: float
    terms: dict = field(default_factory=dict)
    gradient_norm: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class GuidanceConfig:
    """``lambda_t`` is a constant, a per-step table (sequence or mapping), or a callable."""

    lambda_t: float | Sequence[float] | Mapping[int, float] | Callable[[int], float] = 1.0
    energy_kind: str = "anonymize"
    group_count: int = 4
    idis_weight: float = 1.0
    div_weight: float = 1.0
    pairs_mode: str = "as_written"
    energy_fn: Callable[[torch.Tensor], torch.Tensor] | None = None

    def __post_init__(self):
        if self.energy_kind not in ENERGY_KINDS:
            raise ValueError(f"energy_kind must be one of {ENERGY_KINDS}")
        if self.energy_kind == "anonymize" and self.group_count < 2:
            raise ValueError("anonymization needs group_count >= 2")
        if self.pairs_mode not in PAIRS_MODES:
            raise ValueError(f"pairs_mode must be one of {PAIRS_MODES}")
        if isinstance(self.lambda_t, (int, float)) and self.lambda_t < 0:
            raise ValueError("lambda_t must be >= 0")

    def lam(self, t: int) -> float:
        lt = self.lambda_t
        if callable(lt):
            v = float(lt(t))
        elif isinstance(lt, Mapping):
            v = float(lt[t])
        elif isinstance(lt, (int, float)):
            v = float(lt)
        else:
            v = float(lt[t])
        if v < 0:
            raise ValueError(f"lambda_t({t}) = {v} is negative")
        return v


# --------------------------------------------------------------------------
# Losses on feature tensors (differentiable)


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def diversity_index_pairs(n: int, pairs_mode: str = "as_written") -> list[tuple[int, int]]:
    """Ordered index pairs of the diversity sum (0-based).

    ``as_written``: i over all candidates, j from the second candidate on,
    j != i; nine terms for four candidates. ``unordered``: each pair once.
    """
    if pairs_mode == "as_written":
        return [(i, j) for i in range(n) for j in range(1, n) if j != i]
    if pairs_mode == "unordered":
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    raise ValueError(f"unknown pairs_mode {pairs_mode!r}")


def idis_energy(ref: torch.Tensor, cands: torch.Tensor) -> torch.Tensor:
    return _cos(ref.unsqueeze(0), cands).clamp_min(0).sum()


def div_energy(cands: torch.Tensor, pairs_mode: str = "as_written") -> torch.Tensor:
    pairs = diversity_index_pairs(cands.shape[0], pairs_mode)
    i, j = map(list, zip(*pairs))
    return _cos(cands[i], cands[j]).clamp_min(0).sum()


def is_energy(ref: torch.Tensor, cands: torch.Tensor) -> torch.Tensor:
    return (1.0 - _cos(ref.unsqueeze(0), cands)).sum()


# --------------------------------------------------------------------------
# Losses on IdentityEmbedding values


def _same_embedder(*embs: IdentityEmbedding) -> None:
    ids = {e.embedder_id for e in embs}
    if len(ids) > 1:
        raise ValueError(f"embeddings come from different embedders: {sorted(ids)}")


def _stack(embs) -> torch.Tensor:
    return torch.as_tensor(np.stack([e.vector for e in embs]), dtype=torch.float64)


def identity_dissimilarity_loss(ref: IdentityEmbedding, cands: list[IdentityEmbedding], group_count: int = 4) -> float:
    """Sum over candidates of ``max(cos(ref, cand), 0)``."""
    if len(cands) != group_count:
        raise ValueError(f"expected {group_count} candidates, got {len(cands)}")
    _same_embedder(ref, *cands)
    return float(idis_energy(_stack([ref])[0], _stack(cands)))


def diversity_loss(cands: list[IdentityEmbedding], pairs_mode: str = "as_written", group_count: int = 4) -> float:
    """Clipped cosine similarities summed over the diversity index pairs."""
    if len(cands) != group_count:
        raise ValueError(f"expected {group_count} candidates, got {len(cands)}")
    _same_embedder(*cands)
    return float(div_energy(_stack(cands), pairs_mode))


def identity_similarity_loss(ref: IdentityEmbedding, cand: IdentityEmbedding) -> float:
    """``1 - cos(ref, cand)``."""
    _same_embedder(ref, cand)
    return float(is_energy(_stack([ref])[0], _stack([cand])))


# --------------------------------------------------------------------------
# Guided sampling


def energy_terms(
    images: torch.Tensor, ref_feat: torch.Tensor, cfg: GuidanceConfig, backends: Backends
) -> tuple[torch.Tensor, dict]:
    """Energy of a batch of decoded clean-image estimates against the reference identity."""
    if cfg.energy_fn is not None:
        e = cfg.energy_fn(images)
        return e, {"custom": float(e.detach())}
    if backends.align is not None:
        images = backends.align(images)
    feats = backends.embedder.features(images)
    ref = ref_feat.to(feats.dtype)
    if cfg.energy_kind == "hide":
        e = is_energy(ref, feats)
        return e, {"is": float(e.detach())}
    idis = idis_energy(ref, feats)
    terms = {"idis": float(idis.detach())}
    total = cfg.idis_weight * idis
    if cfg.div_weight and feats.shape[0] > 1:
        div = div_energy(feats, cfg.pairs_mode)
        terms["div"] = float(div.detach())
        total = total + cfg.div_weight * div
    return total, terms


def energy_and_grad(
    z0_hat: torch.Tensor, ref_feat: torch.Tensor, cfg: GuidanceConfig, backends: Backends
) -> tuple[float, dict, torch.Tensor]:
    """Energy at ``z0_hat`` and its gradient with respect to ``z0_hat`` (through the decoder)."""
    z = z0_hat.detach().requires_grad_(True)
    with torch.enable_grad():
        images = backends.codec.decode(z)
        if cfg.energy_fn is None and images.dim() == len(backends.image_shape):
            images = images.unsqueeze(0)
        e, terms = energy_terms(images, ref_feat, cfg, backends)
        (grad,) = torch.autograd.grad(e, z)
    return float(e.detach()), terms, grad


def guided_step(
    z_t: LatentCode,
    t: int,
    t_prev: int,
    key_e: ConditionalEmbeddingSet,
    strategy: ScheduleStrategy,
    cfg: GuidanceConfig,
    backends: Backends,
    ref_feat: torch.Tensor,
) -> tuple[LatentCode, EnergyReport]:
    """One DDIM step from ``t`` to ``t_prev`` with the energy-gradient correction.

    ``ref_feat`` is the reference identity feature vector, computed once per run.
    With ``lambda_t == 0`` the latent equals the plain DDIM step exactly.
    """
    sched = backends.sched
    context = select_embedding(t, strategy, key_e).tokens
    with torch.no_grad():
        eps = backends.predictor.predict(z_t, t, context)
    z_prev = ddim_step(z_t, t, t_prev, eps, sched)
    z0_hat = estimate_clean(z_t, t, eps, sched)
    energy, terms, grad = energy_and_grad(z0_hat.values, ref_feat, cfg, backends)
    report = EnergyReport(t, energy, terms, float(grad.norm()))
    if not (math.isfinite(energy) and torch.isfinite(grad).all()):
        raise GuidanceError(f"non-finite energy or gradient at step {t}", [report])
    lam = cfg.lam(t)
    if lam == 0.0:
        return z_prev, report
    return LatentCode(z_prev.values - lam * grad, z_prev.step), report


# --------------------------------------------------------------------------
# Lambda calibration


@dataclass
class CalibrationResult:
    lam: float
    cosine: float
    converged: bool
    history: list[tuple[float, float]]
    diagnostic: str = ""


def calibrate_lambda(
    measure: Callable[[float], float],
    target_cos: float = 0.95,
    band: float = 0.02,
    lam_init: float = 1.0,
    lam_max: float = 1e6,
    max_evals: int = 30,
) -> CalibrationResult:
    """Bisect on lambda until ``measure(lambda)`` (mean cosine) lands within ``band`` of the target.

    ``measure`` may raise :class:`GuidanceError` or return a non-finite value;
    such lambdas count as too large. When the band cannot be reached the best
    lambda seen is returned with ``converged=False`` and a diagnostic.
    """
    history: list[tuple[float, float]] = []

    def probe(lam):
        try:
            c = float(measure(lam))
        except GuidanceError:
            c = math.nan
        history.append((lam, c))
        return c

    def best(converged, diagnostic=""):
        valid = [(lam, c) for lam, c in history if math.isfinite(c)]
        lam, c = min(valid, key=lambda lc: (abs(lc[1] - target_cos), lc[0]))
        if diagnostic:
            logger.warning("lambda calibration: %s (best lambda=%g, cosine=%.4f)", diagnostic, lam, c)
        return CalibrationResult(lam, c, converged, history, diagnostic)

    c0 = probe(0.0)
    if not math.isfinite(c0):
        raise GuidanceError("unguided run is already non-finite")
    if abs(c0 - target_cos) <= band:
        return best(True)
    if c0 > target_cos + band:
        return best(False, "unguided cosine already above target; guidance cannot lower it")

    lo, c_lo = 0.0, c0
    hi, c_hi = lam_init, probe(lam_init)
    while math.isfinite(c_hi) and c_hi < target_cos - band and hi < lam_max and len(history) < max_evals:
        if c_hi < c_lo:
            return best(False, "non-monotone cosine response while expanding the bracket")
        lo, c_lo = hi, c_hi
        hi *= 4.0
        c_hi = probe(hi)
    if math.isfinite(c_hi) and abs(c_hi - target_cos) <= band:
        return best(True)
    if math.isfinite(c_hi) and c_hi < target_cos - band:
        return best(False, f"target not reached up to lambda={hi:g}")

    while len(history) < max_evals:
        mid = 0.5 * (lo + hi)
        c = probe(mid)
        if not math.isfinite(c):
            hi = mid
            continue
        if abs(c - target_cos) <= band:
            return best(True)
        if c < c_lo:
            return best(False, "non-monotone cosine response inside the bracket")
        if c < target_cos:
            lo, c_lo = mid, c
        else:
            hi = mid
    return best(False, "evaluation budget exhausted")
