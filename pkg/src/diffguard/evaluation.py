"""Evaluation protocols: protection success rate, identification rate, recovery metrics, diversity."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

from .backends import METRICS, IdentityEmbedding, embedding_distance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Recognizer:
    """Decision rule of a face recognizer: distance metric and threshold."""

    name: str
    metric: str
    threshold: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


# FaceNet thresholds are squared L2 distances on unit vectors.
FACENET = Recognizer("facenet", "squared_euclidean", 1.1)
ARCFACE = Recognizer("arcface", "cosine_distance", 0.8)
RECOGNIZERS = {r.name: r for r in (FACENET, ARCFACE)}


def _rule(embedder) -> Recognizer:
    if isinstance(embedder, str):
        return RECOGNIZERS[embedder]
    if isinstance(embedder, Recognizer):
        return embedder
    return Recognizer(getattr(embedder, "embedder_id", "embedder"), embedder.metric, embedder.threshold)


def _check_ids(embs: Iterable[IdentityEmbedding]) -> None:
    ids = {e.embedder_id for e in embs}
    if len(ids) > 1:
        raise ValueError(f"embeddings come from different embedders: {sorted(ids)}")


def protection_success_rate(pairs: Sequence[tuple[IdentityEmbedding, IdentityEmbedding]], embedder) -> float:
    """Fraction of (original, protected) pairs whose distance exceeds the recognizer threshold.

    ``embedder`` is an :class:`IdentityEmbedder`, a :class:`Recognizer` or
    one of the preset names ``"facenet"`` / ``"arcface"``.
    """
    if not pairs:
        raise ValueError("protection_success_rate needs at least one pair")
    rule = _rule(embedder)
    _check_ids(e for pair in pairs for e in pair)
    hits = sum(embedding_distance(r.vector, c.vector, rule.metric) > rule.threshold for r, c in pairs)
    return hits / len(pairs)


@dataclass
class VerificationSet:
    """Probe queries, per-probe same-identity gallery and a shared different-identity gallery."""

    probe: list[IdentityEmbedding]
    same_set: list[list[IdentityEmbedding]]
    diff_set: list[IdentityEmbedding]

    def __post_init__(self):
        if not self.probe:
            raise ValueError("verification set has no probes")
        _check_ids([*self.probe, *self.diff_set, *(e for s in self.same_set for e in s)])


def _sims(query: np.ndarray, gallery: list[IdentityEmbedding]) -> np.ndarray:
    if not gallery:
        return np.empty(0)
    g = np.stack([e.vector for e in gallery])
    return g @ query / (np.linalg.norm(g, axis=1) * np.linalg.norm(query))


def identification_rate(vs: VerificationSet) -> float:
    """Fraction of probes for which every same-identity image beats every different-identity image.

    Ties count as failures.
    """
    if len(vs.same_set) != len(vs.probe):
        raise ValueError(f"{len(vs.probe)} probes but {len(vs.same_set)} same-identity lists")
    correct = 0
    for i, (q, same) in enumerate(zip(vs.probe, vs.same_set)):
        if not same:
            raise ValueError(f"probe {i} has no same-identity images")
        s_same = _sims(q.vector, same)
        s_diff = _sims(q.vector, vs.diff_set)
        if s_diff.size == 0 or s_same.min() > s_diff.max():
            correct += 1
    return correct / len(vs.probe)


@dataclass
class RecoveryMetrics:
    mse: float
    psnr: float
    ssim: float


def gaussian_window(size: int = 11, sigma: float = 1.5, ndim: int = 2) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    w = g
    for _ in range(ndim - 1):
        w = np.multiply.outer(w, g)
    return w


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM of two single-channel arrays (1-D or 2-D) with an 11-tap Gaussian window, sigma 1.5."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if min(a.shape) < 11:
        raise ValueError(f"SSIM needs every side >= 11, got {a.shape}")
    w = gaussian_window(11, 1.5, a.ndim)

    def filt(x):
        return signal.correlate(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def recovery_metrics(original, recovered, channel_axis: int | None = -1) -> RecoveryMetrics:
    """MSE, PSNR (peak 1, MSE floored at 1e-10) and SSIM between images in [0, 1].

    ``channel_axis`` marks the colour axis of 3-D inputs; SSIM is averaged
    over channels. 1-D and 2-D inputs are treated as single-channel.
    """
    x = np.asarray(original, dtype=np.float64)
    y = np.asarray(recovered, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    psnr = float(10.0 * np.log10(1.0 / max(mse, 1e-10)))
    if x.ndim == 3 and channel_axis is not None:
        xs, ys = np.moveaxis(x, channel_axis, 0), np.moveaxis(y, channel_axis, 0)
        s = float(np.mean([ssim(a, b) for a, b in zip(xs, ys)]))
    else:
        s = ssim(x, y)
    return RecoveryMetrics(mse, psnr, s)


def diversity_dispersion(groups: Sequence[Sequence[IdentityEmbedding]]) -> float:
    """Mean pairwise cosine distance inside each group, averaged over groups."""
    if sum(len(g) for g in groups) < 2:
        raise ValueError("diversity needs at least two embeddings")
    scores = []
    for k, group in enumerate(groups):
        if len(group) < 2:
            logger.warning("skipping group %d with %d embedding(s)", k, len(group))
            continue
        _check_ids(group)
        v = np.stack([e.vector for e in group])
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        sims = v @ v.T
        iu = np.triu_indices(len(group), 1)
        scores.append(float(np.mean(1.0 - sims[iu])))
    if not scores:
        raise ValueError("every group is a singleton")
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Reports


def format_report(title: str, rows: list[dict]) -> str:
    """Fixed-width text table over the union of row keys."""
    if not rows:
        return f"{title}\n(no rows)"
    cols = list(dict.fromkeys(k for r in rows for k in r))

    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    widths = {c: max(len(c), *(len(cell(r.get(c, ""))) for r in rows)) for c in cols}
    line = "  ".join(c.ljust(widths[c]) for c in cols)
    out = [title, line, "-" * len(line)]
    out += ["  ".join(cell(r.get(c, "")).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join(out)


def to_records(rows: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def metrics_row(name: str, m: RecoveryMetrics) -> dict:
    return {"method": name, **asdict(m)}
