"""Multi-scale image inversion: learn the staged conditional embeddings (key-E).

A frozen feature encoder gives five feature levels. Each level is projected
to a 768-d vector, multiplied point-wise by the time embedding of the stages
it owns (deep levels own late stages), mixed by self-attention and mapped by
a head to one embedding per stage. Only this module is trained; the noise
predictor and encoders stay frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backends import CONTEXT_DIM, N_LEVELS, Backends, FeaturePyramid, timestep_embedding
from .keyfile import image_fingerprint
from .schedule import LatentCode, forward_noise

logger = logging.getLogger(__name__)

N_STAGES = 10


class EmbeddingTrainingError(RuntimeError):
    def __init__(self, step: int, t: int, loss: float):
        super().__init__(f"non-finite loss {loss} at training step {step} (t={t})")
        self.step, self.t, self.loss = step, t, loss


def stage_of(t: int, T: int = 1000, N: int = N_STAGES) -> int:
    """Stage index of step ``t``: ``floor(t*N/T)``, i.e. ``t // 100`` for T=1000, N=10."""
    if T % N:
        raise ValueError(f"T={T} is not divisible by the stage count N={N}")
    if not 0 <= t < T:
        raise ValueError(f"step {t} outside [0, {T})")
    return min(t * N // T, N - 1)


@dataclass
class StageEmbedding:
    tokens: torch.Tensor
    stage_index: int | None  # None marks the unconditional embedding

    def __post_init__(self):
        if self.stage_index is not None and not 0 <= self.stage_index < N_STAGES:
            raise ValueError(f"stage index {self.stage_index} outside [0, {N_STAGES})")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("stage embedding has non-finite entries")


@dataclass
class ConditionalEmbeddingSet:
    """key-E: one ``(tokens, 768)`` embedding per diffusion stage."""

    stages: torch.Tensor
    image_fingerprint: str
    model_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stages.dim() != 3 or self.stages.shape[0] != N_STAGES:
            raise ValueError(f"expected ({N_STAGES}, tokens, dim) stages, got {tuple(self.stages.shape)}")
        if not torch.isfinite(self.stages).all():
            raise ValueError("key-E has non-finite entries")

    @property
    def dim(self) -> int:
        return self.stages.shape[-1]

    def stage(self, i: int) -> StageEmbedding:
        return StageEmbedding(self.stages[i], i)

    def for_step(self, t: int, T: int) -> StageEmbedding:
        return self.stage(stage_of(t, T, N_STAGES))


class MsiModule(nn.Module):
    """Trainable state of the inversion module.

    ``text_head`` replaces the default trainable head (layer norm + MLP);
    pass ``freeze_head=True`` to keep a supplied head fixed during training.
    """

    def __init__(
        self,
        level_dims: list[int],
        T: int = 1000,
        tokens: int = 1,
        dim: int = CONTEXT_DIM,
        heads: int = 8,
        dropout: float = 0.05,
        text_head: nn.Module | None = None,
        freeze_head: bool = False,
    ):
        super().__init__()
        if len(level_dims) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} level dims, got {len(level_dims)}")
        self.T, self.tokens, self.dim, self.dropout = T, tokens, dim, dropout
        self.proj = nn.ModuleList(nn.Linear(d, dim) for d in level_dims)
        self.time = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.head = text_head or nn.Sequential(
            nn.LayerNorm(dim), nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, tokens * dim)
        )
        self.freeze_head = freeze_head and text_head is not None
        centers = (torch.arange(N_STAGES, dtype=torch.float64) + 0.5) * T / N_STAGES
        self.register_buffer("stage_times", timestep_embedding(centers, dim).float())
        # level j feeds stages {2j, 2j+1}
        self.register_buffer("stage_level", torch.arange(N_STAGES) * N_LEVELS // N_STAGES)

    def trainable_parameters(self):
        skip = {id(p) for p in self.head.parameters()} if self.freeze_head else set()
        return [p for p in self.parameters() if id(p) not in skip]

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        dtype = self.time.weight.dtype
        vecs = torch.stack([p(lvl.to(dtype)) for p, lvl in zip(self.proj, pyramid.levels)])
        temb = self.time(self.stage_times.to(dtype))
        x = (vecs[self.stage_level] * temb).unsqueeze(0)
        h = self.norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return self.head(x[0]).reshape(N_STAGES, self.tokens, self.dim)


def build_msi(backends: Backends, seed: int = 0, **kwargs) -> MsiModule:
    """Seeded MSI module sized for ``backends``' feature encoder."""
    if backends.features is None:
        raise ValueError("backends provide no feature encoder")
    kwargs.setdefault("T", backends.sched.T)
    kwargs.setdefault("dim", backends.predictor.context_dim)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        msi = MsiModule(backends.features.level_dims, **kwargs)
    return msi.to(backends.dtype)


def msi_forward(pyramid: FeaturePyramid, state: MsiModule, training: bool = False) -> torch.Tensor:
    """Stage embeddings ``(10, tokens, dim)``; dropout only when ``training``."""
    if len(pyramid.levels) != N_LEVELS:
        raise ValueError(f"pyramid has {len(pyramid.levels)} levels, expected {N_LEVELS}")
    state.train(training)
    return state(pyramid)


def sdm_loss(
    stages: torch.Tensor,
    z0: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    backends: Backends,
) -> torch.Tensor:
    """Squared-error noise loss with the stage embedding selected by ``t``."""
    sched = backends.sched
    z_t = forward_noise(LatentCode(z0, 0), t, eps, sched)
    ctx = stages[stage_of(t, sched.T)]
    pred = backends.predictor.predict(z_t, t, ctx)
    return F.mse_loss(pred, eps)


def make_probe_set(latent_shape, T: int, n: int = 20, seed: int = 0, dtype=torch.float32):
    """Held-out ``(t, eps)`` pairs, two per stage by default."""
    g = torch.Generator().manual_seed(seed)
    ts = [int(((i % N_STAGES) + torch.rand((), generator=g).item()) * T / N_STAGES) for i in range(n)]
    return [(min(t, T - 1), torch.randn(latent_shape, generator=g).to(dtype)) for t in ts]


def probe_loss(stages: torch.Tensor, z0: torch.Tensor, probes, backends: Backends) -> float:
    with torch.no_grad():
        return float(sum(sdm_loss(stages, z0, t, e, backends) for t, e in probes) / len(probes))


class _FrozenBackends:
    """Backend parameters stop tracking gradients; predictor dropout switches on."""

    def __init__(self, backends: Backends):
        self.modules = [m for m in backends.modules() if isinstance(m, nn.Module)]
        self.predictor = backends.predictor if isinstance(backends.predictor, nn.Module) else None

    def __enter__(self):
        self.saved = [(p, p.requires_grad) for m in self.modules for p in m.parameters()]
        for p, _ in self.saved:
            p.requires_grad_(False)
        if self.predictor is not None:
            self.predictor.train(True)
        return self

    def __exit__(self, *exc):
        for p, flag in self.saved:
            p.requires_grad_(flag)
        if self.predictor is not None:
            self.predictor.eval()


def train_embedding(
    image: torch.Tensor,
    backends: Backends,
    steps: int = 500,
    lr: float = 1e-3,
    seed: int = 0,
    tokens: int = 1,
    probe_size: int = 20,
    log_every: int = 0,
    **msi_kwargs,
) -> ConditionalEmbeddingSet:
    """Fit the MSI module to one image and return its key-E.

    Each step draws ``t`` uniformly from ``[0, T)`` and fresh noise, and
    minimizes the noise-prediction error with the stage embedding of ``t``
    (batch size 1, Adam). Probe losses on a fixed held-out set are stored in
    ``meta["probe_loss_start"]`` and ``meta["probe_loss_end"]``.
    """
    image = image.to(backends.dtype)
    sched = backends.sched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        msi = build_msi(backends, seed=seed, tokens=tokens, **msi_kwargs)
        with torch.no_grad():
            z0 = backends.codec.encode(image).values
            pyramid = backends.features.pyramid(image)
        probes = make_probe_set(z0.shape, sched.T, probe_size, seed=seed + 7919, dtype=z0.dtype)
        with torch.no_grad():
            start = probe_loss(msi_forward(pyramid, msi, training=False), z0, probes, backends)
        g = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(msi.trainable_parameters(), lr=lr)
        with _FrozenBackends(backends):
            for step in range(steps):
                t = int(torch.randint(0, sched.T, (), generator=g))
                eps = torch.randn(z0.shape, generator=g).to(z0.dtype)
                stages = msi_forward(pyramid, msi, training=True)
                loss = sdm_loss(stages, z0, t, eps, backends)
                if not torch.isfinite(loss):
                    raise EmbeddingTrainingError(step, t, float(loss.detach()))
                if not loss.requires_grad:
                    # unconditional predictor: the embedding cannot move the loss
                    logger.warning("noise predictor ignores its context; key-E stays at initialization")
                    break
                opt.zero_grad()
                loss.backward()
                opt.step()
                if log_every and step % log_every == 0:
                    logger.info("step %d t=%d loss=%.5f", step, t, float(loss))
        with torch.no_grad():
            stages = msi_forward(pyramid, msi, training=False)
        end = probe_loss(stages, z0, probes, backends)
    meta = {
        "optimizer": "adam",
        "lr": lr,
        "steps": steps,
        "seed": seed,
        "tokens": tokens,
        "probe_loss_start": start,
        "probe_loss_end": end,
    }
    return ConditionalEmbeddingSet(stages.detach().clone(), image_fingerprint(image), backends.model_id, meta)
