"""Backend interfaces plus the built-in desk-scale implementations.

Four learned components are abstracted: the noise predictor, the latent
codec, the multi-scale feature encoder and the face identity embedder. The
pipelines only talk to these interfaces. Two complete backend bundles ship
with the package:

* ``oracle``: an exact posterior-mean noise predictor for Gaussian data with
  an identity codec. Unconditional; every DDIM identity is checkable on it.
* ``toy``: a small conditional predictor with one cross-attention layer, an
  invertible patch codec, pooled feature pyramids and a random-projection
  identity embedder. Differentiable end to end.

Real checkpoints are supplied through :func:`register_backend`.
"""

from __future__ import annotations

import abc
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .schedule import LatentCode, NoiseSchedule, build_schedule

CONTEXT_DIM = 768
N_LEVELS = 5


class BackendError(ValueError):
    """Unknown or inconsistent backend."""


def timestep_embedding(t: torch.Tensor | float, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) time steps, shape ``(..., dim)``."""
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


# --------------------------------------------------------------------------
# Interfaces


class NoisePredictor(abc.ABC):
    """Predicts the noise in ``z_t``. Latent values may carry a leading batch axis."""

    context_dim: int = CONTEXT_DIM

    @abc.abstractmethod
    def predict(self, z_t: LatentCode, t: int, context: torch.Tensor | None) -> torch.Tensor: ...

    def null_context(self) -> torch.Tensor:
        """The unconditional embedding, shape ``(1, context_dim)``."""
        return torch.zeros(1, self.context_dim)


class LatentCodec(abc.ABC):
    """Maps images to latents and back. ``decode`` must be differentiable."""

    @abc.abstractmethod
    def encode(self, image: torch.Tensor) -> LatentCode: ...

    @abc.abstractmethod
    def decode(self, z: LatentCode | torch.Tensor) -> torch.Tensor: ...


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]
    source_resolution: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.levels) != N_LEVELS:
            raise ValueError(f"feature pyramid needs exactly {N_LEVELS} levels, got {len(self.levels)}")


class FeatureEncoder(abc.ABC):
    @abc.abstractmethod
    def pyramid(self, image: torch.Tensor) -> FeaturePyramid: ...

    @property
    @abc.abstractmethod
    def level_dims(self) -> list[int]: ...


@dataclass(frozen=True)
class IdentityEmbedding:
    vector: np.ndarray
    embedder_id: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("identity embedding must be a finite 1-D vector")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError(f"identity embedding must have unit norm, got {np.linalg.norm(v):.8f}")
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_raw(cls, vector, embedder_id: str) -> "IdentityEmbedding":
        """Normalize ``vector`` and wrap it."""
        v = np.asarray(vector, dtype=np.float64)
        return cls(v / np.linalg.norm(v), embedder_id)


METRICS = ("cosine_distance", "euclidean", "squared_euclidean")


class IdentityEmbedder(abc.ABC):
    embedder_id: str = "identity"
    dim: int = 0
    threshold: float = 0.8
    metric: str = "cosine_distance"

    @abc.abstractmethod
    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Differentiable unit-norm embeddings, shape ``(batch, dim)``."""

    def embed(self, image: torch.Tensor) -> IdentityEmbedding:
        with torch.no_grad():
            v = self.features(image)
        return IdentityEmbedding.from_raw(v[0].double().numpy(), self.embedder_id)

    def distance(self, a: IdentityEmbedding, b: IdentityEmbedding) -> float:
        return embedding_distance(a.vector, b.vector, self.metric)


def embedding_distance(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    if metric == "cosine_distance":
        return 1.0 - float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if metric == "squared_euclidean":
        return float(np.sum((a - b) ** 2))
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


# --------------------------------------------------------------------------
# Analytic oracle


class GaussianOraclePredictor(NoisePredictor):
    """Exact E[eps | z_t] for data ~ N(mean, diag(scale**2)).

    Under ``z_t = sqrt(a) z0 + sqrt(1-a) eps`` the noise and ``z_t`` are
    jointly Gaussian per coordinate with Cov(eps, z_t) = sqrt(1-a) and
    Var(z_t) = a*scale**2 + 1 - a, so the conditional mean is linear in z_t.
    """

    def __init__(self, mean: torch.Tensor, scale: torch.Tensor, sched: NoiseSchedule):
        self.mean = mean
        self.scale = scale
        self.sched = sched

    def predict(self, z_t, t, context=None):
        a = self.sched.abar(t)
        var = a * self.scale**2 + (1.0 - a)
        return math.sqrt(1.0 - a) * (z_t.values - math.sqrt(a) * self.mean) / var


class IdentityCodec(LatentCodec):
    def encode(self, image):
        return LatentCode(image.clone(), 0)

    def decode(self, z):
        return z.values if isinstance(z, LatentCode) else z


def analytic_oracle(
    dim: int,
    mean=0.0,
    scale=1.0,
    sched: NoiseSchedule | None = None,
    dtype: torch.dtype = torch.float64,
) -> tuple[GaussianOraclePredictor, IdentityCodec]:
    """Exact noise predictor for N(mean, diag(scale**2)) data, plus an identity codec."""
    mean_t = torch.as_tensor(mean, dtype=dtype).expand(dim).clone()
    scale_t = torch.as_tensor(scale, dtype=dtype).expand(dim).clone()
    if not bool((scale_t > 0).all()):
        raise BackendError("oracle scale entries must be positive")
    return GaussianOraclePredictor(mean_t, scale_t, sched or build_schedule()), IdentityCodec()


# --------------------------------------------------------------------------
# Toy backends


def _to_tokens(values: torch.Tensor, latent_shape: tuple[int, ...]) -> tuple[torch.Tensor, tuple]:
    # (*batch, C, *spatial) -> (B, n_tokens, C)
    batch = values.shape[: values.dim() - len(latent_shape)]
    x = values.reshape(-1, latent_shape[0], int(np.prod(latent_shape[1:], dtype=int)))
    return x.transpose(1, 2), batch


class ToyConditionalPredictor(nn.Module, NoisePredictor):
    """Gaussian-prior noise predictor plus a cross-attention residual.

    The residual is ``W_out(gelu(h + attn) - gelu(h))`` so a zero context
    leaves the prior prediction untouched. Attention dropout is the
    regularization site used during embedding training.
    """

    def __init__(
        self,
        latent_shape: tuple[int, ...],
        context_dim: int = CONTEXT_DIM,
        sched: NoiseSchedule | None = None,
        width: int = 32,
        prior_scale: float = 0.5,
        cond_gain: float = 1.0,
        attn_dropout: float = 0.05,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        if context_dim <= 0:
            raise BackendError("context_dim must be positive")
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.context_dim = context_dim
        self.sched = sched or build_schedule()
        self.width = width
        self.prior_scale = prior_scale
        self.cond_gain = cond_gain
        self.attn_dropout = attn_dropout
        channels = self.latent_shape[0]
        self.to_h = nn.Linear(channels, width)
        self.time = nn.Linear(width, width)
        self.q = nn.Linear(width, width, bias=False)
        self.k = nn.Linear(context_dim, width, bias=False)
        self.v = nn.Linear(context_dim, width, bias=False)
        self.out = nn.Linear(width, channels, bias=False)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p.shape[-1]
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))
        self.to(dtype)
        self.eval()

    def null_context(self):
        return torch.zeros(1, self.context_dim, dtype=self.out.weight.dtype)

    def forward(self, values: torch.Tensor, t: int, context: torch.Tensor | None) -> torch.Tensor:
        a = self.sched.abar(t)
        prior = math.sqrt(1.0 - a) * values / (a * self.prior_scale**2 + 1.0 - a)
        if context is None:
            return prior
        tokens, batch = _to_tokens(values, self.latent_shape)
        temb = timestep_embedding(float(t), self.width).to(tokens.dtype)
        h = self.to_h(tokens) + self.time(temb)
        ctx = context.to(tokens.dtype)
        if ctx.dim() == 2:
            ctx = ctx.unsqueeze(0)
        q, k, v = self.q(h), self.k(ctx), self.v(ctx)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.width)
        attn = F.dropout(scores.softmax(-1), self.attn_dropout, self.training)
        a_out = attn @ v
        res = self.out(F.gelu(h + a_out) - F.gelu(h))
        res = res.transpose(1, 2).reshape(*batch, *self.latent_shape)
        return prior + self.cond_gain * res

    def predict(self, z_t, t, context=None):
        return self(z_t.values, t, context)


class ToyCodec(nn.Module, LatentCodec):
    """Invertible patch codec: 2x2 pixel-unshuffle then a fixed orthogonal channel mix.

    Images ``(3, H, W)`` in [0, 1] map to latents ``(12, H/2, W/2)``;
    ``decode(encode(x)) == x`` up to float rounding.
    """

    def __init__(self, image_shape=(3, 16, 16), seed: int = 0, dtype=torch.float32):
        super().__init__()
        c, h, w = image_shape
        if h % 2 or w % 2:
            raise BackendError(f"toy codec needs even image sides, got {image_shape}")
        self.image_shape = tuple(image_shape)
        self.latent_shape = (4 * c, h // 2, w // 2)
        g = torch.Generator().manual_seed(seed + 1)
        q, _ = torch.linalg.qr(torch.randn(4 * c, 4 * c, generator=g, dtype=torch.float64))
        self.register_buffer("mix", q.to(dtype))

    def encode(self, image):
        x = 2.0 * image - 1.0
        squeeze = x.dim() == 3
        x = F.pixel_unshuffle(x.unsqueeze(0) if squeeze else x, 2)
        z = torch.einsum("ij,bjhw->bihw", self.mix.to(x.dtype), x)
        return LatentCode(z[0] if squeeze else z, 0)

    def decode(self, z):
        z = z.values if isinstance(z, LatentCode) else z
        squeeze = z.dim() == 3
        zz = z.unsqueeze(0) if squeeze else z
        batch = zz.shape[:-3]
        zz = zz.reshape(-1, *self.latent_shape)
        x = torch.einsum("ji,bjhw->bihw", self.mix.to(zz.dtype), zz)
        x = (F.pixel_shuffle(x, 2) + 1.0) / 2.0
        x = x.reshape(*batch, *self.image_shape)
        return x[0] if squeeze else x


class PooledFeatureEncoder(FeatureEncoder):
    """Five average-pooled views of the centred image, fine to coarse."""

    def __init__(self, image_shape: tuple[int, ...]):
        self.image_shape = tuple(image_shape)

    def _sizes(self):
        spatial = self.image_shape[1:] if len(self.image_shape) == 3 else self.image_shape
        return [tuple(max(1, s // f) for s in spatial) for f in (1, 2, 4, 8)] + [tuple(1 for _ in spatial)]

    @property
    def level_dims(self):
        c = self.image_shape[0] if len(self.image_shape) == 3 else 1
        return [c * int(np.prod(s)) for s in self._sizes()]

    def pyramid(self, image):
        x = image - 0.5
        if len(self.image_shape) == 3:
            levels = [F.adaptive_avg_pool2d(x.unsqueeze(0), s).flatten() for s in self._sizes()]
        else:
            levels = [F.adaptive_avg_pool1d(x.reshape(1, 1, -1), s).flatten() for s in self._sizes()]
        return FeaturePyramid(levels, tuple(self.image_shape))


class ProjectionEmbedder(nn.Module, IdentityEmbedder):
    """Fixed random projection of the centred image followed by L2 normalization."""

    def __init__(
        self,
        image_shape: tuple[int, ...],
        dim: int = 32,
        seed: int = 0,
        embedder_id: str | None = None,
        threshold: float = 0.8,
        metric: str = "cosine_distance",
        dtype=torch.float32,
    ):
        if dim < 2:
            raise BackendError("embedding dim must be >= 2")
        if metric not in METRICS:
            raise BackendError(f"unknown metric {metric!r}")
        super().__init__()
        self.image_shape = tuple(image_shape)
        n = int(np.prod(self.image_shape))
        g = torch.Generator().manual_seed(seed + 2)
        self.register_buffer("proj", (torch.randn(dim, n, generator=g, dtype=torch.float64) / math.sqrt(n)).to(dtype))
        self.dim = dim
        self.embedder_id = embedder_id or f"toy-proj-{dim}-s{seed}"
        self.threshold = threshold
        self.metric = metric

    def features(self, images):
        x = images.reshape(-1, self.proj.shape[1]) - 0.5
        y = x @ self.proj.to(x.dtype).T
        return y / y.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def toy_conditional_predictor(latent_shape, context_dim: int = CONTEXT_DIM, **kwargs) -> ToyConditionalPredictor:
    return ToyConditionalPredictor(tuple(latent_shape), context_dim, **kwargs)


def toy_identity_embedder(dim: int, image_shape=(3, 16, 16), **kwargs) -> ProjectionEmbedder:
    return ProjectionEmbedder(tuple(image_shape), dim, **kwargs)


# --------------------------------------------------------------------------
# Bundles and registry


@dataclass(frozen=True)
class BackendSpec:
    """What a plugin declares about itself."""

    latent_shape: tuple[int, ...]
    context_dim: int
    embedding_dim: int
    metric: str
    threshold: float
    reentrant: bool = True


@dataclass
class Backends:
    predictor: NoisePredictor
    codec: LatentCodec
    embedder: IdentityEmbedder
    features: FeatureEncoder | None
    sched: NoiseSchedule
    model_id: str
    image_shape: tuple[int, ...] = ()
    latent_shape: tuple[int, ...] = ()
    dtype: torch.dtype = torch.float32
    align: Callable[[torch.Tensor], torch.Tensor] | None = field(default=None, repr=False)

    @property
    def spec(self) -> BackendSpec:
        return BackendSpec(
            tuple(self.latent_shape),
            self.predictor.context_dim,
            self.embedder.dim,
            self.embedder.metric,
            self.embedder.threshold,
        )

    def modules(self):
        return [m for m in (self.predictor, self.codec, self.embedder, self.features) if m is not None]


def parameter_checksum(backends: Backends) -> str:
    """SHA-256 over every tensor the backends hold (parameters, buffers, oracle moments)."""
    h = hashlib.sha256()
    for m in backends.modules():
        tensors = []
        if isinstance(m, nn.Module):
            tensors = [t for _, t in sorted(m.state_dict().items())]
        else:
            tensors = [v for _, v in sorted(vars(m).items()) if isinstance(v, torch.Tensor)]
        for t in tensors:
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def oracle_backends(
    dim: int,
    mean=0.5,
    scale=0.25,
    embed_dim: int = 16,
    seed: int = 0,
    sched: NoiseSchedule | None = None,
    dtype: torch.dtype = torch.float32,
) -> Backends:
    """Analytic oracle bundle on flat ``dim``-vectors with a toy embedder on top."""
    sched = sched or build_schedule()
    predictor, codec = analytic_oracle(dim, mean, scale, sched, dtype=dtype)
    embedder = ProjectionEmbedder((dim,), embed_dim, seed=seed, dtype=dtype)
    return Backends(
        predictor=predictor,
        codec=codec,
        embedder=embedder,
        features=PooledFeatureEncoder((dim,)),
        sched=sched,
        model_id=f"oracle-v1/{dim}",
        image_shape=(dim,),
        latent_shape=(dim,),
        dtype=dtype,
    )


def toy_backends(
    image_shape=(3, 16, 16),
    seed: int = 0,
    embed_dim: int = 32,
    sched: NoiseSchedule | None = None,
    dtype: torch.dtype = torch.float32,
    **predictor_kwargs,
) -> Backends:
    """Toy conditional bundle for ``(3, H, W)`` images."""
    sched = sched or build_schedule()
    codec = ToyCodec(image_shape, seed=seed, dtype=dtype)
    predictor = ToyConditionalPredictor(codec.latent_shape, sched=sched, seed=seed, dtype=dtype, **predictor_kwargs)
    embedder = ProjectionEmbedder(image_shape, embed_dim, seed=seed, dtype=dtype)
    shape = "x".join(map(str, image_shape))
    return Backends(
        predictor=predictor,
        codec=codec,
        embedder=embedder,
        features=PooledFeatureEncoder(image_shape),
        sched=sched,
        model_id=f"toy-v1/{shape}/s{seed}",
        image_shape=tuple(image_shape),
        latent_shape=codec.latent_shape,
        dtype=dtype,
    )


_REGISTRY: dict[str, Callable[[str], Backends]] = {}


def register_backend(prefix: str, factory: Callable[[str], Backends]) -> None:
    """Register a factory for model ids of the form ``<prefix>...``."""
    _REGISTRY[prefix] = factory


def load_backends(model_id: str) -> Backends:
    """Rebuild a backend bundle from its model id."""
    for prefix in sorted(_REGISTRY, key=len, reverse=True):
        if model_id.startswith(prefix):
            return _REGISTRY[prefix](model_id)
    raise BackendError(f"no backend registered for model id {model_id!r}")


def _load_toy(model_id: str) -> Backends:
    m = re.fullmatch(r"toy-v1/(\d+)x(\d+)x(\d+)/s(\d+)", model_id)
    if not m:
        raise BackendError(f"malformed toy model id {model_id!r}")
    c, h, w, seed = map(int, m.groups())
    return toy_backends((c, h, w), seed=seed)


def _load_oracle(model_id: str) -> Backends:
    m = re.fullmatch(r"oracle-v1/(\d+)", model_id)
    if not m:
        raise BackendError(f"malformed oracle model id {model_id!r}")
    return oracle_backends(int(m.group(1)))


register_backend("toy-v1/", _load_toy)
register_backend("oracle-v1/", _load_oracle)
