"""Recoverable face privacy protection with energy-guided DDIM sampling.

key-E (learned stage embeddings) and key-I (the DDIM-inverted noise of the
original latent) together recover the original image; either alone does not.
"""

from .backends import (
    Backends,
    IdentityEmbedding,
    analytic_oracle,
    load_backends,
    oracle_backends,
    register_backend,
    toy_backends,
    toy_conditional_predictor,
    toy_identity_embedder,
)
from .guidance import (
    EnergyReport,
    GuidanceConfig,
    calibrate_lambda,
    diversity_loss,
    guided_step,
    identity_dissimilarity_loss,
    identity_similarity_loss,
)
from .msi import ConditionalEmbeddingSet, StageEmbedding, msi_forward, stage_of, train_embedding
from .pipelines import (
    NoiseKey,
    RunConfig,
    anonymize,
    calibrate_hide_lambda,
    hide_identity,
    make_key_i,
    recover,
)
from .schedule import (
    CLEAN,
    LatentCode,
    NoiseSchedule,
    build_schedule,
    ddim_invert_step,
    ddim_step,
    estimate_clean,
    forward_noise,
)
from .strategy import ScheduleStrategy, select_embedding

__version__ = "0.1.0"
