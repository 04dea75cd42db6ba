"""
Evaluation protocols on synthetic embeddings
============================================

Face recognizers are swapped for random unit vectors here. The protocol
logic is the same one used on real embeddings.
"""

import numpy as np

from diffguard.backends import IdentityEmbedding
from diffguard.evaluation import (
    ARCFACE,
    FACENET,
    VerificationSet,
    diversity_dispersion,
    format_report,
    identification_rate,
    protection_success_rate,
)

rng = np.random.default_rng(0)


def emb(v):
    return IdentityEmbedding.from_raw(v, "synthetic")


# Protection success rate: a protected face counts as protected when its
# distance to the original exceeds the recognizer threshold.
originals = rng.normal(size=(50, 128))
strong = [(emb(o), emb(rng.normal(size=128))) for o in originals]
weak = [(emb(o), emb(o + 0.3 * rng.normal(size=128))) for o in originals]
rows = []
for rec in (FACENET, ARCFACE):
    rows.append({"recognizer": rec.name, "metric": rec.metric, "threshold": rec.threshold,
                 "SR strong": protection_success_rate(strong, rec), "SR weak": protection_success_rate(weak, rec)})
print(format_report("protection success rate", rows))

# Identification rate: a probe is identified only if every same-identity
# gallery image beats every different-identity one.
people = rng.normal(size=(12, 128))
probe = [emb(p + 0.5 * rng.normal(size=128)) for p in people]
same = [[emb(p + 0.5 * rng.normal(size=128)) for _ in range(10)] for p in people]
diff = [emb(v) for v in rng.normal(size=(200, 128))]
print("\nidentification rate:", identification_rate(VerificationSet(probe, same, diff)))

# Diversity: mean pairwise cosine distance within each group of outputs.
tight = [[emb(c + 0.1 * rng.normal(size=128)) for _ in range(4)] for c in people[:5]]
loose = [[emb(rng.normal(size=128)) for _ in range(4)] for _ in range(5)]
print(f"dispersion tight {diversity_dispersion(tight):.3f}, loose {diversity_dispersion(loose):.3f}")
