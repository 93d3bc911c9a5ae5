"""
Cross-domain mixup and the training objectives
==============================================

Build one mixed cloud and evaluate each loss term on toy inputs.
"""

import math

import numpy as np

from tam.geometry import SynthConfig, generate_domain_pair
from tam.losses import LossWeights, cdc_loss, cdmix, mix_loss, sim_loss, source_ce, spst_target_loss, total_loss

rng = np.random.default_rng(0)
S, T = generate_domain_pair(SynthConfig(points_per_cloud=256, samples_per_class=1))

# the virtual label interpolates the two predictions with the same weight as the points
p_s, p_t = np.array([0.7, 0.1, 0.1, 0.1]), np.array([0.1, 0.1, 0.2, 0.6])
pair = cdmix(S[0].cloud, T[2].cloud, p_s, p_t, kappa=2.0, rng=rng)
print("lambda", round(pair.lam, 3), "virtual label", np.round(pair.virtual_label, 3))
print("mixed cloud", pair.cloud.shape)

logits = np.log(pair.virtual_label)[None]
print("mix loss at the virtual label:", float(mix_loss(logits, pair.virtual_label[None]).data))

# both heads must agree on the source label
p = np.array([[0.5, 0.5]])
print("source CE for two uncertain heads (2 ln 2):", float(source_ce(p, p, [0]).data), 2 * math.log(2))

# a selected target sample pays -(log p + gamma): negative once p exceeds exp(-gamma)
gamma = -math.log(0.8)
for q in (0.7, 0.9):
    head = np.sqrt([[1 - q, q]])
    print(f"self-paced term at p = {q}:", round(float(spst_target_loss(head, head, [[0, 1]], gamma).data), 4))

z = rng.normal(size=(1, 8))
print("similarity loss, same / opposite:", float(sim_loss(z, z).data), float(sim_loss(-z, z).data))

bank = np.array([[2.0, 0.0], [-1.0, 0.0]])
loss, _ = cdc_loss(np.array([[1.0, 0.0]]), [0], bank, [0, 1], tau=1.0)
print("contrastive loss against a two-entry bank:", round(float(loss.data), 4))

terms = {k: 1.0 for k in ("source", "target", "cdc", "imp", "mix", "sim")}
print("weighted total with unit terms:", float(total_loss(terms, LossWeights()).data))
