"""Folding text embeddings into a 1x1 conv kernel gives the same scores as cosine scoring."""
import numpy as np

from jointdet.adaptor import AdaptorConfig, forward, init_params
from jointdet.embedding_io import EmbeddingMatrix
from jointdet.head import classify_conv, reparameterize, score_online

rng = np.random.default_rng(0)

# five "text embeddings" of width 32 and a three-layer adaptor
raw = EmbeddingMatrix(rng.standard_normal((5, 32)).astype(np.float32),
                      ["person", "bicycle", "car", "dog", "kite"])
adaptor = init_params(AdaptorConfig(num_layers=3, dim=32, seed=0))
adapted = forward(adaptor, raw)

# a 1 x 32 x 6 x 6 region-feature map
features = rng.standard_normal((1, 32, 6, 6)).astype(np.float32)

online = score_online(adapted, features)        # alpha * cos + beta, recomputed per frame
pack = reparameterize(adapted)                  # done once, offline
offline = classify_conv(pack, features)         # plain 1x1 conv + bias

print("kernel shape:", pack.conv_weight.shape)  # K x D x 1 x 1
print("row norms (= logit scale):", np.linalg.norm(pack.kernel, axis=1).round(4))
print("max |online - offline|:", np.abs(online.data - offline.data).max())

# probabilities are per-class sigmoids, so several classes can fire on one cell
probs = offline.probabilities().data[0, :, 0, 0]
print("cell (0,0):", {label: round(float(p), 5) for label, p in zip(pack.labels, probs)})

# an all-zero cell has cosine 0 with everything and scores exactly beta
zero = classify_conv(pack, np.zeros((1, 32, 1, 1), np.float32)).data.ravel()
print("zero cell logits:", zero)
