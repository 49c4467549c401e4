"""
Environments from non-rationale embeddings
==========================================

The trainer clusters the non-rationale half of every training graph with
k-means and treats the centroids as environments.  Here the clustering is
shown first on toy blobs, then on an untrained model's embeddings.
"""
import numpy as np
from sklearn.metrics import adjusted_rand_score

from c2r.graphdata import collate, gen_spurious_motif
from c2r.metrics import env_agreement
from c2r.models import Architecture, build_model
from c2r.trainer import kmeans, refresh_environments, sample_other_envs

rng = np.random.default_rng(0)
centres = np.array([[0, 0], [8, 0], [0, 8]], float)
pts = np.vstack([c + rng.normal(scale=0.5, size=(50, 2)) for c in centres])
truth = np.repeat(np.arange(3), 50)

res = kmeans(pts, 3, rng=1)
print("ARI on blobs:", adjusted_rand_score(truth, res.assignments))
print("SSE per Lloyd iteration:", np.round(res.sse_history, 2))

ds = gen_spurious_motif(300, 0.9, seed=0)
model = build_model(Architecture(d=16), seed=0)
env = refresh_environments(model, collate(ds.graphs), k=3, rng=np.random.default_rng(0))
print("cluster sizes:", np.bincount(env.assignments, minlength=3))
print("agreement with base type:", round(env_agreement(env.assignments, ds.env_hints), 3))

# counterfactual environments are drawn among the other k - 1
j = sample_other_envs(env.assignments[:10], 3, np.random.default_rng(0))
print("own env  ", env.assignments[:10])
print("other env", j)
