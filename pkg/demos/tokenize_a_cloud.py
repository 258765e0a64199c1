"""
From a raw point cloud to prompted tokens
=========================================

Walk one synthetic torus through grouping, embedding, PosIn, the point
prompt and a small frozen backbone, printing the shapes at each stage.
"""

import numpy as np

from appt import numerics as nx
from appt.backbone import Backbone, BackboneConfig
from appt.embed import PointEmbedConfig, PointEmbedParams, global_embedding, init_posin, point_embed, pos_inject
from appt.pointcloud import gen_synthetic, group_cloud
from appt.prompt import gen_prompt, pool_cls, prompted_forward

cloud = gen_synthetic("torus", 1024, noise_sigma=0.01, seed=0)
print("cloud", cloud.coords.shape)

# 64 farthest-point centroids, 16 neighbours each, re-centred on the centroid
groups = group_cloud(cloud, n_groups=64, k=16, seed=0)
print("groups", groups.groups.shape)

params = PointEmbedParams.init(PointEmbedConfig(d_out=128, widths=(64, 128)), seed=0)
emb = point_embed(groups.groups, params)
print("embeddings", emb.shape, "global", global_embedding(emb).shape)

# PosIn starts at (a, b) = (0, 1), i.e. the identity
kernel = init_posin()
tokens = pos_inject(emb, kernel)
print("PosIn is identity at init:", np.array_equal(tokens.data, emb.data))

p0 = gen_prompt(emb)
backbone = Backbone.init_random(BackboneConfig(L=4, d=128, n_heads=4), seed=0)
with nx.no_grad():
    state = prompted_forward(tokens, p0, backbone.cls_token, backbone)
for t in state.trace:
    print(f"block {t.level}: {t.input_rows} input rows")
print("carried prompts", state.prompts.shape, "pooled class token", pool_cls(state).shape)
