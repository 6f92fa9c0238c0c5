"""From an uploaded model to a cue vector, one client at a time.

A logistic-regression model is trained locally on two different client
shards of synthetic data. The server recovers the batch gradient from each
upload, inverts it into a dummy batch and summarises the reconstructions
with the four similarity cues that drive the adaptive defence.
"""
import numpy as np
import torch

from flarena import cues, data, inversion, models

torch.manual_seed(0)
train = data.make_blobs(600, num_classes=4, side=12, seed=0)
root = data.make_blobs(600, num_classes=4, side=12, seed=1)
model = models.Model(models.ModelSpec("logreg", train.image_shape, 4))
extractor = cues.train_feature_extractor(
    models.Model(models.ModelSpec("small-cnn", train.image_shape, 4)), root, seed=0, epochs=2
)

theta = model.init_params(0)
lr = 0.1
shards = {0: train.subset(np.flatnonzero(train.y.numpy() < 2)), 1: train.subset(np.flatnonzero(train.y.numpy() >= 2))}
history = cues.HistoryStore()

for t in range(3):
    recon, sims = {}, {}
    for k, shard in shards.items():
        upload = models.local_train(model, theta, shard, lr, 1, len(shard), seed=t)
        g = inversion.batch_gradient_from_update(upload, theta, lr)
        r = inversion.invert_gradients(model, g, upload, num_images=8, max_iters=30, seed=k)
        recon[k], sims[k] = r.images, r.similarity
    res = cues.build_cues(recon, sims, history, extractor)
    print(f"round {t}")
    for k in res.order:
        s_r, s_cl, s_cg, s_lg = res.cues[k]
        print(f"  client {k}: S_R={s_r:.3f} S_cl={s_cl:.3f} S_cg={s_cg:.3f} S_lg={s_lg:.3f}")
    theta = models.local_train(model, theta, train, lr, 5, 64, seed=t)
