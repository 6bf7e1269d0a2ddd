"""Shot-contrastive pretraining on a small corpus.

For every query shot the positive key is its most similar neighbour within
+-m shots; negatives come from a FIFO queue of keys produced by a slowly moving
(momentum) copy of the encoder. We compare same-scene retrieval before and
after training.
"""
import numpy as np

from shotcol import numkernel as nk
from shotcol.corpus import GeneratorConfig, generate_corpus, shot_matrix
from shotcol.evaluation import knn_retrieval_precision
from shotcol.pretrain import PretrainConfig, embed, pretrain

corpus = generate_corpus(GeneratorConfig(titles=30, seed=11))
inputs = [shot_matrix(t) for t in corpus.titles]
scenes = [t.scene_ids for t in corpus.titles]

cfg = PretrainConfig(queue_size=512, batch_size=64, epochs=3)
run = pretrain(inputs, cfg, seed=0)
for epoch, loss in enumerate(run.epoch_losses, 1):
    print(f"epoch {epoch}: InfoNCE {loss:.3f}")

spec = run.encoders.spec
random_params = nk.init_params(spec, 123)
for name, params in (("random encoder", random_params), ("trained encoder", run.encoders.query)):
    emb = [embed(spec, params, x) for x in inputs]
    print(f"{name:>16}: same-scene precision@5 = {knn_retrieval_precision(emb, scenes, 5)[0]:.3f}")
print(f"{'raw pixels':>16}: same-scene precision@5 = {knn_retrieval_precision(inputs, scenes, 5)[0]:.3f}")
