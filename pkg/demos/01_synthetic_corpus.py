"""Generate a small synthetic corpus and look at what makes it learnable.

Shots from one scene share a latent "scene look"; every shot also carries its
own nuisance component. Same-scene shots are therefore more alike than random
pairs, but only on average -- the per-pair signal is weak in raw pixels.
"""
import numpy as np

from shotcol.corpus import GeneratorConfig, generate_corpus, shot_matrix

corpus = generate_corpus(GeneratorConfig(titles=5, seed=7))
title = corpus.titles[0]
print(f"{len(corpus.titles)} titles, {corpus.n_shots} shots, shot tensor {corpus.shot_shape}")
print(f"title {title.title_id}: {title.n_shots} shots in {len(np.unique(title.scene_ids))} scenes, "
      f"{int(title.cuepoint_flags.sum())} ad cue-points, runtime {title.end_times[-1] / 60:.1f} min")

x = shot_matrix(title).astype(np.float64)
x /= np.linalg.norm(x, axis=1, keepdims=True)
sims = x @ x.T
same = title.scene_ids[:, None] == title.scene_ids[None, :]
off_diag = ~np.eye(title.n_shots, dtype=bool)
print(f"mean pixel cosine, same scene:  {sims[same & off_diag].mean():.4f}")
print(f"mean pixel cosine, any pair:    {sims[off_diag].mean():.4f}")
