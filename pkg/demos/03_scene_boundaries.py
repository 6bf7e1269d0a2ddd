"""Scene-boundary detection from frozen shot embeddings.

Each shot boundary becomes one sample: the embeddings of the two shots before
and the two shots after it, concatenated. A small MLP is trained on some titles
and scored on others.
"""
from shotcol.boundary import (BoundarySamples, ClassifierSpec, build_boundary_samples,
                              predict_boundaries, train_classifier)
from shotcol.corpus import GeneratorConfig, generate_corpus, shot_matrix, split_corpus
from shotcol.evaluation import RankedPredictions, boundary_metrics
from shotcol.pretrain import PretrainConfig, embed, pretrain

corpus = generate_corpus(GeneratorConfig(titles=40, seed=5))
train_ids, _, test_ids = split_corpus([t.title_id for t in corpus.titles], (0.7, 0.1, 0.2), seed=0)
run = pretrain([shot_matrix(corpus.title(t)) for t in train_ids], PretrainConfig(epochs=3, queue_size=512))


def samples(ids):
    parts = []
    for tid in ids:
        title = corpus.title(tid)
        parts.append(build_boundary_samples(title, embed(run.encoders.spec, run.encoders.query,
                                                         shot_matrix(title)), context=2))
    return BoundarySamples.concat(parts)


train, test = samples(train_ids), samples(test_ids)
print(f"{len(train)} training boundaries ({int(train.labels.sum())} scene changes)")
clf = train_classifier(train, ClassifierSpec.for_embedding_dim(64, epochs=20), seed=0)
scores = predict_boundaries(clf, test)
report = boundary_metrics(RankedPredictions(scores, test.labels, test.times, test.title_ids))
print(f"held-out AP {report.ap:.3f}, recall@0.5 {report.recall_at_threshold:.3f}, "
      f"recall@3s {report.recall_at_3s:.3f}")
