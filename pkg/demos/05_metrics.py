"""The evaluation metrics on hand-checkable inputs."""
import numpy as np

from shotcol.evaluation import average_precision, knn_retrieval_precision, recall_at_3s

print("AP, positives ranked 1st and 3rd:", average_precision([0.9, 0.8, 0.7], [1, 0, 1]))
print("recall@3s, one boundary found within 2.9s, one missed:",
      recall_at_3s({"movie": [10.0, 50.0]}, {"movie": [12.9, 70.0]}))
emb = np.repeat(np.eye(3), 4, axis=0)          # three perfectly separated scenes of four shots
print("k-NN precision@3 on separated scenes:",
      knn_retrieval_precision(emb, np.repeat([0, 1, 2], 4), 3)[0])
