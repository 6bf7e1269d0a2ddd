"""Shot-contrastive representation learning and scene-boundary detection in numpy."""

__version__ = "0.1.0"

from .corpus import GeneratorConfig, generate_corpus, load_corpus, save_corpus, split_corpus
from .pretrain import PretrainConfig, pretrain, info_nce, select_positive_key
from .boundary import ClassifierSpec, build_boundary_samples, train_classifier, predict_boundaries
from .evaluation import average_precision, recall_at_3s, knn_retrieval_precision
