"""Few-shot classification by label propagation over several backbone depths."""
from .backbone import Conv64F, MultiLayerEmbeddings
from .datasets import FewShotData, SplitManifest, SyntheticSpec, generate_synthetic, load_image_folder
from .episodes import Episode, EpisodeSampler, EpisodeSpec, sample_episode
from .estimators import MultiTapClassifier, TransductiveLabelPropagation
from .evaluation import EvalReport, compare, evaluate
from .graph import build_operator, normalize, pairwise_similarity, sparsify
from .model import MultiTapNet, ModelConfig, build_model
from .propagation import propagate_closed_form, propagate_iterative
from .relation import RelationNet, RelationNets
from .training import TrainConfig, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "Conv64F", "MultiLayerEmbeddings", "FewShotData", "SplitManifest", "SyntheticSpec",
    "generate_synthetic", "load_image_folder", "Episode", "EpisodeSampler", "EpisodeSpec",
    "sample_episode", "MultiTapClassifier", "TransductiveLabelPropagation", "EvalReport",
    "compare", "evaluate", "build_operator", "normalize", "pairwise_similarity", "sparsify",
    "MultiTapNet", "ModelConfig", "build_model", "propagate_closed_form",
    "propagate_iterative", "RelationNet", "RelationNets", "TrainConfig", "gradcheck", "train",
]
