"""Pseudo-label curation for multi-phase semi-supervised object detection."""

from .geometry import BoundingBox, Detection, GroundTruthAnnotation, ImagePseudoLabels, iof, iou, pairwise_iou
from .pseudo_labels import (
    CategoryThresholds,
    SelectionResult,
    fit_category_thresholds,
    image_uncertainty,
    make_pseudo_labels,
    select_easy,
)
from .intersection import IntersectionConfig, intersect_all, intersect_two
from .reweight import (
    ReweightConfig,
    RoiFeatureRecord,
    RoiWeightTable,
    abs_cosine,
    build_weight_table,
    overlap_weight,
    roi_weight,
    similarity_uncertainty,
)
from .embedding import EmbedConfig, EmbeddingMatrix, embed, loss_and_gradient, pair_labels, sim_loss, train_embedding
from .wbf import WbfConfig, fuse_dataset, fuse_image
from .evaluation import average_precision, classify_difficulty, image_pr

__version__ = "0.1.0"
