"""Token-to-box weakly supervised localization pipeline.

Merges transformer token layers, clusters tokens with the class token as the
foreground anchor, denoises the mask, trains a shallow per-token filter on
the pseudo masks, refines it via quadrant stitching, and scores the
resulting boxes.
"""

from .atf import (
    AtfConfig,
    AtfModel,
    TrainConfig,
    TrainLog,
    atf_forward,
    atf_loss_grad,
    atf_predict,
    init_atf,
    load_model,
    save_model,
    train_atf,
)
from .backend import BACKEND
from .cluster import (
    ClusterMetrics,
    ClusterResult,
    KMeansResult,
    class_token_affinity,
    cluster_tokens,
    clustering_metrics,
    foreground_mask,
    kmeans,
    similarity_curve,
    similarity_matrix,
)
from .errors import CaftError, DataError, FormatError
from .evaluation import EvalReport, evaluate, gt_known_loc, iou, loc_curve, mean_iou, topk_loc
from .maskops import (
    BBox,
    Mask,
    SoftMask,
    binarize,
    connected_components,
    denoise,
    downsample_soft,
    gaussian_smooth,
    mask_to_box,
    upsample_mask,
)
from .merge import MergedMap, MergeRatios, layer_subset_ratios, merge_maps
from .pipeline import PipelineConfig
from .refine import RefinedMask, refine_mask, refined_to_target, stitch_masks
from .synth import (
    SynthConfig,
    SynthImage,
    direct_convolution_oracle,
    exact_kmeans_oracle,
    finite_difference_grad,
    generate_image,
    generate_synthetic,
    write_synthetic,
)
from .token_io import (
    DatasetManifest,
    ImageEntry,
    TokenMap,
    ValidationReport,
    load_manifest,
    read_token_map,
    save_manifest,
    validate_token_map,
    write_token_map,
)

__version__ = "0.1.0"
