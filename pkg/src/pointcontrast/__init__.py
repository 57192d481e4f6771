"""Point-level region contrast pre-training with affinity distillation."""

from .data import (
    ImageFolderDataset,
    Sample,
    SyntheticDataset,
    SyntheticSample,
    gen_synthetic_dataset,
    load_dataset,
)
from .encoder import (
    DenseEncoder,
    DenseOutput,
    EncoderConfig,
    EncoderPair,
    ema_update,
    gather_point_features,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    AffinityMap,
    affinity_map,
    evaluate_jaccard,
    export_visualization,
    jaccard,
    kmeans_regions,
    mask_from_affinity,
)
from .geometry import (
    RegionLabelMap,
    ViewTransform,
    make_annotation_regions,
    make_grid_regions,
    render_view,
    sample_points,
    sample_valid_masks,
    sample_view_transform,
    transform_label_map,
    view_point_to_source,
)
from .losses import (
    AffinityMatrix,
    LossReport,
    PointBatch,
    affinity_distillation,
    build_distillation_pair,
    combine_point,
    combine_total,
    info_nce_image,
    point_affinity,
    point_region_contrast,
)
from .sweep import SweepSpec, run_sweep
from .training import MemoryQueue, TrainConfig, run_pretraining, train_step, warmup_weight

__version__ = "0.1.0"
