"""Tiled canonical-space volumetric segmentation pipeline."""

from .registration import (
    AffineTransform,
    RegistrationConfig,
    compose,
    estimate_affine,
    invert,
    load_transform,
    ncc_similarity,
    save_transform,
)
from .volume import Grid, LabelVolume, Volume, resample, same_grid
from .nifti import load_nifti, store_nifti
from .harmonize import (
    BrainMask,
    HarmonizationFit,
    HarmonizationModel,
    build_mask,
    build_model,
    sorted_vector,
    znormalize,
)
from .tiling import (
    SubSpace,
    TileLattice,
    coverage_map,
    extract_tile,
    make_lattice,
    preset_lattice,
)
from .fusion import VoteTally, fuse, vote_counts
from .atlas_select import PcaManifold, build_manifold, select
from .segmenter import (
    SegmenterSpec,
    TileTask,
    segment_external,
    segment_knn,
    segment_prior,
)
from .metrics import (
    LabelReport,
    best_within_delta,
    compare_labels,
    dsc,
    mds_order,
    surface_distance,
    wilcoxon_signed_rank,
)
from .phantom import PhantomSpec, make_phantom
from .model_store import fit_model_dir, load_model_dir
from .pipeline import (
    PipelineConfig,
    SegmentResult,
    run_batch,
    run_evaluate,
    run_segment,
)

__version__ = "0.1.0"
