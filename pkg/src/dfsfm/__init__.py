"""Detector-free structure from motion: quantized coarse mapping followed by
multi-view track refinement and robust geometric refinement."""

from .bundle import BAConfig, BAReport, bundle_adjust
from .config import PipelineConfig, load_config
from .errors import (
    CheiralityError,
    DegenerateGeometryError,
    DegenerateMotionError,
    EmptyInputError,
    InitializationError,
    InputMissingError,
    InsufficientDataError,
    NoConsensusError,
    SfMError,
)
from .evaluation import EvalReport, eval_pose_auc, eval_triangulation
from .geo_refine import RefineConfig, adjust_topology, filter_outliers, refine_geometry, reproject_keypoints
from .geometry import (
    CameraIntrinsics,
    Observation2D,
    Point3D,
    Pose,
    project,
    solve_pnp_ransac,
    solve_relative_pose_ransac,
    triangulate_multiview,
)
from .mapper import MapperConfig, register_image, run_incremental, select_init_pair, triangulate_tracks
from .matching import (
    QuantizedMatchPair,
    RawMatchPair,
    build_tracks,
    coarse_grid_match,
    quantize_matches,
    verify_pair_geometric,
)
from .model import CoarseTrack, FeatureTrack, SceneModel
from .pipeline import run_pipeline
from .track_refine import (
    PatchFeature,
    PatchHeatmap,
    RefinerConfig,
    correlate_heatmap,
    extract_patch_feature,
    heatmap_stats,
    refine_track,
    refine_tracks,
    select_reference_view,
)

__version__ = "0.1.0"
