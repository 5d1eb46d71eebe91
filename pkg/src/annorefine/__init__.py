"""Speed-aware refinement of 3D box annotations on multi-LiDAR point clouds.

The pipeline runs in four stages, each usable on its own:

1. geometry: deskew per-point-timestamped scans from several sensors into a
   common-time superframe (``build_superframe``).
2. tracks: collapse a track of annotated boxes to along-path distance
   measurements (``boxes_to_world``, ``project_to_path``).
3. estimators: recover the object's speed from those measurements
   (``mhe_solve`` and the ``kf_filter``/``rts_smooth``/``naive_speed``
   baselines).
4. refine: split a superframe into per-sensor views of the object and emit
   one speed-corrected pseudo box per view (``refine_track``).

``synth`` generates multi-sensor scenarios with known ground truth to
exercise all of the above and scores results against that truth
(``evaluate``); ``io`` reads and writes the on-disk bundle layout the
command line uses.
"""

from .errors import (
    AlignmentError,
    AnnoRefineError,
    CalibrationMissingError,
    ConfigError,
    DataError,
    OutOfRangeError,
)
from .estimators import (
    EstimatorConfig,
    Prior,
    StateEstimate,
    default_prior,
    kf_filter,
    mhe_receding,
    mhe_solve,
    naive_speed,
    rts_smooth,
)
from .geometry import (
    PoseTrajectory,
    RigidTransform,
    Superframe,
    TimedPoint,
    build_superframe,
    interpolate_pose,
    motion_compensate,
    wrap_angle,
)
from .refine import (
    PseudoBox,
    RefineParams,
    ViewCluster,
    cluster_along_heading,
    collect_roi_points,
    generate_pseudo_boxes,
    refine_track,
    speed_compensate,
)
from .synth import (
    AgentSpec,
    GroundTruth,
    MetricsReport,
    Profile,
    ScenarioConfig,
    SensorSpec,
    corrupt_annotations,
    default_config,
    evaluate,
    generate_scenario,
    make_noisy_track,
)
from .tracks import (
    AnnotatedBox,
    AnnotatedTrack,
    KinematicState,
    MeasurementSeries,
    boxes_to_world,
    project_to_path,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "AnnoRefineError",
    "CalibrationMissingError",
    "ConfigError",
    "DataError",
    "OutOfRangeError",
    "EstimatorConfig",
    "Prior",
    "StateEstimate",
    "default_prior",
    "kf_filter",
    "mhe_receding",
    "mhe_solve",
    "naive_speed",
    "rts_smooth",
    "PoseTrajectory",
    "RigidTransform",
    "Superframe",
    "TimedPoint",
    "build_superframe",
    "interpolate_pose",
    "motion_compensate",
    "wrap_angle",
    "PseudoBox",
    "RefineParams",
    "ViewCluster",
    "cluster_along_heading",
    "collect_roi_points",
    "generate_pseudo_boxes",
    "refine_track",
    "speed_compensate",
    "AgentSpec",
    "GroundTruth",
    "MetricsReport",
    "Profile",
    "ScenarioConfig",
    "SensorSpec",
    "corrupt_annotations",
    "default_config",
    "evaluate",
    "generate_scenario",
    "make_noisy_track",
    "AnnotatedBox",
    "AnnotatedTrack",
    "KinematicState",
    "MeasurementSeries",
    "boxes_to_world",
    "project_to_path",
    "__version__",
]
