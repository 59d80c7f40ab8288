"""3D midline reconstruction from camera triplets by differentiable rendering.

A slender deformable body is modelled as a Bishop-frame space curve
(curvature field + length + one anchored vertex), projected through a
three-camera pinhole rig with shared relative shifts, rasterized into
tapered super-Gaussian blobs, and fitted to grayscale image triplets by
gradient descent on a masked photometric loss with per-vertex multi-view
agreement scoring.
"""

from .camera import (
    CameraModel,
    CameraTriplet,
    ProjectionError,
    TripletShifts,
    load_calibration,
    project_curve,
    project_point,
    save_calibration,
    shifts_for_camera,
)
from .config import ConfigRangeError, RunConfig, load_config
from .curvemodel import (
    CentreShiftConfig,
    CurveConstraints,
    CurveDivergedError,
    CurveState,
    bishop_to_frenet,
    build_state,
    centre_shift,
    integrate_curve,
    recompute_state,
    sample_start_index,
)
from .diffengine import (
    FDReport,
    GradientError,
    GradientReport,
    ParameterSet,
    finite_difference_check,
    gradient,
)
from .losses import (
    FrameSnapshot,
    LossBreakdown,
    LossWeights,
    NonFiniteLossError,
    intersection_loss,
    pixel_loss,
    scores_loss,
    smoothness_loss,
    temporal_loss,
    total_loss,
)
from .optimizer import (
    AblationToggles,
    DivergenceError,
    FrameInputs,
    FrameSolution,
    OptimizerConfig,
    PipelineSettings,
    ProgressEvent,
    init_first_frame,
    optimize_frame,
    process_sequence,
)
from .renderer import (
    RenderLimits,
    RenderParams,
    RenderedTriplet,
    blob_pixel,
    render,
    render_fields,
    taper_params,
)
from .scoring import (
    MASK_FLOOR,
    MaskSet,
    ScoreProfile,
    apply_masks,
    build_masks,
    raw_scores,
    taper_and_normalize,
)
from .synthgen import (
    DistractorSpec,
    SceneSpec,
    SequenceSpec,
    SyntheticScene,
    SyntheticSequence,
    generate_scene,
    generate_sequence,
    write_clip,
)

__version__ = "0.1.0"
