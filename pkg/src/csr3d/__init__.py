"""csr3d: cascaded linear shape regression in 3D shape space.

Reconstructs dense, posed, expressive 3D shapes from sparse 2D landmarks
with a cascade of closed-form linear regressors, plus a synthetic data
generator, error metrics, experiment harnesses, and bit-exact persistence.
"""

from .cascade import (
    CascadedShapeRegressor,
    TrainReport,
    disturb_landmarks,
    estimate_input_visibility,
    init_state,
    solve_stage,
    train_cascade,
)
from .exceptions import (
    CSR3DError,
    DegenerateGeometryError,
    FileFormatError,
    InitializationError,
    RankDeficiencyError,
    ValidationError,
)
from .geometry import (
    REGION_NAMES,
    LandmarkSet2D,
    LandmarkSpec,
    SimilarityTransform,
    apply_pose,
    estimate_camera,
    landmark_visibility,
    mask_to_reference,
    procrustes,
    project,
    rotation_yaw_pitch,
    vertex_normals,
)
from .metrics import ErrorMap, mae, mae_batch, npde, region_mae, vertex_regions
from .serialization import (
    export_obj,
    import_landmarks,
    load_dataset,
    load_model,
    load_obj,
    save_dataset,
    save_landmarks,
    save_model,
)
from .synthdata import (
    Dataset,
    SampleSpec,
    ShapeModel,
    build_shape_model,
    default_camera_scale,
    generate_dataset,
    sample_shape,
    split_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CascadedShapeRegressor",
    "TrainReport",
    "disturb_landmarks",
    "estimate_input_visibility",
    "init_state",
    "solve_stage",
    "train_cascade",
    "CSR3DError",
    "DegenerateGeometryError",
    "FileFormatError",
    "InitializationError",
    "RankDeficiencyError",
    "ValidationError",
    "REGION_NAMES",
    "LandmarkSet2D",
    "LandmarkSpec",
    "SimilarityTransform",
    "apply_pose",
    "estimate_camera",
    "landmark_visibility",
    "mask_to_reference",
    "procrustes",
    "project",
    "rotation_yaw_pitch",
    "vertex_normals",
    "ErrorMap",
    "mae",
    "mae_batch",
    "npde",
    "region_mae",
    "vertex_regions",
    "export_obj",
    "import_landmarks",
    "load_dataset",
    "load_model",
    "load_obj",
    "save_dataset",
    "save_landmarks",
    "save_model",
    "Dataset",
    "SampleSpec",
    "ShapeModel",
    "build_shape_model",
    "default_camera_scale",
    "generate_dataset",
    "sample_shape",
    "split_dataset",
    "__version__",
]
