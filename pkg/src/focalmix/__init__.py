"""Semi-supervised 3D lesion detection on synthetic volumes.

The package implements a desk-scale detection pipeline end to end: a
procedural scan generator, multi-level cubic anchors, the 48-element cube
symmetry group, a soft-target focal loss, a hand-written convolutional
detector, ensemble target prediction and two-level MixUp for unlabeled
data, and FROC/CPM evaluation.
"""

import os as _os

# Cap numerical-backend threads before numpy first loads.  FOCALMIX_THREADS=1
# gives bit-reproducible results across machines; unset leaves the backends
# at their defaults.  Only effective if this package is imported before
# anything else touches numpy (always true for the command-line tools).
_threads = _os.environ.get("FOCALMIX_THREADS")
if _threads:
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

__version__ = "0.1.0"

from .anchors import (  # noqa: E402
    NEGATIVE_IOU,
    POSITIVE_IOU,
    AnchorGrid,
    AnchorTargets,
    Detection,
    LevelSpec,
    assign_targets,
    build_anchor_grid,
    decode_box,
    encode_box,
    iou3d,
    iou3d_matrix,
    nms,
    read_detections,
    write_detections,
)
from .exceptions import ConfigurationError, DataError, DivergenceError  # noqa: E402
from .loss import (  # noqa: E402
    FocalParams,
    detection_loss,
    focal_loss,
    smooth_l1,
    soft_focal_loss,
)
from .metrics import (  # noqa: E402
    CPM_RATES,
    FrocCurve,
    cpm,
    froc,
    match_detections,
    recall_at_rate,
    write_cpm_json,
    write_froc_csv,
)
from .model import (  # noqa: E402
    DetectorConfig,
    ModelState,
    adam_step,
    backward,
    cosine_lr,
    forward,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .pipeline import (  # noqa: E402
    SSLConfig,
    TrainingSample,
    detect_scan,
    evaluate_scans,
    image_mixup,
    object_mixup,
    predict_targets,
    sample_mix_weight,
    select_unlabeled,
    sharpen,
    train,
)
from .rng import make_rng  # noqa: E402
from .transforms import (  # noqa: E402
    CubeTransform,
    apply_to_anchor_index,
    apply_to_box,
    apply_to_volume,
    compose,
    enumerate_group,
    inverse,
)
from .volume import (  # noqa: E402
    Box3D,
    GenConfig,
    LabeledScan,
    Volume3D,
    crop_patch,
    generate_scan,
    normalize_patch,
    read_scan,
    write_scan,
)

__all__ = [
    "__version__",
    # volume
    "Volume3D", "Box3D", "LabeledScan", "GenConfig",
    "generate_scan", "crop_patch", "normalize_patch", "read_scan", "write_scan",
    # anchors
    "LevelSpec", "AnchorGrid", "AnchorTargets", "Detection",
    "POSITIVE_IOU", "NEGATIVE_IOU",
    "build_anchor_grid", "iou3d", "iou3d_matrix", "assign_targets",
    "encode_box", "decode_box",
    "nms", "read_detections", "write_detections",
    # transforms
    "CubeTransform", "enumerate_group", "compose", "inverse",
    "apply_to_volume", "apply_to_box", "apply_to_anchor_index",
    # loss
    "FocalParams", "soft_focal_loss", "focal_loss", "smooth_l1", "detection_loss",
    # model
    "DetectorConfig", "ModelState", "init_model", "forward", "backward",
    "adam_step", "cosine_lr", "parameter_count", "save_checkpoint", "load_checkpoint",
    # pipeline
    "SSLConfig", "TrainingSample", "sharpen", "predict_targets", "sample_mix_weight",
    "image_mixup", "object_mixup", "detect_scan", "select_unlabeled",
    "evaluate_scans", "train",
    # metrics
    "CPM_RATES", "FrocCurve", "match_detections", "froc", "recall_at_rate", "cpm",
    "write_froc_csv", "write_cpm_json",
    # misc
    "make_rng", "ConfigurationError", "DataError", "DivergenceError",
]
