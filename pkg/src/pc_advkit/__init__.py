"""Adversarial robustness toolkit for 3D point clouds.

Perturbations slide points along their estimated surface normals inside a
hard bound, a small residual network can be co-learned to boost transfer
to unseen classifiers, and latent-constraint adversarial training plus
simple input filters provide the defense side.
"""

from .attack import AttackConfig, AttackResult, fgsm_baseline, run_ita
from .defense import (
    AdvTrainConfig,
    DefenseConfig,
    adversarial_train,
    inter_class_loss,
    intra_class_loss,
    noise_along_normal,
    sor,
    srs,
)
from .errors import InvalidInputError, InvalidStateError, ParseError
from .geometry import (
    PointCloud,
    estimate_normals,
    knn,
    normalize_unit_ball,
)
from .harness import (
    ExperimentConfig,
    SyntheticDatasetSpec,
    config_from_json,
    generate_dataset,
    load_dataset,
    run_experiment,
    save_dataset,
)
from .kernels import BACKEND
from .metrics import chamfer, full_report, hausdorff, l2_norm_distance, plane_distortion
from .nn import (
    build_classifier,
    evaluate_accuracy,
    forward,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
)
from .transform import (
    AdvLearnConfig,
    AnalyticEnsemble,
    adversarial_learn_T,
    apply_analytic,
    apply_transform,
    adversarial_learn_T as learn_transform,
    identity_transform,
    load_transform,
    save_transform,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "fgsm_baseline",
    "run_ita",
    "AdvTrainConfig",
    "DefenseConfig",
    "adversarial_train",
    "inter_class_loss",
    "intra_class_loss",
    "noise_along_normal",
    "sor",
    "srs",
    "InvalidInputError",
    "InvalidStateError",
    "ParseError",
    "PointCloud",
    "estimate_normals",
    "knn",
    "normalize_unit_ball",
    "ExperimentConfig",
    "SyntheticDatasetSpec",
    "config_from_json",
    "generate_dataset",
    "load_dataset",
    "run_experiment",
    "save_dataset",
    "BACKEND",
    "chamfer",
    "full_report",
    "hausdorff",
    "l2_norm_distance",
    "plane_distortion",
    "build_classifier",
    "evaluate_accuracy",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "train_classifier",
    "AdvLearnConfig",
    "AnalyticEnsemble",
    "adversarial_learn_T",
    "apply_analytic",
    "apply_transform",
    "learn_transform",
    "identity_transform",
    "load_transform",
    "save_transform",
    "__version__",
]
