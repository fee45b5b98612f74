"""Segmentation quality control from Monte Carlo samples.

Voxel-wise and structure-wise uncertainty measures over sets of
segmentation samples, their correlation with accuracy, and
uncertainty-weighted group analysis, plus a synthetic phantom oracle,
a minimal NIfTI-1 reader/writer, and a command line front end.
"""

from .volumes import (
    LabelVolume,
    McSample,
    McSampleSet,
    ProbMapStack,
    StructureRegistry,
    ValidationError,
    VoxelGeometry,
    Violation,
    labels_to_onehot_probs,
    require_valid,
    structure_volume,
    validate_sample_set,
)
from .metrics import (
    StructureMetrics,
    StructureReport,
    UncertaintyVolume,
    consensus_segmentation,
    cv_volume,
    dice_score,
    mc_dice,
    mean_structure_uncertainty,
    sample_structure_volumes,
    structure_report,
    structure_uncertainty,
    voxel_uncertainty,
)
from .stats import (
    CohortTable,
    CollinearityError,
    GroupAnalysis,
    GroupModeRow,
    PearsonResult,
    RegressionResult,
    UncertaintyAccuracyCorrelations,
    correlate_uncertainty_accuracy,
    design_matrix,
    group_analysis,
    huber_fit,
    pearson,
    standardize_table,
    wls_fit,
)
from .synth import (
    NoiseSpec,
    PhantomSpec,
    ShapeSpec,
    contact_pair_phantom,
    graded_severities,
    make_cohort,
    make_phantom,
    registry_for_phantom,
    sample_mc,
)
from .nifti import (
    NiftiFormatError,
    NiftiHeaderSubset,
    NiftiImage,
    OrientationInfo,
    read_label_nifti,
    read_nifti,
    write_nifti,
)
from .io import (
    read_cohort_csv,
    read_noise_json,
    read_phantom_json,
    read_registry,
    read_report,
    read_sample_set,
    read_scan_manifest,
    write_cohort_csv,
    write_heatmap_volume,
    write_phantom_json,
    write_registry,
    write_report,
    write_scan_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "CohortTable",
    "CollinearityError",
    "GroupAnalysis",
    "GroupModeRow",
    "LabelVolume",
    "McSample",
    "McSampleSet",
    "NiftiFormatError",
    "NiftiHeaderSubset",
    "NiftiImage",
    "NoiseSpec",
    "OrientationInfo",
    "PearsonResult",
    "PhantomSpec",
    "ProbMapStack",
    "RegressionResult",
    "ShapeSpec",
    "StructureMetrics",
    "StructureRegistry",
    "StructureReport",
    "UncertaintyAccuracyCorrelations",
    "UncertaintyVolume",
    "ValidationError",
    "Violation",
    "VoxelGeometry",
    "consensus_segmentation",
    "contact_pair_phantom",
    "correlate_uncertainty_accuracy",
    "cv_volume",
    "design_matrix",
    "dice_score",
    "graded_severities",
    "group_analysis",
    "huber_fit",
    "labels_to_onehot_probs",
    "make_cohort",
    "make_phantom",
    "mc_dice",
    "mean_structure_uncertainty",
    "pearson",
    "read_cohort_csv",
    "read_label_nifti",
    "read_nifti",
    "read_noise_json",
    "read_phantom_json",
    "read_registry",
    "read_report",
    "read_sample_set",
    "read_scan_manifest",
    "registry_for_phantom",
    "require_valid",
    "sample_mc",
    "sample_structure_volumes",
    "standardize_table",
    "structure_report",
    "structure_uncertainty",
    "structure_volume",
    "validate_sample_set",
    "voxel_uncertainty",
    "wls_fit",
    "write_cohort_csv",
    "write_heatmap_volume",
    "write_nifti",
    "write_phantom_json",
    "write_registry",
    "write_report",
    "write_scan_manifest",
]
