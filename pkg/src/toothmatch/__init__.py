"""Order-aware tooth instance matching, 2D-3D fusion arithmetic and segmentation metrics on dental meshes."""

from .cmr import InstanceDecoder, InstancePrediction, derive_centers, predict_instances
from .encoder import DualStreamEncoder, EncoderWeights, encode
from .exceptions import DegenerateInputError, MeshFormatError, SchemaError, ShapeError, ToothMatchError
from .fhm import GroundTruth, MatchConfig, OrderAwareMatcher, fhm_match, hungarian
from .losses import LossBreakdown, compute_losses, total_loss
from .mesh import LabeledMesh, compute_geometry, load_mesh, save_mesh, scene_frame
from .metrics import MetricReport, mean_iou, overall_accuracy, pairwise_confusion
from .model import ModelWeights
from .prg import GatingParams, ResidualGatingFusion, fuse
from .projection import bilinear_sample, guidance_map, project_occlusal, rescale_coords
from .synth import ArchSpec, PerturbSpec, generate_arch, perfect_prediction, perturb

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "DegenerateInputError", "DualStreamEncoder", "EncoderWeights", "GatingParams", "GroundTruth",
    "InstanceDecoder", "InstancePrediction", "LabeledMesh", "LossBreakdown", "MatchConfig", "MeshFormatError",
    "MetricReport", "ModelWeights", "OrderAwareMatcher", "PerturbSpec", "ResidualGatingFusion", "SchemaError",
    "ShapeError", "ToothMatchError", "bilinear_sample", "compute_geometry", "compute_losses", "derive_centers",
    "encode", "fhm_match", "fuse", "generate_arch", "guidance_map", "hungarian", "load_mesh", "mean_iou",
    "overall_accuracy", "pairwise_confusion", "perfect_prediction", "perturb", "predict_instances",
    "project_occlusal", "rescale_coords", "save_mesh", "scene_frame", "total_loss",
]
