"""Preprocessing-to-burden pipeline: patches, location prior, training, inference."""
from .inference import InferenceResult, burden_from_probs, infer_stage, infer_volume, postprocess
from .prior import LocationPrior, build_location_prior
from .scans import ScanSet, sample_patches, scanset_from_phantom, scanset_from_volumes
from .training import StageModel, TrainRun, stage_unet, train_stage

__all__ = [
    "InferenceResult", "burden_from_probs", "infer_stage", "infer_volume", "postprocess",
    "LocationPrior", "build_location_prior",
    "ScanSet", "sample_patches", "scanset_from_phantom", "scanset_from_volumes",
    "StageModel", "TrainRun", "stage_unet", "train_stage",
]
