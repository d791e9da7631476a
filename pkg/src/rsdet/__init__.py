"""Scaled ResNet-RS detectors: backbone, pyramid, heads, training and benchmarking."""

from .backbone import BackboneSpec, ResNetRS, build_resnet_rs
from .config import ConfigError, RunConfig, load_config
from .detectors import CascadeRCNNRS, DetectorConfig, RetinaNetRS, build_detector
from .evaluation import coco_ap, evaluate_detector
from .geometry import decode_boxes, encode_boxes, generate_anchors, iou_matrix, match_targets
from .postprocess import DetectionResult, nms
from .scaling import ScaleConfig, all_table_rows, scale_config
from .training import TrainRecipe, train

__all__ = [
    "BackboneSpec", "ResNetRS", "build_resnet_rs", "ConfigError", "RunConfig", "load_config", "CascadeRCNNRS",
    "DetectorConfig", "RetinaNetRS", "build_detector", "coco_ap", "evaluate_detector", "decode_boxes",
    "encode_boxes", "generate_anchors", "iou_matrix", "match_targets", "DetectionResult", "nms", "ScaleConfig",
    "all_table_rows", "scale_config", "TrainRecipe", "train",
]
