from .convnet import ConvExtractor, train_extractor
from .framework import (FEATURE_NAMES, LIPID, SAMPLE, SegmentationError, SegmentationModel,
                        StageModel, ThresholdBaseline, TrainConfig, apply_foreground_filter,
                        extract_features, fit_threshold_baseline, segment_slices, segment_stack,
                        split_train_val, threshold_segment, train_framework, train_stage,
                        uniform_subset)

__all__ = ["ConvExtractor", "train_extractor", "FEATURE_NAMES", "LIPID", "SAMPLE",
           "SegmentationError", "SegmentationModel", "StageModel", "ThresholdBaseline",
           "TrainConfig", "apply_foreground_filter", "extract_features", "fit_threshold_baseline",
           "segment_slices", "segment_stack", "split_train_val", "threshold_segment",
           "train_framework", "train_stage", "uniform_subset"]
