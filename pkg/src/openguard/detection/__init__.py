"""Behavioural process classification, termination and timing."""
from .features import (BURST_NS, FEATURE_NAMES, STRIDE_NS, WINDOW_NS, FeatureVector, burst_max,
                       collect_features, extension_of)
from .models import (Classifier, ForestClassifier, HeuristicClassifier, load_model,
                     model_from_dict)
from .pipeline import (DetectionTimings, Detector, Incident, Label, Verdict,
                       accuracy_against_labels, classify, kill_process, measure_detection,
                       write_incident_log)

__all__ = [
    "BURST_NS", "FEATURE_NAMES", "STRIDE_NS", "WINDOW_NS", "Classifier", "DetectionTimings",
    "Detector", "FeatureVector", "ForestClassifier", "HeuristicClassifier", "Incident", "Label",
    "Verdict", "accuracy_against_labels", "burst_max", "classify", "collect_features",
    "extension_of", "kill_process", "load_model", "measure_detection", "model_from_dict",
    "write_incident_log",
]
