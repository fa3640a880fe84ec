from .base import Classifier, Detector, Segmenter, check_mask, check_patch, check_probs
from .external import (
    ExternalClassifier,
    ExternalDetector,
    ExternalSegmenter,
    WireClient,
    external_backend,
)
from .mock import MockClassifier, MockDetector, MockSegmenter


def mock_detector(tile, truth, sigma=0.0, fp_rate=0.0, seed=0):
    return MockDetector(truth, sigma, fp_rate, seed).detect(tile)


def mock_classifier(patch):
    return MockClassifier().classify(patch)


def mock_segmenter(patch):
    return MockSegmenter().segment(patch)
