"""Backend contracts: what detectors, classifiers and segmenters accept and return.

Every backend has an ``identity`` string recorded in run manifests.

* detector:   ``detect(tile) -> list[CircleDetection] | HeadMaps`` in tile
  pixel coordinates at the tile's read level
* classifier: ``classify(patch) -> (5,) probabilities`` in ``CLASS_ORDER``
* segmenter:  ``segment(patch) -> bool mask`` with the patch's height/width
"""

from typing import Protocol, runtime_checkable

import numpy as np

from ..errors import ProtocolError
from ..taxonomy import NUM_CLASSES

PROB_TOLERANCE = 1e-6


@runtime_checkable
class Detector(Protocol):
    identity: str

    def detect(self, tile): ...


@runtime_checkable
class Classifier(Protocol):
    identity: str

    def classify(self, patch): ...


@runtime_checkable
class Segmenter(Protocol):
    identity: str

    def segment(self, patch): ...


def check_patch(patch):
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.dtype != np.uint8:
        raise ProtocolError(
            f"expected uint8 HxWx3 patch, got {patch.dtype} {patch.shape}", field="pixels"
        )
    return patch


def check_probs(probs):
    """Validate a classifier output; raise :class:`ProtocolError` naming ``probs``."""
    try:
        p = np.asarray(probs, dtype=np.float64)
    except (TypeError, ValueError):
        raise ProtocolError("not a numeric vector", field="probs") from None
    if p.shape != (NUM_CLASSES,):
        raise ProtocolError(f"expected {NUM_CLASSES} probabilities, got shape {p.shape}", field="probs")
    if not np.isfinite(p).all() or (p < 0).any():
        raise ProtocolError("probabilities must be finite and non-negative", field="probs")
    if abs(p.sum() - 1.0) > PROB_TOLERANCE:
        raise ProtocolError(f"probabilities sum to {p.sum():.9f}", field="probs")
    return p


def check_mask(mask, patch_shape):
    m = np.asarray(mask)
    if m.shape != tuple(patch_shape[:2]):
        raise ProtocolError(f"mask shape {m.shape} != patch shape {patch_shape[:2]}", field="mask")
    return m.astype(bool)
