"""barkid: re-identification of textured physical surfaces from images.

Extracts global image signatures (keypoints, 128-d local descriptors,
TF-IDF bag-of-visual-words vectors), indexes them, and ranks database
images against a query by BoW distance, Lowe-ratio filtering, or
neighbor-consistency geometric verification.  Also builds
keypoint-aligned patch datasets from fiducial-registered image sets and
evaluates retrieval quality with P@K / R@K / PR / mAP.
"""

from . import (
    descriptor,
    detector,
    errors,
    evalbench,
    image,
    matching,
    registration,
    retrieval,
    vocabulary,
)

__version__ = "0.1.0"

__all__ = [
    "descriptor",
    "detector",
    "errors",
    "evalbench",
    "image",
    "matching",
    "registration",
    "retrieval",
    "vocabulary",
]
