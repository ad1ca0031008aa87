"""Pseudo-label optimisation by cross-modal voting plus confidence filtering.

The teacher stream proposes a coarse label per unlabeled point and pixel.
A coarse label survives when the other modality votes for the same class or
when its own confidence exceeds ``t_conf`` (strictly); otherwise it is
deleted.  Surviving labels are never changed to a different class.
Everything here works on detached numpy arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import CorrespondenceSet, densify_on_image

DELETED = -1


def extract_coarse(probs: np.ndarray, atol: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Argmax label (ties to the lowest class) and its probability, per row."""
    probs = np.asarray(probs)
    sums = probs.sum(axis=-1)
    if probs.size and np.abs(sums - 1.0).max() > atol:
        raise ContractError("teacher outputs are not normalised probability rows")
    labels = probs.argmax(axis=-1)
    conf = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    return labels, conf


def optimize_3d(coarse_3d, projected_3d, conf_3d, t_conf: float) -> np.ndarray:
    """Keep the coarse 3D label on cross-modal agreement or confidence > t_conf."""
    coarse_3d = np.asarray(coarse_3d)
    keep = (np.asarray(projected_3d) == coarse_3d) | (np.asarray(conf_3d) > t_conf)
    return np.where(keep, coarse_3d, DELETED)


def optimize_2d(coarse_2d, densified_2d, conf_2d, t_conf: float, covered=None) -> np.ndarray:
    """Keep the coarse 2D label on agreement with the densified 3D vote or confidence > t_conf.

    Where ``covered`` is False there is no vote and only the confidence
    clause applies.
    """
    coarse_2d = np.asarray(coarse_2d)
    agree = np.asarray(densified_2d) == coarse_2d
    if covered is not None:
        agree &= np.asarray(covered, dtype=bool)
    keep = agree | (np.asarray(conf_2d) > t_conf)
    return np.where(keep, coarse_2d, DELETED)


def densify_2d_pseudo(probs_3d: np.ndarray, pairs: CorrespondenceSet, window: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Dense 2D vote map: argmax of window-pooled projected 3D probability rows.

    ``probs_3d`` holds one row per pair.  Returns (H, W) labels (DELETED
    where uncovered) and the coverage mask.
    """
    pooled, covered = densify_on_image(probs_3d, pairs, window)
    labels = np.where(covered, pooled.argmax(axis=-1), DELETED)
    return labels, covered


@dataclass
class PseudoLabelSet:
    """Per-pair arrays of one unlabeled view, all of length N_u."""

    coarse_3d: np.ndarray
    coarse_2d: np.ndarray
    projected_3d: np.ndarray  # the paired pixel's coarse 2D label carried to the point
    densified_2d: np.ndarray  # vote at the paired pixel from the densified 3D map
    conf_3d: np.ndarray
    conf_2d: np.ndarray
    optimized_3d: np.ndarray
    optimized_2d: np.ndarray


def optimize_pairs(probs_3d_pairs: np.ndarray, probs_2d_pairs: np.ndarray, pairs: CorrespondenceSet,
                   t_conf: float, window: int) -> PseudoLabelSet:
    """Run both optimisation rules over the paired elements of one view."""
    c3, g3 = extract_coarse(probs_3d_pairs)
    c2, g2 = extract_coarse(probs_2d_pairs)
    vote_map, covered = densify_2d_pseudo(probs_3d_pairs, pairs, window)
    dens = vote_map[pairs.rows, pairs.cols]
    return PseudoLabelSet(c3, c2, c2.copy(), dens, g3, g2,
                          optimize_3d(c3, c2, g3, t_conf),
                          optimize_2d(c2, dens, g2, t_conf, covered[pairs.rows, pairs.cols]))


def to_ignore(labels: np.ndarray, ignore_label: int) -> np.ndarray:
    """Map DELETED entries to the loss/metric ignore label."""
    labels = np.asarray(labels)
    return np.where(labels == DELETED, ignore_label, labels)


def summarize(coarse: np.ndarray, optimized: np.ndarray, n_classes: int) -> dict:
    """Retained/deleted counts per coarse class."""
    coarse, optimized = np.asarray(coarse).ravel(), np.asarray(optimized).ravel()
    deleted = optimized == DELETED
    return {"retained": np.bincount(coarse[~deleted], minlength=n_classes).tolist(),
            "deleted": np.bincount(coarse[deleted], minlength=n_classes).tolist()}


def write_debug_dump(path, per_view: dict[str, dict]) -> None:
    """One JSON document: {view key: {"3d": summary, "2d": summary}}."""
    with open(path, "w") as fh:
        json.dump(per_view, fh, indent=1, sort_keys=True)
