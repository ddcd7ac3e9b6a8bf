"""Positive sampling on a single prediction grid.

A grid location is positive when its center lies inside at least one
ground-truth box (boundary inclusive); when it falls inside several, the
smallest-area box wins, with the lower box index breaking exact ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box, GridSpec

__all__ = ["AssignmentMap", "assign"]


@dataclass
class AssignmentMap:
    """Per-location labels and regression targets.

    labels: [H, W] class index, -1 for background.
    gt_index: [H, W] matched ground-truth index, -1 for background.
    targets: [4, H, W] LTRB offsets; zero at background locations.
    """

    labels: np.ndarray
    gt_index: np.ndarray
    targets: np.ndarray

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.gt_index >= 0))

    def positive_indices(self) -> np.ndarray:
        """Flat indices (row-major over H x W) of positive locations."""
        return np.flatnonzero(self.gt_index.reshape(-1) >= 0)


def assign(gt_boxes, grid: GridSpec) -> AssignmentMap:
    """Build the assignment map for ``gt_boxes``: a sequence of (Box, class)."""
    cx, cy = grid.centers()
    labels = np.full((grid.h, grid.w), -1, dtype=np.int64)
    gt_index = np.full((grid.h, grid.w), -1, dtype=np.int64)
    targets = np.zeros((4, grid.h, grid.w), dtype=np.float64)
    if not gt_boxes:
        return AssignmentMap(labels, gt_index, targets)

    best_area = np.full((grid.h, grid.w), np.inf)
    for idx, (box, cls) in enumerate(gt_boxes):
        if not isinstance(box, Box):
            box = Box(*box)
        inside = (
            (cx >= box.x_lt) & (cx <= box.x_rb) & (cy >= box.y_lt) & (cy <= box.y_rb)
        )
        take = inside & (box.area < best_area)
        best_area[take] = box.area
        labels[take] = int(cls)
        gt_index[take] = idx
        targets[0][take] = cx[take] - box.x_lt
        targets[1][take] = box.x_rb - cx[take]
        targets[2][take] = cy[take] - box.y_lt
        targets[3][take] = box.y_rb - cy[take]
    return AssignmentMap(labels, gt_index, targets)
