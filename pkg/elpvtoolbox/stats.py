# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Metric helper functions shared by the evaluation code

import math

import numpy as np


def mean(x):
    """ Arithmetic mean of a sequence (nan for an empty one) """
    x = [float(a) for a in x]
    if len(x) == 0:
        return float('nan')
    return sum(x) / float(len(x))


def sd(x):
    """ Population standard deviation of a sequence """
    xm = mean(x)
    return math.sqrt(sum([(float(xi) - xm)**2 for xi in x]) / float(len(x)))


def box_iou(a, b):
    """ Intersection over union of two boxes

    Args:
        a, b: BoundingBox objects or (x_min, y_min, x_max, y_max) sequences

    Returns: IoU as float in [0, 1]
    """
    ax0, ay0, ax1, ay1 = [float(v) for v in _coords(a)]
    bx0, by0, bx1, by1 = [float(v) for v in _coords(b)]
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def pairwise_iou(boxes_a, boxes_b):
    """ IoU matrix between two box lists, shape (len(a), len(b)) """
    out = np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = box_iou(a, b)
    return out


def mask_iou(a, b):
    """ IoU of two binary masks; two empty masks count as a perfect match """
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / float(union)


def interpolated_ap(recall, precision):
    """ Every-point interpolated average precision: area under the
    precision envelope (precision made monotonically non-increasing)

    Args:
        recall: cumulative recall values, non-decreasing
        precision: matching precision values

    Returns: AP as float in [0, 1]
    """
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _coords(box):
    if hasattr(box, 'toList'):
        return box.toList()
    return list(box)
