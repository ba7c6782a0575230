# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Pixel- and spatial-level transforms and per-(label, cell type) dataset balancing

import random
import logging
import collections

import cv2
import numpy as np
import albumentations as A

from .data import ConfigSet, RunConfig
from .datasets import (CellRecord, NON_DEFECTIVE, DEFECTIVE, LABELS, CELL_TYPES,
                       MONOCRYSTALLINE, POLYCRYSTALLINE, ELONGATED, BUSBAR3, BUSBAR5, count_dict)

logger = logging.getLogger(__name__)

PIXEL_KINDS = ('random_contrast', 'random_gamma', 'random_brightness', 'blur', 'jpeg_compression',
               'solarize', 'equalize', 'iso_noise', 'random_shadow', 'clahe')
SPATIAL_KINDS = ('flip_lr', 'flip_ud', 'perspective', 'rotate', 'grid_distortion', 'transpose',
                 'sharpen', 'optical_distortion', 'horizontal_flip', 'vertical_flip')
TRANSFORM_KINDS = PIXEL_KINDS + SPATIAL_KINDS

# Exact array flips, applied without resampling
DIHEDRAL_KINDS = ('flip_lr', 'flip_ud', 'transpose', 'horizontal_flip', 'vertical_flip')

# albumentations transforms that only accept 8-bit input
_UINT8_KINDS = ('jpeg_compression', 'equalize', 'iso_noise', 'clahe', 'random_shadow')

# Segmentation balancing target: one total spread over the five cell types
SEGMENTATION_TOTAL = 11414


@RunConfig.registerSection
class AugmentPolicy(ConfigSet):
    """ Balancing policy

    Attributes:
        targets (dict): 'label/cell_type' -> target record count; groups
            not listed keep their current count
        allowed (list): TransformKind names to draw chains from
        max_chain (int): maximum transforms per augmented image (at least 1)
        seed (int): seed for sampling and transform parameters
        limits (dict): transform parameter ranges
    """
    SECTION = 'augmentation'
    DEFAULTS = {'targets': {},
                'allowed': list(TRANSFORM_KINDS),
                'max_chain': 2,
                'seed': 0,
                'limits': {'rotation': 15.0,
                           'brightness': 0.2,
                           'contrast': 0.2,
                           'blur': 5,
                           'gamma': [80, 120],
                           'perspective': [0.02, 0.05]}}

    def validate(self):
        self._require(isinstance(self.targets, dict), 'targets', 'must be a mapping')
        for key, count in self.targets.items():
            parts = str(key).split('/')
            self._require(len(parts) == 2 and parts[0] in LABELS and parts[1] in CELL_TYPES, 'targets',
                          'key {:s} must look like label/cell_type'.format(repr(key)))
            self._require(isinstance(count, int) and count >= 0, 'targets',
                          'target for {:s} must be a non-negative integer'.format(str(key)))
        self._require(len(self.allowed) > 0 and all([k in TRANSFORM_KINDS for k in self.allowed]),
                      'allowed', 'must be a non-empty list of transform kinds')
        self._require(isinstance(self.max_chain, int) and self.max_chain >= 1, 'max_chain', 'must be >= 1')
        self._require(self.limits.get('blur', 3) >= 3, 'limits', 'blur kernel must be >= 3')


    def target(self, label, cell_type, default=None):
        return self.targets.get(policy_key(label, cell_type), default)


    def targetItems(self):
        """ ((label, cell_type), count) pairs """
        return [(tuple(k.split('/')), v) for k, v in sorted(self.targets.items())]


def policy_key(label, cell_type):
    return '{:s}/{:s}'.format(label, cell_type)


def elpv_policy(seed=0):
    """ 1500 cells per (class, cell type) on ELPV, 6000 in total """
    targets = {}
    for label in LABELS:
        for ctype in (MONOCRYSTALLINE, POLYCRYSTALLINE):
            targets[policy_key(label, ctype)] = 1500
    return AugmentPolicy(targets=targets, seed=seed)


def tecnalia_policy(seed=0):
    """ Panel-annotated cells: non-defective busbar types shrink to 1000,
    defective types grow to roughly 700 (5067 cells in total) """
    targets = {policy_key(NON_DEFECTIVE, ELONGATED): 984,
               policy_key(NON_DEFECTIVE, BUSBAR3): 1000,
               policy_key(NON_DEFECTIVE, BUSBAR5): 1000,
               policy_key(DEFECTIVE, ELONGATED): 694,
               policy_key(DEFECTIVE, BUSBAR3): 708,
               policy_key(DEFECTIVE, BUSBAR5): 681}
    return AugmentPolicy(targets=targets, seed=seed)


def segmentation_policy(total=SEGMENTATION_TOTAL, cell_types=CELL_TYPES, seed=0):
    """ Non-defective targets spreading total evenly over cell types
    (the first total % len(cell_types) types get one extra record) """
    n = len(cell_types)
    targets = {}
    for i, ctype in enumerate(cell_types):
        targets[policy_key(NON_DEFECTIVE, ctype)] = total // n + (1 if i < total % n else 0)
    return AugmentPolicy(targets=targets, allowed=['flip_lr', 'flip_ud', 'transpose'], seed=seed)


def segmentation_source_policy(seed=0):
    """ Segmentation targets per source: ELPV grows from 1508 to 2692 cells,
    the panel-annotated set from 4885 to 8722 (11414 in total) """
    targets = {policy_key(NON_DEFECTIVE, MONOCRYSTALLINE): 1346,
               policy_key(NON_DEFECTIVE, POLYCRYSTALLINE): 1346,
               policy_key(NON_DEFECTIVE, ELONGATED): 2907,
               policy_key(NON_DEFECTIVE, BUSBAR3): 2907,
               policy_key(NON_DEFECTIVE, BUSBAR5): 2908}
    return AugmentPolicy(targets=targets, allowed=['flip_lr', 'flip_ud', 'transpose'], seed=seed)


def _build_transform(kind, limits, params):
    """ albumentations transform for a kind; params pin exact values """
    p = dict(params)
    if kind == 'random_contrast':
        c = p.get('delta', None)
        lim = (c, c) if c is not None else limits['contrast']
        return A.RandomBrightnessContrast(brightness_limit=(0.0, 0.0), contrast_limit=lim, p=1.0)
    if kind == 'random_brightness':
        b = p.get('delta', None)
        lim = (b, b) if b is not None else limits['brightness']
        return A.RandomBrightnessContrast(brightness_limit=lim, contrast_limit=(0.0, 0.0), p=1.0)
    if kind == 'random_gamma':
        g = p.get('gamma', None)
        lim = (g, g) if g is not None else tuple(limits['gamma'])
        return A.RandomGamma(gamma_limit=lim, p=1.0)
    if kind == 'blur':
        k = int(p.get('kernel', limits['blur']))
        return A.Blur(blur_limit=(3, max(k, 3)), p=1.0)
    if kind == 'jpeg_compression':
        return A.ImageCompression(p=1.0)
    if kind == 'solarize':
        return A.Solarize(p=1.0)
    if kind == 'equalize':
        return A.Equalize(p=1.0)
    if kind == 'iso_noise':
        return A.ISONoise(p=1.0)
    if kind == 'random_shadow':
        return A.RandomShadow(p=1.0)
    if kind == 'clahe':
        return A.CLAHE(p=1.0)
    if kind == 'perspective':
        return A.Perspective(scale=tuple(limits['perspective']), p=1.0)
    if kind == 'rotate':
        a = p.get('angle', None)
        lim = (a, a) if a is not None else limits['rotation']
        return A.Rotate(limit=lim, border_mode=cv2.BORDER_REFLECT_101, p=1.0)
    if kind == 'grid_distortion':
        return A.GridDistortion(p=1.0)
    if kind == 'sharpen':
        return A.Sharpen(p=1.0)
    if kind == 'optical_distortion':
        return A.OpticalDistortion(p=1.0)
    raise ValueError('Unknown transform kind: {:s}'.format(repr(kind)))


def _flip(arr, kind):
    if kind in ('flip_lr', 'horizontal_flip'):
        return np.fliplr(arr)
    if kind in ('flip_ud', 'vertical_flip'):
        return np.flipud(arr)
    if kind == 'transpose':
        return arr.T
    raise ValueError('Unknown flip kind: {:s}'.format(repr(kind)))


def _seed_of(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2 ** 31 - 1))
    return int(rng)


def _to_gray(out):
    if out.ndim == 2:
        return out
    if np.array_equal(out[:, :, 0], out[:, :, 1]) and np.array_equal(out[:, :, 0], out[:, :, 2]):
        return out[:, :, 0]
    return out.mean(axis=2)


def _run_albumentations(img, kind, seed, limits, params, mask=None):
    t = _build_transform(kind, limits, params)
    if kind in _UINT8_KINDS:
        src = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        src = np.clip(img, 0.0, 1.0).astype(np.float32)
    src = np.ascontiguousarray(np.repeat(src[:, :, None], 3, axis=2))

    try:
        aug = A.Compose([t], seed=seed)
    except TypeError:
        aug = A.Compose([t])

    # older albumentations releases draw from the global generators; their
    # state is restored once the transform has run
    py_state, np_state = random.getstate(), np.random.get_state()
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    try:
        if mask is not None:
            res = aug(image=src, mask=np.ascontiguousarray(mask.astype(np.uint8)))
            out_mask = (np.asarray(res['mask']) > 0).astype(np.uint8)
        else:
            res = aug(image=src)
            out_mask = None
    finally:
        random.setstate(py_state)
        np.random.set_state(np_state)
    out = _to_gray(np.asarray(res['image'], dtype=np.float64))
    if kind in _UINT8_KINDS:
        out = out / 255.0
    return np.clip(out, 0.0, 1.0), out_mask


def apply_transform(img, kind, rng=0, limits=None, mask=None, **params):
    """ Apply one TransformKind to a GrayImage

    Args:
        img: GrayImage
        kind (str): transform name (see TRANSFORM_KINDS)
        rng: seed (int) or np.random.Generator drawing the transform parameters
        limits (dict): parameter ranges, AugmentPolicy defaults if None
        mask: optional BinaryMask transformed jointly with the image
        **params: pinned parameters: delta (brightness/contrast), gamma, angle, kernel

    Returns: GrayImage of identical shape, or (GrayImage, mask) if mask is given
    """
    if kind not in TRANSFORM_KINDS:
        raise ValueError('Unknown transform kind: {:s}'.format(repr(kind)))
    img = np.asarray(img, dtype=np.float64)
    if limits is None:
        limits = AugmentPolicy.DEFAULTS['limits']

    if kind in DIHEDRAL_KINDS:
        out = np.ascontiguousarray(_flip(img, kind))
        out_mask = None if mask is None else np.ascontiguousarray(_flip(np.asarray(mask), kind))
    else:
        out, out_mask = _run_albumentations(img, kind, _seed_of(rng), limits, params,
                                            mask=None if mask is None else np.asarray(mask))
        if out.shape != img.shape:
            out = cv2.resize(out, (img.shape[1], img.shape[0]), interpolation=cv2.INTER_LINEAR)
    if mask is not None:
        return out, out_mask
    return out


def apply_chain(img, chain, mask=None, limits=None):
    """ Materialize a recorded transform chain

    Args:
        img: source GrayImage
        chain: list of (kind, seed) pairs, applied in order
        mask: optional BinaryMask transformed jointly
        limits (dict): parameter ranges

    Returns: GrayImage, or (GrayImage, mask) if mask is given
    """
    out = np.asarray(img, dtype=np.float64)
    m = None if mask is None else np.asarray(mask).astype(np.uint8)
    for kind, seed in chain:
        if m is not None:
            out, m = apply_transform(out, kind, seed, limits=limits, mask=m)
        else:
            out = apply_transform(out, kind, seed, limits=limits)
    if mask is not None:
        return out, m
    return out


def dihedral_chain(index):
    """ Flip chain for one of the eight dihedral-group elements (index 0 is identity) """
    if not 0 <= int(index) < 8:
        raise ValueError('Dihedral index must lie in [0, 7], got {:s}'.format(str(index)))
    chain = []
    if index & 4:
        chain.append(('transpose', 0))
    if index & 2:
        chain.append(('flip_ud', 0))
    if index & 1:
        chain.append(('flip_lr', 0))
    return chain


def dihedral(img, index, mask=None):
    """ Apply a dihedral-group element (flips and transpose) to an image and optional mask """
    return apply_chain(img, dihedral_chain(index), mask=mask)


def _group_records(records):
    groups = collections.OrderedDict()
    for i, r in enumerate(records):
        groups.setdefault((r.label, r.cell_type), []).append(i)
    return groups


def _augmented(source, chain, counter, limits=None):
    return CellRecord(source=source, chain=chain, chain_limits=limits, defect_likelihood=source.defect_likelihood,
                      label=source.label, cell_type=source.cell_type, origin='augmented',
                      source_id='{:s}#aug{:05d}'.format(source.source_id, counter))


def _resample(records, policy, make_chain):
    groups = _group_records(records)
    keys = list(groups.keys())
    for (label, ctype), _ in policy.targetItems():
        if (label, ctype) not in groups:
            keys.append((label, ctype))

    rng = np.random.default_rng(policy.seed)
    keep = set(range(len(records)))
    extra = []
    counter = 0
    for key in sorted(keys):
        idx = groups.get(key, [])
        target = policy.target(key[0], key[1], default=len(idx))
        if target < 0:
            raise ValueError('Target below zero for {:s}'.format(policy_key(*key)))
        if target > len(idx):
            if len(idx) == 0:
                raise ValueError('No originals for {:s} but target is {:d}'.format(policy_key(*key), target))
            picks = rng.integers(0, len(idx), size=target - len(idx))
            for p in picks:
                extra.append(_augmented(records[idx[int(p)]], make_chain(rng), counter, policy.limits))
                counter += 1
        elif target < len(idx):
            drop = rng.permutation(len(idx))[target:]
            for d in drop:
                keep.discard(idx[int(d)])
        logger.debug('Balanced {:s}: {:d} -> {:d}'.format(policy_key(*key), len(idx), target))

    return [records[i] for i in range(len(records)) if i in keep] + extra


def balance(records, policy):
    """ Grow or shrink each (label, cell type) group to its policy target.

    Groups are grown by drawing originals uniformly and attaching a random
    chain of 1..max_chain allowed transforms (materialized lazily), and
    shrunk by seeded subsampling. Originals keep their input order and the
    augmented records follow them.

    Args:
        records (list): CellRecord list with labels and cell types
        policy (AugmentPolicy): targets and transforms

    Returns: balanced record list
    """
    allowed = list(policy.allowed)

    def _chain(rng):
        n = int(rng.integers(1, policy.max_chain + 1))
        return [(allowed[int(rng.integers(0, len(allowed)))], int(rng.integers(0, 2 ** 31 - 1))) for _ in range(n)]

    out = _resample(records, policy, _chain)
    logger.info('Balanced {:d} records into {:d}'.format(len(records), len(out)))
    return out


def balance_for_segmentation(records, policy):
    """ Balance non-defective cells per cell type using only flips, mirrors
    and transposes (non-identity dihedral copies)

    Args:
        records (list): non-defective CellRecords
        policy (AugmentPolicy): per-type targets, e.g. segmentation_policy()

    Returns: balanced record list
    """
    for r in records:
        if r.label != NON_DEFECTIVE:
            raise ValueError('Segmentation data must be non-defective, got {:s}'.format(repr(r)))

    def _chain(rng):
        return dihedral_chain(int(rng.integers(1, 8)))

    out = _resample(records, policy, _chain)
    logger.info('Balanced {:d} non-defective records into {:d} for segmentation'.format(len(records), len(out)))
    return out


def summarize_balance(before, after):
    """ Per-(label, cell type) counts before and after balancing as dict rows """
    b, a = count_dict(before), count_dict(after)
    rows = []
    for key in sorted(set(b.keys()) | set(a.keys())):
        rows.append({'label': key[0], 'cell_type': key[1], 'original': b.get(key, 0), 'processed': a.get(key, 0)})
    return rows
