# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Dataset records, loaders, splits and the synthetic EL generator

import os
import math
import logging
import collections
import xml.etree.ElementTree as ET

import cv2
import numpy as np
import pandas as pd
from PIL import Image
from skimage import draw

from .data import ConfigSet, ConfigError, RunConfig
from .stats import box_iou
from .imaging import BoundingBox, read_gray_png, write_gray_png, expand_box, crop_resize

logger = logging.getLogger(__name__)

# Binary labels
NON_DEFECTIVE = 'non_defective'
DEFECTIVE = 'defective'
LABELS = (NON_DEFECTIVE, DEFECTIVE)

# Cell types
MONOCRYSTALLINE = 'monocrystalline'
POLYCRYSTALLINE = 'polycrystalline'
ELONGATED = 'elongated'
BUSBAR3 = 'busbar3'
BUSBAR5 = 'busbar5'
CELL_TYPES = (MONOCRYSTALLINE, POLYCRYSTALLINE, ELONGATED, BUSBAR3, BUSBAR5)

# Record origins
ORIGINS = ('elpv', 'tecnalia', 'synthetic', 'augmented')

# Expert defect likelihoods as published, and the values they are snapped to
LIKELIHOODS = (0.0, 0.33, 0.66, 1.0)
_LIKELIHOOD_ALIASES = [(0.0, 0.0), (1.0 / 3.0, 0.33), (0.33, 0.33),
                       (2.0 / 3.0, 0.66), (0.66, 0.66), (1.0, 1.0)]

ELPV_CELL_SIZE = (300, 300)
ELPV_TYPE_NAMES = {'mono': MONOCRYSTALLINE, 'poly': POLYCRYSTALLINE}

MAX_OVERLAP_IOU = 0.2
ANOMALY_KINDS = ('crack', 'dark_region', 'dead_corner')
MAX_ANOMALY_FRACTION = 0.4

INDEX_COLUMNS = ['path', 'defect_likelihood', 'label', 'cell_type', 'origin', 'source_id', 'lineage']


def snap_likelihood(value):
    """ Map a defect likelihood onto the discrete set (0.0, 0.33, 0.66, 1.0).
    Accepts both the two-digit and the exact thirds spelling.

    Raises: ValueError for values outside the set
    """
    v = float(value)
    for alias, snapped in _LIKELIHOOD_ALIASES:
        if abs(v - alias) < 1e-3:
            return snapped
    raise ValueError('Defect likelihood {:s} is not one of {:s}'.format(repr(value), str(LIKELIHOODS)))


def relabel(likelihood):
    """ Binary label for an expert defect likelihood: 0.0 is non-defective,
    every positive likelihood (0.33 included) is defective """
    if likelihood is None:
        raise ValueError('Cannot relabel a record without defect likelihood')
    if snap_likelihood(likelihood) == 0.0:
        return NON_DEFECTIVE
    return DEFECTIVE


def check_cell_type(cell_type):
    if cell_type not in CELL_TYPES:
        raise ValueError('Unknown cell type: {:s} (expected one of {:s})'.format(repr(cell_type), str(CELL_TYPES)))
    return cell_type


class CellRecord(object):
    """ One cell image with its annotation.

    The image is held in memory, loaded from a file path on access, or
    (for augmented records) rendered from the source record and the
    recorded transform chain on access. Metadata-only workflows such as
    counting and balancing therefore never touch pixel data.
    """

    def __init__(self, image=None, defect_likelihood=None, label=None, cell_type=MONOCRYSTALLINE,
                 origin='synthetic', source_id='', path=None, source=None, chain=None,
                 mask=None, lineage=None, chain_limits=None):
        if defect_likelihood is None and label is None:
            raise ValueError('Cell record {:s} needs a defect likelihood or a label'.format(repr(source_id)))
        if defect_likelihood is not None:
            defect_likelihood = snap_likelihood(defect_likelihood)
        if label is None:
            label = relabel(defect_likelihood)
        if label not in LABELS:
            raise ValueError('Cell record {:s}: unknown label {:s}'.format(repr(source_id), repr(label)))
        if origin not in ORIGINS:
            raise ValueError('Cell record {:s}: unknown origin {:s}'.format(repr(source_id), repr(origin)))
        if image is None and path is None and source is None:
            raise ValueError('Cell record {:s} has no image, path or source'.format(repr(source_id)))

        self.defect_likelihood = defect_likelihood
        self.label = label
        self.cell_type = check_cell_type(cell_type)
        self.origin = origin
        self.source_id = str(source_id)
        self.path = path
        self.source = source
        self.chain = list(chain) if chain is not None else []
        self.chain_limits = chain_limits
        self._image = None if image is None else np.asarray(image, dtype=np.float64)
        self._mask = None if mask is None else np.asarray(mask).astype(np.uint8)
        self._lineage = list(lineage) if lineage is not None else None


    def __repr__(self):
        return '<CellRecord {:s} ({:s}, {:s}, {:s})>'.format(self.source_id, self.label, self.cell_type, self.origin)


    @property
    def image(self):
        """ Cell image as GrayImage, loaded or rendered on access """
        if self._image is not None:
            return self._image
        if self.path is not None:
            return read_gray_png(self.path)
        from .augmentation import apply_chain
        return apply_chain(self.source.image, self.chain, limits=self.chain_limits)


    @property
    def mask(self):
        """ Ground-truth anomaly mask if known (synthetic cells and their
        augmented copies), otherwise None """
        if self._mask is not None:
            return self._mask
        if self.source is not None:
            src_mask = self.source.mask
            if src_mask is None:
                return None
            from .augmentation import apply_chain
            _, mask = apply_chain(self.source.image, self.chain, mask=src_mask, limits=self.chain_limits)
            return mask
        return None


    @property
    def lineage(self):
        """ Source ids from the original record down to this one """
        if self._lineage is not None:
            return list(self._lineage)
        if self.source is not None:
            return self.source.lineage + [self.source_id]
        return [self.source_id]


    @property
    def root(self):
        """ The original record an augmented record descends from """
        rec = self
        while rec.source is not None:
            rec = rec.source
        return rec


    def toDict(self):
        return {'path': self.path,
                'defect_likelihood': self.defect_likelihood,
                'label': self.label,
                'cell_type': self.cell_type,
                'origin': self.origin,
                'source_id': self.source_id,
                'lineage': '>'.join(self.lineage)}



class PanelRecord(object):
    """ One panel image with one bounding box per cell """

    def __init__(self, image=None, boxes=None, cell_type=MONOCRYSTALLINE, cells_per_panel=None,
                 panel_id='', path=None, size=None, grid=None):
        self.panel_id = str(panel_id)
        self.cell_type = check_cell_type(cell_type)
        self.path = path
        self.grid = tuple(grid) if grid is not None else None
        self._image = None if image is None else np.asarray(image, dtype=np.float64)
        if self._image is not None:
            self.size = self._image.shape[:2]
        elif size is not None:
            self.size = (int(size[0]), int(size[1]))
        else:
            raise ValueError('Panel {:s} needs an image or a size'.format(repr(self.panel_id)))
        self.boxes = list(boxes) if boxes is not None else []
        if cells_per_panel is None:
            cells_per_panel = self.grid[0] * self.grid[1] if self.grid is not None else len(self.boxes)
        self.cells_per_panel = int(cells_per_panel)
        self.validate()


    def __repr__(self):
        return '<PanelRecord {:s} ({:s}, {:d} boxes, {:d}x{:d})>'.format(
            self.panel_id, self.cell_type, len(self.boxes), self.size[0], self.size[1])


    def __len__(self):
        return len(self.boxes)


    @property
    def image(self):
        if self._image is not None:
            return self._image
        if self.path is None:
            raise RuntimeError('Panel {:s} has no image data'.format(repr(self.panel_id)))
        return read_gray_png(self.path)


    def validate(self):
        h, w = self.size
        for i, b in enumerate(self.boxes):
            if b.x_max > w or b.y_max > h:
                raise ValueError('Panel {:s}: box {:d} {:s} lies outside the {:d}x{:d} image'.format(
                    repr(self.panel_id), i, repr(b), h, w))
        for i in range(len(self.boxes)):
            for j in range(i + 1, len(self.boxes)):
                if box_iou(self.boxes[i], self.boxes[j]) >= MAX_OVERLAP_IOU:
                    raise ValueError('Panel {:s}: boxes {:d} and {:d} overlap'.format(repr(self.panel_id), i, j))
        if self.grid is not None and len(self.boxes) != self.grid[0] * self.grid[1]:
            raise ValueError('Panel {:s}: {:d} boxes do not match the {:d}x{:d} grid'.format(
                repr(self.panel_id), len(self.boxes), self.grid[0], self.grid[1]))



class DatasetSplit(object):
    """ Disjoint train / validation partition of a record list """

    def __init__(self, train, validation, seed):
        self.train = list(train)
        self.validation = list(validation)
        self.seed = seed


    def __repr__(self):
        return '<DatasetSplit train={:d} validation={:d} seed={:s}>'.format(
            len(self.train), len(self.validation), str(self.seed))


    def __len__(self):
        return len(self.train) + len(self.validation)



@RunConfig.registerSection
class SyntheticCellSpec(ConfigSet):
    """ Recipe for one synthetic EL cell

    Attributes:
        busbar_count (int): number of dark busbar bands
        busbar_orientation (str): 'horizontal' or 'vertical'
        background_texture (str): 'smooth' (monocrystalline look) or 'granular' (polycrystalline)
        anomaly (dict): None, or one of
            {'kind': 'crack', 'points': [[x, y], ...], 'width': px},
            {'kind': 'dark_region', 'center': [x, y], 'axes': [ax, ay], 'angle': deg},
            {'kind': 'dead_corner', 'points': [[x, y], ...]}
        noise_sigma (float): sigma of the additive Gaussian noise
        darkening (float): intensity drop inside the anomaly footprint
        cell_size (int): side length of the square cell in pixels
        cell_type (str): explicit cell type, None to infer it from busbars and texture
    """
    SECTION = 'synthetic'
    DEFAULTS = {'busbar_count': 3,
                'busbar_orientation': 'horizontal',
                'background_texture': 'smooth',
                'anomaly': None,
                'noise_sigma': 0.01,
                'darkening': 0.25,
                'cell_size': 300,
                'cell_type': None}

    def validate(self):
        self._require(isinstance(self.busbar_count, int) and 0 <= self.busbar_count <= 12,
                      'busbar_count', 'must be an integer in [0, 12]')
        self._require(self.busbar_orientation in ('horizontal', 'vertical'), 'busbar_orientation',
                      "must be 'horizontal' or 'vertical'")
        self._require(self.background_texture in ('smooth', 'granular'), 'background_texture',
                      "must be 'smooth' or 'granular'")
        self._require(self.noise_sigma >= 0, 'noise_sigma', 'must be >= 0')
        self._require(self.darkening >= 0.2, 'darkening', 'must be >= 0.2')
        self._require(isinstance(self.cell_size, int) and self.cell_size >= 16, 'cell_size', 'must be an integer >= 16')
        self._require(self.cell_type is None or self.cell_type in CELL_TYPES, 'cell_type', 'must be a known cell type')
        if self.anomaly is not None:
            self._require(isinstance(self.anomaly, dict) and self.anomaly.get('kind') in ANOMALY_KINDS,
                          'anomaly', 'kind must be one of {:s}'.format(str(ANOMALY_KINDS)))
            if self.anomaly['kind'] == 'crack':
                self._require(self.anomaly.get('width', 1) >= 1, 'anomaly', 'crack width must be >= 1 px')
            try:
                area = int(anomaly_footprint(self.anomaly, (self.cell_size, self.cell_size)).sum())
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError('Invalid value for {:s}: {:s}'.format(self._keyName('anomaly'), str(e)))
            self._require(area > 0, 'anomaly', 'footprint is empty')
            self._require(area <= MAX_ANOMALY_FRACTION * self.cell_size ** 2, 'anomaly',
                          'footprint exceeds {:.0f}% of the cell'.format(MAX_ANOMALY_FRACTION * 100))


    @property
    def inferredCellType(self):
        if self.cell_type is not None:
            return self.cell_type
        if self.background_texture == 'granular':
            return POLYCRYSTALLINE
        if self.busbar_count == 3:
            return BUSBAR3
        if self.busbar_count == 5:
            return BUSBAR5
        return MONOCRYSTALLINE


# Rendering presets for each cell type
CELL_TYPE_PRESETS = {
    MONOCRYSTALLINE: {'busbar_count': 2, 'background_texture': 'smooth'},
    POLYCRYSTALLINE: {'busbar_count': 2, 'background_texture': 'granular'},
    ELONGATED: {'busbar_count': 4, 'background_texture': 'smooth', 'busbar_orientation': 'vertical', 'cell_type': ELONGATED},
    BUSBAR3: {'busbar_count': 3, 'background_texture': 'smooth'},
    BUSBAR5: {'busbar_count': 5, 'background_texture': 'smooth'},
}


def anomaly_footprint(anomaly, shape):
    """ Rasterize an anomaly description into a BinaryMask

    Args:
        anomaly (dict): anomaly entry of a SyntheticCellSpec
        shape: (height, width) of the cell

    Returns: uint8 mask
    """
    h, w = shape
    mask = np.zeros((h, w), dtype=np.uint8)
    kind = anomaly['kind']
    if kind == 'crack':
        pts = np.round(np.asarray(anomaly['points'], dtype=np.float64)).astype(np.int32).reshape(-1, 1, 2)
        if pts.shape[0] < 2:
            raise ValueError('crack needs at least two points')
        cv2.polylines(mask, [pts], isClosed=False, color=1, thickness=int(anomaly.get('width', 1)))
    elif kind == 'dark_region':
        cx, cy = anomaly['center']
        ax, ay = anomaly['axes']
        rr, cc = draw.ellipse(cy, cx, ay, ax, shape=(h, w), rotation=math.radians(anomaly.get('angle', 0.0)))
        mask[rr, cc] = 1
    elif kind == 'dead_corner':
        pts = np.asarray(anomaly['points'], dtype=np.float64)
        if pts.shape[0] < 3:
            raise ValueError('dead_corner polygon needs at least three points')
        rr, cc = draw.polygon(pts[:, 1], pts[:, 0], shape=(h, w))
        mask[rr, cc] = 1
    else:
        raise ValueError('Unknown anomaly kind: {:s}'.format(repr(kind)))
    return mask


def random_anomaly(rng, kind, size=300):
    """ Draw a random anomaly description of the given kind for a square cell

    Args:
        rng (np.random.Generator): random source
        kind (str): one of ANOMALY_KINDS
        size (int): cell side length

    Returns: anomaly dict for SyntheticCellSpec
    """
    s = float(size)
    if kind == 'crack':
        n = int(rng.integers(2, 5))
        x0, y0 = rng.uniform(0.1 * s, 0.9 * s, size=2)
        pts = [[x0, y0]]
        for _ in range(n - 1):
            step = rng.uniform(0.1 * s, 0.3 * s)
            ang = rng.uniform(0, 2 * math.pi)
            x = float(np.clip(pts[-1][0] + step * math.cos(ang), 0, s - 1))
            y = float(np.clip(pts[-1][1] + step * math.sin(ang), 0, s - 1))
            pts.append([x, y])
        return {'kind': 'crack', 'points': [[float(p[0]), float(p[1])] for p in pts],
                'width': int(rng.integers(3, 7))}
    elif kind == 'dark_region':
        return {'kind': 'dark_region',
                'center': [float(v) for v in rng.uniform(0.25 * s, 0.75 * s, size=2)],
                'axes': [float(v) for v in rng.uniform(0.06 * s, 0.16 * s, size=2)],
                'angle': float(rng.uniform(0, 180))}
    elif kind == 'dead_corner':
        a, b = rng.uniform(0.15 * s, 0.35 * s, size=2)
        corner = int(rng.integers(0, 4))
        xs = [0.0, a, 0.0] if corner in (0, 2) else [s, s - a, s]
        ys = [0.0, 0.0, b] if corner in (0, 1) else [s, s, s - b]
        return {'kind': 'dead_corner', 'points': [[float(x), float(y)] for x, y in zip(xs, ys)]}
    raise ValueError('Unknown anomaly kind: {:s}'.format(repr(kind)))


def _render_clean(spec, rng):
    n = spec.cell_size
    img = np.full((n, n), rng.uniform(0.55, 0.75), dtype=np.float64)

    if spec.background_texture == 'granular':
        grain = cv2.GaussianBlur(rng.normal(0.0, 1.0, (n, n)), (0, 0), sigmaX=max(n / 75.0, 1.0))
        grain /= max(grain.std(), 1e-9)
        img += 0.05 * grain
    else:
        yy, xx = np.mgrid[0:n, 0:n] / float(n - 1) - 0.5
        img *= 1.0 - 0.15 * (xx ** 2 + yy ** 2)

    band = max(3, n // 60)
    for i in range(spec.busbar_count):
        c = int(round((i + 1) * n / float(spec.busbar_count + 1)))
        lo, hi = max(c - band // 2, 0), min(c - band // 2 + band, n)
        level = rng.uniform(0.32, 0.38)
        if spec.busbar_orientation == 'horizontal':
            img[lo:hi, :] = level
        else:
            img[:, lo:hi] = level

    # floor keeps the darkened anomaly at least `darkening` below the clean render
    return np.clip(img, 0.25, 1.0)


def synthesize_cell(spec=None, rng_seed=0, source_id=None):
    """ Render a synthetic EL cell

    Args:
        spec (SyntheticCellSpec): cell recipe, defaults if None
        rng_seed (int): seed, identical seeds give identical cells
        source_id (str): record id, default 'synth-<seed>'

    Returns: (CellRecord, ground-truth BinaryMask)
    """
    if spec is None:
        spec = SyntheticCellSpec()
    elif not isinstance(spec, SyntheticCellSpec):
        spec = SyntheticCellSpec(spec)
    rng = np.random.default_rng(rng_seed)
    n = spec.cell_size
    img = _render_clean(spec, rng)

    if spec.anomaly is not None:
        mask = anomaly_footprint(spec.anomaly, (n, n))
        img = img - spec.darkening * mask
        label = DEFECTIVE
    else:
        mask = np.zeros((n, n), dtype=np.uint8)
        label = NON_DEFECTIVE

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)

    if source_id is None:
        source_id = 'synth-{:d}'.format(int(rng_seed))
    rec = CellRecord(image=img, label=label, cell_type=spec.inferredCellType, origin='synthetic',
                     source_id=source_id, mask=mask)
    return rec, mask


def synthesize_cells(n, seed=0, anomalous_fraction=0.5, anomaly_kinds=ANOMALY_KINDS, cell_types=None, spec=None):
    """ A labelled set of synthetic cells

    Args:
        n (int): number of cells
        seed (int): master seed
        anomalous_fraction (float): share of cells carrying one anomaly
        anomaly_kinds: anomaly kinds to draw from
        cell_types: cell types to cycle through (CELL_TYPE_PRESETS), None to use spec
        spec (SyntheticCellSpec): base recipe

    Returns: list of (CellRecord, mask)
    """
    if not 0.0 <= anomalous_fraction <= 1.0:
        raise ValueError('anomalous_fraction must lie in [0, 1]')
    base = spec if spec is not None else SyntheticCellSpec()
    rng = np.random.default_rng(seed)
    n_anom = int(round(n * anomalous_fraction))
    anomalous = set(rng.permutation(n)[:n_anom].tolist())
    seeds = rng.integers(0, 2 ** 31 - 1, size=n)

    out = []
    for i in range(n):
        d = base.toDict()
        if cell_types is not None:
            d.update(CELL_TYPE_PRESETS[cell_types[i % len(cell_types)]])
        if i in anomalous:
            kind = anomaly_kinds[int(rng.integers(0, len(anomaly_kinds)))]
            d['anomaly'] = random_anomaly(rng, kind, d['cell_size'])
        else:
            d['anomaly'] = None
        out.append(synthesize_cell(SyntheticCellSpec(d), int(seeds[i]),
                                   source_id='synth-{:d}-{:05d}'.format(int(seed), i)))
    return out


def synthesize_panel(grid, spec=None, rng_seed=0, cell_size=None, cell_specs=None, panel_id=None):
    """ Tile synthetic cells into a panel with small random gaps and jitter

    Args:
        grid: (rows, cols), rows * cols in [1, 200]
        spec (SyntheticCellSpec): recipe used for every cell
        rng_seed (int): seed
        cell_size (int): override for spec.cell_size
        cell_specs (dict): cell index (row-major) -> SyntheticCellSpec for individual cells
        panel_id (str): panel id, default 'panel-<seed>'

    Returns: (PanelRecord, list of (CellRecord, mask) per cell in row-major order)
    """
    rows, cols = int(grid[0]), int(grid[1])
    if rows < 1 or cols < 1 or rows * cols > 200:
        raise ValueError('Panel grid must hold between 1 and 200 cells, got {:d}x{:d}'.format(rows, cols))
    if spec is None:
        spec = SyntheticCellSpec()
    if cell_size is not None:
        spec = spec.replace(cell_size=int(cell_size))
    cell_specs = cell_specs if cell_specs is not None else {}
    size = spec.cell_size
    if panel_id is None:
        panel_id = 'panel-{:d}'.format(int(rng_seed))

    rng = np.random.default_rng(rng_seed)
    gap = int(rng.integers(4, 9))
    margin = int(rng.integers(8, 17))
    height = 2 * margin + rows * size + (rows - 1) * gap
    width = 2 * margin + cols * size + (cols - 1) * gap
    panel = np.clip(0.05 + rng.normal(0.0, 0.005, (height, width)), 0.0, 1.0)

    boxes, truths = [], []
    for r in range(rows):
        for c in range(cols):
            idx = r * cols + c
            cspec = cell_specs.get(idx, spec)
            if not isinstance(cspec, SyntheticCellSpec):
                cspec = SyntheticCellSpec(cspec)
            if cspec.cell_size != size:
                cspec = cspec.replace(cell_size=size)
            # jitter stays below gap/2 so neighbouring cells never touch
            jx, jy = rng.integers(-1, 2, size=2)
            x0 = margin + c * (size + gap) + int(jx)
            y0 = margin + r * (size + gap) + int(jy)
            cell, mask = synthesize_cell(cspec, int(rng.integers(0, 2 ** 31 - 1)),
                                         source_id='{:s}-{:03d}'.format(panel_id, idx))
            panel[y0:y0 + size, x0:x0 + size] = cell.image
            boxes.append(BoundingBox(x0, y0, x0 + size, y0 + size))
            truths.append((cell, mask))

    rec = PanelRecord(image=panel, boxes=boxes, cell_type=spec.inferredCellType, panel_id=panel_id, grid=(rows, cols))
    return rec, truths


def crop_panel_cells(panel, truths, expansion_ratio=0.10, size=None):
    """ Cut the annotated cells of a panel the way the pipeline sees them:
    each box expanded by expansion_ratio, cropped and resampled to size.

    Args:
        panel (PanelRecord): panel with one box per truth
        truths (list): (CellRecord, mask) per box, as returned by synthesize_panel
        expansion_ratio (float): box growth per dimension
        size (int): output side length, the box size of the first cell if None

    Returns: list of (CellRecord, BinaryMask) in box order
    """
    if len(truths) != len(panel.boxes):
        raise ValueError('Panel {:s}: {:d} truths for {:d} boxes'.format(
            repr(panel.panel_id), len(truths), len(panel.boxes)))
    if size is None and len(panel.boxes) > 0:
        size = int(round(panel.boxes[0].width))
    image = panel.image
    footprint = np.zeros(image.shape, dtype=np.uint8)
    for box, (_, mask) in zip(panel.boxes, truths):
        x0, y0, x1, y1 = box.pixelBounds(bounds=image.shape)
        footprint[y0:y1, x0:x1] = np.asarray(mask)[:y1 - y0, :x1 - x0]

    out = []
    for i, (box, (cell, _)) in enumerate(zip(panel.boxes, truths)):
        crop, geom = crop_resize(image, expand_box(box, image.shape, expansion_ratio), (size, size))
        mask = cv2.resize(footprint[geom.y0:geom.y1, geom.x0:geom.x1], (size, size), interpolation=cv2.INTER_NEAREST)
        rec = CellRecord(image=crop, label=cell.label, cell_type=cell.cell_type, origin=cell.origin,
                         source_id='{:s}-crop{:03d}'.format(panel.panel_id, i), mask=mask)
        out.append((rec, mask))
    return out


def load_elpv(index_path, check_images=True):
    """ Load the ELPV cell index (headerless rows of image path, defect
    probability and 'mono'/'poly' type, separated by commas or whitespace)

    Args:
        index_path (str): index file; image paths are relative to its directory
        check_images (bool): if True, verify that every image exists and is 300x300

    Returns: list of CellRecord (images load lazily)
    """
    root = os.path.dirname(os.path.abspath(index_path))
    try:
        df = pd.read_csv(index_path, header=None, sep=r'[,\s]+', engine='python',
                         names=['path', 'probability', 'type'], dtype=str, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        return []

    records = []
    for row_no, row in enumerate(df.itertuples(index=False)):
        if pd.isna(row.path) or pd.isna(row.probability) or pd.isna(row.type):
            raise ValueError('{:s}, row {:d}: unreadable row'.format(str(index_path), row_no + 1))
        try:
            likelihood = snap_likelihood(float(row.probability))
        except ValueError:
            raise ValueError('{:s}, row {:d}: defect likelihood {:s} outside (0.0, 0.33, 0.66, 1.0)'.format(
                str(index_path), row_no + 1, str(row.probability)))
        ctype = ELPV_TYPE_NAMES.get(str(row.type).strip().lower(), str(row.type).strip().lower())
        if ctype not in (MONOCRYSTALLINE, POLYCRYSTALLINE):
            raise ValueError('{:s}, row {:d}: unknown cell type {:s}'.format(str(index_path), row_no + 1, str(row.type)))

        path = os.path.join(root, str(row.path))
        if check_images:
            if not os.path.isfile(path):
                raise IOError('{:s}, row {:d}: missing image {:s}'.format(str(index_path), row_no + 1, path))
            with Image.open(path) as im:
                if (im.size[1], im.size[0]) != ELPV_CELL_SIZE:
                    raise ValueError('{:s}, row {:d}: image {:s} is not 300x300'.format(str(index_path), row_no + 1, path))
        records.append(CellRecord(path=path, defect_likelihood=likelihood, cell_type=ctype,
                                  origin='elpv', source_id=str(row.path)))
    logger.info('Loaded {:d} ELPV records from {:s}'.format(len(records), str(index_path)))
    return records


def _voc_text(v):
    v = float(v)
    if v == int(v):
        return str(int(v))
    return repr(v)


def read_panel_annotation(xml_file, check_images=True):
    """ Parse one Pascal-VOC annotation file (LabelImg dialect) into a PanelRecord """
    try:
        tree = ET.parse(xml_file)
    except ET.ParseError as e:
        raise ValueError('{:s}: malformed annotation XML ({:s})'.format(str(xml_file), str(e)))
    root = tree.getroot()

    def _find(node, tag):
        el = node.find(tag)
        if el is None or el.text is None:
            raise ValueError('{:s}: missing element <{:s}>'.format(str(xml_file), tag))
        return el.text.strip()

    filename = _find(root, 'filename')
    width = int(float(_find(root, 'size/width')))
    height = int(float(_find(root, 'size/height')))

    ctype_el = root.find('cell_type')
    if ctype_el is not None and ctype_el.text:
        ctype = ctype_el.text.strip()
    else:
        parent = os.path.basename(os.path.dirname(os.path.abspath(xml_file)))
        ctype = parent if parent in CELL_TYPES else MONOCRYSTALLINE
    grid = None
    grid_el = root.find('grid')
    if grid_el is not None:
        grid = (int(_find(grid_el, 'rows')), int(_find(grid_el, 'cols')))

    boxes = []
    for i, obj in enumerate(root.findall('object')):
        name = obj.find('name')
        if name is None or name.text is None or name.text.strip() != 'cell':
            raise ValueError('{:s}, object {:d}: class {:s} is not "cell"'.format(
                str(xml_file), i, repr(None if name is None else name.text)))
        bb = obj.find('bndbox')
        if bb is None:
            raise ValueError('{:s}, object {:d}: missing <bndbox>'.format(str(xml_file), i))
        try:
            x0, y0, x1, y1 = [float(_find(bb, t)) for t in ['xmin', 'ymin', 'xmax', 'ymax']]
        except ValueError as e:
            raise ValueError('{:s}, object {:d}: {:s}'.format(str(xml_file), i, str(e)))
        if x1 <= x0 or y1 <= y0:
            raise ValueError('{:s}, object {:d}: empty box (xmax <= xmin or ymax <= ymin)'.format(str(xml_file), i))
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise ValueError('{:s}, object {:d}: box outside the {:d}x{:d} image'.format(str(xml_file), i, width, height))
        boxes.append(BoundingBox(x0, y0, x1, y1))

    path = os.path.join(os.path.dirname(os.path.abspath(xml_file)), filename)
    if check_images and not os.path.isfile(path):
        raise IOError('{:s}: missing panel image {:s}'.format(str(xml_file), path))
    panel_id = os.path.splitext(os.path.basename(xml_file))[0]
    return PanelRecord(boxes=boxes, cell_type=ctype, panel_id=panel_id, path=path,
                       size=(height, width), grid=grid)


def load_panel_annotations(directory, check_images=True):
    """ Load all panel annotations below a directory

    Args:
        directory (str): root directory, searched recursively for *.xml
        check_images (bool): if True, require each referenced panel image to exist

    Returns: list of PanelRecord sorted by file path
    """
    if not os.path.isdir(directory):
        raise IOError('Annotation directory not found: {:s}'.format(str(directory)))
    files = []
    for dirpath, _, filenames in os.walk(directory):
        for f in filenames:
            if f.lower().endswith('.xml'):
                files.append(os.path.join(dirpath, f))
    panels = [read_panel_annotation(f, check_images=check_images) for f in sorted(files)]
    logger.info('Loaded {:d} panels with {:d} boxes from {:s}'.format(
        len(panels), sum([len(p) for p in panels]), str(directory)))
    return panels


def write_panel_annotation(path, panel, image_filename):
    """ Write a PanelRecord as Pascal-VOC XML (LabelImg dialect, class "cell")

    Args:
        path (str): output XML file
        panel (PanelRecord): panel to describe
        image_filename (str): panel image file name, relative to the XML file
    """
    root = ET.Element('annotation')
    ET.SubElement(root, 'folder').text = os.path.basename(os.path.dirname(os.path.abspath(path)))
    ET.SubElement(root, 'filename').text = image_filename
    ET.SubElement(root, 'path').text = image_filename
    source = ET.SubElement(root, 'source')
    ET.SubElement(source, 'database').text = 'Unknown'
    size = ET.SubElement(root, 'size')
    ET.SubElement(size, 'width').text = str(panel.size[1])
    ET.SubElement(size, 'height').text = str(panel.size[0])
    ET.SubElement(size, 'depth').text = '1'
    ET.SubElement(root, 'segmented').text = '0'
    ET.SubElement(root, 'cell_type').text = panel.cell_type
    if panel.grid is not None:
        grid = ET.SubElement(root, 'grid')
        ET.SubElement(grid, 'rows').text = str(panel.grid[0])
        ET.SubElement(grid, 'cols').text = str(panel.grid[1])
    for box in panel.boxes:
        obj = ET.SubElement(root, 'object')
        ET.SubElement(obj, 'name').text = 'cell'
        ET.SubElement(obj, 'pose').text = 'Unspecified'
        ET.SubElement(obj, 'truncated').text = '0'
        ET.SubElement(obj, 'difficult').text = '0'
        bb = ET.SubElement(obj, 'bndbox')
        for tag, v in zip(['xmin', 'ymin', 'xmax', 'ymax'], box.toList()):
            ET.SubElement(bb, tag).text = _voc_text(v)
    tree = ET.ElementTree(root)
    if hasattr(ET, 'indent'):
        ET.indent(tree, space='\t')
    tree.write(path, encoding='utf-8', xml_declaration=False)


def make_split(records, ratio=0.8, seed=0, validation_size=None, group_key=None):
    """ Deterministic train / validation split

    Args:
        records (list): CellRecord or PanelRecord list (panels stay whole)
        ratio (float): training share in (0, 1)
        seed (int): shuffle seed
        validation_size (int): fixed validation count, overrides ratio
        group_key (callable): record -> group id; records of one group never straddle the split

    Returns: DatasetSplit
    """
    records = list(records)
    if len(records) == 0:
        raise ValueError('Cannot split an empty record list')
    if validation_size is None and not 0.0 < ratio < 1.0:
        raise ValueError('Split ratio must lie strictly between 0 and 1, got {:s}'.format(str(ratio)))
    n = len(records)
    if validation_size is not None:
        n_val = int(validation_size)
        if not 0 < n_val < n:
            raise ValueError('validation_size must lie in [1, {:d}], got {:d}'.format(n - 1, n_val))
    else:
        n_val = n - int(round(ratio * n))
        if not 0 < n_val < n:
            raise ValueError('Split ratio {:s} over {:d} records leaves {:d} for training and {:d} for '
                             'validation'.format(str(ratio), n, n - n_val, n_val))

    if group_key is None:
        groups = [[i] for i in range(n)]
    else:
        by_key = collections.OrderedDict()
        for i, r in enumerate(records):
            by_key.setdefault(group_key(r), []).append(i)
        groups = list(by_key.values())

    order = np.random.default_rng(seed).permutation(len(groups))
    val_idx = set()
    for g in order:
        if len(val_idx) >= n_val:
            break
        val_idx.update(groups[g])
    train = [records[i] for i in range(n) if i not in val_idx]
    validation = [records[i] for i in range(n) if i in val_idx]
    if len(train) == 0:
        raise ValueError('Split leaves the training set empty')
    # shuffled order within each part
    perm = np.random.default_rng(seed + 1).permutation(len(train))
    train = [train[i] for i in perm]
    return DatasetSplit(train, validation, seed)


def count_dict(records, keys=('label', 'cell_type')):
    """ Record counts per key tuple as an ordered dict """
    c = collections.Counter([tuple([getattr(r, k) for k in keys]) for r in records])
    return collections.OrderedDict(sorted(c.items()))


def count_by(records, keys=('label', 'cell_type')):
    """ Record counts per key combination as pandas DataFrame

    Args:
        records (list): CellRecord list
        keys: record attributes to group by

    Returns: DataFrame with one column per key plus 'count'
    """
    keys = list(keys)
    rows = [dict(zip(keys, k), count=v) for k, v in count_dict(records, keys).items()]
    return pd.DataFrame(rows, columns=keys + ['count'])


def combine_datasets(*record_lists):
    """ Concatenate record lists, warning about duplicate source ids """
    out = []
    for rl in record_lists:
        out.extend(rl)
    ids = collections.Counter([r.source_id for r in out])
    dupes = [k for k, v in ids.items() if v > 1]
    if len(dupes) > 0:
        logger.warning('Combined dataset holds {:d} duplicate source ids, e.g. {:s}'.format(len(dupes), dupes[0]))
    return out


def write_cell_index(path, records, image_dir=None):
    """ Write records to a headered cell-index CSV

    Args:
        path (str): output CSV
        records (list): CellRecord list
        image_dir (str): if given, write each record's image there as PNG
            (needed for in-memory and augmented records)
    """
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    for i, rec in enumerate(records):
        row = rec.toDict()
        if image_dir is not None:
            if not os.path.isdir(image_dir):
                os.makedirs(image_dir)
            fname = '{:06d}_{:s}.png'.format(i, _safe_name(rec.source_id))
            img_path = os.path.join(image_dir, fname)
            write_gray_png(img_path, rec.image)
            row['path'] = os.path.relpath(os.path.abspath(img_path), base)
        elif rec.path is not None:
            row['path'] = os.path.relpath(os.path.abspath(rec.path), base)
        else:
            raise ValueError('Record {:s} has no image file; pass image_dir'.format(rec.source_id))
        rows.append(row)
    pd.DataFrame(rows, columns=INDEX_COLUMNS).to_csv(path, index=False)


def read_cell_index(path):
    """ Read a cell index written by write_cell_index into lazy CellRecords """
    base = os.path.dirname(os.path.abspath(path))
    df = pd.read_csv(path, dtype={'path': str, 'label': str, 'cell_type': str, 'origin': str,
                                  'source_id': str, 'lineage': str}, keep_default_na=True)
    missing = [c for c in INDEX_COLUMNS if c not in df.columns]
    if len(missing) > 0:
        raise ValueError('{:s}: missing index columns {:s}'.format(str(path), str(missing)))
    records = []
    for row in df.itertuples(index=False):
        lik = None if pd.isna(row.defect_likelihood) else float(row.defect_likelihood)
        lineage = str(row.lineage).split('>') if not pd.isna(row.lineage) else None
        records.append(CellRecord(path=os.path.join(base, row.path), defect_likelihood=lik, label=row.label,
                                  cell_type=row.cell_type, origin=row.origin, source_id=row.source_id,
                                  lineage=lineage))
    return records


def _safe_name(s):
    return ''.join([ch if ch.isalnum() or ch in '-_' else '_' for ch in str(s)])[:60]
