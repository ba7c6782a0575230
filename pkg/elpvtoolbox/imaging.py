# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Image primitives: SSIM, Otsu binarization, box geometry, cropping and overlays

import math
import logging

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import ConfigSet, RunConfig

logger = logging.getLogger(__name__)

RED = (1.0, 0.0, 0.0)
GREEN = (0.0, 1.0, 0.0)
BLUE = (0.0, 0.0, 1.0)

HIST_BINS = 256


class BoundingBox(object):
    """ Axis-aligned box in pixel coordinates. Boxes are half-open:
    the box covers columns x_min <= x < x_max and rows y_min <= y < y_max.
    """

    def __init__(self, x_min, y_min, x_max, y_max):
        self.x_min = float(x_min)
        self.y_min = float(y_min)
        self.x_max = float(x_max)
        self.y_max = float(y_max)
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError('Box coordinates must be non-negative: {:s}'.format(repr(self)))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError('Box must have x_min < x_max and y_min < y_max: {:s}'.format(repr(self)))


    def __repr__(self):
        return '<BoundingBox ({:g}, {:g}, {:g}, {:g})>'.format(self.x_min, self.y_min, self.x_max, self.y_max)


    def __eq__(self, other):
        if not isinstance(other, BoundingBox):
            return NotImplemented
        return self.toList() == other.toList()


    def __hash__(self):
        return hash(tuple(self.toList()))


    def __iter__(self):
        return iter(self.toList())


    @property
    def width(self):
        return self.x_max - self.x_min


    @property
    def height(self):
        return self.y_max - self.y_min


    @property
    def area(self):
        return self.width * self.height


    def toList(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]


    def toDict(self):
        return {'x_min': self.x_min, 'y_min': self.y_min, 'x_max': self.x_max, 'y_max': self.y_max}


    def pixelBounds(self, bounds=None):
        """ Integer pixel range covering this box (floor of the minimum,
        ceiling of the maximum), optionally clamped to (height, width)

        Returns: (x0, y0, x1, y1) ints, possibly empty after clamping
        """
        x0, y0 = int(math.floor(self.x_min)), int(math.floor(self.y_min))
        x1, y1 = int(math.ceil(self.x_max)), int(math.ceil(self.y_max))
        if bounds is not None:
            h, w = bounds
            x0, x1 = min(max(x0, 0), w), min(max(x1, 0), w)
            y0, y1 = min(max(y0, 0), h), min(max(y1, 0), h)
        return x0, y0, x1, y1


    def contains(self, other):
        return (self.x_min <= other.x_min and self.y_min <= other.y_min and
                self.x_max >= other.x_max and self.y_max >= other.y_max)


    @classmethod
    def fromList(cls, values):
        return cls(*[float(v) for v in values])



@RunConfig.registerSection
class SsimParams(ConfigSet):
    """ Structural similarity parameters

    Attributes:
        window (int): side length K of the uniform sliding window
        k1, k2 (float): stabilization constants
        alpha, beta, gamma (float): exponents of luminance, contrast and structure terms
        dynamic_range (float): intensity range L (1.0 for canonical images)
    """
    SECTION = 'ssim'
    DEFAULTS = {'window': 5,
                'k1': 0.01,
                'k2': 0.03,
                'alpha': 1.0,
                'beta': 1.0,
                'gamma': 1.0,
                'dynamic_range': 1.0}

    def validate(self):
        self._require(isinstance(self.window, int) and self.window >= 3 and self.window % 2 == 1,
                      'window', 'must be an odd integer >= 3')
        self._require(self.k1 > 0, 'k1', 'must be > 0')
        self._require(self.k2 > 0, 'k2', 'must be > 0')
        for key in ['alpha', 'beta', 'gamma']:
            self._require(self[key] >= 0, key, 'must be >= 0')
        self._require(self.dynamic_range > 0, 'dynamic_range', 'must be > 0')



def check_gray(img, name='image'):
    """ Validate a GrayImage: 2-D array, at least 1x1, intensities in [0, 1]

    Returns: the image as float64 array
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError('{:s} must be a non-empty 2-D array, got shape {:s}'.format(name, str(img.shape)))
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError('{:s} intensities must lie in [0, 1]'.format(name))
    return img


def _check_pair(x, y, p):
    x = check_gray(x, 'x')
    y = check_gray(y, 'y')
    if x.shape != y.shape:
        raise ValueError('SSIM inputs differ in shape: {:s} vs {:s}'.format(str(x.shape), str(y.shape)))
    if min(x.shape) < p.window:
        raise ValueError('Image of shape {:s} is smaller than the {:d}x{:d} SSIM window'.format(
            str(x.shape), p.window, p.window))
    return x, y


def ssim_tensor(x, y, p=None, pad=False):
    """ Per-window SSIM for image batches (differentiable)

    Args:
        x, y (torch.Tensor): batches of shape (N, 1, H, W)
        p (SsimParams): window and constants
        pad (bool): if True, reflect-pad by K//2 so the map has the input shape,
            otherwise only windows fully inside the image are returned

    Returns: tensor of shape (N, 1, H', W') with values in [-1, 1]
    """
    if p is None:
        p = SsimParams()
    k = p.window
    if pad:
        r = k // 2
        x = F.pad(x, (r, r, r, r), mode='reflect')
        y = F.pad(y, (r, r, r, r), mode='reflect')

    mu_x = F.avg_pool2d(x, k, stride=1)
    mu_y = F.avg_pool2d(y, k, stride=1)
    var_x = torch.clamp(F.avg_pool2d(x * x, k, stride=1) - mu_x * mu_x, min=0.0)
    var_y = torch.clamp(F.avg_pool2d(y * y, k, stride=1) - mu_y * mu_y, min=0.0)
    cov = F.avg_pool2d(x * y, k, stride=1) - mu_x * mu_y

    c1 = (p.k1 * p.dynamic_range) ** 2
    c2 = (p.k2 * p.dynamic_range) ** 2

    if p.alpha == 1.0 and p.beta == 1.0 and p.gamma == 1.0:
        # contrast and structure terms merge when c3 = c2 / 2
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        s = num / den
    else:
        c3 = c2 / 2.0
        sig_x = torch.sqrt(var_x + 1e-12)
        sig_y = torch.sqrt(var_y + 1e-12)
        lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
        con = (2.0 * sig_x * sig_y + c2) / (var_x + var_y + c2)
        struct = (cov + c3) / (sig_x * sig_y + c3)
        struct = torch.sign(struct) * torch.abs(struct) ** p.gamma
        s = lum ** p.alpha * con ** p.beta * struct
    return torch.clamp(s, -1.0, 1.0)


def _to_tensor(img):
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))[None, None]


def ssim_scalar(x, y, p=None):
    """ Mean SSIM over all K x K window positions fully inside the images

    Args:
        x, y: GrayImage arrays of identical shape
        p (SsimParams): SSIM parameters, defaults if None

    Returns: float in [-1, 1]
    """
    if p is None:
        p = SsimParams()
    x, y = _check_pair(x, y, p)
    with torch.no_grad():
        s = ssim_tensor(_to_tensor(x), _to_tensor(y), p, pad=False)
    return float(s.mean())


def ssim_map(x, y, p=None):
    """ Per-pixel SSIM map: each pixel holds the SSIM of the window centered
    on it. Inputs are reflect-padded by K//2 so the map has the input shape;
    the entries at least K//2 from the border are the valid windows whose
    mean equals ssim_scalar.

    Returns: float64 array of the input shape, values in [-1, 1]
    """
    if p is None:
        p = SsimParams()
    x, y = _check_pair(x, y, p)
    with torch.no_grad():
        s = ssim_tensor(_to_tensor(x), _to_tensor(y), p, pad=True)
    return s[0, 0].numpy().copy()


def valid_region(ssim_values, p=None):
    """ The part of an SSIM map computed from windows fully inside the image """
    if p is None:
        p = SsimParams()
    r = p.window // 2
    h, w = ssim_values.shape
    return ssim_values[r:h - r, r:w - r]


def quantize(img):
    """ Map [0, 1] intensities to 256 histogram bins (round half up) """
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def otsu_from_histogram(hist, prefer='low'):
    """ Exhaustive Otsu search over a 256-bin histogram using exact integer
    arithmetic. Class 0 holds the bins <= t.

    Args:
        hist: bin counts
        prefer (str): 'low' breaks ties toward the lowest maximizing threshold, 'high' toward the highest

    Returns: threshold bin index t, or None if fewer than two bins are occupied
    """
    hist = [int(h) for h in hist]
    total = sum(hist)
    total_sum = sum([i * h for i, h in enumerate(hist)])

    best_t, best_num, best_den = None, 0, 1
    n0, s0 = 0, 0
    for t in range(len(hist) - 1):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance * total^2 = num / den
        num = (total * s0 - n0 * total_sum) ** 2
        den = n0 * n1
        if best_t is None:
            better = True
        elif prefer == 'low':
            better = num * best_den > best_num * den
        else:
            better = num * best_den >= best_num * den
        if better:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu_binarize(img):
    """ Otsu binarization over a 256-bin histogram

    Args:
        img: GrayImage

    Returns: (threshold, mask, degenerate) where mask is 1 above the
        threshold. A constant image is degenerate: the mask is empty and
        the threshold equals the constant.
    """
    img = check_gray(img)
    bins = quantize(img)
    hist = np.bincount(bins.ravel(), minlength=HIST_BINS)
    t = otsu_from_histogram(hist, prefer='low')
    if t is None:
        return float(np.mean(img)), np.zeros(img.shape, dtype=np.uint8), True
    mask = (bins > t).astype(np.uint8)
    return (t + 0.5) / 255.0, mask, False


def expand_box(box, bounds, ratio=0.10):
    """ Grow a box by ratio of its size per dimension (ratio/2 on each side),
    clamped to the image

    Args:
        box (BoundingBox): box to expand
        bounds: (height, width) of the image
        ratio (float): total growth per dimension

    Returns: new BoundingBox
    """
    h, w = bounds
    dx = box.width * ratio / 2.0
    dy = box.height * ratio / 2.0
    return BoundingBox(max(box.x_min - dx, 0.0), max(box.y_min - dy, 0.0),
                       min(box.x_max + dx, float(w)), min(box.y_max + dy, float(h)))


class CropGeometry(object):
    """ Forward geometry of a crop-and-resize, used to map cell-space
    masks back onto the panel """

    def __init__(self, x0, y0, x1, y1, target):
        self.x0, self.y0, self.x1, self.y1 = int(x0), int(y0), int(x1), int(y1)
        self.target = (int(target[0]), int(target[1]))


    def __repr__(self):
        return '<CropGeometry [{:d}:{:d}, {:d}:{:d}] -> {:d}x{:d}>'.format(
            self.y0, self.y1, self.x0, self.x1, self.target[0], self.target[1])


    @property
    def box(self):
        return BoundingBox(self.x0, self.y0, self.x1, self.y1)


    def mapMaskToPanel(self, mask, panel_shape):
        """ Nearest-neighbour inverse resample of a cell-space mask into
        panel coordinates

        Args:
            mask: BinaryMask of the target shape
            panel_shape: (height, width) of the panel

        Returns: uint8 mask of panel_shape
        """
        mask = np.asarray(mask).astype(np.uint8)
        if mask.shape != self.target:
            raise ValueError('Mask shape {:s} does not match crop target {:s}'.format(str(mask.shape), str(self.target)))
        w, h = self.x1 - self.x0, self.y1 - self.y0
        if w <= 0 or h <= 0:
            raise ValueError('Cannot invert degenerate crop geometry {:s}'.format(repr(self)))
        back = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
        out = np.zeros(panel_shape[:2], dtype=np.uint8)
        out[self.y0:self.y1, self.x0:self.x1] = back
        return out



def crop_resize(panel, box, target=(300, 300)):
    """ Crop a box from a panel and bilinearly resample it

    Args:
        panel: GrayImage
        box (BoundingBox): region to crop, clamped to the panel
        target: (height, width) of the output

    Returns: (cell, CropGeometry)
    """
    panel = check_gray(panel, 'panel')
    x0, y0, x1, y1 = box.pixelBounds(bounds=panel.shape)
    if x1 <= x0 or y1 <= y0:
        raise ValueError('Degenerate crop box {:s} for panel of shape {:s}'.format(repr(box), str(panel.shape)))
    crop = panel[y0:y1, x0:x1]
    th, tw = int(target[0]), int(target[1])
    if crop.shape == (th, tw):
        cell = crop.copy()
    else:
        cell = cv2.resize(crop, (tw, th), interpolation=cv2.INTER_LINEAR)
    return np.clip(cell, 0.0, 1.0), CropGeometry(x0, y0, x1, y1, (th, tw))


def gray_to_rgb(img):
    return np.repeat(np.asarray(img, dtype=np.float64)[:, :, None], 3, axis=2)


def overlay_mask(cell, mask):
    """ Render a cell as RGB with mask pixels in pure red

    Returns: RgbImage
    """
    cell = check_gray(cell, 'cell')
    mask = np.asarray(mask)
    if mask.shape != cell.shape:
        raise ValueError('Mask shape {:s} differs from cell shape {:s}'.format(str(mask.shape), str(cell.shape)))
    rgb = gray_to_rgb(cell)
    rgb[mask.astype(bool)] = RED
    return rgb


def draw_box(img, box, color=GREEN, stroke=2):
    """ Paint the outline of a box onto a copy of an RGB image. The
    stroke lies inside the box footprint; the interior is untouched.

    Args:
        img: RgbImage
        box (BoundingBox): box to outline
        color: (r, g, b) in [0, 1]
        stroke (int): line width in pixels

    Returns: new RgbImage
    """
    out = np.array(img, dtype=np.float64, copy=True)
    x0, y0, x1, y1 = box.pixelBounds(bounds=out.shape[:2])
    if x1 <= x0 or y1 <= y0:
        return out
    s = max(int(stroke), 1)
    out[y0:min(y0 + s, y1), x0:x1] = color
    out[max(y1 - s, y0):y1, x0:x1] = color
    out[y0:y1, x0:min(x0 + s, x1)] = color
    out[y0:y1, max(x1 - s, x0):x1] = color
    return out


def read_gray_png(path):
    """ Load an image file as GrayImage (8-bit intensities mapped to [0, 1]) """
    with Image.open(path) as im:
        arr = np.asarray(im.convert('L'), dtype=np.float64)
    return arr / 255.0


def write_gray_png(path, img):
    """ Save a GrayImage as 8-bit grayscale PNG """
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode='L').save(path)


def write_rgb_png(path, img):
    """ Save an RgbImage as 8-bit RGB PNG """
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode='RGB').save(path)


def write_mask_png(path, mask):
    """ Save a BinaryMask as 1-bit PNG """
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode='L').convert('1').save(path)
