# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Weakly supervised anomaly segmentation: convolutional autoencoder, SSIM loss, mask extraction

import logging
from time import perf_counter

import numpy as np
import torch
import torch.nn as nn

from .data import ConfigSet, RunConfig
from .datasets import NON_DEFECTIVE
from .imaging import (SsimParams, ssim_tensor, ssim_map, ssim_scalar, quantize, otsu_binarize,
                      otsu_from_histogram, overlay_mask, check_gray, HIST_BINS)
from .recorder import HistoryRecorder

logger = logging.getLogger(__name__)

# Layer table of the reference architecture: (layer, output shape, stride)
REFERENCE_LAYER_TABLE = [
    ('Input', (300, 300, 1), None),
    ('Conv2D', (150, 150, 64), 2),
    ('Conv2D', (150, 150, 16), 1),
    ('Conv2D', (75, 75, 32), 2),
    ('Conv2D', (75, 75, 16), 1),
    ('Flatten', (90000,), None),
    ('Dense', (500,), None),
    ('Dense', (90000,), None),
    ('Deconv2D', (75, 75, 16), 1),
    ('Deconv2D', (75, 75, 32), 1),
    ('Deconv2D', (150, 150, 16), 2),
    ('Deconv2D', (150, 150, 64), 1),
    ('Output', (300, 300, 1), 2),
]


@RunConfig.registerSection
class AutoencoderSpec(ConfigSet):
    """ Convolutional autoencoder layout

    Attributes:
        input_size (int): side length of the square single-channel input
        encoder (list): [filters, kernel, stride] per convolution
        latent_dim (int): width d of the dense bottleneck
        decoder (list): [filters, kernel, stride] per transposed convolution
        output_stride (int): stride of the final single-channel transposed convolution
        negative_slope (float): leaky rectifier slope
    """
    SECTION = 'autoencoder'
    DEFAULTS = {'input_size': 300,
                'encoder': [[64, 4, 2], [16, 3, 1], [32, 4, 2], [16, 3, 1]],
                'latent_dim': 500,
                'decoder': [[16, 3, 1], [32, 3, 1], [16, 4, 2], [64, 3, 1]],
                'output_stride': 2,
                'negative_slope': 0.2}

    def validate(self):
        self._require(isinstance(self.input_size, int) and self.input_size >= 8, 'input_size', 'must be an integer >= 8')
        for key in ['encoder', 'decoder']:
            self._require(len(self[key]) >= 1 and all([len(l) == 3 for l in self[key]]), key,
                          'must list [filters, kernel, stride] triples')
            for f, k, s in self[key]:
                self._require(f >= 1 and k >= 1 and s >= 1, key, 'filters, kernel and stride must be positive')
                self._require((k - s) % 2 == 0 and k >= s, key,
                              'kernel {:d} / stride {:d} needs asymmetric padding'.format(k, s))
        size = self.input_size
        for f, k, s in self.encoder:
            self._require(size % s == 0, 'encoder', 'stride {:d} does not divide size {:d}'.format(s, size))
            size = size // s
        self._require(isinstance(self.output_stride, int) and self.output_stride >= 1, 'output_stride',
                      'must be a positive integer')
        up = self.output_stride
        for f, k, s in self.decoder:
            up *= s
        self._require(size * up == self.input_size, 'decoder', 'does not restore the input size')
        flat = size * size * self.encoder[-1][0]
        self._require(isinstance(self.latent_dim, int) and 1 <= self.latent_dim < self.input_size ** 2,
                      'latent_dim', 'must be smaller than the input dimensionality')
        self._require(flat >= 1, 'encoder', 'flattened size must be positive')
        self._require(0.0 <= self.negative_slope < 1.0, 'negative_slope', 'must lie in [0, 1)')


    def layerShapes(self):
        """ Analytic (layer, output shape) rows for this layout """
        rows = [('Input', (self.input_size, self.input_size, 1))]
        size = self.input_size
        for f, k, s in self.encoder:
            size = size // s
            rows.append(('Conv2D', (size, size, f)))
        flat = size * size * self.encoder[-1][0]
        rows.append(('Flatten', (flat,)))
        rows.append(('Dense', (self.latent_dim,)))
        rows.append(('Dense', (flat,)))
        for f, k, s in self.decoder:
            size = size * s
            rows.append(('Deconv2D', (size, size, f)))
        rows.append(('Output', (self.input_size, self.input_size, 1)))
        return rows


    def isReferenceLayout(self):
        return self.toDict() == AutoencoderSpec().toDict()


@RunConfig.registerSection
class SegTrainConfig(ConfigSet):
    """ Autoencoder training schedule: steps must be a whole number of epochs """
    SECTION = 'autoencoder_training'
    DEFAULTS = {'batch_size': 8,
                'steps': 13400,
                'learning_rate': 0.0015,
                'kfold_k': 10,
                'epoch_steps': 268,
                'seed': 0,
                'device': 'cpu'}

    def validate(self):
        self._require(self.batch_size >= 1, 'batch_size', 'must be >= 1')
        self._require(self.epoch_steps >= 1, 'epoch_steps', 'must be >= 1')
        self._require(self.steps >= 0 and self.steps % self.epoch_steps == 0, 'steps',
                      'must be a whole number of epochs of {:d} steps'.format(self.epoch_steps))
        self._require(self.learning_rate > 0, 'learning_rate', 'must be > 0')
        self._require(self.kfold_k >= 2, 'kfold_k', 'must be >= 2')

    @property
    def epochs(self):
        return self.steps // self.epoch_steps


@RunConfig.registerSection
class SegmentationParams(ConfigSet):
    """ Anomaly extraction guard: masks stay empty when the mean SSIM
    reaches guard_floor or the dissimilarity range is below delta """
    SECTION = 'segmentation'
    DEFAULTS = {'guard_floor': 0.98,
                'delta': 0.05}

    def validate(self):
        self._require(0.0 < self.guard_floor <= 1.0, 'guard_floor', 'must lie in (0, 1]')
        self._require(0.0 <= self.delta < 1.0, 'delta', 'must lie in [0, 1)')



def check_layer_table(rows, table=REFERENCE_LAYER_TABLE):
    """ Compare (layer, output shape) rows with the reference layer table

    Raises: ValueError naming the first row that differs
    """
    if len(rows) != len(table):
        raise ValueError('Autoencoder has {:d} layers, reference table lists {:d}'.format(len(rows), len(table)))
    for i, ((name, shape), (ref_name, ref_shape, _)) in enumerate(zip(rows, table)):
        if name != ref_name or tuple(shape) != tuple(ref_shape):
            raise ValueError('Layer {:d} ({:s}) has output shape {:s}, expected {:s} {:s}'.format(
                i, name, str(tuple(shape)), ref_name, str(tuple(ref_shape))))


class ConvAutoencoder(nn.Module):
    """ Strided convolutional encoder, dense bottleneck and mirrored
    transposed-convolution decoder with sigmoid output """

    CHECKPOINT_KIND = 'autoencoder'

    def __init__(self, spec=None):
        super(ConvAutoencoder, self).__init__()
        self.spec = spec if spec is not None else AutoencoderSpec()
        self.trained = False
        slope = self.spec.negative_slope

        enc = []
        ch = 1
        size = self.spec.input_size
        for f, k, s in self.spec.encoder:
            enc += [nn.Conv2d(ch, f, kernel_size=k, stride=s, padding=(k - s) // 2), nn.LeakyReLU(slope)]
            ch = f
            size = size // s
        self.encoder = nn.Sequential(*enc)
        self._code_shape = (ch, size, size)
        flat = ch * size * size

        self.to_latent = nn.Sequential(nn.Flatten(), nn.Linear(flat, self.spec.latent_dim), nn.LeakyReLU(slope))
        self.from_latent = nn.Sequential(nn.Linear(self.spec.latent_dim, flat), nn.LeakyReLU(slope))

        dec = []
        for f, k, s in self.spec.decoder:
            dec += [nn.ConvTranspose2d(ch, f, kernel_size=k, stride=s, padding=(k - s) // 2), nn.LeakyReLU(slope)]
            ch = f
        self.decoder = nn.Sequential(*dec)
        s = self.spec.output_stride
        self.output = nn.Sequential(nn.ConvTranspose2d(ch, 1, kernel_size=s + 2, stride=s, padding=1), nn.Sigmoid())


    @property
    def config(self):
        return self.spec


    def encode(self, x):
        return self.to_latent(self.encoder(x))


    def decode(self, z):
        h = self.from_latent(z).view(-1, *self._code_shape)
        return self.output(self.decoder(h))


    def forward(self, x):
        return self.decode(self.encode(x))


    def trace(self, x):
        """ Forward pass returning (layer, output shape) rows in table layout """
        def _hwc(t):
            return (int(t.shape[2]), int(t.shape[3]), int(t.shape[1]))

        rows = [('Input', _hwc(x))]
        h = x
        for m in self.encoder:
            h = m(h)
            if isinstance(m, nn.Conv2d):
                rows.append(('Conv2D', _hwc(h)))
        h = self.to_latent[0](h)
        rows.append(('Flatten', (int(h.shape[1]),)))
        h = self.to_latent[2](self.to_latent[1](h))
        rows.append(('Dense', (int(h.shape[1]),)))
        h = self.from_latent(h)
        rows.append(('Dense', (int(h.shape[1]),)))
        h = h.view(-1, *self._code_shape)
        for m in self.decoder:
            h = m(h)
            if isinstance(m, nn.ConvTranspose2d):
                rows.append(('Deconv2D', _hwc(h)))
        h = self.output(h)
        rows.append(('Output', _hwc(h)))
        return rows



def build_autoencoder(spec=None, seed=None):
    """ Build the autoencoder for a spec. The reference layout is checked
    row by row against the reference layer table.

    Args:
        spec (AutoencoderSpec): layout, reference layout if None
        seed (int): if given, seed torch before initializing weights

    Returns: ConvAutoencoder
    """
    if spec is None:
        spec = AutoencoderSpec()
    rows = spec.layerShapes()
    if spec.isReferenceLayout():
        check_layer_table(rows)
    if rows[-1][1] != rows[0][1]:
        raise ValueError('Autoencoder output shape {:s} differs from input {:s}'.format(str(rows[-1][1]), str(rows[0][1])))
    if seed is not None:
        torch.manual_seed(seed)
    return ConvAutoencoder(spec)


def audit_autoencoder(model):
    """ (layer, output shape) rows measured by a forward pass on a zero image """
    n = model.spec.input_size
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p = next(model.parameters())
        rows = model.trace(torch.zeros((1, 1, n, n), dtype=p.dtype, device=p.device))
    model.train(was_training)
    return rows


def _to_batch(cells, device='cpu', dtype=torch.float32):
    arr = np.stack([np.asarray(c, dtype=np.float32) for c in cells])[:, None]
    return torch.from_numpy(arr).to(device=device, dtype=dtype)


def reconstruct(model, cell):
    """ Autoencoder reconstruction of one cell

    Args:
        model (ConvAutoencoder): autoencoder
        cell: GrayImage of the model input shape

    Returns: GrayImage in [0, 1]
    """
    cell = check_gray(cell, 'cell')
    n = model.spec.input_size
    if cell.shape != (n, n):
        raise ValueError('Cell of shape {:s} does not match autoencoder input {:d}x{:d}'.format(str(cell.shape), n, n))
    p = next(model.parameters())
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(_to_batch([cell], device=p.device, dtype=p.dtype))
    model.train(was_training)
    return np.clip(out[0, 0].detach().cpu().numpy().astype(np.float64), 0.0, 1.0)


def ssim_loss(reconstructions, originals, p=None):
    """ Negative mean SSIM of a batch (differentiable)

    Args:
        reconstructions, originals (torch.Tensor): (N, 1, H, W) batches
        p (SsimParams): SSIM parameters

    Returns: scalar tensor in [-1, 1]
    """
    if tuple(reconstructions.shape) != tuple(originals.shape):
        raise ValueError('SSIM loss inputs differ in shape: {:s} vs {:s}'.format(
            str(tuple(reconstructions.shape)), str(tuple(originals.shape))))
    if reconstructions.dim() != 4:
        raise ValueError('SSIM loss expects (N, 1, H, W) batches')
    per_image = ssim_tensor(reconstructions, originals, p, pad=False).mean(dim=(1, 2, 3))
    return -per_image.mean()


def kfold_partition(n, k, seed=0):
    """ Seeded partition of range(n) into k folds of near-equal size

    Returns: list of k index arrays
    """
    if k < 2:
        raise ValueError('Need at least two folds, got {:d}'.format(k))
    if n < k:
        raise ValueError('Cannot split {:d} records into {:d} folds'.format(n, k))
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _batches(indices, size):
    for i in range(0, len(indices), size):
        yield indices[i:i + size]


def train_autoencoder(model, records, cfg=None, ssim_params=None, debug=False):
    """ Train the autoencoder on non-defective cells with the negative SSIM loss.

    Records are split into k folds; every epoch trains on k-1 folds and
    validates on one fold drawn at random for that epoch.

    Args:
        model (ConvAutoencoder): model to train (updated in place)
        records (list): non-defective CellRecords
        cfg (SegTrainConfig): schedule
        ssim_params (SsimParams): SSIM window and constants
        debug (bool): debug output

    Returns: (model, HistoryRecorder with epoch, train_loss, val_loss, val_fold)
    """
    if cfg is None:
        cfg = SegTrainConfig()
    if ssim_params is None:
        ssim_params = SsimParams()
    history = HistoryRecorder(fields=['epoch', 'train_loss', 'val_loss', 'val_fold'], index='epoch',
                              tag='SEG', debug=debug)
    for r in records:
        if r.label != NON_DEFECTIVE:
            raise ValueError('Autoencoder training data must be non-defective, got {:s}'.format(repr(r)))
    folds = kfold_partition(len(records), cfg.kfold_k, cfg.seed)
    if cfg.epochs == 0:
        return model, history

    device = torch.device(cfg.device)
    model.to(device)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    n = model.spec.input_size

    def _load(idx):
        imgs = []
        for i in idx:
            img = records[int(i)].image
            if img.shape != (n, n):
                raise ValueError('Record {:s} has shape {:s}, autoencoder expects {:d}x{:d}'.format(
                    records[int(i)].source_id, str(img.shape), n, n))
            imgs.append(img)
        return _to_batch(imgs, device=device)

    history.startRecording()
    t0 = perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        val_fold = int(rng.integers(0, cfg.kfold_k))
        train_idx = np.concatenate([f for i, f in enumerate(folds) if i != val_fold])
        order = rng.permutation(train_idx)
        pos = 0
        losses = []
        model.train()
        for _ in range(cfg.epoch_steps):
            if pos + cfg.batch_size > len(order):
                order = rng.permutation(train_idx)
                pos = 0
            idx = order[pos:pos + cfg.batch_size]
            pos += cfg.batch_size
            x = _load(idx)
            opt.zero_grad()
            loss = ssim_loss(model(x), x, ssim_params)
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
            step += 1
        model.trained = True

        model.eval()
        val_losses, val_n = 0.0, 0
        with torch.no_grad():
            for idx in _batches(folds[val_fold], cfg.batch_size):
                x = _load(idx)
                val_losses += float(ssim_loss(model(x), x, ssim_params).item()) * len(idx)
                val_n += len(idx)
        val_loss = val_losses / max(val_n, 1)
        train_loss = float(np.mean(losses))
        history.recordRow(epoch + 1, train_loss=train_loss, val_loss=val_loss, val_fold=val_fold)
        history.recordEvent('VALIDATION epoch={:d}'.format(epoch + 1))
        logger.info('[SEG] epoch {:d}/{:d} (step {:d}): train_loss {:.5f}, val_loss {:.5f} (fold {:d}), {:.1f}s'.format(
            epoch + 1, cfg.epochs, step, train_loss, val_loss, val_fold, perf_counter() - t0))
    history.stopRecording()
    model.eval()
    return model, history


class AnomalySegment(object):
    """ Anomaly extraction result for one cell """

    def __init__(self, reconstruction, ssim_values, threshold, mask, overlay, mean_ssim, guarded=False, degenerate=False):
        self.reconstruction = reconstruction
        self.ssim_map = ssim_values
        self.threshold = threshold
        self.mask = mask
        self.overlay = overlay
        self.mean_ssim = float(mean_ssim)
        self.guarded = bool(guarded)
        self.degenerate = bool(degenerate)


    def __repr__(self):
        return '<AnomalySegment area={:d} mean_ssim={:.4f}{:s}>'.format(
            self.area, self.mean_ssim, ' guarded' if self.guarded else '')


    @property
    def area(self):
        return int(self.mask.sum())


    @property
    def empty(self):
        return self.area == 0


    def toDict(self):
        return {'threshold': self.threshold,
                'mean_ssim': self.mean_ssim,
                'mask_area': self.area,
                'guarded': self.guarded,
                'degenerate': self.degenerate}



def dissimilarity(ssim_values):
    """ Map SSIM values in [-1, 1] to dissimilarity in [0, 1] """
    return np.clip((1.0 - np.asarray(ssim_values, dtype=np.float64)) / 2.0, 0.0, 1.0)


def similarity_mask(ssim_values):
    """ Anomaly mask computed on the similarity side: Otsu over the
    reflected dissimilarity histogram, keeping the low-similarity class.
    Equal to the mask otsu_binarize() gives on the dissimilarity. """
    bins = HIST_BINS - 1 - quantize(dissimilarity(ssim_values))
    hist = np.bincount(bins.ravel(), minlength=HIST_BINS)
    t = otsu_from_histogram(hist, prefer='high')
    if t is None:
        return np.zeros(bins.shape, dtype=np.uint8)
    return (bins <= t).astype(np.uint8)


def extract_anomaly(model, cell, p=None, params=None):
    """ Segment the anomalous region of a cell.

    The cell is reconstructed, compared to its reconstruction with a
    per-pixel SSIM map, and the dissimilarity is binarized with Otsu's
    method. Near-perfect reconstructions (mean SSIM at or above the guard
    floor, or a flat dissimilarity map) yield an empty mask.

    Args:
        model (ConvAutoencoder): trained autoencoder
        cell: GrayImage of the model input shape
        p (SsimParams): SSIM parameters
        params (SegmentationParams): guard parameters

    Returns: AnomalySegment
    """
    if not getattr(model, 'trained', False):
        raise RuntimeError('Anomaly extraction requires a trained autoencoder')
    if p is None:
        p = SsimParams()
    if params is None:
        params = SegmentationParams()
    cell = check_gray(cell, 'cell')

    recon = reconstruct(model, cell)
    d_map = ssim_map(cell, recon, p)
    mean_ssim = ssim_scalar(cell, recon, p)
    u = dissimilarity(d_map)

    if mean_ssim >= params.guard_floor or float(u.max() - u.min()) < params.delta:
        mask = np.zeros(cell.shape, dtype=np.uint8)
        return AnomalySegment(recon, d_map, None, mask, overlay_mask(cell, mask), mean_ssim, guarded=True)

    threshold, mask, degenerate = otsu_binarize(u)
    return AnomalySegment(recon, d_map, threshold, mask, overlay_mask(cell, mask), mean_ssim,
                          degenerate=degenerate)
