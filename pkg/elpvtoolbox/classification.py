# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Defective / non-defective cell classifier with uncertainty routing

import logging
from time import perf_counter
from functools import partial

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.efficientnet import EfficientNet, MBConvConfig

from .data import ConfigSet, RunConfig
from .datasets import NON_DEFECTIVE, DEFECTIVE, DatasetSplit
from .imaging import check_gray
from .recorder import HistoryRecorder

logger = logging.getLogger(__name__)

# Class index order of the two-logit head
CLASS_NAMES = (NON_DEFECTIVE, DEFECTIVE)

# Base stages of the B0..B7 family: expand ratio, kernel, stride, in, out, layers
BASE_STAGES = [[1, 3, 1, 32, 16, 1],
               [6, 3, 2, 16, 24, 2],
               [6, 5, 2, 24, 40, 2],
               [6, 3, 2, 40, 80, 3],
               [6, 5, 1, 80, 112, 3],
               [6, 5, 2, 112, 192, 4],
               [6, 3, 1, 192, 320, 1]]

REFERENCE_CLASSES = 1000


@RunConfig.registerSection
class ClassifierConfig(ConfigSet):
    """ Classifier architecture and decision rule.

    The defaults describe EfficientNet-B1 (width 1.0, depth 1.1, 240 px).
    Tests use smaller width/depth multipliers, fewer stages and a lower
    input resolution.
    """
    SECTION = 'classifier'
    DEFAULTS = {'width_mult': 1.0,
                'depth_mult': 1.1,
                'dropout': 0.2,
                'stochastic_depth': 0.2,
                'stages': None,
                'last_channel': None,
                'input_resolution': 240,
                'num_outputs': 2,
                'decision_threshold': 0.70}

    def validate(self):
        self._require(self.width_mult > 0, 'width_mult', 'must be > 0')
        self._require(self.depth_mult > 0, 'depth_mult', 'must be > 0')
        self._require(0.0 <= self.dropout < 1.0, 'dropout', 'must lie in [0, 1)')
        self._require(0.0 <= self.stochastic_depth < 1.0, 'stochastic_depth', 'must lie in [0, 1)')
        self._require(self.stages is None or (len(self.stages) >= 1 and all([len(s) == 6 for s in self.stages])),
                      'stages', 'must be None or a list of [expand, kernel, stride, in, out, layers] rows')
        self._require(isinstance(self.input_resolution, int) and self.input_resolution >= 32,
                      'input_resolution', 'must be an integer >= 32')
        self._require(self.num_outputs == 2, 'num_outputs', 'must be 2')
        self._require(0.5 < self.decision_threshold < 1.0, 'decision_threshold', 'must lie in (0.5, 1.0)')


@RunConfig.registerSection
class ClassifierTrainConfig(ConfigSet):
    """ Classifier training schedule: adaptive optimizer with the learning
    rate multiplied by decay_factor every decay_every steps """
    SECTION = 'classifier_training'
    DEFAULTS = {'steps': 75000,
                'learning_rate': 1.2e-4,
                'decay_every': 200,
                'decay_factor': 0.98,
                'batch_size': 16,
                'validate_every': 10000,
                'seed': 0,
                'device': 'cpu'}

    def validate(self):
        self._require(self.steps >= 0, 'steps', 'must be >= 0')
        self._require(self.learning_rate > 0, 'learning_rate', 'must be > 0')
        self._require(self.decay_every >= 1, 'decay_every', 'must be >= 1')
        self._require(0.0 < self.decay_factor <= 1.0, 'decay_factor', 'must lie in (0, 1]')
        self._require(self.batch_size >= 1, 'batch_size', 'must be >= 1')
        self._require(self.validate_every >= 1, 'validate_every', 'must be >= 1')



def label_from_probability(p_non_defective, threshold=0.70):
    """ Routing rule: a cell is non-defective only if the model is at
    least threshold sure of it """
    return NON_DEFECTIVE if float(p_non_defective) >= threshold else DEFECTIVE


class ClassificationResult(object):

    def __init__(self, p_non_defective, threshold=0.70):
        self.p_non_defective = float(p_non_defective)
        self.threshold = float(threshold)
        self.label = label_from_probability(self.p_non_defective, self.threshold)


    def __repr__(self):
        return '<ClassificationResult {:s} p_non_defective={:.4f}>'.format(self.label, self.p_non_defective)


    @property
    def defective(self):
        return self.label == DEFECTIVE


    def toDict(self):
        return {'label': self.label, 'p_non_defective': self.p_non_defective, 'threshold': self.threshold}



class ConfusionMatrix(object):
    """ Binary confusion matrix, positive class = defective """

    def __init__(self, tp=0, fp=0, fn=0, tn=0):
        self.tp = int(tp)
        self.fp = int(fp)
        self.fn = int(fn)
        self.tn = int(tn)


    def __repr__(self):
        return '<ConfusionMatrix tp={:d} fp={:d} fn={:d} tn={:d} accuracy={:.4f}>'.format(
            self.tp, self.fp, self.fn, self.tn, self.accuracy)


    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


    @property
    def accuracy(self):
        if self.total == 0:
            return 0.0
        return (self.tp + self.tn) / float(self.total)


    @property
    def precision(self):
        return self.tp / float(self.tp + self.fp) if self.tp + self.fp > 0 else 0.0


    @property
    def recall(self):
        return self.tp / float(self.tp + self.fn) if self.tp + self.fn > 0 else 0.0


    def add(self, truth, predicted):
        """ Count one (true label, predicted label) pair """
        if truth == DEFECTIVE:
            if predicted == DEFECTIVE:
                self.tp += 1
            else:
                self.fn += 1
        else:
            if predicted == DEFECTIVE:
                self.fp += 1
            else:
                self.tn += 1


    @classmethod
    def fromLabels(cls, truths, predictions):
        if len(truths) != len(predictions):
            raise ValueError('Got {:d} true labels but {:d} predictions'.format(len(truths), len(predictions)))
        cm = cls()
        for t, p in zip(truths, predictions):
            cm.add(t, p)
        return cm


    def toDict(self):
        return {'tp': self.tp, 'fp': self.fp, 'fn': self.fn, 'tn': self.tn,
                'accuracy': self.accuracy, 'precision': self.precision, 'recall': self.recall}



class CellClassifier(nn.Module):
    """ EfficientNet-family network on single-channel cells. Inputs are
    resized to the configured resolution and the gray channel is
    replicated to three. """

    CHECKPOINT_KIND = 'classifier'

    def __init__(self, cfg=None):
        super(CellClassifier, self).__init__()
        self.cfg = cfg if cfg is not None else ClassifierConfig()
        self.trained = False
        conf = partial(MBConvConfig, width_mult=self.cfg.width_mult, depth_mult=self.cfg.depth_mult)
        stages = self.cfg.stages if self.cfg.stages is not None else BASE_STAGES
        settings = [conf(*[float(s[0])] + [int(v) for v in s[1:]]) for s in stages]
        self.net = EfficientNet(settings, dropout=self.cfg.dropout,
                                stochastic_depth_prob=self.cfg.stochastic_depth,
                                num_classes=self.cfg.num_outputs, last_channel=self.cfg.last_channel)


    @property
    def config(self):
        return self.cfg


    @property
    def threshold(self):
        return self.cfg.decision_threshold


    def forward(self, x):
        """ Logits for a (N, 1, H, W) batch in [0, 1] """
        n = self.cfg.input_resolution
        if tuple(x.shape[-2:]) != (n, n):
            x = F.interpolate(x, size=(n, n), mode='bilinear', align_corners=False)
        x = (x.repeat(1, 3, 1, 1) - 0.5) / 0.25
        return self.net(x)


    def predictProba(self, cells):
        """ p_non_defective for a list of GrayImages """
        p = next(self.parameters())
        batch = np.stack([check_gray(c, 'cell').astype(np.float32) for c in cells])[:, None]
        was_training = self.training
        self.eval()
        with torch.no_grad():
            logits = self(torch.from_numpy(batch).to(device=p.device, dtype=p.dtype))
        self.train(was_training)
        return torch.softmax(logits.double(), dim=1)[:, 0].cpu().numpy()



def build_classifier(cfg=None, seed=None):
    """ Build the cell classifier

    Args:
        cfg (ClassifierConfig): architecture, EfficientNet-B1 if None
        seed (int): if given, seed torch before initializing weights

    Returns: CellClassifier
    """
    if cfg is None:
        cfg = ClassifierConfig()
    if seed is not None:
        torch.manual_seed(seed)
    return CellClassifier(cfg)


def audit_classifier(model):
    """ Parameter counts of the classifier. reference_total is the count
    the same network has with the architecture's 1000-way head. """
    head = model.net.classifier[-1]
    total = sum([p.numel() for p in model.parameters()])
    head_n = sum([p.numel() for p in head.parameters()])
    return {'total': total,
            'features': sum([p.numel() for p in model.net.features.parameters()]),
            'head': head_n,
            'reference_total': total - head_n + head.in_features * REFERENCE_CLASSES + REFERENCE_CLASSES}


def _require_trained(model):
    if not getattr(model, 'trained', False):
        raise RuntimeError('Cell classification requires a trained classifier')


def _threshold(model, threshold):
    if threshold is not None:
        return threshold
    return model.cfg.decision_threshold


def classify_cells(model, cells, threshold=None, batch_size=32):
    """ Batched classification

    Args:
        model: trained classifier (anything with predictProba, cfg and trained)
        cells (list): GrayImages
        threshold (float): decision threshold, model config if None
        batch_size (int): inference batch size

    Returns: list of ClassificationResult
    """
    _require_trained(model)
    threshold = _threshold(model, threshold)
    results = []
    for i in range(0, len(cells), batch_size):
        probs = model.predictProba(cells[i:i + batch_size])
        results += [ClassificationResult(p, threshold) for p in probs]
    return results


def classify_cell(model, cell, threshold=None):
    """ Classify one cell; the label follows the threshold rule, never argmax """
    return classify_cells(model, [cell], threshold=threshold)[0]


def _records(split):
    if isinstance(split, DatasetSplit):
        return split.validation
    return list(split)


def evaluate_classifier(model, split, threshold=None, batch_size=32):
    """ Confusion matrix over a labelled validation set

    Args:
        model: trained classifier
        split: DatasetSplit (its validation part is used) or list of CellRecords
        threshold (float): decision threshold, model config if None

    Returns: ConfusionMatrix
    """
    records = _records(split)
    if len(records) == 0:
        raise ValueError('Cannot evaluate the classifier on an empty set')
    results = classify_cells(model, [r.image for r in records], threshold=threshold, batch_size=batch_size)
    return ConfusionMatrix.fromLabels([r.label for r in records], [r.label for r in results])


def _targets(records, device):
    return torch.tensor([CLASS_NAMES.index(r.label) for r in records], dtype=torch.int64, device=device)


def _batch(records, device):
    arr = np.stack([check_gray(r.image, r.source_id).astype(np.float32) for r in records])[:, None]
    return torch.from_numpy(arr).to(device)


def _validate(model, records, batch_size, device):
    model.eval()
    loss_sum, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            logits = model(_batch(chunk, device))
            loss_sum += float(F.cross_entropy(logits, _targets(chunk, device), reduction='sum'))
            p = torch.softmax(logits.double(), dim=1)[:, 0].cpu().numpy()
            correct += sum([label_from_probability(pi, model.cfg.decision_threshold) == r.label
                            for pi, r in zip(p, chunk)])
    model.train()
    return loss_sum / len(records), correct / float(len(records))


def train_classifier(model, split, cfg=None, debug=False):
    """ Train the classifier on labelled cells

    Args:
        model (CellClassifier): model to train (updated in place)
        split (DatasetSplit): labelled CellRecords
        cfg (ClassifierTrainConfig): schedule
        debug (bool): debug output

    Returns: (model, HistoryRecorder with step, train_loss, val_loss, val_accuracy)
    """
    if cfg is None:
        cfg = ClassifierTrainConfig()
    history = HistoryRecorder(fields=['step', 'train_loss', 'val_loss', 'val_accuracy'], tag='CLS', debug=debug)
    labels = set([r.label for r in split.train])
    if labels != set(CLASS_NAMES):
        raise ValueError('Classifier training needs both classes, training split has: {:s}'.format(
            ', '.join(sorted(labels)) if len(labels) > 0 else 'no records'))
    if cfg.steps == 0:
        return model, history

    device = torch.device(cfg.device)
    model.to(device)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.decay_factor)
    val_records = split.validation if len(split.validation) > 0 else split.train

    history.startRecording()
    t0 = perf_counter()
    model.train()
    for step in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(split.train), size=cfg.batch_size)
        chunk = [split.train[int(i)] for i in picks]
        loss = F.cross_entropy(model(_batch(chunk, device)), _targets(chunk, device))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        model.trained = True

        if step % cfg.validate_every == 0 or step == cfg.steps:
            val_loss, val_acc = _validate(model, val_records, cfg.batch_size, device)
            history.recordRow(step, train_loss=loss.item(), val_loss=val_loss, val_accuracy=val_acc)
            history.recordEvent('VALIDATION step={:d}'.format(step))
            logger.info('[CLS] step {:d}/{:d}: train_loss {:.5f}, val_loss {:.5f}, val_accuracy {:.4f}, lr {:.2e}, {:.1f}s'.format(
                step, cfg.steps, loss.item(), val_loss, val_acc, sched.get_last_lr()[0], perf_counter() - t0))
        else:
            history.recordRow(step, train_loss=loss.item())
    history.stopRecording()
    model.eval()
    return model, history
