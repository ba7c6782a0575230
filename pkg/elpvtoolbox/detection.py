# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Objectness-only region proposal cell detector, training, inference and AP evaluation

import logging
from time import perf_counter

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision
from torchvision import ops
from torchvision.models.detection.transform import GeneralizedRCNNTransform, resize_boxes
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.rpn import (RPNHead, RegionProposalNetwork,
                                              concat_box_prediction_layers, permute_and_flatten)

from .data import ConfigSet, RunConfig
from .imaging import BoundingBox, check_gray
from .stats import box_iou, interpolated_ap
from .recorder import HistoryRecorder

logger = logging.getLogger(__name__)

BACKBONE_DEPTHS = {18: torchvision.models.resnet18,
                   34: torchvision.models.resnet34,
                   50: torchvision.models.resnet50,
                   101: torchvision.models.resnet101}

COCO_IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)


@RunConfig.registerSection
class DetectorConfig(ConfigSet):
    """ Cell detector layout and inference settings

    Attributes:
        backbone_depth (int): residual network depth (18, 34, 50 or 101)
        anchor_scales, aspect_ratios (list): anchor set, k = scales x ratios per location
        max_proposals (int): maximum detections per panel
        nms_iou (float): IoU above which the lower-scored proposal is suppressed
        objectness_loss_weight, localization_loss_weight (float): loss weights
        classification_loss_weight (float): weight of the optional class head loss
        class_head (bool): build a per-anchor class head
        score_floor (float): minimum objectness of an emitted detection
        min_size, max_size (int): panel resize rule (longer side at most max_size)
    """
    SECTION = 'detector'
    DEFAULTS = {'backbone_depth': 101,
                'anchor_scales': [64, 128, 256],
                'aspect_ratios': [0.5, 1.0, 2.0],
                'max_proposals': 300,
                'pre_nms_top_n': 2000,
                'nms_iou': 0.9,
                'objectness_loss_weight': 1.0,
                'localization_loss_weight': 1.0,
                'classification_loss_weight': 0.0,
                'class_head': False,
                'score_floor': 0.5,
                'min_size': 800,
                'max_size': 1333,
                'fg_iou': 0.7,
                'bg_iou': 0.3,
                'batch_size_per_image': 256,
                'positive_fraction': 0.5}

    def validate(self):
        self._require(self.backbone_depth in BACKBONE_DEPTHS, 'backbone_depth',
                      'must be one of {:s}'.format(str(sorted(BACKBONE_DEPTHS.keys()))))
        self._require(len(self.anchor_scales) >= 1 and all([s > 0 for s in self.anchor_scales]),
                      'anchor_scales', 'must be a non-empty list of positive sizes')
        self._require(len(self.aspect_ratios) >= 1 and all([r > 0 for r in self.aspect_ratios]),
                      'aspect_ratios', 'must be a non-empty list of positive ratios')
        self._require(isinstance(self.max_proposals, int) and self.max_proposals >= 1, 'max_proposals', 'must be >= 1')
        self._require(self.pre_nms_top_n >= self.max_proposals, 'pre_nms_top_n', 'must be >= max_proposals')
        self._require(0.0 < self.nms_iou <= 1.0, 'nms_iou', 'must lie in (0, 1]')
        self._require(self.objectness_loss_weight >= 0, 'objectness_loss_weight', 'must be >= 0')
        self._require(self.localization_loss_weight >= 0, 'localization_loss_weight', 'must be >= 0')
        self._require(self.classification_loss_weight >= 0, 'classification_loss_weight', 'must be >= 0')
        self._require(self.class_head or self.classification_loss_weight == 0, 'classification_loss_weight',
                      'must be 0 without a class head')
        self._require(0.0 <= self.score_floor <= 1.0, 'score_floor', 'must lie in [0, 1]')
        self._require(0 < self.min_size <= self.max_size, 'min_size', 'must lie in (0, max_size]')
        self._require(0.0 < self.bg_iou <= self.fg_iou <= 1.0, 'fg_iou', 'needs 0 < bg_iou <= fg_iou <= 1')

    @property
    def anchors_per_location(self):
        return len(self.anchor_scales) * len(self.aspect_ratios)


@RunConfig.registerSection
class DetectionTrainConfig(ConfigSet):
    """ Detector training schedule """
    SECTION = 'detector_training'
    DEFAULTS = {'steps': 6500,
                'learning_rate': 3e-5,
                'validate_every': 200,
                'batch_size': 1,
                'seed': 0,
                'device': 'cpu'}

    def validate(self):
        self._require(self.steps >= 0, 'steps', 'must be >= 0')
        self._require(self.learning_rate > 0, 'learning_rate', 'must be > 0')
        self._require(self.validate_every >= 1, 'validate_every', 'must be >= 1')
        self._require(self.batch_size >= 1, 'batch_size', 'must be >= 1')



class Detection(object):
    """ One detected cell """

    def __init__(self, box, objectness):
        self.box = box
        self.objectness = float(objectness)


    def __repr__(self):
        return '<Detection {:s} objectness={:.4f}>'.format(repr(self.box), self.objectness)


    def toDict(self):
        d = self.box.toDict()
        d['objectness'] = self.objectness
        return d



class ObjectnessRPN(RegionProposalNetwork):
    """ Region proposal network that also returns proposal scores and,
    when present, trains a per-anchor class head """

    def __init__(self, *args, **kwargs):
        class_head = kwargs.pop('class_head', None)
        class_weight = kwargs.pop('classification_loss_weight', 0.0)
        super(ObjectnessRPN, self).__init__(*args, **kwargs)
        self.class_head = class_head
        self.classification_loss_weight = class_weight


    def forward(self, images, features, targets=None):
        features = list(features.values())
        objectness, pred_bbox_deltas = self.head(features)
        anchors = self.anchor_generator(images, features)

        num_images = len(anchors)
        num_anchors_per_level = [o[0].shape[0] * o[0].shape[1] * o[0].shape[2] for o in objectness]
        objectness, pred_bbox_deltas = concat_box_prediction_layers(objectness, pred_bbox_deltas)
        proposals = self.box_coder.decode(pred_bbox_deltas.detach(), anchors)
        proposals = proposals.view(num_images, -1, 4)
        boxes, scores = self.filter_proposals(proposals, objectness, images.image_sizes, num_anchors_per_level)

        losses = {}
        if self.training:
            if targets is None:
                raise ValueError('Training the detector requires ground-truth targets')
            labels, matched_gt_boxes = self.assign_targets_to_anchors(anchors, targets)
            regression_targets = self.box_coder.encode(matched_gt_boxes, anchors)
            loss_objectness, loss_box = self.compute_loss(objectness, pred_bbox_deltas, labels, regression_targets)
            losses = {'loss_objectness': loss_objectness, 'loss_localization': loss_box}
            if self.class_head is not None and self.classification_loss_weight > 0:
                losses['loss_classification'] = self._classLoss(features, labels)
        return boxes, scores, losses


    def _classLoss(self, features, labels):
        logits = []
        for f in features:
            n, _, h, w = f.shape
            a = self.anchor_generator.num_anchors_per_location()[0]
            logits.append(permute_and_flatten(self.class_head(f), n, a, 2, h, w))
        logits = torch.cat(logits, dim=1).reshape(-1, 2)
        pos, neg = self.fg_bg_sampler(labels)
        idx = torch.where(torch.cat(pos) | torch.cat(neg))[0]
        target = torch.cat(labels)[idx].long()
        return F.cross_entropy(logits[idx], target)



class ObjectnessDetector(nn.Module):
    """ Residual backbone plus region proposal network; the proposals are
    the detections, there is no second-stage classifier """

    CHECKPOINT_KIND = 'detector'

    def __init__(self, cfg=None):
        super(ObjectnessDetector, self).__init__()
        self.cfg = cfg if cfg is not None else DetectorConfig()
        self.trained = False

        self.transform = GeneralizedRCNNTransform(min_size=self.cfg.min_size, max_size=self.cfg.max_size,
                                                  image_mean=[0.5, 0.5, 0.5], image_std=[0.25, 0.25, 0.25])
        resnet = BACKBONE_DEPTHS[self.cfg.backbone_depth](weights=None)
        self.backbone = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool,
                                      resnet.layer1, resnet.layer2, resnet.layer3)
        channels = 1024 if self.cfg.backbone_depth >= 50 else 256

        anchor_generator = AnchorGenerator(sizes=(tuple([int(s) for s in self.cfg.anchor_scales]),),
                                           aspect_ratios=(tuple([float(r) for r in self.cfg.aspect_ratios]),))
        k = self.cfg.anchors_per_location
        head = RPNHead(channels, k)
        class_head = nn.Conv2d(channels, k * 2, kernel_size=1) if self.cfg.class_head else None
        top_n = {'training': self.cfg.pre_nms_top_n, 'testing': self.cfg.pre_nms_top_n}
        post_n = {'training': self.cfg.max_proposals, 'testing': self.cfg.max_proposals}
        self.rpn = ObjectnessRPN(anchor_generator, head, self.cfg.fg_iou, self.cfg.bg_iou,
                                 self.cfg.batch_size_per_image, self.cfg.positive_fraction,
                                 top_n, post_n, self.cfg.nms_iou,
                                 class_head=class_head,
                                 classification_loss_weight=self.cfg.classification_loss_weight)


    @property
    def config(self):
        return self.cfg


    def forward(self, images, targets=None):
        """ Run the detector on a list of (3, H, W) tensors

        Returns: (results, losses) where results holds (boxes, scores) per
            image in input coordinates and losses is empty outside training
        """
        original_sizes = [tuple(img.shape[-2:]) for img in images]
        image_list, targets = self.transform(images, targets)
        features = {'0': self.backbone(image_list.tensors)}
        boxes, scores, losses = self.rpn(image_list, features, targets)
        results = []
        for b, s, resized, orig in zip(boxes, scores, image_list.image_sizes, original_sizes):
            results.append((resize_boxes(b, resized, orig), s))
        return results, losses



def build_detector(cfg=None, seed=None):
    """ Build the objectness-only detector

    Args:
        cfg (DetectorConfig): layout, defaults if None
        seed (int): if given, seed torch before initializing weights

    Returns: ObjectnessDetector
    """
    if cfg is None:
        cfg = DetectorConfig()
    if seed is not None:
        torch.manual_seed(seed)
    return ObjectnessDetector(cfg)


def _count(module):
    if module is None:
        return 0
    return sum([p.numel() for p in module.parameters()])


def audit_detector(model):
    """ Structural audit: prediction heads and parameter counts """
    heads = ['box_regression', 'objectness']
    if model.rpn.class_head is not None:
        heads.append('classification')
    return {'heads': sorted(heads),
            'anchors_per_location': model.rpn.anchor_generator.num_anchors_per_location()[0],
            'parameters': {'backbone': _count(model.backbone),
                           'objectness': _count(model.rpn.head.cls_logits),
                           'box_regression': _count(model.rpn.head.bbox_pred),
                           'shared_conv': _count(model.rpn.head.conv),
                           'classification': _count(model.rpn.class_head)},
            'total': _count(model)}


def detector_loss(losses, cfg):
    """ Weighted total of the localization, objectness and (optional) classification losses """
    total = cfg.localization_loss_weight * losses['loss_localization'] + \
        cfg.objectness_loss_weight * losses['loss_objectness']
    if 'loss_classification' in losses and cfg.classification_loss_weight > 0:
        total = total + cfg.classification_loss_weight * losses['loss_classification']
    return total


def _panel_tensor(img, device='cpu'):
    img = check_gray(img, 'panel')
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    return t.repeat(3, 1, 1).to(device)


def _panel_target(panel, device='cpu'):
    boxes = torch.tensor([b.toList() for b in panel.boxes], dtype=torch.float32, device=device).reshape(-1, 4)
    return {'boxes': boxes, 'labels': torch.ones((boxes.shape[0],), dtype=torch.int64, device=device)}


def _bn_eval(model):
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()


def _validation_losses(model, panels, device):
    """ Mean loss terms over panels, computed in training mode with frozen batch norm """
    was_training = model.training
    model.train()
    _bn_eval(model)
    sums = {'loss_localization': 0.0, 'loss_objectness': 0.0, 'loss_total': 0.0}
    with torch.no_grad():
        for p in panels:
            _, losses = model([_panel_tensor(p.image, device)], [_panel_target(p, device)])
            sums['loss_localization'] += float(losses['loss_localization'])
            sums['loss_objectness'] += float(losses['loss_objectness'])
            sums['loss_total'] += float(detector_loss(losses, model.cfg))
    model.train(was_training)
    n = float(max(len(panels), 1))
    return dict([(k, v / n) for k, v in sums.items()])


def train_detector(model, split, cfg=None, debug=False):
    """ Train the detector on annotated panels

    Args:
        model (ObjectnessDetector): model to train (updated in place)
        split (DatasetSplit): PanelRecords with ground-truth boxes
        cfg (DetectionTrainConfig): schedule
        debug (bool): debug output

    Returns: (model, HistoryRecorder with step, loss_loc, loss_obj, loss_total, train_loss)
    """
    if cfg is None:
        cfg = DetectionTrainConfig()
    history = HistoryRecorder(fields=['step', 'loss_loc', 'loss_obj', 'loss_total', 'train_loss'],
                              tag='DET', debug=debug)
    if len(split.train) == 0:
        raise ValueError('Cannot train the detector on an empty training split')
    if cfg.steps == 0:
        return model, history

    device = torch.device(cfg.device)
    model.to(device)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    val_panels = split.validation if len(split.validation) > 0 else split.train

    history.startRecording()
    t0 = perf_counter()
    train_losses = []
    for step in range(1, cfg.steps + 1):
        model.train()
        picks = rng.integers(0, len(split.train), size=cfg.batch_size)
        panels = [split.train[int(i)] for i in picks]
        _, losses = model([_panel_tensor(p.image, device) for p in panels],
                          [_panel_target(p, device) for p in panels])
        loss = detector_loss(losses, model.cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.trained = True
        train_losses.append(float(loss.item()))

        if step % cfg.validate_every == 0 or step == cfg.steps:
            val = _validation_losses(model, val_panels, device)
            history.recordRow(step, loss_loc=val['loss_localization'], loss_obj=val['loss_objectness'],
                              loss_total=val['loss_total'], train_loss=float(np.mean(train_losses)))
            history.recordEvent('VALIDATION step={:d}'.format(step))
            logger.info('[DET] step {:d}/{:d}: train {:.5f}, val loc {:.5f} obj {:.5f} total {:.5f}, {:.1f}s'.format(
                step, cfg.steps, float(np.mean(train_losses)), val['loss_localization'],
                val['loss_objectness'], val['loss_total'], perf_counter() - t0))
            train_losses = []
    history.stopRecording()
    model.eval()
    return model, history


def postprocess_detections(boxes, scores, image_size, cfg):
    """ Clip, drop low scores, suppress overlaps, order and cap proposals.

    Output order is objectness descending, then box coordinates ascending.
    Overlaps surviving NMS raise a RuntimeError.

    Args:
        boxes (torch.Tensor): (N, 4) boxes in panel coordinates
        scores (torch.Tensor): (N,) objectness in [0, 1]
        image_size: (height, width) of the panel
        cfg (DetectorConfig): floor, NMS threshold and cap

    Returns: list of Detection
    """
    boxes = ops.clip_boxes_to_image(boxes.detach().to(torch.float64).cpu(), tuple(image_size))
    scores = scores.detach().to(torch.float64).cpu()
    keep = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]) & (scores >= cfg.score_floor)
    boxes, scores = boxes[keep], scores[keep]

    keep = ops.nms(boxes, scores, cfg.nms_iou)
    boxes, scores = boxes[keep].numpy(), scores[keep].numpy()

    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    order = order[:cfg.max_proposals]
    boxes, scores = boxes[order], scores[order]

    if len(boxes) > 1:
        iou = ops.box_iou(torch.from_numpy(boxes), torch.from_numpy(boxes)).numpy()
        np.fill_diagonal(iou, 0.0)
        if iou.max() > cfg.nms_iou + 1e-9:
            raise RuntimeError('Detections overlap with IoU {:.4f} above the NMS threshold {:.4f}'.format(
                float(iou.max()), cfg.nms_iou))

    return [Detection(BoundingBox(*b.tolist()), s) for b, s in zip(boxes, scores)]


def detect_cells(model, panel, score_floor=None):
    """ Detect cells on a panel image

    Args:
        model (ObjectnessDetector): trained detector
        panel: GrayImage
        score_floor (float): minimum objectness, detector config if None

    Returns: list of Detection, objectness descending
    """
    if not getattr(model, 'trained', False):
        raise RuntimeError('Cell detection requires a trained detector')
    panel = check_gray(panel, 'panel')
    p = next(model.parameters())
    was_training = model.training
    model.eval()
    with torch.no_grad():
        results, _ = model([_panel_tensor(panel, p.device)])
    model.train(was_training)
    boxes, scores = results[0]
    cfg = model.cfg if score_floor is None else model.cfg.replace(score_floor=float(score_floor))
    return postprocess_detections(boxes, scores, panel.shape, cfg)


class ApResult(object):
    """ COCO-style average precision over IoU thresholds 0.50:0.95 """

    def __init__(self, per_threshold, curves):
        self.per_threshold = dict(per_threshold)
        self.curves = dict(curves)
        self.ap_coco = float(np.mean(list(self.per_threshold.values())))
        self.ap50 = float(self.per_threshold[0.5])


    def __repr__(self):
        return '<ApResult ap_coco={:.4f} ap50={:.4f}>'.format(self.ap_coco, self.ap50)


    def toDict(self):
        return {'ap_coco': self.ap_coco,
                'ap50': self.ap50,
                'per_threshold': dict([('{:.2f}'.format(k), v) for k, v in sorted(self.per_threshold.items())])}



def _match(detections_per_panel, truths_per_panel, threshold):
    """ Greedy matching in descending score order; each truth matches once.

    Returns: (tp flags in score order, number of truths)
    """
    flat = []
    for pi, dets in enumerate(detections_per_panel):
        for di, d in enumerate(dets):
            flat.append((-d.objectness, pi, di, d))
    flat.sort(key=lambda t: t[:3])

    matched = [set() for _ in truths_per_panel]
    tp = []
    for _, pi, _, d in flat:
        best, best_iou = None, threshold
        for ti, t in enumerate(truths_per_panel[pi]):
            if ti in matched[pi]:
                continue
            iou = box_iou(d.box, t)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = ti, iou
        if best is not None:
            matched[pi].add(best)
            tp.append(True)
        else:
            tp.append(False)
    return tp, sum([len(t) for t in truths_per_panel])


def evaluate_ap(detections_per_panel, truths_per_panel, thresholds=COCO_IOU_THRESHOLDS):
    """ Average precision of detections against ground-truth boxes

    Args:
        detections_per_panel (list): list of Detection lists, one per panel
        truths_per_panel (list): list of BoundingBox lists, one per panel
        thresholds: IoU thresholds, COCO 0.50:0.95:0.05 by default

    Returns: ApResult
    """
    if len(detections_per_panel) != len(truths_per_panel):
        raise ValueError('Got detections for {:d} panels but truths for {:d}'.format(
            len(detections_per_panel), len(truths_per_panel)))
    per_threshold, curves = {}, {}
    for thr in thresholds:
        thr = float(thr)
        tp, n_truth = _match(detections_per_panel, truths_per_panel, thr)
        tp = np.asarray(tp, dtype=np.float64)
        if n_truth == 0:
            per_threshold[thr] = 1.0 if len(tp) == 0 else 0.0
            curves[thr] = ([], [])
            continue
        ctp = np.cumsum(tp)
        cfp = np.cumsum(1.0 - tp)
        recall = ctp / float(n_truth)
        precision = ctp / np.maximum(ctp + cfp, 1e-12)
        per_threshold[thr] = interpolated_ap(recall, precision)
        curves[thr] = (recall.tolist(), precision.tolist())
    return ApResult(per_threshold, curves)
