import unittest
from unittest import mock

import math

import numpy as np
import torch

from elpvtoolbox.data import ConfigError
from elpvtoolbox.imaging import BoundingBox
from elpvtoolbox.datasets import DatasetSplit, SyntheticCellSpec, synthesize_panel
from elpvtoolbox.detection import (DetectorConfig, DetectionTrainConfig, Detection, COCO_IOU_THRESHOLDS,
                                   build_detector, audit_detector, detector_loss, train_detector,
                                   postprocess_detections, detect_cells, evaluate_ap, _panel_tensor, _panel_target)

SMALL_DETECTOR = {'backbone_depth': 18,
                  'anchor_scales': [16, 32],
                  'aspect_ratios': [1.0],
                  'max_proposals': 20,
                  'pre_nms_top_n': 100,
                  'min_size': 64,
                  'max_size': 128,
                  'batch_size_per_image': 32}


def small_panel(seed=0):
    panel, _ = synthesize_panel((1, 2), spec=SyntheticCellSpec(cell_size=32), rng_seed=seed)
    return panel


class TestDetectorLayout(unittest.TestCase):

    def test_config_defaults(self):
        cfg = DetectorConfig()
        self.assertEqual(cfg.backbone_depth, 101)
        self.assertEqual(cfg.anchors_per_location, 9)
        self.assertEqual(cfg.max_proposals, 300)
        self.assertEqual(cfg.nms_iou, 0.9)
        self.assertEqual(len(COCO_IOU_THRESHOLDS), 10)
        self.assertEqual(DetectionTrainConfig().steps, 6500)


    def test_invalid_configs(self):
        self.assertRaises(ConfigError, DetectorConfig, backbone_depth=42)
        self.assertRaises(ConfigError, DetectorConfig, classification_loss_weight=0.5)
        self.assertRaises(ConfigError, DetectorConfig, max_proposals=300, pre_nms_top_n=100)
        self.assertRaises(ConfigError, DetectorConfig, nms_iou=0.0)
        self.assertRaises(ConfigError, DetectorConfig, bg_iou=0.8, fg_iou=0.7)


    def test_audit_heads(self):
        model = build_detector(DetectorConfig(SMALL_DETECTOR), seed=0)
        audit = audit_detector(model)
        self.assertEqual(audit['heads'], ['box_regression', 'objectness'])
        self.assertEqual(audit['anchors_per_location'], 2)
        self.assertEqual(audit['parameters']['objectness'], 256 * 2 + 2)
        self.assertEqual(audit['parameters']['box_regression'], 256 * 8 + 8)
        self.assertEqual(audit['parameters']['classification'], 0)

        model = build_detector(DetectorConfig(SMALL_DETECTOR, class_head=True, classification_loss_weight=0.5))
        audit = audit_detector(model)
        self.assertEqual(audit['heads'], ['box_regression', 'classification', 'objectness'])
        self.assertEqual(audit['parameters']['classification'], 256 * 4 + 4)


    def test_unweighted_class_head_gets_no_gradient(self):
        model = build_detector(DetectorConfig(SMALL_DETECTOR, class_head=True), seed=0)
        panel = small_panel()
        model.train()
        _, losses = model([_panel_tensor(panel.image)], [_panel_target(panel)])
        self.assertNotIn('loss_classification', losses)
        detector_loss(losses, model.cfg).backward()
        self.assertIsNone(model.rpn.class_head.weight.grad)
        self.assertIsNotNone(model.rpn.head.cls_logits.weight.grad)


    def test_weighted_class_head_trains(self):
        model = build_detector(DetectorConfig(SMALL_DETECTOR, class_head=True, classification_loss_weight=0.5), seed=0)
        panel = small_panel()
        model.train()
        _, losses = model([_panel_tensor(panel.image)], [_panel_target(panel)])
        self.assertIn('loss_classification', losses)
        detector_loss(losses, model.cfg).backward()
        self.assertGreater(float(model.rpn.class_head.weight.grad.abs().sum()), 0.0)



class TestPostprocess(unittest.TestCase):

    def setUp(self):
        self.boxes = torch.tensor([[0, 0, 10, 10],
                                   [1, 0, 11, 10],
                                   [20, 20, 30, 30],
                                   [40, 0, 50, 10],
                                   [55, 55, 70, 70],
                                   [5, 5, 5, 9]], dtype=torch.float32)
        self.scores = torch.tensor([0.9, 0.8, 0.9, 0.3, 0.7, 0.95])


    def test_floor_nms_and_order(self):
        cfg = DetectorConfig(SMALL_DETECTOR, nms_iou=0.5)
        dets = postprocess_detections(self.boxes, self.scores, (60, 60), cfg)
        self.assertEqual([d.box for d in dets], [BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30),
                                                 BoundingBox(55, 55, 60, 60)])
        self.assertAlmostEqual(dets[0].objectness, 0.9, places=6)
        self.assertAlmostEqual(dets[2].objectness, 0.7, places=6)


    def test_loose_nms_keeps_neighbours(self):
        dets = postprocess_detections(self.boxes, self.scores, (60, 60), DetectorConfig(SMALL_DETECTOR))
        self.assertEqual(len(dets), 4)
        self.assertEqual(dets[2].box, BoundingBox(1, 0, 11, 10))


    def test_cap_and_floor_override(self):
        cfg = DetectorConfig(SMALL_DETECTOR, nms_iou=0.5, max_proposals=2, pre_nms_top_n=2)
        dets = postprocess_detections(self.boxes, self.scores, (60, 60), cfg)
        self.assertEqual(len(dets), 2)
        cfg = DetectorConfig(SMALL_DETECTOR, nms_iou=0.5, score_floor=0.0)
        dets = postprocess_detections(self.boxes, self.scores, (60, 60), cfg)
        self.assertEqual(len(dets), 4)
        self.assertEqual(dets[-1].box, BoundingBox(40, 0, 50, 10))


    def test_overlap_after_nms_raises(self):
        cfg = DetectorConfig(SMALL_DETECTOR, nms_iou=0.5)
        keep_all = lambda boxes, scores, iou: torch.arange(len(boxes))
        with mock.patch('elpvtoolbox.detection.ops.nms', side_effect=keep_all):
            with self.assertRaises(RuntimeError) as ctx:
                postprocess_detections(self.boxes, self.scores, (60, 60), cfg)
        self.assertIn('NMS threshold', str(ctx.exception))


    def test_empty_input(self):
        dets = postprocess_detections(torch.zeros((0, 4)), torch.zeros((0,)), (60, 60), DetectorConfig())
        self.assertEqual(dets, [])


    def test_detect_requires_training(self):
        model = build_detector(DetectorConfig(SMALL_DETECTOR), seed=0)
        self.assertRaises(RuntimeError, detect_cells, model, small_panel().image)



class TestAveragePrecision(unittest.TestCase):

    def setUp(self):
        self.truths = [[BoundingBox(0, 0, 10, 10), BoundingBox(20, 0, 30, 10)]]


    def test_perfect_detections(self):
        dets = [[Detection(b, 0.9) for b in self.truths[0]]]
        res = evaluate_ap(dets, self.truths)
        self.assertAlmostEqual(res.ap_coco, 1.0)
        self.assertAlmostEqual(res.ap50, 1.0)


    def test_mixed_quality(self):
        # second detection has IoU 90/110 with its truth
        dets = [[Detection(BoundingBox(0, 0, 10, 10), 0.9),
                 Detection(BoundingBox(21, 0, 31, 10), 0.8),
                 Detection(BoundingBox(50, 50, 60, 60), 0.7)]]
        res = evaluate_ap(dets, self.truths)
        self.assertAlmostEqual(res.ap50, 1.0)
        self.assertAlmostEqual(res.per_threshold[0.8], 1.0)
        self.assertAlmostEqual(res.per_threshold[0.85], 0.5)
        self.assertAlmostEqual(res.ap_coco, (7 * 1.0 + 3 * 0.5) / 10.0)
        self.assertEqual(sorted(res.toDict()['per_threshold'].keys())[0], '0.50')


    def test_truth_matches_once(self):
        dets = [[Detection(BoundingBox(0, 0, 10, 10), 0.9), Detection(BoundingBox(0, 0, 10, 10), 0.8)]]
        res = evaluate_ap(dets, [[BoundingBox(0, 0, 10, 10)]], thresholds=[0.5])
        recall, precision = res.curves[0.5]
        self.assertEqual(recall, [1.0, 1.0])
        self.assertEqual(precision, [1.0, 0.5])


    def test_several_panels_pool_detections(self):
        dets = [[Detection(BoundingBox(0, 0, 10, 10), 0.6)], [Detection(BoundingBox(5, 5, 9, 9), 0.9)]]
        truths = [[BoundingBox(0, 0, 10, 10)], [BoundingBox(20, 20, 30, 30)]]
        res = evaluate_ap(dets, truths, thresholds=[0.5])
        # false positive first, then one of two truths
        self.assertAlmostEqual(res.per_threshold[0.5], 0.5 * 0.5)


    def test_no_truths_and_mismatch(self):
        self.assertEqual(evaluate_ap([[]], [[]]).ap_coco, 1.0)
        self.assertEqual(evaluate_ap([[Detection(BoundingBox(0, 0, 1, 1), 0.9)]], [[]]).ap_coco, 0.0)
        self.assertRaises(ValueError, evaluate_ap, [[]], [[], []])



class TestDetectorTraining(unittest.TestCase):

    def test_zero_steps_and_empty_split(self):
        model = build_detector(DetectorConfig(SMALL_DETECTOR), seed=0)
        split = DatasetSplit([small_panel(0)], [], 0)
        model, history = train_detector(model, split, DetectionTrainConfig(steps=0))
        self.assertFalse(model.trained)
        self.assertEqual(len(history), 0)
        self.assertRaises(ValueError, train_detector, model, DatasetSplit([], [], 0))


    def test_short_run_then_detect(self):
        model = build_detector(DetectorConfig(SMALL_DETECTOR, score_floor=0.0), seed=0)
        split = DatasetSplit([small_panel(0), small_panel(1)], [small_panel(2)], 0)
        model, history = train_detector(model, split, DetectionTrainConfig(steps=2, validate_every=1,
                                                                            learning_rate=1e-4))
        self.assertTrue(model.trained)
        self.assertEqual(history.column('step'), [1, 2])
        for v in history.column('loss_total'):
            self.assertTrue(math.isfinite(v))

        panel = small_panel(3)
        dets = detect_cells(model, panel.image)
        self.assertLessEqual(len(dets), 20)
        h, w = panel.size
        for d in dets:
            self.assertTrue(0.0 <= d.objectness <= 1.0)
            self.assertTrue(d.box.x_max <= w and d.box.y_max <= h)
        scores = [d.objectness for d in dets]
        self.assertEqual(scores, sorted(scores, reverse=True))



if __name__ == '__main__':
    unittest.main()
