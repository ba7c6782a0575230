import unittest

import math

import numpy as np

from elpvtoolbox.stats import mean, sd, box_iou, pairwise_iou, mask_iou, interpolated_ap
from elpvtoolbox.imaging import BoundingBox


class TestStats(unittest.TestCase):

    def test_mean_sd(self):
        self.assertAlmostEqual(mean([1, 2, 3, 4]), 2.5)
        self.assertTrue(math.isnan(mean([])))
        self.assertAlmostEqual(sd([2, 4, 4, 4, 5, 5, 7, 9]), 2.0)


    def test_box_iou(self):
        a = BoundingBox(0, 0, 10, 10)
        self.assertAlmostEqual(box_iou(a, a), 1.0)
        self.assertAlmostEqual(box_iou(a, [5, 0, 15, 10]), 50.0 / 150.0)
        self.assertEqual(box_iou(a, [10, 0, 20, 10]), 0.0)
        self.assertEqual(box_iou(a, BoundingBox(20, 20, 30, 30)), 0.0)
        self.assertAlmostEqual(box_iou([0, 0, 10, 10], [2, 2, 4, 4]), 4.0 / 100.0)


    def test_pairwise_iou(self):
        boxes = [BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 15, 10), BoundingBox(30, 30, 40, 40)]
        m = pairwise_iou(boxes, boxes)
        self.assertEqual(m.shape, (3, 3))
        np.testing.assert_allclose(np.diag(m), 1.0)
        np.testing.assert_allclose(m, m.T)
        self.assertEqual(m[0, 2], 0.0)


    def test_mask_iou(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        self.assertEqual(mask_iou(a, a), 1.0)
        b = a.copy()
        b[:2] = 1
        self.assertEqual(mask_iou(a, b), 0.0)
        c = b.copy()
        c[:, :2] = 1
        self.assertAlmostEqual(mask_iou(b, c), 8.0 / 12.0)


    def test_interpolated_ap(self):
        self.assertEqual(interpolated_ap([], []), 0.0)
        self.assertAlmostEqual(interpolated_ap([0.5, 1.0], [1.0, 1.0]), 1.0)
        # one false positive first, then both truths
        self.assertAlmostEqual(interpolated_ap([0.0, 0.5, 1.0], [0.0, 0.5, 2.0 / 3.0]), 2.0 / 3.0)
        # precision envelope is monotone
        self.assertAlmostEqual(interpolated_ap([0.5, 0.5, 1.0], [1.0, 0.5, 2.0 / 3.0]),
                               0.5 * 1.0 + 0.5 * 2.0 / 3.0)



if __name__ == '__main__':
    unittest.main()
