import unittest

import numpy as np
import torch

from elpvtoolbox.data import ConfigError
from elpvtoolbox.datasets import (CellRecord, DatasetSplit, NON_DEFECTIVE, DEFECTIVE, SyntheticCellSpec,
                                  synthesize_cells)
from elpvtoolbox.classification import (ClassifierConfig, ClassifierTrainConfig, ClassificationResult,
                                        ConfusionMatrix, label_from_probability, build_classifier,
                                        audit_classifier, classify_cells, classify_cell, evaluate_classifier,
                                        train_classifier)

SMALL_CLASSIFIER = {'width_mult': 0.25,
                    'depth_mult': 0.5,
                    'stages': [[1, 3, 1, 32, 16, 1], [6, 3, 2, 16, 24, 1]],
                    'input_resolution': 32}


class FixedProbabilities(object):
    """ Classifier stand-in returning preset p_non_defective values in order """

    def __init__(self, probs, trained=True):
        self.probs = list(probs)
        self.cfg = ClassifierConfig()
        self.trained = trained
        self.calls = []


    def predictProba(self, cells):
        self.calls.append(len(cells))
        out, self.probs = self.probs[:len(cells)], self.probs[len(cells):]
        return np.asarray(out)



class TestDecisionRule(unittest.TestCase):

    def test_threshold_boundary(self):
        self.assertEqual(label_from_probability(0.70), NON_DEFECTIVE)
        self.assertEqual(label_from_probability(0.6999), DEFECTIVE)
        self.assertEqual(label_from_probability(0.55), DEFECTIVE)
        self.assertEqual(label_from_probability(0.55, threshold=0.51), NON_DEFECTIVE)


    def test_raising_threshold_only_adds_defects(self):
        probs = np.linspace(0.0, 1.0, 101)
        thresholds = [0.55, 0.6, 0.7, 0.8, 0.95]
        for lo, hi in zip(thresholds[:-1], thresholds[1:]):
            ok_lo = set([i for i, p in enumerate(probs) if label_from_probability(p, lo) == NON_DEFECTIVE])
            ok_hi = set([i for i, p in enumerate(probs) if label_from_probability(p, hi) == NON_DEFECTIVE])
            self.assertTrue(ok_hi.issubset(ok_lo))


    def test_result(self):
        r = ClassificationResult(0.65)
        self.assertTrue(r.defective)
        self.assertEqual(r.toDict(), {'label': DEFECTIVE, 'p_non_defective': 0.65, 'threshold': 0.70})


    def test_invalid_configs(self):
        self.assertRaises(ConfigError, ClassifierConfig, decision_threshold=0.5)
        self.assertRaises(ConfigError, ClassifierConfig, decision_threshold=1.0)
        self.assertRaises(ConfigError, ClassifierConfig, input_resolution=16)
        self.assertRaises(ConfigError, ClassifierConfig, num_outputs=3)
        self.assertRaises(ConfigError, ClassifierTrainConfig, decay_factor=1.5)



class TestConfusionMatrix(unittest.TestCase):

    def test_accuracy(self):
        cm = ConfusionMatrix(tp=804, fp=291, fn=33, tn=872)
        self.assertEqual(cm.total, 2000)
        self.assertAlmostEqual(cm.accuracy, 0.838)
        self.assertAlmostEqual(cm.precision, 804 / 1095.0)
        self.assertAlmostEqual(cm.recall, 804 / 837.0)


    def test_from_labels(self):
        truths = [DEFECTIVE, DEFECTIVE, NON_DEFECTIVE, NON_DEFECTIVE, NON_DEFECTIVE]
        preds = [DEFECTIVE, NON_DEFECTIVE, DEFECTIVE, NON_DEFECTIVE, NON_DEFECTIVE]
        cm = ConfusionMatrix.fromLabels(truths, preds)
        self.assertEqual((cm.tp, cm.fn, cm.fp, cm.tn), (1, 1, 1, 2))
        self.assertEqual(cm.toDict()['accuracy'], 0.6)
        self.assertRaises(ValueError, ConfusionMatrix.fromLabels, truths, preds[:2])
        self.assertEqual(ConfusionMatrix().accuracy, 0.0)



class TestClassifyWithStub(unittest.TestCase):

    def test_batched_routing(self):
        model = FixedProbabilities([0.9, 0.7, 0.69, 0.1, 0.95])
        cells = [np.zeros((8, 8))] * 5
        res = classify_cells(model, cells, batch_size=2)
        self.assertEqual(model.calls, [2, 2, 1])
        self.assertEqual([r.label for r in res],
                         [NON_DEFECTIVE, NON_DEFECTIVE, DEFECTIVE, DEFECTIVE, NON_DEFECTIVE])


    def test_explicit_threshold(self):
        model = FixedProbabilities([0.9])
        self.assertEqual(classify_cell(model, np.zeros((8, 8)), threshold=0.95).label, DEFECTIVE)


    def test_untrained(self):
        model = FixedProbabilities([0.9], trained=False)
        self.assertRaises(RuntimeError, classify_cells, model, [np.zeros((8, 8))])


    def test_evaluate(self):
        recs = [CellRecord(image=np.zeros((8, 8)), label=l, source_id=str(i))
                for i, l in enumerate([DEFECTIVE, NON_DEFECTIVE, NON_DEFECTIVE, DEFECTIVE])]
        model = FixedProbabilities([0.2, 0.8, 0.5, 0.9])
        cm = evaluate_classifier(model, DatasetSplit([], recs, 0))
        self.assertEqual((cm.tp, cm.fp, cm.fn, cm.tn), (1, 1, 1, 1))
        self.assertRaises(ValueError, evaluate_classifier, model, [])



class TestCellClassifier(unittest.TestCase):

    def setUp(self):
        self.cfg = ClassifierConfig(SMALL_CLASSIFIER)


    def test_forward_and_probabilities(self):
        model = build_classifier(self.cfg, seed=0)
        logits = model(torch.rand((3, 1, 40, 40)))
        self.assertEqual(tuple(logits.shape), (3, 2))
        p = model.predictProba([np.random.default_rng(i).random((48, 48)) for i in range(3)])
        self.assertEqual(p.shape, (3,))
        self.assertTrue(np.all((p >= 0.0) & (p <= 1.0)))
        self.assertTrue(model.training)


    def test_same_seed_same_output(self):
        cells = [np.random.default_rng(1).random((32, 32))]
        a = build_classifier(self.cfg, seed=7).predictProba(cells)
        b = build_classifier(self.cfg, seed=7).predictProba(cells)
        np.testing.assert_array_equal(a, b)


    def test_audit_head(self):
        audit = audit_classifier(build_classifier(self.cfg, seed=0))
        last = audit['head'] // 2 - 1
        self.assertEqual(audit['head'], 2 * last + 2)
        self.assertEqual(audit['reference_total'], audit['total'] - audit['head'] + 1000 * last + 1000)


    def test_reference_parameter_count(self):
        audit = audit_classifier(build_classifier(seed=0))
        self.assertEqual(audit['head'], 1280 * 2 + 2)
        self.assertAlmostEqual(audit['reference_total'], 7.8e6, delta=0.05 * 7.8e6)


    def test_training_needs_both_classes(self):
        recs = [CellRecord(image=np.zeros((32, 32)), label=NON_DEFECTIVE, source_id=str(i)) for i in range(4)]
        model = build_classifier(self.cfg, seed=0)
        self.assertRaises(ValueError, train_classifier, model, DatasetSplit(recs, [], 0))
        self.assertRaises(ValueError, train_classifier, model, DatasetSplit([], recs, 0))


    def test_short_training_run(self):
        cells = [c[0] for c in synthesize_cells(8, seed=0, anomalous_fraction=0.5,
                                                spec=SyntheticCellSpec(cell_size=32))]
        split = DatasetSplit(cells[:6], cells[6:], 0)
        model = build_classifier(self.cfg, seed=0)
        cfg = ClassifierTrainConfig(steps=3, batch_size=4, validate_every=2, decay_every=1)
        model, history = train_classifier(model, split, cfg)
        self.assertTrue(model.trained)
        self.assertEqual(history.column('step'), [1, 2, 3])
        self.assertEqual(len(history.column('val_accuracy')), 2)
        for acc in history.column('val_accuracy'):
            self.assertIn(acc, (0.0, 0.5, 1.0))
        cm = evaluate_classifier(model, split)
        self.assertEqual(cm.total, 2)


    def test_zero_steps(self):
        cells = [c[0] for c in synthesize_cells(4, seed=0, anomalous_fraction=0.5,
                                                spec=SyntheticCellSpec(cell_size=32))]
        model = build_classifier(self.cfg, seed=0)
        model, history = train_classifier(model, DatasetSplit(cells, [], 0), ClassifierTrainConfig(steps=0))
        self.assertFalse(model.trained)
        self.assertEqual(len(history), 0)



if __name__ == '__main__':
    unittest.main()
