import unittest

import os
import json
from tempfile import mkstemp

from elpvtoolbox.data import ParamSet, ConfigSet, RunConfig, ConfigError, CONFIG_VERSION
from elpvtoolbox.pipeline import PipelineConfig
from elpvtoolbox.imaging import SsimParams


class TestParamSet(unittest.TestCase):

    def test_input_dict(self):

        # Input dict
        test_dict = {'a': 1, 'b': 2}
        p = ParamSet(input_dict=test_dict)
        self.assertEqual(p.toDict(), test_dict)

        # Input other ParamSet
        p2 = ParamSet(input_dict=p)
        self.assertEqual(p2.toDict(), test_dict)

        # All other input types
        test_inputs = ['string', 1, False, [1, 2]]
        for ti in test_inputs:
            self.assertRaises(ValueError, ParamSet, input_dict=ti)


    def test_item_retrieval(self):
        p = ParamSet()

        p.a = 'first_item'
        self.assertEqual(p['a'], 'first_item')
        p['b'] = 'second_item'
        self.assertEqual(p.b, 'second_item')
        self.assertIn('a', p)
        self.assertEqual(p.get('missing', 5), 5)


    def test_json(self):
        test_dict = {'a': 1, 'b': '2', 'c': [0, 1, True], 'd': False}
        p = ParamSet(input_dict=test_dict)

        # String export
        compare = json.loads(p.toJSON())
        self.assertDictEqual(p.toDict(), compare)

        # File export
        fd, json_tmpfile = mkstemp()
        p.toJSONFile(json_file=json_tmpfile)
        with open(json_tmpfile, 'r') as jf:
            compare2 = json.load(jf)
            self.assertDictEqual(p.toDict(), compare2)

        # Creation from JSON file
        p_new = ParamSet.fromJSONFile(json_file=json_tmpfile)
        self.assertIsInstance(p_new, ParamSet)
        self.assertEqual(p_new, p)
        os.close(fd)
        os.remove(json_tmpfile)


    def test_empty_param_set(self):

        p = ParamSet()
        self.assertEqual(len(p), 0)
        self.assertEqual(repr(p), '{}')
        self.assertEqual(str(p), 'Empty parameter set.')


    def test_dict_conversion(self):

        p = ParamSet()
        p.abc = 123
        p.foo = False
        self.assertDictEqual(dict(p), {'abc': 123, 'foo': False})



class DummyConfig(ConfigSet):
    SECTION = 'dummy'
    DEFAULTS = {'rate': 0.5, 'name': 'x'}

    def validate(self):
        self._require(0 <= self.rate <= 1, 'rate', 'must lie in [0, 1]')


class TestConfigSet(unittest.TestCase):

    def test_defaults_and_override(self):
        c = DummyConfig()
        self.assertEqual(c.rate, 0.5)
        c2 = DummyConfig({'rate': 0.25})
        self.assertEqual(c2.rate, 0.25)
        self.assertEqual(c2.name, 'x')
        c3 = DummyConfig(rate=1.0)
        self.assertEqual(c3.rate, 1.0)


    def test_unknown_key_names_key(self):
        with self.assertRaises(ConfigError) as ctx:
            DummyConfig({'rte': 0.1})
        self.assertIn('dummy.rte', str(ctx.exception))


    def test_invalid_value_names_key(self):
        with self.assertRaises(ConfigError) as ctx:
            DummyConfig(rate=2.0)
        self.assertIn('dummy.rate', str(ctx.exception))
        self.assertTrue(issubclass(ConfigError, ValueError))


    def test_replace_keeps_original(self):
        c = DummyConfig()
        c2 = c.replace(rate=0.9)
        self.assertEqual(c.rate, 0.5)
        self.assertEqual(c2.rate, 0.9)
        self.assertIsInstance(c2, DummyConfig)



class TestRunConfig(unittest.TestCase):

    def test_sections_take_defaults(self):
        cfg = RunConfig()
        self.assertIsInstance(cfg.pipeline, PipelineConfig)
        self.assertAlmostEqual(cfg.pipeline.expansion_ratio, 0.10)
        self.assertAlmostEqual(cfg['pipeline'].decision_threshold, 0.70)
        self.assertIsInstance(cfg.ssim, SsimParams)
        self.assertEqual(cfg.ssim.window, 5)
        for name in ['ssim', 'synthetic', 'augmentation', 'detector', 'detector_training', 'classifier',
                     'classifier_training', 'autoencoder', 'autoencoder_training', 'segmentation', 'pipeline']:
            self.assertIn(name, cfg.sections)


    def test_override(self):
        cfg = RunConfig()
        cfg.override('pipeline.expansion_ratio=0.2')
        self.assertAlmostEqual(cfg.pipeline.expansion_ratio, 0.2)
        cfg.override('pipeline.output_dir=some/dir')
        self.assertEqual(cfg.pipeline.output_dir, 'some/dir')
        cfg.override('detector.anchor_scales=[16, 32]')
        self.assertEqual(cfg.detector.anchor_scales, [16, 32])


    def test_override_errors(self):
        cfg = RunConfig()
        self.assertRaises(ConfigError, cfg.override, 'pipeline.expansion_ratio')
        self.assertRaises(ConfigError, cfg.override, 'nosection.key=1')
        self.assertRaises(ConfigError, cfg.override, 'pipeline.nokey=1')
        with self.assertRaises(ConfigError) as ctx:
            cfg.override('pipeline.decision_threshold=0.4')
        self.assertIn('pipeline.decision_threshold', str(ctx.exception))


    def test_unknown_section_and_version(self):
        self.assertRaises(ConfigError, RunConfig, {'nosuch': {}})
        self.assertRaises(ConfigError, RunConfig, {'config_version': CONFIG_VERSION + 1})
        self.assertRaises(ConfigError, RunConfig, {'pipeline': {'bogus': 1}})


    def test_json_file_round_trip(self):
        cfg = RunConfig({'pipeline': {'expansion_ratio': 0.15}, 'ssim': {'window': 7}})
        fd, tmp = mkstemp(suffix='.json')
        os.close(fd)
        cfg.toJSONFile(tmp)
        cfg2 = RunConfig.fromJSONFile(tmp)
        self.assertEqual(cfg2.toDict(), cfg.toDict())
        self.assertAlmostEqual(cfg2.pipeline.expansion_ratio, 0.15)
        self.assertEqual(cfg2.ssim.window, 7)

        with open(tmp, 'w') as f:
            f.write('{not json')
        self.assertRaises(ConfigError, RunConfig.fromJSONFile, tmp)
        os.remove(tmp)



if __name__ == '__main__':
    unittest.main()
