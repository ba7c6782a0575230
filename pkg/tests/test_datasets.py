import unittest

import os
import shutil
import tempfile

import numpy as np
from PIL import Image

from elpvtoolbox.data import ConfigError
from elpvtoolbox.imaging import BoundingBox, write_gray_png
from elpvtoolbox.stats import box_iou
from elpvtoolbox.datasets import (NON_DEFECTIVE, DEFECTIVE, MONOCRYSTALLINE, POLYCRYSTALLINE, BUSBAR3, ELONGATED,
                                  CellRecord, PanelRecord, SyntheticCellSpec, snap_likelihood, relabel,
                                  load_elpv, read_panel_annotation, load_panel_annotations,
                                  write_panel_annotation, make_split, count_dict, count_by, combine_datasets,
                                  write_cell_index, read_cell_index, synthesize_cell, synthesize_cells,
                                  synthesize_panel, crop_panel_cells, anomaly_footprint, random_anomaly)

from .fixtures import write_elpv_index, tecnalia_records, TECNALIA_COUNTS


class TestLikelihoods(unittest.TestCase):

    def test_snap(self):
        self.assertEqual(snap_likelihood(1.0 / 3.0), 0.33)
        self.assertEqual(snap_likelihood('0.6666666667'), 0.66)
        self.assertEqual(snap_likelihood(0), 0.0)
        self.assertRaises(ValueError, snap_likelihood, 0.5)


    def test_relabel(self):
        self.assertEqual(relabel(0.0), NON_DEFECTIVE)
        for v in (0.33, 0.66, 1.0):
            self.assertEqual(relabel(v), DEFECTIVE)
        self.assertRaises(ValueError, relabel, 0.2)
        self.assertRaises(ValueError, relabel, None)



class TestElpvLoader(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()


    def tearDown(self):
        shutil.rmtree(self.tmp)


    def test_published_counts(self):
        index = os.path.join(self.tmp, 'labels.csv')
        self.assertEqual(write_elpv_index(index), 2624)
        records = load_elpv(index, check_images=False)
        self.assertEqual(len(records), 2624)
        counts = count_dict(records)
        self.assertEqual(counts[(NON_DEFECTIVE, MONOCRYSTALLINE)], 588)
        self.assertEqual(counts[(NON_DEFECTIVE, POLYCRYSTALLINE)], 920)
        self.assertEqual(counts[(DEFECTIVE, MONOCRYSTALLINE)], 117 + 56 + 313)
        self.assertEqual(counts[(DEFECTIVE, POLYCRYSTALLINE)], 178 + 50 + 402)
        labels = [r.label for r in records]
        self.assertEqual(labels.count(NON_DEFECTIVE), 1508)
        self.assertEqual(labels.count(DEFECTIVE), 1116)
        by_lik = count_dict(records, keys=('defect_likelihood',))
        self.assertEqual(by_lik[(0.33,)], 295)


    def test_whitespace_separated(self):
        index = os.path.join(self.tmp, 'labels.csv')
        write_elpv_index(index, sep='  ')
        self.assertEqual(len(load_elpv(index, check_images=False)), 2624)


    def test_bad_row_is_named(self):
        index = os.path.join(self.tmp, 'labels.csv')
        with open(index, 'w') as f:
            f.write('images/a.png,0.0,mono\nimages/b.png,0.5,poly\n')
        with self.assertRaises(ValueError) as ctx:
            load_elpv(index, check_images=False)
        self.assertIn('row 2', str(ctx.exception))

        with open(index, 'w') as f:
            f.write('images/a.png,0.0,cdte\n')
        self.assertRaises(ValueError, load_elpv, index, False)


    def test_empty_index(self):
        index = os.path.join(self.tmp, 'labels.csv')
        open(index, 'w').close()
        self.assertEqual(load_elpv(index), [])


    def test_image_checks(self):
        os.makedirs(os.path.join(self.tmp, 'images'))
        Image.fromarray(np.full((300, 300), 128, dtype=np.uint8)).save(os.path.join(self.tmp, 'images', 'a.png'))
        Image.fromarray(np.full((200, 300), 128, dtype=np.uint8)).save(os.path.join(self.tmp, 'images', 'b.png'))
        index = os.path.join(self.tmp, 'labels.csv')

        with open(index, 'w') as f:
            f.write('images/a.png 1.0 mono\n')
        recs = load_elpv(index)
        self.assertEqual(recs[0].label, DEFECTIVE)
        self.assertEqual(recs[0].image.shape, (300, 300))
        self.assertAlmostEqual(float(recs[0].image[0, 0]), 128 / 255.0)

        with open(index, 'w') as f:
            f.write('images/a.png 1.0 mono\nimages/b.png 0.0 poly\n')
        self.assertRaises(ValueError, load_elpv, index)

        with open(index, 'w') as f:
            f.write('images/missing.png 1.0 mono\n')
        self.assertRaises(IOError, load_elpv, index)



class TestPanelAnnotations(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()


    def tearDown(self):
        shutil.rmtree(self.tmp)


    def _panel(self, panel_id='p1'):
        boxes = [BoundingBox(2, 2, 30, 30), BoundingBox(34, 2, 62, 30.5)]
        return PanelRecord(image=np.zeros((40, 70)), boxes=boxes, cell_type=BUSBAR3, panel_id=panel_id, grid=(1, 2))


    def test_write_read_round_trip(self):
        panel = self._panel()
        write_gray_png(os.path.join(self.tmp, 'p1.png'), panel.image)
        xml = os.path.join(self.tmp, 'p1.xml')
        write_panel_annotation(xml, panel, 'p1.png')
        back = read_panel_annotation(xml)
        self.assertEqual(back.boxes, panel.boxes)
        self.assertEqual(back.cell_type, BUSBAR3)
        self.assertEqual(back.grid, (1, 2))
        self.assertEqual(back.size, (40, 70))
        self.assertEqual(back.panel_id, 'p1')
        self.assertEqual(back.image.shape, (40, 70))


    def test_cell_type_from_directory(self):
        d = os.path.join(self.tmp, 'elongated')
        os.makedirs(d)
        with open(os.path.join(d, 'x.xml'), 'w') as f:
            f.write('<annotation><filename>x.png</filename><size><width>50</width><height>40</height></size>'
                    '<object><name>cell</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>20</xmax><ymax>20</ymax>'
                    '</bndbox></object></annotation>')
        panels = load_panel_annotations(self.tmp, check_images=False)
        self.assertEqual(len(panels), 1)
        self.assertEqual(panels[0].cell_type, ELONGATED)
        self.assertEqual(len(panels[0]), 1)
        self.assertRaises(IOError, load_panel_annotations, self.tmp, True)


    def test_errors_name_object(self):
        fn = os.path.join(self.tmp, 'bad.xml')
        with open(fn, 'w') as f:
            f.write('<annotation><filename>x.png</filename><size><width>50</width><height>40</height></size>'
                    '<object><name>cell</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>20</xmax><ymax>20</ymax>'
                    '</bndbox></object><object><name>cell</name><bndbox><xmin>30</xmin><ymin>1</ymin>'
                    '<xmax>60</xmax><ymax>20</ymax></bndbox></object></annotation>')
        with self.assertRaises(ValueError) as ctx:
            read_panel_annotation(fn, check_images=False)
        self.assertIn('object 1', str(ctx.exception))

        with open(fn, 'w') as f:
            f.write('<annotation><filename>x.png</filename><size><width>50</width><height>40</height></size>'
                    '<object><name>dog</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>20</xmax><ymax>20</ymax>'
                    '</bndbox></object></annotation>')
        self.assertRaises(ValueError, read_panel_annotation, fn, False)

        with open(fn, 'w') as f:
            f.write('<annotation><filename>x.png</filename')
        self.assertRaises(ValueError, read_panel_annotation, fn, False)


    def test_panel_validation(self):
        self.assertRaises(ValueError, PanelRecord, size=(40, 70),
                          boxes=[BoundingBox(0, 0, 20, 20), BoundingBox(2, 2, 22, 22)])
        self.assertRaises(ValueError, PanelRecord, size=(40, 70), boxes=[BoundingBox(0, 0, 80, 20)])
        self.assertRaises(ValueError, PanelRecord, size=(40, 70), boxes=[BoundingBox(0, 0, 20, 20)], grid=(2, 2))



class TestSplits(unittest.TestCase):

    def test_panel_split_sizes(self):
        for ctype, (n_panels, _, _, _) in sorted(TECNALIA_COUNTS.items()):
            panels = [PanelRecord(size=(10, 10), cell_type=ctype, panel_id='{:s}{:d}'.format(ctype, i))
                      for i in range(n_panels)]
            split = make_split(panels, ratio=0.8, seed=0)
            expected_train = {10: 8, 27: 22, 30: 24}[n_panels]
            self.assertEqual(len(split.train), expected_train)
            self.assertEqual(len(split.validation), n_panels - expected_train)
            ids = set([p.panel_id for p in split.train]) | set([p.panel_id for p in split.validation])
            self.assertEqual(len(ids), n_panels)


    def test_fixed_validation_size(self):
        recs = [CellRecord(path='x', label=NON_DEFECTIVE if i % 2 else DEFECTIVE, source_id=str(i))
                for i in range(11083)]
        split = make_split(recs, validation_size=2000, seed=3)
        self.assertEqual(len(split.train), 9083)
        self.assertEqual(len(split.validation), 2000)
        self.assertEqual(len(set([id(r) for r in split.train]) & set([id(r) for r in split.validation])), 0)


    def test_deterministic_and_grouped(self):
        recs = [CellRecord(path='x', label=NON_DEFECTIVE, source_id='{:d}-{:d}'.format(g, i))
                for g in range(10) for i in range(4)]
        a = make_split(recs, seed=5, group_key=lambda r: r.source_id.split('-')[0])
        b = make_split(recs, seed=5, group_key=lambda r: r.source_id.split('-')[0])
        self.assertEqual([r.source_id for r in a.validation], [r.source_id for r in b.validation])
        val_groups = set([r.source_id.split('-')[0] for r in a.validation])
        train_groups = set([r.source_id.split('-')[0] for r in a.train])
        self.assertEqual(len(val_groups & train_groups), 0)


    def test_split_errors(self):
        self.assertRaises(ValueError, make_split, [], 0.8)
        recs = [CellRecord(path='x', label=NON_DEFECTIVE, source_id=str(i)) for i in range(5)]
        self.assertRaises(ValueError, make_split, recs, 1.0)
        self.assertRaises(ValueError, make_split, recs, 0.8, 0, 5)
        # 5 records at 0.95 round to 5 training records and none for validation
        with self.assertRaises(ValueError) as ctx:
            make_split(recs, 0.95)
        self.assertIn('0.95', str(ctx.exception))
        self.assertIn('0 for validation', str(ctx.exception))
        self.assertRaises(ValueError, make_split, recs, 0.05)
        self.assertEqual(len(make_split(recs, 0.6).validation), 2)



class TestSynthetic(unittest.TestCase):

    def test_clean_cell(self):
        rec, mask = synthesize_cell(SyntheticCellSpec(cell_size=64), rng_seed=4)
        self.assertEqual(rec.label, NON_DEFECTIVE)
        self.assertEqual(int(mask.sum()), 0)
        self.assertEqual(rec.image.shape, (64, 64))
        self.assertTrue(rec.image.min() >= 0.0 and rec.image.max() <= 1.0)
        rec2, _ = synthesize_cell(SyntheticCellSpec(cell_size=64), rng_seed=4)
        np.testing.assert_array_equal(rec.image, rec2.image)


    def test_anomalous_cell(self):
        anomaly = {'kind': 'crack', 'points': [[10, 10], [50, 40]], 'width': 4}
        spec = SyntheticCellSpec(cell_size=64, anomaly=anomaly, noise_sigma=0.0)
        rec, mask = synthesize_cell(spec, rng_seed=1)
        clean, _ = synthesize_cell(spec.replace(anomaly=None), rng_seed=1)
        self.assertEqual(rec.label, DEFECTIVE)
        self.assertGreater(int(mask.sum()), 0)
        np.testing.assert_array_equal(rec.mask, mask)
        inside = mask.astype(bool)
        self.assertTrue(np.all(rec.image[~inside] == clean.image[~inside]))
        self.assertLess(float(rec.image[inside].mean()), float(clean.image[inside].mean()) - 0.2)


    def test_invalid_anomalies(self):
        self.assertRaises(ConfigError, SyntheticCellSpec, anomaly={'kind': 'scratch'})
        # more than 40 % of the cell
        self.assertRaises(ConfigError, SyntheticCellSpec, cell_size=64,
                          anomaly={'kind': 'dead_corner', 'points': [[0, 0], [64, 0], [64, 64], [0, 64]]})
        # entirely outside the cell
        self.assertRaises(ConfigError, SyntheticCellSpec, cell_size=64,
                          anomaly={'kind': 'dark_region', 'center': [500, 500], 'axes': [5, 5]})


    def test_random_anomalies_are_valid(self):
        rng = np.random.default_rng(0)
        for kind in ('crack', 'dark_region', 'dead_corner'):
            for _ in range(10):
                a = random_anomaly(rng, kind, 64)
                spec = SyntheticCellSpec(cell_size=64, anomaly=a)
                self.assertGreater(int(anomaly_footprint(spec.anomaly, (64, 64)).sum()), 0)


    def test_synthesize_cells(self):
        cells = synthesize_cells(20, seed=2, anomalous_fraction=0.5, spec=SyntheticCellSpec(cell_size=32))
        labels = [c[0].label for c in cells]
        self.assertEqual(labels.count(DEFECTIVE), 10)
        for rec, mask in cells:
            self.assertEqual(rec.label == DEFECTIVE, int(mask.sum()) > 0)
        self.assertRaises(ValueError, synthesize_cells, 5, 0, 1.5)


    def test_synthesize_panel(self):
        anomaly = {'kind': 'dark_region', 'center': [16, 16], 'axes': [6, 4], 'angle': 30.0}
        panel, truths = synthesize_panel((2, 3), spec=SyntheticCellSpec(cell_size=32), rng_seed=9,
                                         cell_specs={4: {'cell_size': 32, 'anomaly': anomaly}})
        self.assertEqual(len(panel.boxes), 6)
        self.assertEqual(len(truths), 6)
        self.assertEqual(panel.grid, (2, 3))
        for i, b in enumerate(panel.boxes):
            x0, y0, x1, y1 = b.pixelBounds()
            np.testing.assert_array_equal(panel.image[y0:y1, x0:x1], truths[i][0].image)
            for j in range(i + 1, len(panel.boxes)):
                self.assertEqual(box_iou(b, panel.boxes[j]), 0.0)
        self.assertEqual([t[0].label for t in truths].count(DEFECTIVE), 1)
        self.assertEqual(truths[4][0].label, DEFECTIVE)
        self.assertRaises(ValueError, synthesize_panel, (0, 3))


    def test_expanded_panel_crops(self):
        anomaly = {'kind': 'dark_region', 'center': [16, 16], 'axes': [6, 4], 'angle': 30.0}
        panel, truths = synthesize_panel((2, 3), spec=SyntheticCellSpec(cell_size=32), rng_seed=9,
                                         cell_specs={4: {'cell_size': 32, 'anomaly': anomaly}})
        crops = crop_panel_cells(panel, truths)
        self.assertEqual(len(crops), 6)
        self.assertEqual([c[0].label for c in crops], [t[0].label for t in truths])
        for rec, mask in crops:
            self.assertEqual(rec.image.shape, (32, 32))
            self.assertEqual(mask.shape, (32, 32))
        self.assertGreater(crops[4][1].sum(), 0)
        self.assertEqual(sum([int(c[1].sum()) for i, c in enumerate(crops) if i != 4]), 0)
        self.assertEqual(crops[0][0].source_id, 'panel-9-crop000')

        same = crop_panel_cells(panel, truths, expansion_ratio=0.0)
        np.testing.assert_array_equal(same[1][0].image, truths[1][0].image)
        self.assertRaises(ValueError, crop_panel_cells, panel, truths[:2])



class TestRecordsAndIndex(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()


    def tearDown(self):
        shutil.rmtree(self.tmp)


    def test_record_validation(self):
        self.assertRaises(ValueError, CellRecord, image=np.zeros((4, 4)))
        self.assertRaises(ValueError, CellRecord, image=np.zeros((4, 4)), label='broken')
        self.assertRaises(ValueError, CellRecord, image=np.zeros((4, 4)), label=DEFECTIVE, cell_type='cigs')
        self.assertRaises(ValueError, CellRecord, label=DEFECTIVE)
        r = CellRecord(image=np.zeros((4, 4)), defect_likelihood=0.33)
        self.assertEqual(r.label, DEFECTIVE)


    def test_cell_index_round_trip(self):
        cells = [c[0] for c in synthesize_cells(6, seed=1, spec=SyntheticCellSpec(cell_size=32))]
        index = os.path.join(self.tmp, 'index.csv')
        write_cell_index(index, cells, image_dir=os.path.join(self.tmp, 'img'))
        back = read_cell_index(index)
        self.assertEqual([r.label for r in back], [r.label for r in cells])
        self.assertEqual([r.source_id for r in back], [r.source_id for r in cells])
        for a, b in zip(cells, back):
            np.testing.assert_allclose(b.image, a.image, atol=0.5 / 255.0 + 1e-12)
        self.assertRaises(ValueError, write_cell_index, os.path.join(self.tmp, 'x.csv'), cells)


    def test_counts_and_combine(self):
        recs = tecnalia_records()
        self.assertEqual(len(recs), 5592)
        df = count_by(recs)
        self.assertEqual(int(df['count'].sum()), 5592)
        row = df[(df['label'] == DEFECTIVE) & (df['cell_type'] == BUSBAR3)]
        self.assertEqual(int(row['count'].iloc[0]), 311)
        with self.assertLogs('elpvtoolbox.datasets', level='WARNING'):
            both = combine_datasets(recs[:3], recs[:2])
        self.assertEqual(len(both), 5)



if __name__ == '__main__':
    unittest.main()
