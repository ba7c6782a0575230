# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Panel pipeline: detection, classification, segmentation and attachment

import os
import json
import hashlib
import logging
from time import perf_counter

import numpy as np
import pandas as pd
import torch

from .data import ConfigSet, RunConfig, CheckpointError, CheckpointVersionError
from .datasets import DEFECTIVE, NON_DEFECTIVE
from .imaging import (SsimParams, CropGeometry, check_gray, expand_box, crop_resize,
                      gray_to_rgb, draw_box, write_rgb_png, write_mask_png, RED, GREEN, BLUE)
from .detection import DetectorConfig, ObjectnessDetector, detect_cells
from .classification import ClassifierConfig, CellClassifier, classify_cells
from .segmentation import AutoencoderSpec, ConvAutoencoder, SegmentationParams, extract_anomaly

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

MODEL_KINDS = {'detector': (DetectorConfig, ObjectnessDetector),
               'classifier': (ClassifierConfig, CellClassifier),
               'autoencoder': (AutoencoderSpec, ConvAutoencoder)}

STAGES = ('detect', 'classify', 'segment', 'attach')

STATUS_OK = 'ok'
STATUS_ERRORED = 'errored'


@RunConfig.registerSection
class PipelineConfig(ConfigSet):
    """ Panel pipeline settings

    Attributes:
        detector_checkpoint, classifier_checkpoint, autoencoder_checkpoint (str): model files
        expansion_ratio (float): box growth before cropping (total, per dimension)
        decision_threshold (float): p_non_defective needed for a non-defective verdict
        score_floor (float): minimum detection objectness
        output_dir (str): report and artifact directory
        cell_size (int): crop side length, must equal the autoencoder input size
        stroke (int): outline width in the annotated panel
    """
    SECTION = 'pipeline'
    DEFAULTS = {'detector_checkpoint': None,
                'classifier_checkpoint': None,
                'autoencoder_checkpoint': None,
                'expansion_ratio': 0.10,
                'decision_threshold': 0.70,
                'score_floor': 0.5,
                'output_dir': 'output',
                'cell_size': 300,
                'stroke': 2}

    def validate(self):
        self._require(0.0 <= self.expansion_ratio < 1.0, 'expansion_ratio', 'must lie in [0, 1)')
        self._require(0.5 < self.decision_threshold < 1.0, 'decision_threshold', 'must lie in (0.5, 1.0)')
        self._require(0.0 <= self.score_floor <= 1.0, 'score_floor', 'must lie in [0, 1]')
        self._require(isinstance(self.cell_size, int) and self.cell_size >= 8, 'cell_size', 'must be an integer >= 8')
        self._require(isinstance(self.stroke, int) and self.stroke >= 1, 'stroke', 'must be an integer >= 1')



def save_model(model, path, extras=None):
    """ Save a model with its configuration and a format version stamp

    Args:
        model: ObjectnessDetector, CellClassifier or ConvAutoencoder
        path (str): output file
        extras (dict): additional JSON-compatible metadata
    """
    kind = getattr(model, 'CHECKPOINT_KIND', None)
    if kind not in MODEL_KINDS:
        raise ValueError('Cannot save model of type {:s}'.format(type(model).__name__))
    ckpt = {'format_version': CHECKPOINT_FORMAT_VERSION,
            'kind': kind,
            'config': model.config.toDict(),
            'trained': bool(model.trained),
            'state_dict': dict([(k, v.detach().cpu()) for k, v in model.state_dict().items()]),
            'extras': dict(extras) if extras is not None else {}}
    torch.save(ckpt, path)
    logger.info('Saved {:s} checkpoint: {:s}'.format(kind, str(path)))


def load_model(path, kind=None):
    """ Load a model saved with save_model()

    Args:
        path (str): checkpoint file
        kind (str): expected model kind, any if None

    Returns: model in eval mode
    """
    if path is None or not os.path.isfile(path):
        raise IOError('Checkpoint file not found: {:s}'.format(str(path)))
    try:
        ckpt = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError('Corrupt or unreadable checkpoint {:s}: {:s}'.format(str(path), str(e)))

    if not isinstance(ckpt, dict) or 'format_version' not in ckpt:
        raise CheckpointError('File is not a model checkpoint: {:s}'.format(str(path)))
    if ckpt['format_version'] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError('Checkpoint {:s} has format version {:s}, expected {:d}'.format(
            str(path), str(ckpt['format_version']), CHECKPOINT_FORMAT_VERSION))
    if ckpt.get('kind') not in MODEL_KINDS:
        raise CheckpointError('Unknown model kind in {:s}: {:s}'.format(str(path), str(ckpt.get('kind'))))
    if kind is not None and ckpt['kind'] != kind:
        raise CheckpointError('Checkpoint {:s} holds a {:s}, expected a {:s}'.format(str(path), ckpt['kind'], kind))

    cfg_cls, model_cls = MODEL_KINDS[ckpt['kind']]
    try:
        model = model_cls(cfg_cls(ckpt['config']))
        model.load_state_dict(ckpt['state_dict'], strict=True)
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError('Checkpoint {:s} does not match its configuration: {:s}'.format(str(path), str(e)))
    model.trained = bool(ckpt.get('trained', False))
    model.eval()
    return model



class CellVerdict(object):
    """ Pipeline result for one detected cell """

    def __init__(self, index, box, expanded_box=None, objectness=None, classification=None,
                 segment=None, status=STATUS_OK, error=None):
        self.index = int(index)
        self.box = box
        self.expanded_box = expanded_box
        self.objectness = objectness
        self.classification = classification
        self.segment = segment
        self.status = status
        self.error = error
        self.artifacts = {}


    def __repr__(self):
        return '<CellVerdict #{:d} {:s}>'.format(self.index, self.label if self.label is not None else self.status)


    @property
    def label(self):
        if self.status != STATUS_OK or self.classification is None:
            return None
        return self.classification.label


    def toDict(self):
        d = {'index': self.index,
             'status': self.status,
             'box': self.box.toDict(),
             'expanded_box': self.expanded_box.toDict() if self.expanded_box is not None else None,
             'objectness': self.objectness,
             'label': self.label,
             'classification': self.classification.toDict() if self.classification is not None else None,
             'segment': self.segment.toDict() if self.segment is not None else None}
        if self.error is not None:
            d['error'] = self.error
        if len(self.artifacts) > 0:
            d['artifacts'] = dict(self.artifacts)
        return d



class PanelReport(object):
    """ Verdicts, annotated image and stage timings of one panel """

    def __init__(self, panel_id, panel_shape, verdicts, annotated_panel, timings=None, warnings=None, settings=None):
        self.panel_id = str(panel_id)
        self.panel_shape = tuple(panel_shape)
        self.verdicts = list(verdicts)
        self.annotated_panel = annotated_panel
        self.timings = dict(timings) if timings is not None else {}
        self.warnings = list(warnings) if warnings is not None else []
        self.settings = dict(settings) if settings is not None else {}
        self.artifacts = {}


    def __repr__(self):
        c = self.counts
        return '<PanelReport {:s}: {:d} cells, {:d} defective>'.format(self.panel_id, c['cells'], c['defective'])


    @property
    def counts(self):
        labels = [v.label for v in self.verdicts]
        return {'cells': len(self.verdicts),
                'defective': labels.count(DEFECTIVE),
                'non_defective': labels.count(NON_DEFECTIVE),
                'errored': len([v for v in self.verdicts if v.status == STATUS_ERRORED])}


    @property
    def defective(self):
        return [v for v in self.verdicts if v.label == DEFECTIVE]


    def contentDict(self):
        """ Report content without run-dependent timings """
        d = {'panel_id': self.panel_id,
             'panel_shape': list(self.panel_shape),
             'counts': self.counts,
             'settings': dict(self.settings),
             'warnings': list(self.warnings),
             'verdicts': [v.toDict() for v in self.verdicts]}
        if self.annotated_panel is not None:
            d['annotated_sha1'] = hashlib.sha1(np.ascontiguousarray(self.annotated_panel).tobytes()).hexdigest()
        if len(self.artifacts) > 0:
            d['artifacts'] = dict(self.artifacts)
        return d


    def toDict(self):
        d = self.contentDict()
        d['timings'] = dict(self.timings)
        return d


    def toJSONFile(self, json_file):
        with open(json_file, 'w') as jf:
            jf.write(json.dumps(self.toDict(), indent=2, sort_keys=True))


    def saveArtifacts(self, output_dir):
        """ Write the annotated panel, per-cell masks and overlays, and the
        JSON report with paths relative to output_dir

        Returns: path of the JSON report
        """
        if not os.path.isdir(output_dir):
            os.makedirs(output_dir)
        name = self.panel_id
        if self.annotated_panel is not None:
            fn = '{:s}_annotated.png'.format(name)
            write_rgb_png(os.path.join(output_dir, fn), self.annotated_panel)
            self.artifacts['annotated_panel'] = fn
        for v in self.verdicts:
            if v.segment is None:
                continue
            mfn = '{:s}_cell{:03d}_mask.png'.format(name, v.index)
            ofn = '{:s}_cell{:03d}_overlay.png'.format(name, v.index)
            write_mask_png(os.path.join(output_dir, mfn), v.segment.mask)
            write_rgb_png(os.path.join(output_dir, ofn), v.segment.overlay)
            v.artifacts = {'mask': mfn, 'overlay': ofn}
        report_file = os.path.join(output_dir, '{:s}_report.json'.format(name))
        self.toJSONFile(report_file)
        return report_file



def attach(panel, verdicts, stroke=2):
    """ Reassemble per-cell results into one annotated RGB panel.

    Segment masks are mapped back through the expanded-crop geometry and
    painted red. Original boxes are outlined green (non-defective), red
    (defective) or blue (errored, clipped to the panel). All other pixels
    keep the panel value.

    Args:
        panel: GrayImage
        verdicts (list): CellVerdicts
        stroke (int): outline width

    Returns: RgbImage
    """
    panel = check_gray(panel, 'panel')
    h, w = panel.shape
    out = gray_to_rgb(panel)
    for v in verdicts:
        if v.status != STATUS_ERRORED and (v.box.x_max > w or v.box.y_max > h):
            raise ValueError('Verdict {:d} box {:s} exceeds panel of shape {:s}'.format(v.index, repr(v.box), str(panel.shape)))
        if v.segment is not None and v.label == DEFECTIVE:
            x0, y0, x1, y1 = v.expanded_box.pixelBounds(bounds=panel.shape)
            geom = CropGeometry(x0, y0, x1, y1, v.segment.mask.shape)
            out[geom.mapMaskToPanel(v.segment.mask, panel.shape).astype(bool)] = RED
    for v in verdicts:
        if v.status == STATUS_ERRORED:
            color = BLUE
        elif v.label == DEFECTIVE:
            color = RED
        else:
            color = GREEN
        out = draw_box(out, v.box, color=color, stroke=stroke)
    return out



class PanelPipeline(object):

    def __init__(self, cfg=None, models=None, debug=False):
        """ Detection, classification, segmentation and attachment of
        panels. Models are loaded once and only read afterwards.

        Args:
            cfg: RunConfig or PipelineConfig (other sections take defaults)
            models (dict): 'detector', 'classifier', 'autoencoder' models;
                missing entries are loaded from the configured checkpoints
            debug (bool): if True, log debug output
        """
        if cfg is None:
            cfg = RunConfig()
        if isinstance(cfg, RunConfig):
            self.cfg = cfg.pipeline
            self.ssim_params = cfg.ssim
            self.seg_params = cfg.segmentation
        else:
            self.cfg = cfg
            self.ssim_params = SsimParams()
            self.seg_params = SegmentationParams()
        self.debug = debug
        self._t0 = perf_counter()

        models = dict(models) if models is not None else {}
        for kind in MODEL_KINDS.keys():
            if kind not in models:
                models[kind] = load_model(self.cfg['{:s}_checkpoint'.format(kind)], kind=kind)
                self._dlog('Loaded {:s} from {:s}'.format(kind, str(self.cfg['{:s}_checkpoint'.format(kind)])))
        self.detector = models['detector']
        self.classifier = models['classifier']
        self.autoencoder = models['autoencoder']

        ae_size = getattr(getattr(self.autoencoder, 'spec', None), 'input_size', self.cfg.cell_size)
        if ae_size != self.cfg.cell_size:
            raise ValueError('pipeline.cell_size ({:d}) differs from the autoencoder input size ({:d})'.format(
                self.cfg.cell_size, ae_size))


    def _dlog(self, text):
        """ Log debug information if debug output is enabled

        Args:
            String to log
        """
        if self.debug:
            logger.debug('[PIP] {:.4f} - {:s}'.format(perf_counter() - self._t0, str(text)))


    def _settings(self):
        return {'expansion_ratio': self.cfg.expansion_ratio,
                'decision_threshold': self.cfg.decision_threshold,
                'score_floor': self.cfg.score_floor,
                'cell_size': self.cfg.cell_size}


    def runPanel(self, panel, panel_id='panel'):
        """ Process one panel image

        Args:
            panel: GrayImage
            panel_id (str): name used in the report and artifact files

        Returns: PanelReport
        """
        panel = check_gray(panel, 'panel')
        timings = dict([(s, 0.0) for s in STAGES])
        warnings = []
        size = (self.cfg.cell_size, self.cfg.cell_size)

        t = perf_counter()
        detections = detect_cells(self.detector, panel, score_floor=self.cfg.score_floor)
        timings['detect'] = perf_counter() - t
        self._dlog('{:s}: {:d} detections'.format(panel_id, len(detections)))
        if len(detections) == 0:
            logger.warning('No cells detected on panel {:s}'.format(panel_id))
            warnings.append('no_detections')

        verdicts, cells = [], []
        for i, det in enumerate(detections):
            v = CellVerdict(i, det.box, objectness=det.objectness)
            try:
                v.expanded_box = expand_box(det.box, panel.shape, self.cfg.expansion_ratio)
                cell, _ = crop_resize(panel, v.expanded_box, size)
                cells.append(cell)
            except ValueError as e:
                v.status, v.error = STATUS_ERRORED, str(e)
                cells.append(None)
                logger.warning('Panel {:s}, cell {:d}: crop failed: {:s}'.format(panel_id, i, str(e)))
            verdicts.append(v)

        t = perf_counter()
        ok = [i for i, v in enumerate(verdicts) if v.status == STATUS_OK]
        if len(ok) > 0:
            results = classify_cells(self.classifier, [cells[i] for i in ok], threshold=self.cfg.decision_threshold)
            for i, r in zip(ok, results):
                verdicts[i].classification = r
        timings['classify'] = perf_counter() - t

        t = perf_counter()
        for i in ok:
            v = verdicts[i]
            if v.label != DEFECTIVE:
                continue
            try:
                v.segment = extract_anomaly(self.autoencoder, cells[i], self.ssim_params, self.seg_params)
            except ValueError as e:
                v.status, v.error = STATUS_ERRORED, str(e)
                logger.warning('Panel {:s}, cell {:d}: segmentation failed: {:s}'.format(panel_id, i, str(e)))
        timings['segment'] = perf_counter() - t

        t = perf_counter()
        annotated = attach(panel, verdicts, stroke=self.cfg.stroke)
        timings['attach'] = perf_counter() - t

        report = PanelReport(panel_id, panel.shape, verdicts, annotated, timings, warnings, self._settings())
        self._dlog('{:s}: {:s}'.format(panel_id, str(report.counts)))
        return report



def run_panel(cfg, panel, models=None, panel_id='panel', debug=False):
    """ Run the full pipeline on one panel

    Args:
        cfg: RunConfig or PipelineConfig
        panel: GrayImage
        models (dict): preloaded models, loaded from checkpoints if None

    Returns: PanelReport
    """
    return PanelPipeline(cfg, models=models, debug=debug).runPanel(panel, panel_id)


SUMMARY_COLUMNS = ['panel_id', 'cells', 'defective', 'non_defective', 'errored', 'warnings', 'report']


def summarize_reports(directory, summary_file='summary.csv'):
    """ Collect all panel reports below a directory into one table

    Args:
        directory (str): directory searched recursively for *_report.json
        summary_file (str): CSV written into directory, None to skip

    Returns: pandas DataFrame, one row per panel
    """
    if not os.path.isdir(directory):
        raise IOError('Report directory not found: {:s}'.format(str(directory)))
    rows = []
    for root, _, files in sorted(os.walk(directory)):
        for fn in sorted(files):
            if not fn.endswith('_report.json'):
                continue
            path = os.path.join(root, fn)
            with open(path, 'r') as jf:
                try:
                    rep = json.load(jf)
                except ValueError as e:
                    raise ValueError('Report {:s} is not valid JSON: {:s}'.format(path, str(e)))
            row = {'panel_id': rep['panel_id'],
                   'warnings': ';'.join(rep.get('warnings', [])),
                   'report': os.path.relpath(path, directory)}
            row.update(rep['counts'])
            rows.append(row)
    df = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    if summary_file is not None:
        df.to_csv(os.path.join(directory, summary_file), index=False)
    return df
