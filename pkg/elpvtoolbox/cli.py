# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Command line interface

import os
import sys
import json
import logging
import argparse

from .data import RunConfig
from .datasets import (NON_DEFECTIVE, CELL_TYPES, DatasetSplit, load_elpv, read_cell_index, write_cell_index,
                       load_panel_annotations, write_panel_annotation, make_split, combine_datasets, count_by,
                       synthesize_cells, synthesize_panel, crop_panel_cells)
from .augmentation import (balance, balance_for_segmentation, summarize_balance, elpv_policy, tecnalia_policy,
                           segmentation_policy, segmentation_source_policy)
from .imaging import read_gray_png, write_gray_png, write_mask_png
from .detection import build_detector, train_detector, detect_cells, evaluate_ap
from .classification import build_classifier, train_classifier, evaluate_classifier
from .segmentation import build_autoencoder, train_autoencoder
from .pipeline import PanelPipeline, save_model, load_model, summarize_reports

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2

POLICIES = {'elpv': elpv_policy,
            'tecnalia': tecnalia_policy,
            'segmentation': segmentation_policy,
            'segmentation_source': segmentation_source_policy}


def _grid(text):
    try:
        rows, cols = [int(v) for v in text.lower().split('x')]
    except ValueError:
        raise argparse.ArgumentTypeError('grid must look like ROWSxCOLS, got {:s}'.format(text))
    return rows, cols


def build_parser():
    parser = argparse.ArgumentParser(prog='elpvtoolbox',
                                     description='Detection, classification and segmentation of defective EL cells')
    parser.add_argument('--config', help='run-config JSON file')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='override one run-config value (repeatable)')
    parser.add_argument('--debug', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    # dataset
    ds = sub.add_parser('dataset', help='prepare, balance or synthesize datasets').add_subparsers(dest='action')
    ds.required = True
    p = ds.add_parser('prepare', help='load and split cell datasets into index files')
    p.add_argument('--elpv', help='ELPV index file (labels.csv)')
    p.add_argument('--cells', action='append', default=[], help='additional cell index CSV (repeatable)')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--ratio', type=float, default=0.8, help='training share')
    p.add_argument('--validation-size', type=int, default=None, help='fixed validation count')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--no-check-images', action='store_true', help='skip image existence checks')

    p = ds.add_parser('augment', help='balance a cell index with an augmentation policy')
    p.add_argument('--index', required=True, help='cell index CSV')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--policy', choices=['config'] + sorted(POLICIES.keys()), default='config')

    p = ds.add_parser('synth', help='render synthetic panels or cells')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--panels', type=int, default=0, help='number of panels')
    p.add_argument('--grid', type=_grid, default=(6, 10), help='panel grid ROWSxCOLS')
    p.add_argument('--cells', type=int, default=0, help='number of single cells')
    p.add_argument('--anomalous-fraction', type=float, default=0.5)
    p.add_argument('--panel-crops', action='store_true',
                   help='also write the expanded cell crops of every panel as a cell index')
    p.add_argument('--seed', type=int, default=0)

    # train
    tr = sub.add_parser('train', help='train a stage model').add_subparsers(dest='model')
    tr.required = True
    p = tr.add_parser('detector')
    p.add_argument('--annotations', required=True, help='directory of panel XML annotations')
    p.add_argument('--out', required=True, help='output checkpoint')
    p = tr.add_parser('classifier')
    p.add_argument('--train', required=True, help='training cell index CSV')
    p.add_argument('--validation', required=True, help='validation cell index CSV')
    p.add_argument('--out', required=True, help='output checkpoint')
    p = tr.add_parser('autoencoder')
    p.add_argument('--index', required=True, help='cell index CSV (non-defective cells are used)')
    p.add_argument('--out', required=True, help='output checkpoint')

    # eval
    ev = sub.add_parser('eval', help='evaluate a stage model').add_subparsers(dest='model')
    ev.required = True
    p = ev.add_parser('detector')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--annotations', required=True, help='directory of panel XML annotations')
    p = ev.add_parser('classifier')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--index', required=True, help='labelled cell index CSV')

    p = sub.add_parser('infer', help='run the full pipeline on a panel image')
    p.add_argument('panel', help='panel PNG')
    p.add_argument('--panel-id', default=None)

    p = sub.add_parser('report', help='summarize panel reports in a directory')
    p.add_argument('directory')
    return parser


def _load_config(args):
    cfg = RunConfig.fromJSONFile(args.config) if args.config is not None else RunConfig()
    for o in args.overrides:
        cfg.override(o)
    return cfg


def _makedirs(d):
    if not os.path.isdir(d):
        os.makedirs(d)


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _dataset_prepare(args, cfg):
    parts = []
    if args.elpv is not None:
        parts.append(load_elpv(args.elpv, check_images=not args.no_check_images))
    for idx in args.cells:
        parts.append(read_cell_index(idx))
    if len(parts) == 0:
        raise ValueError('dataset prepare needs --elpv or --cells')
    records = combine_datasets(*parts)
    split = make_split(records, ratio=args.ratio, seed=args.seed, validation_size=args.validation_size)
    _makedirs(args.out)
    write_cell_index(os.path.join(args.out, 'train_index.csv'), split.train)
    write_cell_index(os.path.join(args.out, 'validation_index.csv'), split.validation)
    count_by(records).to_csv(os.path.join(args.out, 'counts.csv'), index=False)
    logger.info('Prepared {:s}'.format(repr(split)))
    _emit({'train': len(split.train), 'validation': len(split.validation)})


def _dataset_augment(args, cfg):
    records = read_cell_index(args.index)
    seed = cfg.augmentation.seed
    if args.policy in ('segmentation', 'segmentation_source'):
        clean = [r for r in records if r.label == NON_DEFECTIVE]
        if args.policy == 'segmentation':
            types = [t for t in CELL_TYPES if t in set([r.cell_type for r in clean])]
            policy = segmentation_policy(cell_types=types, seed=seed)
        else:
            # per-source targets of the combined ELPV and panel-annotated sets
            policy = segmentation_source_policy(seed=seed)
        out = balance_for_segmentation(clean, policy)
    elif args.policy == 'config':
        out = balance(records, cfg.augmentation)
    else:
        out = balance(records, POLICIES[args.policy](seed=seed))
    _makedirs(args.out)
    write_cell_index(os.path.join(args.out, 'index.csv'), out, image_dir=os.path.join(args.out, 'images'))
    _emit(summarize_balance(records, out))


def _dataset_synth(args, cfg):
    if args.panels <= 0 and args.cells <= 0:
        raise ValueError('dataset synth needs --panels or --cells')
    _makedirs(args.out)
    n_cells = 0
    crops = []
    for i in range(args.panels):
        pid = 'panel{:04d}'.format(i)
        panel, truths = synthesize_panel(args.grid, spec=cfg.synthetic, rng_seed=args.seed + i, panel_id=pid)
        write_gray_png(os.path.join(args.out, pid + '.png'), panel.image)
        write_panel_annotation(os.path.join(args.out, pid + '.xml'), panel, pid + '.png')
        n_cells += len(truths)
        if args.panel_crops:
            crops += [c[0] for c in crop_panel_cells(panel, truths, cfg.pipeline.expansion_ratio,
                                                     cfg.pipeline.cell_size)]
    if len(crops) > 0:
        write_cell_index(os.path.join(args.out, 'panel_cells_index.csv'), crops,
                         image_dir=os.path.join(args.out, 'panel_cells'))
    if args.cells > 0:
        cells = synthesize_cells(args.cells, seed=args.seed, anomalous_fraction=args.anomalous_fraction,
                                 spec=cfg.synthetic)
        mask_dir = os.path.join(args.out, 'masks')
        _makedirs(mask_dir)
        for rec, mask in cells:
            write_mask_png(os.path.join(mask_dir, rec.source_id + '.png'), mask)
        write_cell_index(os.path.join(args.out, 'cells_index.csv'), [c[0] for c in cells],
                         image_dir=os.path.join(args.out, 'cells'))
    _emit({'panels': args.panels, 'panel_cells': n_cells, 'cells': args.cells})


def _save_history(history, checkpoint):
    history.saveHistory(checkpoint + '.history.csv', checkpoint + '.events.csv')


def _train_detector(args, cfg):
    panels = load_panel_annotations(args.annotations)
    if len(panels) == 0:
        raise ValueError('No panel annotations found in {:s}'.format(args.annotations))
    tcfg = cfg.detector_training
    split = make_split(panels, seed=tcfg.seed)
    model = build_detector(cfg.detector, seed=tcfg.seed)
    model, history = train_detector(model, split, tcfg, debug=args.debug)
    save_model(model, args.out)
    _save_history(history, args.out)


def _train_classifier(args, cfg):
    tcfg = cfg.classifier_training
    split = DatasetSplit(read_cell_index(args.train), read_cell_index(args.validation), tcfg.seed)
    model = build_classifier(cfg.classifier, seed=tcfg.seed)
    model, history = train_classifier(model, split, tcfg, debug=args.debug)
    save_model(model, args.out)
    _save_history(history, args.out)


def _train_autoencoder(args, cfg):
    tcfg = cfg.autoencoder_training
    records = [r for r in read_cell_index(args.index) if r.label == NON_DEFECTIVE]
    model = build_autoencoder(cfg.autoencoder, seed=tcfg.seed)
    model, history = train_autoencoder(model, records, tcfg, cfg.ssim, debug=args.debug)
    save_model(model, args.out)
    _save_history(history, args.out)


def _eval_detector(args, cfg):
    model = load_model(args.checkpoint, kind='detector')
    panels = load_panel_annotations(args.annotations)
    dets = [detect_cells(model, p.image) for p in panels]
    _emit(evaluate_ap(dets, [p.boxes for p in panels]).toDict())


def _eval_classifier(args, cfg):
    model = load_model(args.checkpoint, kind='classifier')
    _emit(evaluate_classifier(model, read_cell_index(args.index)).toDict())


def _infer(args, cfg):
    pipeline = PanelPipeline(cfg, debug=args.debug)
    panel_id = args.panel_id
    if panel_id is None:
        panel_id = os.path.splitext(os.path.basename(args.panel))[0]
    report = pipeline.runPanel(read_gray_png(args.panel), panel_id)
    report_file = report.saveArtifacts(cfg.pipeline.output_dir)
    logger.info('Wrote report {:s}'.format(report_file))
    _emit(report.counts)


def _report(args, cfg):
    df = summarize_reports(args.directory)
    print(df.to_string(index=False))


COMMANDS = {('dataset', 'prepare'): _dataset_prepare,
            ('dataset', 'augment'): _dataset_augment,
            ('dataset', 'synth'): _dataset_synth,
            ('train', 'detector'): _train_detector,
            ('train', 'classifier'): _train_classifier,
            ('train', 'autoencoder'): _train_autoencoder,
            ('eval', 'detector'): _eval_detector,
            ('eval', 'classifier'): _eval_classifier,
            ('infer', None): _infer,
            ('report', None): _report}


def cli(argv=None):
    """ Run the command line interface

    Args:
        argv (list): arguments without the program name, sys.argv if None

    Returns: exit status (0 on success)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code

    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO,
                            format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    sub = getattr(args, 'action', None) or getattr(args, 'model', None)
    try:
        cfg = _load_config(args)
        COMMANDS[(args.command, sub)](args, cfg)
    except (ValueError, IOError, RuntimeError) as e:
        sys.stderr.write('elpvtoolbox: error: {:s}\n'.format(str(e)))
        return EXIT_ERROR
    return EXIT_OK


def main():
    sys.exit(cli())
