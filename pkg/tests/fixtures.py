# Metadata fixtures with the published dataset counts

from elpvtoolbox.datasets import (CellRecord, NON_DEFECTIVE, DEFECTIVE, ELONGATED, BUSBAR3, BUSBAR5)

# (likelihood, mono count, poly count) of the public ELPV cell set
ELPV_COUNTS = [(0.0, 588, 920),
               (0.33, 117, 178),
               (0.66, 56, 50),
               (1.0, 313, 402)]

# cell type -> (panels, cells per panel, non-defective, defective) of the panel-annotated set
TECNALIA_COUNTS = {ELONGATED: (10, 120, 984, 216),
                   BUSBAR3: (27, 96, 2281, 311),
                   BUSBAR5: (30, 60, 1620, 180)}


def write_elpv_index(path, sep=','):
    """ Write a headerless ELPV index with 2624 rows, images not included """
    lines = []
    n = 0
    for likelihood, mono, poly in ELPV_COUNTS:
        for ctype, count in (('mono', mono), ('poly', poly)):
            for _ in range(count):
                lines.append('images/cell{:04d}.png{:s}{:s}{:s}{:s}'.format(
                    n, sep, repr(likelihood), sep, ctype))
                n += 1
    with open(path, 'w') as f:
        f.write('\n'.join(lines) + '\n')
    return n


def tecnalia_records():
    """ Metadata-only cell records of the panel-annotated set (5592 cells) """
    records = []
    for ctype, (_, _, n_ok, n_def) in sorted(TECNALIA_COUNTS.items()):
        for label, count in ((NON_DEFECTIVE, n_ok), (DEFECTIVE, n_def)):
            for i in range(count):
                records.append(CellRecord(path='unused/{:s}_{:s}_{:04d}.png'.format(ctype, label, i), label=label,
                                          cell_type=ctype, origin='tecnalia',
                                          source_id='{:s}-{:s}-{:04d}'.format(ctype, label, i)))
    return records
