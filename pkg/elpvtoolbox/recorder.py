# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Training history recording class

import csv
import logging
from time import perf_counter

from .data import ParamSet
from .stats import mean

try:
    # Plotting is optional, headless training runs do not need matplotlib
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    _HAS_PLOT_PKGS = True

except ImportError:
    _HAS_PLOT_PKGS = False

import pandas as pd

logger = logging.getLogger(__name__)

HISTORY_START_EVENT = 'HISTORY_START'
HISTORY_STOP_EVENT = 'HISTORY_STOP'


class HistoryRecorder(object):

    def __init__(self, fields=None, index='step', tag='REC', debug=False):
        """ Step-wise recording of training losses and metrics.

        Rows are dicts keyed by the index column; events are time-stamped
        strings (start, stop, validation points). Both are kept in memory
        until saved or cleared.

        Args:
            fields (list): Column names to export in saveHistory(), in order.
                If None, all keys seen in recorded rows are exported.
            index (str): Name of the row index column ('step' or 'epoch')
            tag (str): Short component tag used for debug output
            debug (bool): if True, log debug output for every recorded row
        """
        self.debug = debug
        self.tag = tag
        self.fields = list(fields) if fields is not None else None
        self.index = index
        self.recording = False
        self._rows = []
        self._events = []
        self._customvars = ParamSet()
        self._t0 = perf_counter()


    def _dlog(self, text):
        """ Log debug information if debug output is enabled

        Args:
            String to log
        """
        if self.debug:
            logger.debug('[{:s}] {:.4f} - {:s}'.format(self.tag, perf_counter() - self._t0, str(text)))


    def __len__(self):
        return len(self._rows)


    def __repr__(self):
        return '<HistoryRecorder [{:s}], {:d} rows, {:d} events>'.format(self.tag, len(self._rows), len(self._events))


    @property
    def rows(self):
        return list(self._rows)


    @property
    def events(self):
        return list(self._events)


    @property
    def custom_vars(self):
        return self._customvars


    def setCustomVar(self, variable, value=None):
        """ Set a value that is added as a column to every following row

        Args:
            variable (str): Column name
            value: Column value
        """
        self._customvars[variable] = value


    def startRecording(self):
        if not self.recording:
            self.recording = True
            self.recordEvent(HISTORY_START_EVENT)
            self._dlog('History recording started.')


    def stopRecording(self):
        if self.recording:
            self.recording = False
            self.recordEvent(HISTORY_STOP_EVENT)
            self._dlog('History recording stopped.')


    def recordEvent(self, event=''):
        """ Record a time-stamped event string.
        This always works regardless of recording status.

        Args:
            event (str): event string to log
        """
        ev = {'time': (perf_counter() - self._t0) * 1000.0,
              'message': str(event)}
        self._events.append(ev)


    def recordRow(self, step, **values):
        """ Record one history row

        Args:
            step (int): Training step or epoch, stored in the index column
            **values: Loss and metric columns, e.g. train_loss=0.1
        """
        row = {self.index: int(step), 'time': (perf_counter() - self._t0) * 1000.0}
        row.update(self._customvars.toDict())
        for key, val in values.items():
            row[key] = float(val) if val is not None else None
        self._rows.append(row)
        self._dlog('{:s} {:d}: {:s}'.format(self.index, int(step), ', '.join(
            ['{:s}={:s}'.format(k, str(v)) for k, v in sorted(values.items())])))


    def column(self, name):
        """ All recorded values of one column, skipping rows without it """
        return [r[name] for r in self._rows if r.get(name) is not None]


    def last(self, name, default=None):
        """ Most recent recorded value of a column """
        vals = self.column(name)
        if len(vals) == 0:
            return default
        return vals[-1]


    def summary(self, name):
        """ Number of values, first, last and mean of a column as dict """
        vals = self.column(name)
        if len(vals) == 0:
            return {'n': 0, 'first': None, 'last': None, 'mean': None}
        return {'n': len(vals), 'first': vals[0], 'last': vals[-1], 'mean': mean(vals)}


    def _exportFields(self):
        if self.fields is not None:
            return list(self.fields)
        fields = []
        for row in self._rows:
            for key in row.keys():
                if key not in fields and key != 'time':
                    fields.append(key)
        return fields


    def saveHistory(self, history_file=None, event_file=None, sep=',', meta_cols={}, clear=False):
        """ Save recorded rows and events to CSV files

        Args:
            history_file: Name of output file to write history rows to
            event_file: Name of output file to write events to
            sep (str): Field separator in output file
            meta_cols (dict): Dict of values to add to each row (e.g., run name)
            clear (bool): if True, clear history after saving
        """
        fields = self._exportFields() + list(meta_cols.keys())
        evfields = ['time', 'message'] + list(meta_cols.keys())

        if history_file is not None:
            with open(history_file, 'w') as of:
                writer = csv.DictWriter(of, delimiter=sep, lineterminator='\n',
                                        fieldnames=fields, extrasaction='ignore')
                writer.writeheader()
                for row in self._rows:
                    out = dict(row)
                    out.update(meta_cols)
                    writer.writerow(out)
            self._dlog('Saved {:d} history rows to file: {:s}'.format(len(self._rows), str(history_file)))

        if event_file is not None:
            with open(event_file, 'w') as ef:
                writer = csv.DictWriter(ef, delimiter=sep, lineterminator='\n', fieldnames=evfields)
                writer.writeheader()
                for event in self._events:
                    out = dict(event)
                    out.update(meta_cols)
                    writer.writerow(out)
            self._dlog('Saved {:d} events to file: {:s}'.format(len(self._events), str(event_file)))

        if history_file is None and event_file is None:
            self._dlog('Neither history_file nor event_file were specified. No data saved.')
        elif clear:
            self.clearHistory()


    def toDataFrame(self):
        """ History rows as pandas DataFrame, one row per recorded step """
        return pd.DataFrame(self._rows, columns=self._exportFields())


    def plotHistory(self, columns=None, file_name=None, logy=True, title=None):
        """ Plot loss curves over steps (log-scale by default)

        Args:
            columns (list): Columns to plot, default: all columns ending in 'loss'
            file_name (str): if given, save the figure there
            logy (bool): use a logarithmic y axis
            title (str): figure title

        Returns: matplotlib Figure
        """
        if not _HAS_PLOT_PKGS:
            raise RuntimeError('plotHistory() requires matplotlib to be installed.')
        if columns is None:
            columns = [f for f in self._exportFields() if f.endswith('loss')]

        fig = plt.figure()
        ax = fig.add_subplot(1, 1, 1)
        for col in columns:
            pts = [(r[self.index], r[col]) for r in self._rows if r.get(col) is not None]
            if len(pts) == 0:
                continue
            ax.plot([p[0] for p in pts], [p[1] for p in pts], '.-', linewidth=1, label=col)
        # negative losses (negative SSIM) cannot go on a log axis
        if logy and all([v > 0 for c in columns for v in self.column(c)]):
            ax.set_yscale('log')
        ax.set_xlabel(self.index.capitalize())
        ax.set_ylabel('Loss')
        if title is not None:
            ax.set_title(title)
        ax.legend()
        if file_name is not None:
            fig.savefig(file_name)
            self._dlog('Saved history plot: {:s}'.format(str(file_name)))
        return fig


    def clearHistory(self, rows=True, events=True):
        """ Stop recording and clear rows and/or events

        Args:
            rows (bool): if True, clear history rows
            events (bool): if True, clear event data
        """
        self.recording = False
        dtypes = []
        if rows:
            self._rows = []
            dtypes.append('rows')
        if events:
            self._events = []
            dtypes.append('events')
        self._dlog('Cleared history data ({:s})'.format(str(dtypes)))
