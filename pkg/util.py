import logging
import os

import numpy as np
import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = '# sdgl-checkpoint'
CHECKPOINT_VERSION = 1

REPORT_COLUMNS = ['cell', 'method', 'seed', 'cycle', 'truth', 'pred_mean', 'pred_var', 'lower2s', 'upper2s']
SUMMARY_COLUMNS = ['cell', 'method', 'seed', 'mse', 'r2', 'coverage']
FLOAT_FORMAT = '%.12g'


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or of the wrong kind."""


def save_tensors(path, kind, tensors, meta=None):
    """
    Write named tensors to a versioned text checkpoint.

    Layout:
        # sdgl-checkpoint 1
        kind <kind>
        meta <key> <value>          (zero or more)
        tensor <name> <ndim> <dims...>
        <one line per row, values written with repr so they round-trip exactly>
        end

    Args:
        path (str): Output file.
        kind (str): Checkpoint kind, checked on load ('lstm', 'dgp', ...).
        tensors (dict): Name -> numpy array (0, 1 or 2 dimensions).
        meta (dict): Extra scalar settings stored as text.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"kind {kind}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key} {value}")
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype=np.float64)
        if array.ndim > 2:
            raise CheckpointError(f"tensor '{name}' has {array.ndim} dimensions, at most 2 supported")
        lines.append(f"tensor {name} {array.ndim} {' '.join(str(d) for d in array.shape)}".rstrip())
        rows = array if array.ndim == 2 else array.reshape(1, -1)
        for row in rows:
            lines.append(' '.join(repr(float(v)) for v in row))
    lines.append('end')
    with open(path, 'w', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')
    logger.debug("Saved %d tensors to %s", len(tensors), path)


def load_tensors(path, kind):
    """
    Read a checkpoint written by save_tensors.

    Returns:
        tuple: (tensors dict, meta dict of strings)
    """
    with open(path, 'r') as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[-1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(lines) < 2 or lines[1] != f"kind {kind}":
        raise CheckpointError(f"{path}: expected a '{kind}' checkpoint, found '{lines[1] if len(lines) > 1 else ''}'")

    tensors, meta = {}, {}
    position = 2
    while position < len(lines):
        parts = lines[position].split()
        position += 1
        if not parts:
            continue
        if parts[0] == 'end':
            return tensors, meta
        if parts[0] == 'meta':
            meta[parts[1]] = ' '.join(parts[2:])
        elif parts[0] == 'tensor':
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(d) for d in parts[3:3 + ndim])
            row_count = shape[0] if ndim == 2 else 1
            rows = [[float(v) for v in lines[position + k].split()] for k in range(row_count)]
            position += row_count
            tensors[name] = np.array(rows, dtype=np.float64).reshape(shape)
        else:
            raise CheckpointError(f"{path}: line {position}: unexpected record '{parts[0]}'")
    raise CheckpointError(f"{path}: missing 'end' record")


def write_report(report, output_path):
    """
    Write the per-cycle predictions of an EvalReport.

    Args:
        report (EvalReport): Evaluated method on one cell.
        output_path (str): Path to the output CSV file.
    """
    frame = pd.DataFrame({
        'cell': report.cell_id,
        'method': report.method,
        'seed': report.seed,
        'cycle': np.asarray(report.cycle_indices, dtype=np.int64),
        'truth': report.truths,
        'pred_mean': [p.mean for p in report.predictions],
        'pred_var': [p.variance for p in report.predictions],
        'lower2s': [p.lower2s for p in report.predictions],
        'upper2s': [p.upper2s for p in report.predictions],
    }, columns=REPORT_COLUMNS)
    frame.to_csv(output_path, index=False, lineterminator='\n', float_format=FLOAT_FORMAT)


def write_summary(reports, output_path):
    """Write one summary row (mse, r2, coverage) per report."""
    frame = pd.DataFrame([{
        'cell': report.cell_id,
        'method': report.method,
        'seed': report.seed,
        'mse': report.mse,
        'r2': report.r2,
        'coverage': report.coverage2sigma,
    } for report in reports], columns=SUMMARY_COLUMNS)
    frame.to_csv(output_path, index=False, lineterminator='\n', float_format=FLOAT_FORMAT)
    logger.info("Summary of %d reports saved to %s", len(reports), output_path)


def write_features(cycle_indices, features, output_path):
    """Write the extracted features per cycle as columns cycle, f1, f2, ..."""
    features = np.asarray(features)
    frame = pd.DataFrame(features, columns=[f'f{k + 1}' for k in range(features.shape[1])])
    frame.insert(0, 'cycle', np.asarray(cycle_indices, dtype=np.int64))
    frame.to_csv(output_path, index=False, lineterminator='\n', float_format=FLOAT_FORMAT)


def read_summaries(report_dir):
    """Collect every summary*.csv under report_dir into one DataFrame."""
    paths = []
    for root, _, files in os.walk(report_dir):
        for name in files:
            if name.startswith('summary') and name.endswith('.csv'):
                paths.append(os.path.join(root, name))
    if not paths:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    frames = [pd.read_csv(path, dtype={'cell': str, 'method': str}) for path in sorted(paths)]
    merged = pd.concat(frames, ignore_index=True)
    missing = [column for column in SUMMARY_COLUMNS if column not in merged.columns]
    if missing:
        raise ValueError(f"summary files lack column(s): {', '.join(missing)}")
    return merged.drop_duplicates(subset=['cell', 'method', 'seed'], keep='last')


def results_table(summaries):
    """
    Methods x cells table of MSE and R2 with an Avg. column pair.

    Several seeds of one (method, cell) are averaged first; Avg. is the
    arithmetic mean over cells.

    Returns:
        pd.DataFrame: Index is the method; columns are (cell, metric) pairs.
    """
    per_cell = summaries.groupby(['method', 'cell'], sort=True)[['mse', 'r2']].mean()
    table = per_cell.unstack('cell')
    table = table.swaplevel(0, 1, axis=1)
    cells = sorted(summaries['cell'].unique())
    ordered = [(cell, metric) for cell in cells for metric in ('mse', 'r2')]
    table = table.reindex(columns=pd.MultiIndex.from_tuples(ordered))
    for metric in ('mse', 'r2'):
        table[('Avg.', metric)] = table.xs(metric, axis=1, level=1).mean(axis=1)
    return table


def write_table_to_excel(table, output_path):
    """
    Write the results table to a styled Excel sheet.

    Args:
        table (pd.DataFrame): Output of results_table.
        output_path (str): Path to the output .xlsx file.
    """
    wb = Workbook()
    ws = wb.active
    ws.title = "Results"

    header_fill = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
    header_font = Font(color="FFFFFF", bold=True, size=12)
    centered = Alignment(horizontal='center', vertical='center')

    # two header rows: cell names spanning (MSE, R2), then the metric names
    ws.cell(row=1, column=1, value='Method')
    ws.merge_cells(start_row=1, start_column=1, end_row=2, end_column=1)
    cells = list(dict.fromkeys(cell for cell, _ in table.columns))
    for k, cell_id in enumerate(cells):
        column = 2 + 2 * k
        ws.cell(row=1, column=column, value=cell_id)
        ws.merge_cells(start_row=1, start_column=column, end_row=1, end_column=column + 1)
        ws.cell(row=2, column=column, value='MSE')
        ws.cell(row=2, column=column + 1, value='R2')
    for row in ws.iter_rows(min_row=1, max_row=2):
        for cell in row:
            cell.fill = header_fill
            cell.font = header_font
            cell.alignment = centered

    for row_num, (method, values) in enumerate(table.iterrows(), start=3):
        ws.cell(row=row_num, column=1, value=method)
        for k, cell_id in enumerate(cells):
            ws.cell(row=row_num, column=2 + 2 * k, value=round(float(values[(cell_id, 'mse')]), 5))
            ws.cell(row=row_num, column=3 + 2 * k, value=round(float(values[(cell_id, 'r2')]), 5))

    # Auto-adjust column widths
    for column in ws.columns:
        max_length = 0
        column_letter = get_column_letter(column[0].column)
        for cell in column:
            if cell.value is not None:
                max_length = max(max_length, len(str(cell.value)))
        ws.column_dimensions[column_letter].width = min(max_length + 2, 50)

    wb.save(output_path)
    logger.info("Excel table saved to %s with %d methods", output_path, len(table))
