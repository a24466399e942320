import logging
from xml.sax.saxutils import escape

import numpy as np
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 800, 450
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 170, 40, 50
COLORS = ['#EF553B', '#4472C4', '#00CC96', '#AB63FA', '#FFA15A', '#19D3F3']
TICKS = 6


def _scale(values, lower, upper, start, end):
    span = (upper - lower) or 1.0
    return start + (np.asarray(values, dtype=np.float64) - lower) / span * (end - start)


def _points(xs, ys):
    return ' '.join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def prediction_svg(cell_id, cycle_indices, truths, boundary, series):
    """
    Capacity plot of one cell as SVG text.

    Args:
        cell_id (str): Title of the plot.
        cycle_indices (array): Cycle index of every cycle, train and test.
        truths (array): Measured capacity of every cycle.
        boundary (float): Cycle index of the train/test boundary (dashed line).
        series (dict): Method -> (test cycle indices, means, lower2s, upper2s).

    Returns:
        str: Self-contained SVG document.
    """
    cycle_indices = np.asarray(cycle_indices, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    values = [truths]
    for _, means, lower, upper in series.values():
        values.extend([np.asarray(means), np.asarray(lower), np.asarray(upper)])
    stacked = np.concatenate([np.ravel(v) for v in values])
    y_low, y_high = float(stacked.min()), float(stacked.max())
    pad = 0.05 * ((y_high - y_low) or 1.0)
    y_low, y_high = y_low - pad, y_high + pad
    x_low, x_high = float(cycle_indices.min()), float(cycle_indices.max())

    left, right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    top, bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM

    def to_x(x):
        return _scale(x, x_low, x_high, left, right)

    def to_y(y):
        return _scale(y, y_low, y_high, bottom, top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{(left + right) / 2:.2f}" y="24" text-anchor="middle" font-size="15">'
        f'{escape(cell_id)}</text>',
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="#444"/>',
    ]

    # axes
    for tick in np.linspace(x_low, x_high, TICKS):
        x = float(to_x(tick))
        parts.append(f'<line x1="{x:.2f}" y1="{bottom}" x2="{x:.2f}" y2="{bottom + 5}" stroke="#444"/>')
        parts.append(f'<text x="{x:.2f}" y="{bottom + 18}" text-anchor="middle">{tick:.0f}</text>')
    for tick in np.linspace(y_low, y_high, TICKS):
        y = float(to_y(tick))
        parts.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#444"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{tick:.3f}</text>')
    parts.append(f'<text x="{(left + right) / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle">Cycle</text>')
    parts.append(f'<text x="18" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 18 {(top + bottom) / 2:.2f})">Capacity (Ah)</text>')

    # 2-sigma bands under the lines
    for k, (method, (indices, means, lower, upper)) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        xs = to_x(indices)
        outline = _points(np.concatenate([xs, xs[::-1]]),
                          np.concatenate([to_y(upper), to_y(np.asarray(lower))[::-1]]))
        parts.append(f'<polygon points="{outline}" fill="{color}" fill-opacity="0.2" stroke="none"/>')

    parts.append(f'<polyline points="{_points(to_x(cycle_indices), to_y(truths))}" '
                 f'fill="none" stroke="black" stroke-width="1.5"/>')
    for k, (method, (indices, means, _, _)) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        parts.append(f'<polyline points="{_points(to_x(indices), to_y(means))}" '
                     f'fill="none" stroke="{color}" stroke-width="1.5"/>')

    x = float(to_x(boundary))
    parts.append(f'<line x1="{x:.2f}" y1="{top}" x2="{x:.2f}" y2="{bottom}" '
                 f'stroke="#444" stroke-dasharray="6,4"/>')

    # legend
    entries = [('Measured', 'black')] + [(method, COLORS[k % len(COLORS)]) for k, method in enumerate(series)]
    for k, (label, color) in enumerate(entries):
        y = top + 12 + 20 * k
        parts.append(f'<line x1="{right + 15}" y1="{y}" x2="{right + 40}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{right + 46}" y="{y + 4}">{escape(label)}</text>')

    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def write_prediction_svg(path, cell_id, cycle_indices, truths, boundary, series):
    with open(path, 'w', newline='\n') as f:
        f.write(prediction_svg(cell_id, cycle_indices, truths, boundary, series))
    logger.info("Prediction plot saved to %s", path)


def feature_figure(cell_id, cycle_indices, features, n_train=None):
    """
    Interactive 3-D view of the extracted features against the cycle index.

    Returns:
        go.Figure
    """
    features = np.asarray(features, dtype=np.float64)
    cycle_indices = np.asarray(cycle_indices)
    split = len(cycle_indices) if n_train is None else n_train
    fig = go.Figure()
    for name, rows, color in (('train', slice(0, split), '#4472C4'), ('test', slice(split, None), '#EF553B')):
        if len(cycle_indices[rows]) == 0:
            continue
        fig.add_trace(go.Scatter3d(
            x=cycle_indices[rows], y=features[rows, 0],
            z=features[rows, 1] if features.shape[1] > 1 else np.zeros(len(cycle_indices[rows])),
            mode='markers+lines', name=name,
            marker=dict(size=3, color=color),
            line=dict(color=color, width=2),
        ))
    fig.update_layout(
        title=f'Extracted features of {cell_id}',
        scene=dict(xaxis_title='Cycle', yaxis_title='Feature 1', zaxis_title='Feature 2'),
        margin=dict(l=0, r=0, t=40, b=0),
    )
    return fig


def write_feature_html(path, cell_id, cycle_indices, features, n_train=None):
    fig = feature_figure(cell_id, cycle_indices, features, n_train)
    fig.write_html(path, include_plotlyjs='cdn')
    logger.info("Feature plot saved to %s", path)
