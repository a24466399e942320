"""
End-to-end tests for the command-line runner: synth, run and table.
"""

import io
import os
import tempfile
from contextlib import redirect_stdout

import numpy as np
import pandas as pd
import pytest

import main
from config import OUTPUT_DIR_ENV
from dataio import synthetic_capacity

SMALL_RUN = """
synthetic.cycles = 40
synthetic.seeds = 0
epochs = 2
lstm_hidden = 4
mc_samples = 5
gp_steps = 20
log_every = 0
methods = sdgl, gpr_white
output_dir = {output_dir}
"""


def run_cli(argv):
    """Call main() and return (exit code, printed text)."""
    buffer = io.StringIO()
    with redirect_stdout(buffer):
        code = main.main(['--quiet'] + argv)
    return code, buffer.getvalue()


def write_run_config(directory, output_dir, extra=''):
    path = os.path.join(directory, 'experiment.cfg')
    with open(path, 'w') as f:
        f.write(SMALL_RUN.format(output_dir=output_dir) + extra)
    return path


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def test_synth_writes_every_cycle():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'cells', 'SYN0007.csv')
        code, output = run_cli(['synth', '--cycles', '168', '--seed', '7', '--output', path])
        assert code == 0
        assert '168 cycles' in output
        frame = pd.read_csv(path)
    assert list(frame.columns) == ['cycle', 'step', 'voltage', 'current', 'temperature', 'capacity']
    assert frame['cycle'].nunique() == 168
    assert frame.groupby('cycle').size().min() >= 100
    print("✓ synth writes 168 cycles")


def test_synth_is_deterministic():
    with tempfile.TemporaryDirectory() as tmpdir:
        first, second = os.path.join(tmpdir, 'a.csv'), os.path.join(tmpdir, 'b.csv')
        for path in (first, second):
            assert run_cli(['synth', '--cycles', '30', '--seed', '3', '--output', path])[0] == 0
        assert read_bytes(first) == read_bytes(second)


def test_synth_noiseless_capacities():
    theta = (1.9, -0.1, 0.015)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'clean.csv')
        code, _ = run_cli(['synth', '--cycles', '50', '--theta1', '1.9', '--theta2', '-0.1', '--theta3', '0.015',
                           '--noise-std', '0', '--residual-amplitude', '0', '--output', path])
        assert code == 0
        capacities = pd.read_csv(path).groupby('cycle')['capacity'].first()
    expected = synthetic_capacity(np.arange(1, 51), theta)
    np.testing.assert_allclose(capacities.to_numpy(), expected, rtol=1e-15)


def test_synth_rejects_bad_arguments():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'cell.csv')
        code, output = run_cli(['synth', '--cycles', '5', '--output', path])
        assert code == 1 and '✗' in output
        code, _ = run_cli(['synth', '--theta2', '0.1', '--theta3', '0.01', '--output', path])
        assert code == 1
        assert not os.path.exists(path)


def test_run_writes_all_artifacts():
    previous = os.environ.pop(OUTPUT_DIR_ENV, None)
    try:
        with tempfile.TemporaryDirectory() as tmpdir:
            first_dir, second_dir = os.path.join(tmpdir, 'first'), os.path.join(tmpdir, 'second')
            code, output = run_cli(['run', write_run_config(tmpdir, first_dir)])
            assert code == 0, output

            cell_dir = os.path.join(first_dir, 'SYN0000')
            expected = ['report_sdgl_seed0.csv', 'report_gpr_white_seed0.csv', 'sdgl_seed0_lstm.ckpt',
                        'sdgl_seed0_dgp.ckpt', 'features_seed0.csv', 'features_seed0.html', 'prediction.svg',
                        'summary.csv']
            for name in expected:
                path = os.path.join(cell_dir, name)
                assert os.path.exists(path), name
                assert os.path.getsize(path) > 0, name
            assert not os.path.exists(os.path.join(cell_dir, 'gpr_white_seed0_lstm.ckpt'))

            summary = pd.read_csv(os.path.join(first_dir, 'summary.csv'))
            assert sorted(summary['method']) == ['gpr_white', 'sdgl']
            assert np.all(np.isfinite(summary['mse']))
            report = pd.read_csv(os.path.join(cell_dir, 'report_sdgl_seed0.csv'))
            assert list(report['cycle']) == list(range(31, 41))

            assert run_cli(['run', write_run_config(tmpdir, second_dir)])[0] == 0
            assert read_bytes(os.path.join(first_dir, 'summary.csv')) == \
                read_bytes(os.path.join(second_dir, 'summary.csv'))
            assert read_bytes(os.path.join(cell_dir, 'report_sdgl_seed0.csv')) == \
                read_bytes(os.path.join(second_dir, 'SYN0000', 'report_sdgl_seed0.csv'))
    finally:
        if previous is not None:
            os.environ[OUTPUT_DIR_ENV] = previous
    print("✓ run writes reports, checkpoints, features and plots reproducibly")


def test_run_rejects_invalid_config():
    with tempfile.TemporaryDirectory() as tmpdir:
        out_dir = os.path.join(tmpdir, 'out')
        code, output = run_cli(['run', write_run_config(tmpdir, out_dir, extra='n_train = 40\n')])
        assert code == 1
        assert 'n_train' in output
        assert not os.path.exists(out_dir)

        code, output = run_cli(['run', os.path.join(tmpdir, 'missing.cfg')])
        assert code == 1 and '✗' in output


def test_table_averages_cells():
    rows = []
    for k, cell in enumerate(['B0005', 'B0006', 'B0007', 'B0018']):
        rows.append({'cell': cell, 'method': 'sdgl', 'seed': 0, 'mse': 0.001 * (k + 1), 'r2': 0.9, 'coverage': 1.0})
        rows.append({'cell': cell, 'method': 'gpr_white', 'seed': 0, 'mse': 0.01 * (k + 1), 'r2': 0.5 + 0.1 * k,
                     'coverage': 0.8})
    with tempfile.TemporaryDirectory() as tmpdir:
        pd.DataFrame(rows).to_csv(os.path.join(tmpdir, 'summary.csv'), index=False)
        code, output = run_cli(['table', tmpdir])
        assert code == 0, output
        table = pd.read_csv(os.path.join(tmpdir, 'table.csv'), index_col='method')
        assert os.path.exists(os.path.join(tmpdir, 'table.xlsx'))

    assert list(table.index) == ['gpr_white', 'sdgl']
    assert list(table.columns[:2]) == ['B0005 MSE', 'B0005 R2']
    assert list(table.columns[-2:]) == ['Avg. MSE', 'Avg. R2']
    cell_mse = table[[f'{cell} MSE' for cell in ['B0005', 'B0006', 'B0007', 'B0018']]]
    np.testing.assert_allclose(table['Avg. MSE'], cell_mse.mean(axis=1), rtol=1e-10)
    assert table.loc['sdgl', 'Avg. MSE'] == pytest.approx(0.0025)
    assert table.loc['gpr_white', 'Avg. R2'] == pytest.approx(0.65)
    print("✓ table averages over cells")


def test_table_without_summaries():
    with tempfile.TemporaryDirectory() as tmpdir:
        code, output = run_cli(['table', tmpdir])
        assert code == 1 and '✗' in output
        assert run_cli(['table', os.path.join(tmpdir, 'missing')])[0] == 1


if __name__ == "__main__":
    test_synth_writes_every_cycle()
    test_synth_is_deterministic()
    test_synth_noiseless_capacities()
    test_synth_rejects_bad_arguments()
    test_run_writes_all_artifacts()
    test_run_rejects_invalid_config()
    test_table_averages_cells()
    test_table_without_summaries()
    print("\n✓ All command-line tests passed")
