"""
Experiment runner for battery capacity prediction.

    python main.py run experiment.cfg          train and evaluate every method on every cell
    python main.py synth --cycles 168 --output cell.csv
    python main.py table results/              methods x cells table (CSV and Excel)

Exit codes: 0 success, 1 usage/config/data error, 2 training failure.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import util
from config import OUTPUT_DIR_ENV, ConfigError, load_config
from dataio import (DataFormatError, SplitError, build_dataset, generate_synthetic_cell, generate_synthetic_raw,
                    parse_cell_csv, write_cell_csv)
from gp import CholeskyError, TrainingAbortedError, save_dgp
from lstm import extract_features, save_lstm
from pipeline import relative_improvement, run_method
from visualize import write_feature_html, write_prediction_svg

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_TRAINING = 2


def setup_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else (logging.WARNING if quiet else logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def load_cells(config):
    """
    Datasets named in the config, in config order.

    Returns:
        list: (cell_id, CellDataset) pairs.
    """
    cells = []
    if config.synthetic is not None:
        spec = config.synthetic
        for seed in spec.seeds:
            cell_id = spec.cell_id(seed)
            cells.append((cell_id, generate_synthetic_cell(
                seed, spec.cycles, spec.theta, spec.residual_amplitude, spec.noise_std,
                n_train=config.n_train_for(cell_id, spec.cycles), cell_id=cell_id, samples=spec.samples)))
        return cells

    for path in config.cell_files:
        cell_id = os.path.splitext(os.path.basename(path))[0]
        raw_cycles = parse_cell_csv(path)
        cells.append((cell_id, build_dataset(cell_id, raw_cycles, config.n_train_for(cell_id, len(raw_cycles)))))
    return cells


def _write_model_artifacts(report, dataset, cell_dir):
    model = report.model
    tag = f"{report.method}_seed{report.seed}"
    save_lstm(model.extractor, os.path.join(cell_dir, f"{tag}_lstm.ckpt"))
    save_dgp(model.dgp, os.path.join(cell_dir, f"{tag}_dgp.ckpt"))

    features = extract_features(model.extractor, [model.normalization.normalize(p) for p in dataset.profiles])
    util.write_features(dataset.cycle_indices, features, os.path.join(cell_dir, f"features_seed{report.seed}.csv"))
    write_feature_html(os.path.join(cell_dir, f"features_seed{report.seed}.html"), dataset.cell_id,
                       dataset.cycle_indices, features, dataset.n_train)


def run_cell(cell_id, dataset, config, output_dir):
    """
    Evaluate every configured method and seed on one cell and write its artifacts.

    Returns:
        list: EvalReport objects without the trained models.
    """
    cell_dir = os.path.join(output_dir, cell_id)
    os.makedirs(cell_dir, exist_ok=True)

    reports = []
    for seed in config.seeds:
        train_config = config.train.with_seed(seed)
        for method in config.methods:
            report = run_method(method, dataset, train_config)
            util.write_report(report, os.path.join(cell_dir, f"report_{method}_seed{seed}.csv"))
            if report.model is not None and method == _feature_method(config.methods):
                _write_model_artifacts(report, dataset, cell_dir)
            report.model = None
            reports.append(report)
            print(f"✓ {cell_id} {method} seed {seed}: MSE {report.mse:.5f}, R2 {report.r2:.5f}, "
                  f"coverage {report.coverage2sigma:.3f}")

    first_seed = [report for report in reports if report.seed == config.seeds[0]]
    series = {report.method: (report.cycle_indices, report.pred_means,
                              [p.lower2s for p in report.predictions], [p.upper2s for p in report.predictions])
              for report in first_seed}
    boundary = 0.5 * (dataset.cycle_indices[dataset.n_train - 1] + dataset.cycle_indices[dataset.n_train])
    write_prediction_svg(os.path.join(cell_dir, 'prediction.svg'), cell_id, dataset.cycle_indices,
                         dataset.capacities, boundary, series)
    util.write_summary(reports, os.path.join(cell_dir, 'summary.csv'))
    return reports


def _feature_method(methods):
    # checkpoints and feature exports come from the first SDG-L variant in the run
    for method in ('sdgl', 'sdgl_no_emf', 'sdgl_linear_mean'):
        if method in methods:
            return method
    return None


def cmd_run(args):
    config = load_config(args.config)
    if args.parallel:
        config.parallel = True
    output_dir = config.resolved_output_dir()
    os.makedirs(output_dir, exist_ok=True)

    cells = load_cells(config)
    print(f"✓ Loaded {len(cells)} cell(s); methods: {', '.join(config.methods)}; seeds: {config.seeds}")

    if config.parallel and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(len(cells), os.cpu_count() or 1)) as pool:
            futures = [pool.submit(run_cell, cell_id, dataset, config, output_dir) for cell_id, dataset in cells]
            results = [future.result() for future in futures]
    else:
        results = [run_cell(cell_id, dataset, config, output_dir) for cell_id, dataset in cells]

    reports = [report for cell_reports in results for report in cell_reports]
    util.write_summary(reports, os.path.join(output_dir, 'summary.csv'))

    if 'sdgl' in config.methods and len(config.methods) > 1:
        for method, gain in relative_improvement(reports).items():
            print(f"  SDG-L average MSE is {100.0 * gain:.1f}% lower than {method}")
    print(f"✓ Results written to {output_dir}")
    return EXIT_OK


def cmd_synth(args):
    theta = (args.theta1, args.theta2, args.theta3)
    raw_cycles = generate_synthetic_raw(args.seed, args.cycles, theta, args.residual_amplitude,
                                        args.noise_std, samples=args.samples_per_cycle)
    directory = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(directory, exist_ok=True)
    write_cell_csv(raw_cycles, args.output)
    print(f"✓ Wrote {len(raw_cycles)} cycles to {args.output}")
    return EXIT_OK


def cmd_table(args):
    if not os.path.isdir(args.report_dir):
        print(f"✗ Not a directory: {args.report_dir}")
        return EXIT_USAGE
    summaries = util.read_summaries(args.report_dir)
    if summaries.empty:
        print(f"✗ No summary CSV files under {args.report_dir}")
        return EXIT_USAGE

    table = util.results_table(summaries)
    flat = table.copy()
    flat.columns = [f"{cell} {metric.upper()}" for cell, metric in table.columns]
    flat.index.name = 'method'
    csv_path = os.path.join(args.report_dir, 'table.csv')
    flat.to_csv(csv_path, lineterminator='\n', float_format=util.FLOAT_FORMAT)
    util.write_table_to_excel(table, os.path.join(args.report_dir, 'table.xlsx'))

    print(flat.to_string(float_format=lambda value: f"{value:.5f}"))
    print(f"✓ Table written to {csv_path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        description="Battery capacity prediction with an explicit mean function, LSTM features and a deep GP",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
USAGE EXAMPLES:

  Generate a synthetic cell:
    python main.py synth --cycles 168 --seed 7 --output data/SYN0007.csv

  Run an experiment:
    python main.py run experiment.cfg

  Build the results table:
    python main.py table results/

The output directory of 'run' can be overridden with {OUTPUT_DIR_ENV}.
        """
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="Only warnings and errors")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Train and evaluate the configured methods")
    run.add_argument("config", help="Path to the key-value experiment config")
    run.add_argument("--parallel", action="store_true", help="Run cells in separate processes")
    run.set_defaults(handler=cmd_run)

    synth = commands.add_parser("synth", help="Write a synthetic cell CSV")
    synth.add_argument("--cycles", type=int, default=168, help="Number of cycles (default: 168)")
    synth.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    synth.add_argument("--theta1", type=float, default=2.0, help="Asymptotic capacity in Ah (default: 2.0)")
    synth.add_argument("--theta2", type=float, default=-0.15, help="Exponential amplitude in Ah (default: -0.15)")
    synth.add_argument("--theta3", type=float, default=0.012, help="Exponential rate per cycle (default: 0.012)")
    synth.add_argument("--residual-amplitude", type=float, default=0.02,
                       help="Amplitude of the periodic residual in Ah (default: 0.02)")
    synth.add_argument("--noise-std", type=float, default=0.01, help="Capacity noise in Ah (default: 0.01)")
    synth.add_argument("--samples-per-cycle", type=int, default=200,
                       help="Samples per discharge series (default: 200)")
    synth.add_argument("--output", required=True, help="Output CSV path")
    synth.set_defaults(handler=cmd_synth)

    table = commands.add_parser("table", help="Merge summary CSVs into a methods x cells table")
    table.add_argument("report_dir", help="Directory searched for summary*.csv files")
    table.set_defaults(handler=cmd_table)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except (TrainingAbortedError, CholeskyError) as e:
        print(f"✗ Training failed: {e}")
        return EXIT_TRAINING
    except (ConfigError, DataFormatError, SplitError) as e:
        print(f"✗ {e}")
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"✗ {type(e).__name__}: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
