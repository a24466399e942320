"""
Training and experiment configuration.

Experiments are described in a flat text file, one `key = value` per line:

    # cells come from CSV files or from the synthetic generator
    cells = data/B0005.csv, data/B0006.csv
    n_train = 125
    n_train.B0018 = 110
    methods = sdgl, gpr_white, dgpr_index, lstm_only, sdgl_no_emf
    seeds = 0, 1, 2
    epochs = 200
    output_dir = results

Synthetic cells use the `synthetic.*` keys instead of `cells`. Relative paths
are resolved against the directory of the config file.
"""

import os
from dataclasses import dataclass, field, fields

OUTPUT_DIR_ENV = 'SDGL_OUTPUT_DIR'

METHODS = ('sdgl', 'gpr_white', 'dgpr_index', 'lstm_only', 'sdgl_no_emf', 'sdgl_linear_mean')
READOUTS = ('last', 'mean')


class ConfigError(ValueError):
    """Raised for unknown keys and invalid values; the message names the key."""


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.1
    mc_samples: int = 100
    train_samples: int = 1
    hidden_width: int = 2
    lstm_hidden: int = 64
    feature_dim: int = 2
    readout: str = 'last'
    gp_steps: int = 200
    seed: int = 0
    scale_capacity: bool = False
    log_every: int = 20

    def __post_init__(self):
        _check(self.epochs >= 0, 'epochs', "must be >= 0")
        _check(self.learning_rate > 0, 'learning_rate', "must be > 0")
        _check(self.mc_samples >= 1, 'mc_samples', "must be >= 1")
        _check(self.train_samples >= 1, 'train_samples', "must be >= 1")
        _check(self.hidden_width >= 1, 'hidden_width', "must be >= 1")
        _check(self.lstm_hidden >= 1, 'lstm_hidden', "must be >= 1")
        _check(self.feature_dim >= 1, 'feature_dim', "must be >= 1")
        _check(self.readout in READOUTS, 'readout', f"must be one of {', '.join(READOUTS)}")
        _check(self.gp_steps >= 0, 'gp_steps', "must be >= 0")
        _check(self.log_every >= 0, 'log_every', "must be >= 0")

    def with_seed(self, seed):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values['seed'] = seed
        return TrainConfig(**values)


@dataclass
class SyntheticSpec:
    """Generator settings for synthetic cells, one cell per data seed."""
    cycles: int = 168
    theta: tuple = (2.0, -0.15, 0.012)
    residual_amplitude: float = 0.02
    noise_std: float = 0.01
    seeds: list = field(default_factory=lambda: [0])
    samples: int = 200

    def __post_init__(self):
        _check(self.cycles >= 20, 'synthetic.cycles', "must be >= 20")
        _check(len(self.theta) == 3, 'synthetic.theta', "needs three values")
        _check(self.theta[1] < 0 or self.theta[2] < 0, 'synthetic.theta', "must produce a declining trend")
        _check(self.residual_amplitude >= 0, 'synthetic.residual_amplitude', "must be >= 0")
        _check(self.noise_std >= 0, 'synthetic.noise_std', "must be >= 0")
        _check(len(self.seeds) >= 1, 'synthetic.seeds', "needs at least one seed")
        _check(self.samples >= 100, 'synthetic.samples', "must be >= 100")

    def cell_id(self, seed):
        return f"SYN{seed:04d}"


@dataclass
class ExperimentConfig:
    cell_files: list = field(default_factory=list)
    synthetic: SyntheticSpec = None
    n_train: int = None
    n_train_overrides: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: list(METHODS[:5]))
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = 'results'
    parallel: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        _check(bool(self.cell_files) != (self.synthetic is not None), 'cells',
               "give either cell files or synthetic.* settings, not both or neither")
        unknown = [method for method in self.methods if method not in METHODS]
        _check(not unknown, 'methods', f"unknown method(s) {', '.join(unknown)}; choose from {', '.join(METHODS)}")
        _check(len(self.methods) >= 1, 'methods', "needs at least one method")
        _check(len(self.seeds) >= 1, 'seeds', "needs at least one seed")
        sizes = [('n_train', self.n_train)]
        sizes += [(f'n_train.{cell}', value) for cell, value in self.n_train_overrides.items()]
        for key, value in sizes:
            if value is None:
                continue
            _check(value >= 10, key, "must be >= 10")
            if self.synthetic is not None:
                _check(value < self.synthetic.cycles, key,
                       f"must be smaller than the number of cycles ({self.synthetic.cycles})")

    def n_train_for(self, cell_id, n_cycles):
        """Training size of one cell; three quarters of the cycles when unset."""
        n_train = self.n_train_overrides.get(cell_id, self.n_train)
        return (3 * n_cycles) // 4 if n_train is None else n_train

    def resolved_output_dir(self):
        return os.environ.get(OUTPUT_DIR_ENV) or self.output_dir


def _check(condition, key, message):
    if not condition:
        raise ConfigError(f"{key}: {message}")


def _parse_int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got '{text}'") from None


def _parse_float(key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got '{text}'") from None


def _parse_bool(key, text):
    lowered = text.lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(f"{key}: expected true or false, got '{text}'")


def _parse_list(text):
    return [item.strip() for item in text.split(',') if item.strip()]


_TRAIN_PARSERS = {
    'epochs': _parse_int,
    'learning_rate': _parse_float,
    'mc_samples': _parse_int,
    'train_samples': _parse_int,
    'hidden_width': _parse_int,
    'lstm_hidden': _parse_int,
    'feature_dim': _parse_int,
    'readout': lambda key, text: text,
    'gp_steps': _parse_int,
    'seed': _parse_int,
    'scale_capacity': _parse_bool,
    'log_every': _parse_int,
}

_SYNTHETIC_PARSERS = {
    'cycles': _parse_int,
    'theta': lambda key, text: tuple(_parse_float(key, item) for item in _parse_list(text)),
    'residual_amplitude': _parse_float,
    'noise_std': _parse_float,
    'seeds': lambda key, text: [_parse_int(key, item) for item in _parse_list(text)],
    'samples': _parse_int,
}


def read_key_values(path):
    """
    Read `key = value` lines.

    Returns:
        dict: Keys in file order; a repeated key raises ConfigError.
    """
    entries = {}
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            content = line.split('#', 1)[0].strip()
            if not content:
                continue
            if '=' not in content:
                raise ConfigError(f"line {line_number}: expected 'key = value', got '{content}'")
            key, value = (part.strip() for part in content.split('=', 1))
            if not key:
                raise ConfigError(f"line {line_number}: empty key")
            if key in entries:
                raise ConfigError(f"{key}: given twice (line {line_number})")
            entries[key] = value
    return entries


def load_config(path):
    """
    Parse an experiment config file.

    Args:
        path (str): Path to the key-value config.

    Returns:
        ExperimentConfig
    """
    entries = read_key_values(path)
    base_dir = os.path.dirname(os.path.abspath(path))

    train_values, synthetic_values = {}, {}
    experiment = {}
    for key, text in entries.items():
        if key in _TRAIN_PARSERS:
            train_values[key] = _TRAIN_PARSERS[key](key, text)
        elif key.startswith('synthetic.') and key[len('synthetic.'):] in _SYNTHETIC_PARSERS:
            name = key[len('synthetic.'):]
            synthetic_values[name] = _SYNTHETIC_PARSERS[name](key, text)
        elif key == 'cells':
            experiment['cell_files'] = [item if os.path.isabs(item) else os.path.join(base_dir, item)
                                        for item in _parse_list(text)]
        elif key == 'n_train':
            experiment['n_train'] = _parse_int(key, text)
        elif key.startswith('n_train.') and len(key) > len('n_train.'):
            experiment.setdefault('n_train_overrides', {})[key[len('n_train.'):]] = _parse_int(key, text)
        elif key == 'methods':
            experiment['methods'] = _parse_list(text)
        elif key == 'seeds':
            experiment['seeds'] = [_parse_int(key, item) for item in _parse_list(text)]
        elif key == 'output_dir':
            experiment['output_dir'] = text if os.path.isabs(text) else os.path.join(base_dir, text)
        elif key == 'parallel':
            experiment['parallel'] = _parse_bool(key, text)
        else:
            raise ConfigError(f"{key}: unknown key")

    train = TrainConfig(**train_values)
    if synthetic_values:
        experiment['synthetic'] = SyntheticSpec(**synthetic_values)
    if 'seeds' not in experiment:
        experiment['seeds'] = [train.seed]
    return ExperimentConfig(train=train, **experiment)
