"""
Cell datasets: CSV schema, per-cycle profile resampling, normalization,
chronological train/test splitting and a synthetic cell generator.

CSV schema (one file per cell, UTF-8, LF line endings):

    cycle,step,voltage,current,temperature,capacity

Rows are sorted by (cycle, step); `capacity` is the discharge capacity of the
cycle in Ah, repeated on every row of that cycle. Each cycle holds the
discharge interval only, at least 100 samples long.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['cycle', 'step', 'voltage', 'current', 'temperature', 'capacity']
CHANNELS = ('voltage', 'current', 'temperature')
PROFILE_STEPS = 20
PROFILE_STRIDE = 5
MIN_SERIES_LENGTH = PROFILE_STEPS * PROFILE_STRIDE
RESIDUAL_PERIOD = 40.0


class DataFormatError(ValueError):
    """Raised when a cell file violates the CSV schema."""

    def __init__(self, message, line=None, cycle=None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if cycle is not None:
            location.append(f"cycle {cycle}")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(prefix + message)
        self.line = line
        self.cycle = cycle


class SplitError(ValueError):
    """Raised when a train size does not leave a non-empty test window."""


@dataclass
class RawCycle:
    """One discharge interval as recorded by the battery management system."""
    cycle_index: int
    voltage: np.ndarray
    current: np.ndarray
    temperature: np.ndarray
    capacity: float

    def __post_init__(self):
        lengths = {len(self.voltage), len(self.current), len(self.temperature)}
        if len(lengths) != 1:
            raise DataFormatError("voltage, current and temperature series differ in length",
                                  cycle=self.cycle_index)
        if lengths.pop() < MIN_SERIES_LENGTH:
            raise DataFormatError(f"series shorter than {MIN_SERIES_LENGTH} samples", cycle=self.cycle_index)
        if not self.capacity > 0:
            raise DataFormatError("capacity must be positive", cycle=self.cycle_index)

    @property
    def length(self):
        return len(self.voltage)


@dataclass
class CycleProfile:
    """20 x 3 matrix of (voltage, current, temperature) samples for one cycle."""
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (PROFILE_STEPS, len(CHANNELS)):
            raise ValueError(f"profile must be {PROFILE_STEPS}x{len(CHANNELS)}, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("profile entries must be finite")


@dataclass
class NormalizationStats:
    """Per-channel z-score statistics fitted on training profiles."""
    mean: np.ndarray
    std: np.ndarray
    capacity_scale: float = 1.0

    def normalize(self, profile):
        return CycleProfile((profile.matrix - self.mean) / self.std)


@dataclass
class CellDataset:
    """Chronologically ordered cycles of one cell with a train/test boundary."""
    cell_id: str
    cycle_indices: np.ndarray
    profiles: list
    capacities: np.ndarray
    n_train: int

    def __post_init__(self):
        self.cycle_indices = np.asarray(self.cycle_indices, dtype=np.int64)
        self.capacities = np.asarray(self.capacities, dtype=np.float64)
        if len(self.profiles) != len(self.cycle_indices) or len(self.capacities) != len(self.cycle_indices):
            raise ValueError("cycle indices, profiles and capacities differ in length")
        if np.any(np.diff(self.cycle_indices) <= 0):
            raise ValueError("cycle indices must be strictly increasing")
        if not 0 < self.n_train < len(self.cycle_indices):
            raise SplitError(f"n_train must lie in (0, {len(self.cycle_indices)}), got {self.n_train}")

    @property
    def n_total(self):
        return len(self.cycle_indices)

    @property
    def n_test(self):
        return self.n_total - self.n_train

    @property
    def cycles(self):
        return list(zip(self.profiles, self.capacities))


@dataclass
class DatasetView:
    """A contiguous, read-only window of a CellDataset."""
    cell_id: str
    cycle_indices: np.ndarray
    profiles: list = field(repr=False)
    capacities: np.ndarray

    def __len__(self):
        return len(self.cycle_indices)


def _check_columns(frame):
    missing = [column for column in CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise DataFormatError(f"missing column(s): {', '.join(missing)}", line=1)


def parse_cell_csv(path):
    """
    Read a cell file into discharge cycles.

    Args:
        path (str): Path to a CSV file in the cell schema.

    Returns:
        list: RawCycle objects in file order.
    """
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise DataFormatError("file is empty", line=1) from None
    _check_columns(frame)

    for column in CSV_COLUMNS:
        values = pd.to_numeric(frame[column], errors='coerce')
        bad = np.flatnonzero(values.isna().to_numpy())
        if bad.size:
            raise DataFormatError(f"non-numeric value in column '{column}'", line=int(bad[0]) + 2)
        frame[column] = values

    cycles = frame['cycle'].to_numpy()
    backwards = np.flatnonzero(np.diff(cycles) < 0)
    if backwards.size:
        row = int(backwards[0]) + 1
        raise DataFormatError("cycle indices are not monotone", line=row + 2, cycle=int(cycles[row]))

    raw_cycles = []
    # line numbers are 1-based and the header takes line 1
    for cycle_index, group in frame.groupby('cycle', sort=False):
        first_line = int(group.index[0]) + 2
        if cycle_index != int(cycle_index) or cycle_index < 1:
            raise DataFormatError("cycle index must be a positive integer", line=first_line)
        if len(group) < MIN_SERIES_LENGTH:
            raise DataFormatError(f"series has {len(group)} samples, at least {MIN_SERIES_LENGTH} required",
                                  line=first_line, cycle=int(cycle_index))
        raw_cycles.append(RawCycle(
            cycle_index=int(cycle_index),
            voltage=group['voltage'].to_numpy(dtype=np.float64),
            current=group['current'].to_numpy(dtype=np.float64),
            temperature=group['temperature'].to_numpy(dtype=np.float64),
            capacity=float(group['capacity'].iloc[0]),
        ))

    logger.info("Parsed %d cycles from %s", len(raw_cycles), path)
    return raw_cycles


def write_cell_csv(raw_cycles, path):
    """Write cycles in the cell schema."""
    frames = []
    for raw in raw_cycles:
        frames.append(pd.DataFrame({
            'cycle': raw.cycle_index,
            'step': np.arange(raw.length),
            'voltage': raw.voltage,
            'current': raw.current,
            'temperature': raw.temperature,
            'capacity': raw.capacity,
        }))
    frame = pd.concat(frames, ignore_index=True)
    frame.to_csv(path, index=False, lineterminator='\n', float_format='%.17g')
    logger.info("Wrote %d cycles to %s", len(raw_cycles), path)


def resample_profile(raw):
    """
    Take one sample every five points, starting at index 0, until twenty
    points per channel are collected.

    Returns:
        CycleProfile: Un-normalized 20 x 3 profile.
    """
    if raw.length < MIN_SERIES_LENGTH:
        raise DataFormatError(f"series shorter than {MIN_SERIES_LENGTH} samples", cycle=raw.cycle_index)
    positions = np.arange(PROFILE_STEPS) * PROFILE_STRIDE
    return CycleProfile(np.column_stack([
        np.asarray(raw.voltage, dtype=np.float64)[positions],
        np.asarray(raw.current, dtype=np.float64)[positions],
        np.asarray(raw.temperature, dtype=np.float64)[positions],
    ]))


def fit_normalization(train_profiles, capacities=None, scale_capacity=False):
    """
    Fit per-channel z-score statistics on training profiles only.

    Args:
        train_profiles (list): CycleProfile objects of the train view.
        capacities (array): Training capacities, needed when scale_capacity is set.
        scale_capacity (bool): Divide capacities by the first training capacity.

    Returns:
        NormalizationStats: Channel means and deviations (clamped to 1 when zero).
    """
    if len(train_profiles) < 2:
        raise ValueError("at least 2 training cycles are required to fit normalization")
    stacked = np.vstack([profile.matrix for profile in train_profiles])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    scale = 1.0
    if scale_capacity:
        if capacities is None or len(capacities) == 0:
            raise ValueError("capacity scaling needs the training capacities")
        scale = float(capacities[0])
    return NormalizationStats(mean=mean, std=std, capacity_scale=scale)


def build_dataset(cell_id, raw_cycles, n_train):
    """Resample raw cycles and assemble a CellDataset."""
    return CellDataset(
        cell_id=cell_id,
        cycle_indices=[raw.cycle_index for raw in raw_cycles],
        profiles=[resample_profile(raw) for raw in raw_cycles],
        capacities=[raw.capacity for raw in raw_cycles],
        n_train=n_train,
    )


def make_split(dataset, n_train):
    """
    Split chronologically: the first n_train cycles train, the rest test.

    Returns:
        tuple: (train DatasetView, test DatasetView)
    """
    if not 0 < n_train < dataset.n_total:
        raise SplitError(f"n_train must lie in (0, {dataset.n_total}), got {n_train}")
    train = DatasetView(dataset.cell_id, dataset.cycle_indices[:n_train],
                        dataset.profiles[:n_train], dataset.capacities[:n_train])
    test = DatasetView(dataset.cell_id, dataset.cycle_indices[n_train:],
                       dataset.profiles[n_train:], dataset.capacities[n_train:])
    return train, test


def synthetic_capacity(cycle_index, theta, residual_amplitude=0.0):
    """Noise-free synthetic capacity: exponential trend plus a periodic residual."""
    theta1, theta2, theta3 = theta
    i = np.asarray(cycle_index, dtype=np.float64)
    return theta1 + theta2 * np.exp(theta3 * i) + residual_amplitude * np.sin(2.0 * np.pi * i / RESIDUAL_PERIOD)


def _synthetic_series(trend_capacity, nominal_capacity, samples, rng):
    # discharge ends sooner as the capacity trend fades, so shapes drift monotonically
    fade = np.clip(trend_capacity / nominal_capacity, 0.2, 2.0)
    t = np.linspace(0.0, 1.0, samples) / fade
    voltage = 4.2 - 0.55 * t - 0.35 * t ** 4
    current = -2.0 + 0.02 * np.sin(6.0 * t)
    temperature = 24.0 + 9.0 * t ** 2
    jitter = rng.normal(0.0, 1e-4, size=(3, samples))
    return voltage + jitter[0], current + jitter[1], temperature + jitter[2]


def generate_synthetic_raw(seed, n_cycles, theta, residual_amplitude=0.0, noise_std=0.0, samples=200):
    """
    Generate raw discharge cycles i = 1..n_cycles of a synthetic cell.

    The profile curves follow the exponential trend only, so their shape
    parameters drift monotonically with the cycle index.

    Returns:
        list: RawCycle objects whose capacities follow synthetic_capacity plus
        Gaussian noise of standard deviation noise_std.
    """
    theta1, theta2, theta3 = theta
    if not (theta3 < 0 or theta2 < 0):
        raise ValueError("theta must produce a declining trend (theta2 < 0 or theta3 < 0)")
    if n_cycles < 20:
        raise ValueError(f"n_cycles must be at least 20, got {n_cycles}")
    if samples < MIN_SERIES_LENGTH:
        raise ValueError(f"samples must be at least {MIN_SERIES_LENGTH}, got {samples}")

    rng = np.random.default_rng(seed)
    indices = np.arange(1, n_cycles + 1)
    trend = synthetic_capacity(indices, theta)
    noise = rng.normal(0.0, noise_std, size=n_cycles) if noise_std > 0 else np.zeros(n_cycles)
    capacities = synthetic_capacity(indices, theta, residual_amplitude) + noise
    nominal = float(trend[0])

    raw_cycles = []
    for i, capacity, level in zip(indices, capacities, trend):
        voltage, current, temperature = _synthetic_series(level, nominal, samples, rng)
        raw_cycles.append(RawCycle(int(i), voltage, current, temperature, float(capacity)))
    return raw_cycles


def generate_synthetic_cell(seed, n_cycles, theta, residual_amplitude=0.0, noise_std=0.0,
                            n_train=None, cell_id=None, samples=200):
    """
    Synthetic CellDataset for oracle tests.

    Args:
        seed (int): Seed of the generator; equal seeds give identical datasets.
        n_cycles (int): Number of cycles (at least 20).
        theta (tuple): Exponential trend parameters (theta1, theta2, theta3).
        residual_amplitude (float): Amplitude in Ah of the periodic residual.
        noise_std (float): Standard deviation in Ah of the capacity noise.
        n_train (int): Train size; defaults to three quarters of the cycles.

    Returns:
        CellDataset
    """
    raw_cycles = generate_synthetic_raw(seed, n_cycles, theta, residual_amplitude, noise_std, samples)
    if n_train is None:
        n_train = (3 * n_cycles) // 4
    return build_dataset(cell_id or f"SYN{seed:04d}", raw_cycles, n_train)
