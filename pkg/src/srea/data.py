"""Dataset ingestion, normalization, splitting and synthetic generation.

Two synthetic sources stand in for data that cannot ship with the package:
a cylinder/bell/funnel generator for a separable three-class benchmark, and a
combined-heat-and-power (CHP) plant simulator producing total facility load,
ambient and water temperatures, and the machine's true electrical output.
The simulator's power channel is the labeling ground truth: sliding windows
over the sensor channels are labeled by the window's mean power, discretized
into k linearly spaced levels.
"""

from __future__ import annotations

import datetime as _dt
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .recordio import read_records, write_records

STD_FLOOR = 1e-8


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray  # [n, channels, length] float32
    labels: np.ndarray  # [n] int64 in [0, k)
    k: int
    name: str = "dataset"
    channel_names: tuple = ()
    clean_oracle: object = None
    flipped_mask: np.ndarray = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 3:
            raise DataFormatError(f"samples must be [n, channels, length], got shape {self.samples.shape}")
        if len(self.samples) != len(self.labels):
            raise DataFormatError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        present = set(np.unique(self.labels).tolist())
        missing = set(range(self.k)) - present
        if missing:
            warnings.warn(f"{self.name}: classes {sorted(missing)} have no samples")

    def __len__(self):
        return len(self.samples)

    @property
    def channels(self):
        return self.samples.shape[1]

    @property
    def length(self):
        return self.samples.shape[2]

    def with_labels(self, labels, clean_oracle=None, flipped_mask=None):
        return replace(self, labels=np.asarray(labels, dtype=np.int64),
                       clean_oracle=clean_oracle, flipped_mask=flipped_mask)


# -- loading -------------------------------------------------------------------


def _parse_tsv(path):
    labels, rows = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise DataFormatError(f"{path}:{ln}: expected label and series separated by tabs")
            try:
                labels.append(int(float(fields[0])))
                rows.append([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{ln}: non-numeric field ({exc})") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataFormatError(
                    f"{path}:{ln}: ragged row, {len(rows[-1])} values vs {len(rows[0])} in row 1"
                )
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.asarray(labels), np.asarray(rows, dtype=np.float32)


def load_tsv(paths, name=None):
    """Load a label+series TSV file; pass several paths for one file per channel.

    Raw label values are remapped to contiguous [0, k) in sorted order.
    """
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    paths = list(paths)
    per_channel = [_parse_tsv(p) for p in paths]
    labels0 = per_channel[0][0]
    for p, (labels, _) in zip(paths[1:], per_channel[1:]):
        if not np.array_equal(labels, labels0):
            raise DataFormatError(f"{p}: labels disagree with {paths[0]} (channel files must align)")
    series = np.stack([values for _, values in per_channel], axis=1)
    uniq = np.unique(labels0)
    remap = {v: i for i, v in enumerate(uniq.tolist())}
    labels = np.asarray([remap[v] for v in labels0.tolist()], dtype=np.int64)
    return Dataset(series, labels, k=len(uniq), name=name or str(paths[0]),
                   channel_names=tuple(f"ch{i}" for i in range(len(paths))))


# -- normalization and splitting --------------------------------------------------


def znormalize(train, *others):
    """Scale to zero mean, unit std per channel using training statistics.

    The identical affine transform is applied to any extra datasets (e.g. the
    test split). Constant channels are mapped to zero via a std floor.
    """
    mean = train.samples.mean(axis=(0, 2), keepdims=True)
    std = train.samples.std(axis=(0, 2), keepdims=True)
    std = np.maximum(std, STD_FLOOR)

    def apply(ds):
        return replace(ds, samples=((ds.samples - mean) / std).astype(np.float32))

    out = (apply(train),) + tuple(apply(ds) for ds in others)
    return out[0] if not others else out


def split(dataset, ratio=0.8, rng=None, gen=None):
    """Random stratified split into (train, test), disjoint and exhaustive."""
    if gen is None:
        from .tensor import Rng

        gen = (rng or Rng(0)).stream("split")
    train_idx, test_idx = [], []
    for cls in range(dataset.k):
        idx = np.flatnonzero(dataset.labels == cls)
        idx = gen.permutation(idx)
        n_train = int(len(idx) * ratio + 0.5)
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    train_idx = gen.permutation(np.asarray(train_idx, dtype=np.int64))
    test_idx = gen.permutation(np.asarray(test_idx, dtype=np.int64))

    def take(ids, suffix):
        oracle = dataset.clean_oracle
        if oracle is not None:
            from .noise import CleanLabelOracle

            oracle = CleanLabelOracle(oracle.reveal()[ids])
        mask = dataset.flipped_mask[ids] if dataset.flipped_mask is not None else None
        return replace(
            dataset,
            samples=dataset.samples[ids],
            labels=dataset.labels[ids],
            clean_oracle=oracle,
            flipped_mask=mask,
            name=f"{dataset.name}/{suffix}",
        )

    return take(train_idx, "train"), take(test_idx, "test")


# -- cylinder / bell / funnel -----------------------------------------------------


def generate_cbf(n, length=128, rng=None):
    """Three-class benchmark: plateau, rising ramp and falling ramp shapes.

    Each series is standard normal noise with a shape of height 6 (plus a
    sample-specific normal offset) active on a random interval [a, b], where
    a ~ U{16..32} and b - a ~ U{32..96}. Classes are balanced to within one.
    """
    from .tensor import Rng

    gen = (rng or Rng(0)).stream("cbf")
    samples = np.empty((n, 1, length), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    t = np.arange(length)
    # canonical onset/duration ranges are stated for length 128; shorter
    # series scale them down so the interval stays non-degenerate
    scale = length / 128.0
    a_lo, a_hi = max(1, int(16 * scale)), max(2, int(32 * scale))
    d_lo, d_hi = max(2, int(32 * scale)), max(3, int(96 * scale))
    for i in range(n):
        cls = i % 3
        a = int(gen.integers(a_lo, a_hi + 1))
        b = a + int(gen.integers(d_lo, d_hi + 1))
        b = min(b, length - 1)
        if b <= a:
            a = b - 1
        height = 6.0 + gen.normal()
        noise = gen.normal(size=length)
        active = ((t >= a) & (t <= b)).astype(np.float64)
        if cls == 0:
            shape = height * active
        elif cls == 1:
            shape = height * active * (t - a) / (b - a)
        else:
            shape = height * active * (b - t) / (b - a)
        samples[i, 0] = (shape + noise).astype(np.float32)
        labels[i] = cls
    return Dataset(samples, labels, k=3, name="cbf-like", channel_names=("series",))


# -- CHP plant simulator -----------------------------------------------------------


CHP_CHANNELS = ("P_tot", "T_amb", "T_water", "P_CHP")
SUMMER_CUTOFF_C = 16.0  # machine stays off on days whose mean ambient exceeds this


@dataclass
class RawSeries:
    """Minute-resolution multichannel recording plus the true power channel."""

    channels: dict
    p_max: float
    start: _dt.datetime = field(default_factory=lambda: _dt.datetime(2019, 9, 1))
    step_minutes: int = 1

    def timestamps(self):
        step = _dt.timedelta(minutes=self.step_minutes)
        n = len(next(iter(self.channels.values())))
        return [self.start + i * step for i in range(n)]


def generate_chp_like(days, rng=None, p_max=100.0):
    """Simulate a CHP plant: total load, temperatures and true power output.

    Ambient temperature carries daily and multi-day seasonality; on warm days
    (mean above SUMMER_CUTOFF_C) the machine stays off. On active days it
    cycles through off/on blocks of 4 to 8 hours, mostly near rated power
    with occasional part load, with ~30-minute ramps in between. Water
    temperature follows the machine state with first-order lag, and the total
    facility draw is a daily-periodic baseload minus the generated power.
    """
    from .tensor import Rng

    gen = (rng or Rng(0)).stream("chp")
    n = days * 24 * 60
    minute = np.arange(n)
    day_frac = (minute % 1440) / 1440.0

    season = 10.0 - 9.0 * np.cos(2 * np.pi * minute / (1440.0 * max(days, 1)))
    daily_amb = 4.0 * np.sin(2 * np.pi * (day_frac - 0.3))
    t_amb = season + daily_amb + 0.3 * gen.normal(size=n)

    day_means = season.reshape(days, 1440).mean(axis=1)
    active_day = day_means <= SUMMER_CUTOFF_C

    p_chp = np.zeros(n, dtype=np.float64)
    ramp = 30  # minutes
    pos = 0
    on = False
    level = 0.0
    while pos < n:
        block = int(gen.integers(4 * 60, 8 * 60 + 1))
        end = min(pos + block, n)
        if on:
            day_idx = slice(pos // 1440, min(end // 1440 + 1, days))
            if active_day[day_idx].any():
                if gen.random() < 0.7:
                    level = p_max * gen.uniform(0.92, 1.0)
                else:
                    level = p_max * gen.uniform(0.35, 0.85)
                seg = np.full(end - pos, level)
                r = min(ramp, len(seg))
                seg[:r] *= np.linspace(0.0, 1.0, r, endpoint=False) + 1.0 / r
                seg[len(seg) - r :] *= np.linspace(1.0, 1.0 / r, r)
                p_chp[pos:end] = seg
        pos = end
        on = not on
    # enforce the summer rule exactly, whole days at a time
    for d in range(days):
        if not active_day[d]:
            p_chp[d * 1440 : (d + 1) * 1440] = 0.0
    p_chp = np.clip(p_chp, 0.0, p_max)

    t_water = np.empty(n)
    t_water[0] = 40.0
    target = 40.0 + 45.0 * (p_chp / p_max)
    decay = 1.0 / 180.0  # ~3 h time constant
    rise = 1.0 / 45.0  # faster when producing
    for i in range(1, n):
        rate = rise if p_chp[i] > 0 else decay
        t_water[i] = t_water[i - 1] + rate * (target[i] - t_water[i - 1])
    t_water = t_water + 0.3 * gen.normal(size=n)

    baseload = 3.0 * p_max + 0.5 * p_max * np.sin(2 * np.pi * (day_frac - 0.35))
    p_tot = baseload - p_chp + 0.04 * p_max * gen.normal(size=n)

    return RawSeries(
        channels={
            "P_tot": p_tot.astype(np.float32),
            "T_amb": t_amb.astype(np.float32),
            "T_water": t_water.astype(np.float32),
            "P_CHP": p_chp.astype(np.float32),
        },
        p_max=p_max,
    )


# -- windowing ---------------------------------------------------------------------


@dataclass
class WindowingConfig:
    window_len: int = 36
    stride: int = 1
    resample_factor: int = 10
    levels: int = 5
    p_max: float = 100.0

    def __post_init__(self):
        if self.window_len < 1 or self.stride < 1 or self.levels < 2:
            raise ValueError("window_len and stride must be >= 1, levels >= 2")


def _block_mean(x, factor):
    usable = (len(x) // factor) * factor
    return x[:usable].reshape(-1, factor).mean(axis=1)


def windowize(series, cfg, power_channel="P_CHP",
              input_channels=("P_tot", "T_water", "T_amb")):
    """Resample by block mean, slide windows, and label by mean power level.

    The label is floor(levels * mean_power / p_max), clamped to the top level,
    computed from the designated power channel; the sample tensor holds only
    the input channels.
    """
    resampled = {name: _block_mean(np.asarray(series.channels[name], dtype=np.float64), cfg.resample_factor)
                 for name in series.channels}
    length = len(next(iter(resampled.values())))
    if length < cfg.window_len:
        raise DataFormatError(
            f"series has {length} resampled points, shorter than one window of {cfg.window_len}"
        )
    n = (length - cfg.window_len) // cfg.stride + 1
    starts = np.arange(n) * cfg.stride
    samples = np.empty((n, len(input_channels), cfg.window_len), dtype=np.float32)
    for c, name in enumerate(input_channels):
        ch = resampled[name]
        for i, s in enumerate(starts):
            samples[i, c] = ch[s : s + cfg.window_len]
    power = resampled[power_channel]
    win_mean = np.array([power[s : s + cfg.window_len].mean() for s in starts])
    labels = np.floor(cfg.levels * win_mean / cfg.p_max).astype(np.int64)
    labels = np.clip(labels, 0, cfg.levels - 1)
    return Dataset(samples, labels, k=cfg.levels, name="chp-like",
                   channel_names=tuple(input_channels))


# -- raw series CSV + dataset cache --------------------------------------------------


def save_series_csv(series, path):
    names = list(series.channels)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp," + ",".join(names) + "\n")
        stamps = series.timestamps()
        cols = [series.channels[n] for n in names]
        for i, ts in enumerate(stamps):
            fh.write(ts.isoformat() + "," + ",".join(repr(float(c[i])) for c in cols) + "\n")


def load_series_csv(path, p_max=100.0):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "timestamp":
            raise DataFormatError(f"{path}: first column must be 'timestamp'")
        names = header[1:]
        stamps, rows = [], []
        for ln, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != len(names) + 1:
                raise DataFormatError(f"{path}:{ln}: expected {len(names) + 1} columns, got {len(fields)}")
            stamps.append(_dt.datetime.fromisoformat(fields[0]))
            rows.append([float(v) for v in fields[1:]])
    data = np.asarray(rows, dtype=np.float32)
    step = int((stamps[1] - stamps[0]).total_seconds() // 60) if len(stamps) > 1 else 1
    return RawSeries(
        channels={name: data[:, i] for i, name in enumerate(names)},
        p_max=p_max,
        start=stamps[0],
        step_minutes=step,
    )


def save_dataset(dataset, path):
    """Serialize to the binary record cache (clean oracle included if present)."""
    records = {
        "samples": dataset.samples,
        "labels": dataset.labels.astype(np.float32),
        "k": np.array([dataset.k], dtype=np.float32),
    }
    if dataset.clean_oracle is not None:
        records["clean_labels"] = dataset.clean_oracle.reveal().astype(np.float32)
    if dataset.flipped_mask is not None:
        records["flipped_mask"] = dataset.flipped_mask.astype(np.float32)
    write_records(path, records)


def load_dataset(path, name=None):
    from .noise import CleanLabelOracle

    records = read_records(path)
    oracle = None
    mask = None
    if "clean_labels" in records:
        oracle = CleanLabelOracle(records["clean_labels"].astype(np.int64))
    if "flipped_mask" in records:
        mask = records["flipped_mask"].astype(bool)
    return Dataset(
        records["samples"],
        records["labels"].astype(np.int64),
        k=int(records["k"][0]),
        name=name or str(path),
        clean_oracle=oracle,
        flipped_mask=mask,
    )
