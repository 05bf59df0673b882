"""Table ingestion, splits, preprocessing, batching, corruption and synthetic suites."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
FEATURE = "feature"
LABEL = "label"

REGRESSION = "regression"
BINARY = "binary"
MULTICLASS = "multiclass"
TASK_TYPES = (REGRESSION, BINARY, MULTICLASS)

# reserved category indices for feature columns
MISSING_INDEX = 0
UNKNOWN_INDEX = 1
N_RESERVED = 2

MISSING_TOKENS = frozenset({"", "?", "na", "nan", "null", "none"})


class DataError(ValueError):
    """Malformed table, schema or split."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    role: str = FEATURE
    # observed values; feature index = N_RESERVED + position, label class = position
    categories: tuple[str, ...] = ()

    @property
    def category_count(self) -> int:
        if self.kind != CATEGORICAL:
            return 0
        return len(self.categories) + (N_RESERVED if self.role == FEATURE else 0)

    def index_map(self) -> dict[str, int]:
        offset = N_RESERVED if self.role == FEATURE else 0
        return {v: i + offset for i, v in enumerate(self.categories)}


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass
class PreprocessStats:
    """Training-split statistics; nothing here may depend on val/test rows."""

    num_mean: np.ndarray
    num_std: np.ndarray
    label_mean: float = 0.0
    label_std: float = 1.0
    # empirical marginals: preprocessed training values, one column per feature
    num_pool: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    cat_pool: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    # per categorical column: boolean mask over its indices seen in training
    cat_seen: tuple[np.ndarray, ...] = ()


@dataclass
class TableDataset:
    """Columnar table: numerical columns hold floats (NaN = missing), categorical
    columns hold integer codes (feature: 0 missing, 1 unknown, 2.. values;
    label: class index)."""

    name: str
    schema: list[ColumnSchema]
    columns: dict[str, np.ndarray]
    task_type: str
    split: Split | None = None
    preprocess: PreprocessStats | None = None

    def __post_init__(self) -> None:
        labels = [c for c in self.schema if c.role == LABEL]
        if len(labels) != 1:
            raise DataError(f"{self.name}: expected exactly one label column, found {len(labels)}")
        if self.task_type not in TASK_TYPES:
            raise DataError(f"unknown task type {self.task_type!r}")
        label = labels[0]
        if self.task_type == REGRESSION and label.kind != NUMERICAL:
            raise DataError(f"{self.name}: regression needs a numerical label")
        if self.task_type != REGRESSION and label.kind != CATEGORICAL:
            raise DataError(f"{self.name}: classification needs a categorical label")
        if self.task_type == BINARY and len(label.categories) != 2:
            raise DataError(f"{self.name}: binary task with {len(label.categories)} classes")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values())))

    @property
    def label(self) -> ColumnSchema:
        return next(c for c in self.schema if c.role == LABEL)

    @property
    def numerical(self) -> list[ColumnSchema]:
        return [c for c in self.schema if c.role == FEATURE and c.kind == NUMERICAL]

    @property
    def categorical(self) -> list[ColumnSchema]:
        return [c for c in self.schema if c.role == FEATURE and c.kind == CATEGORICAL]

    @property
    def n_features(self) -> int:
        return len(self.numerical) + len(self.categorical)

    @property
    def n_classes(self) -> int:
        return 0 if self.task_type == REGRESSION else len(self.label.categories)

    def with_split(self, split: Split) -> "TableDataset":
        return replace(self, split=split, preprocess=None)

    def subset_train(self, fraction: float, seed: int) -> "TableDataset":
        """Keep a random ``fraction`` of the training rows (val/test untouched)."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"train fraction must be in (0, 1], got {fraction}")
        if self.split is None:
            raise DataError("dataset has no split")
        if fraction == 1.0:
            return self
        train = self.split.train
        keep = max(1, round_half_up(fraction * len(train)))
        rng = np.random.default_rng([seed, 0xC0FFEE])
        chosen = np.sort(rng.choice(train, size=keep, replace=False))
        return replace(self, split=Split(chosen, self.split.val, self.split.test), preprocess=None)


# ---------------------------------------------------------------------------
# CSV ingestion


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parses_as_float(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_schema_sidecar(path: str | Path) -> dict[str, dict]:
    """Read a JSON sidecar ``{"col": {"kind": ..., "role": ...}}``."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise DataError(f"{path}: schema sidecar must be a JSON object")
    for name, spec in raw.items():
        if spec.get("kind", NUMERICAL) not in (NUMERICAL, CATEGORICAL):
            raise DataError(f"{path}: column {name!r} has invalid kind {spec.get('kind')!r}")
        if spec.get("role", FEATURE) not in (FEATURE, LABEL):
            raise DataError(f"{path}: column {name!r} has invalid role {spec.get('role')!r}")
    return raw


def load_csv(
    path: str | Path,
    schema_override: dict[str, dict] | None = None,
    label: str | None = None,
    task_type: str | None = None,
    name: str | None = None,
) -> TableDataset:
    """Load a comma-separated table with a header row.

    Columns whose non-missing cells all parse as numbers are numerical, the rest
    categorical.  The label defaults to the last column unless ``label`` or the
    override names one.  Rows with a missing label are dropped.  Without an
    explicit override, a ``<name>.schema.json`` sidecar next to the file is used.
    """
    path = Path(path)
    sidecar = path.with_suffix(".schema.json")
    if schema_override is None and sidecar.exists():
        schema_override = load_schema_sidecar(sidecar)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        rows, linenos = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            rows.append(row)
            linenos.append(lineno)
    if not rows:
        raise DataError(f"{path}: table has no data rows")

    override = dict(schema_override or {})
    label_name = label
    for col, spec in override.items():
        if col not in header:
            raise DataError(f"{path}: schema override names unknown column {col!r}")
        if spec.get("role") == LABEL:
            if label_name is not None and label_name != col:
                raise DataError(f"{path}: conflicting label columns {label_name!r} and {col!r}")
            label_name = col
    if label_name is None:
        label_name = header[-1]
    if label_name not in header:
        raise DataError(f"{path}: label column {label_name!r} not in header")

    cells = {h: [r[i].strip() for r in rows] for i, h in enumerate(header)}
    label_missing = np.array([_is_missing(v) for v in cells[label_name]])
    if label_missing.all():
        raise DataError(f"{path}: label column {label_name!r} is entirely missing")
    if label_missing.any():
        logger.warning("%s: dropping %d rows with a missing label", path, int(label_missing.sum()))
        keep = ~label_missing
        cells = {h: [v for v, k in zip(vals, keep) if k] for h, vals in cells.items()}
        linenos = [n for n, k in zip(linenos, keep) if k]

    schema: list[ColumnSchema] = []
    columns: dict[str, np.ndarray] = {}
    for h in header:
        values = cells[h]
        role = LABEL if h == label_name else FEATURE
        present = [v for v in values if not _is_missing(v)]
        kind = override.get(h, {}).get("kind")
        if kind is None:
            kind = NUMERICAL if present and all(_parses_as_float(v) for v in present) else CATEGORICAL
        if role == LABEL and task_type is not None:
            kind = NUMERICAL if task_type == REGRESSION else CATEGORICAL
        if role == LABEL and kind == NUMERICAL and task_type is None:
            # numeric 2-valued labels are treated as binary classes
            if len(set(present)) == 2 and all(_parses_as_float(v) for v in present):
                kind = CATEGORICAL
        if kind == NUMERICAL:
            bad = next((i for i, v in enumerate(values) if not _is_missing(v) and not _parses_as_float(v)), None)
            if bad is not None:
                raise DataError(f"{path}: row {linenos[bad]}: column {h!r} is numerical but holds {values[bad]!r}")
            arr = np.array([np.nan if _is_missing(v) else float(v) for v in values])
            schema.append(ColumnSchema(h, NUMERICAL, role))
            columns[h] = arr
        else:
            cats = sorted(set(present), key=_category_sort_key)
            col = ColumnSchema(h, CATEGORICAL, role, tuple(cats))
            mapping = col.index_map()
            columns[h] = np.array([MISSING_INDEX if _is_missing(v) else mapping[v] for v in values], dtype=np.int64)
            schema.append(col)

    label_col = next(c for c in schema if c.role == LABEL)
    if task_type is None:
        if label_col.kind == NUMERICAL:
            task_type = REGRESSION
        else:
            task_type = BINARY if len(label_col.categories) == 2 else MULTICLASS
    return TableDataset(name or path.stem, schema, columns, task_type)


def _category_sort_key(value: str):
    try:
        return (0, float(value), value)
    except ValueError:
        return (1, 0.0, value)


def save_csv(ds: TableDataset, path: str | Path) -> None:
    """Write ``ds`` back out as CSV plus a ``.schema.json`` sidecar."""
    path = Path(path)
    header = [c.name for c in ds.schema]
    decoded = []
    for col in ds.schema:
        values = ds.columns[col.name]
        if col.kind == NUMERICAL:
            decoded.append(["" if np.isnan(v) else repr(float(v)) for v in values])
        else:
            offset = N_RESERVED if col.role == FEATURE else 0
            decoded.append(["" if (col.role == FEATURE and v == MISSING_INDEX) else col.categories[v - offset] for v in values])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(zip(*decoded))
    sidecar = {c.name: {"kind": c.kind, "role": c.role} for c in ds.schema}
    with open(path.with_suffix(".schema.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)


# ---------------------------------------------------------------------------
# splitting and preprocessing


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) counts: 10% test, then 1/8 of the rest for validation."""
    test = round_half_up(0.10 * n)
    val = round_half_up((n - test) / 8)
    return n - test - val, val, test


def split_dataset(ds: TableDataset, trial_seed: int) -> Split:
    n = ds.n_rows
    if n < 10:
        raise DataError(f"{ds.name}: need at least 10 rows to split, got {n}")
    n_train, n_val, n_test = split_sizes(n)
    perm = np.random.default_rng([trial_seed, 0x5EED]).permutation(n)
    return Split(
        train=np.sort(perm[n_test + n_val:]),
        val=np.sort(perm[n_test:n_test + n_val]),
        test=np.sort(perm[:n_test]),
    )


@dataclass
class EncodedTable:
    """Model-ready arrays for every row of a dataset."""

    x_num: np.ndarray  # (n, n_num) float64, standardized, no NaN
    x_cat: np.ndarray  # (n, n_cat) int64 column-local indices
    y: np.ndarray  # float64 standardized (regression) or int64 classes

    def rows(self, idx: np.ndarray) -> "EncodedTable":
        return EncodedTable(self.x_num[idx], self.x_cat[idx], self.y[idx])

    def __len__(self) -> int:
        return len(self.y)


def fit_preprocess(ds: TableDataset) -> PreprocessStats:
    """Fit standardization and marginal pools on the training split only."""
    if ds.split is None:
        raise DataError(f"{ds.name}: split the dataset before fitting preprocessing")
    train = ds.split.train
    if len(train) == 0:
        raise DataError(f"{ds.name}: empty training split")
    means, stds = [], []
    for col in ds.numerical:
        vals = ds.columns[col.name][train]
        present = vals[~np.isnan(vals)]
        mean = float(present.mean()) if present.size else 0.0
        std = float(present.std()) if present.size else 1.0
        means.append(mean)
        stds.append(max(std, 1e-8))
    stats = PreprocessStats(num_mean=np.array(means, dtype=np.float64), num_std=np.array(stds, dtype=np.float64))
    if ds.task_type == REGRESSION:
        y = ds.columns[ds.label.name][train]
        stats.label_mean = float(y.mean())
        stats.label_std = max(float(y.std()), 1e-8)
    stats.cat_seen = tuple(
        np.bincount(ds.columns[c.name][train], minlength=c.category_count) > 0 for c in ds.categorical
    )
    encoded = apply_preprocess(ds, stats, train)
    stats.num_pool = encoded.x_num
    stats.cat_pool = encoded.x_cat
    return stats


def apply_preprocess(ds: TableDataset, stats: PreprocessStats, rows: np.ndarray | None = None) -> EncodedTable:
    """Standardize numericals, fill missing with the train mean, map unseen categories to UNKNOWN."""
    idx = np.arange(ds.n_rows) if rows is None else np.asarray(rows)
    if len(stats.num_mean) != len(ds.numerical) or len(stats.cat_seen) != len(ds.categorical):
        raise DataError(f"{ds.name}: preprocessing stats do not match the table's columns")
    x_num = np.zeros((len(idx), len(ds.numerical)), dtype=np.float64)
    for j, col in enumerate(ds.numerical):
        vals = (ds.columns[col.name][idx] - stats.num_mean[j]) / stats.num_std[j]
        x_num[:, j] = np.where(np.isnan(vals), 0.0, vals)
    x_cat = np.zeros((len(idx), len(ds.categorical)), dtype=np.int64)
    for j, col in enumerate(ds.categorical):
        codes = ds.columns[col.name][idx]
        seen = stats.cat_seen[j]
        known = seen[codes] | (codes == MISSING_INDEX)
        x_cat[:, j] = np.where(known, codes, UNKNOWN_INDEX)
    y = ds.columns[ds.label.name][idx]
    if ds.task_type == REGRESSION:
        y = (y - stats.label_mean) / stats.label_std
    return EncodedTable(x_num, x_cat, y)


def destandardize_labels(values: np.ndarray, stats: PreprocessStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.label_std + stats.label_mean


def prepare(ds: TableDataset, trial_seed: int) -> tuple[TableDataset, EncodedTable]:
    """Split, fit preprocessing on train and encode every row."""
    ds = ds.with_split(split_dataset(ds, trial_seed))
    return attach_preprocess(ds)


def attach_preprocess(ds: TableDataset) -> tuple[TableDataset, EncodedTable]:
    stats = fit_preprocess(ds)
    ds = replace(ds, preprocess=stats)
    return ds, apply_preprocess(ds, stats)


# ---------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class CorruptionConfig:
    ratio: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"corruption ratio must be in [0, 1], got {self.ratio}")


def corrupt_batch(
    x_num: np.ndarray,
    x_cat: np.ndarray,
    config: CorruptionConfig,
    stats: PreprocessStats,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Resample ``round(ratio * c)`` distinct columns per row from their train marginals.

    Returns ``(x_num_tilde, x_cat_tilde, mask)`` where ``mask`` is (B, c) in token
    order (numerical columns first, then categorical).
    """
    if not 0.0 <= config.ratio <= 1.0:
        raise ValueError(f"corruption ratio must be in [0, 1], got {config.ratio}")
    batch, n_num = x_num.shape
    n_cat = x_cat.shape[1]
    c = n_num + n_cat
    k = round_half_up(config.ratio * c)
    mask = np.zeros((batch, c), dtype=bool)
    if k == 0 or batch == 0:
        return x_num.copy(), x_cat.copy(), mask
    chosen = np.argsort(rng.random((batch, c)), axis=1)[:, :k]
    np.put_along_axis(mask, chosen, True, axis=1)
    n_pool = len(stats.num_pool) if n_num else len(stats.cat_pool)
    draws = rng.integers(0, n_pool, size=(batch, c))
    x_num_t = x_num.copy()
    x_cat_t = x_cat.copy()
    if n_num:
        resampled = stats.num_pool[draws[:, :n_num], np.arange(n_num)]
        x_num_t = np.where(mask[:, :n_num], resampled, x_num)
    if n_cat:
        resampled = stats.cat_pool[draws[:, n_num:], np.arange(n_cat)]
        x_cat_t = np.where(mask[:, n_num:], resampled, x_cat)
    return x_num_t, x_cat_t, mask


# ---------------------------------------------------------------------------
# batching


def iterate_batches(
    indices: np.ndarray, batch_size: int = 128, shuffle: bool = True, seed: int = 0, epoch: int = 0
) -> list[np.ndarray]:
    """One epoch of row-index batches; the order depends on ``(seed, epoch)`` only."""
    indices = np.asarray(indices)
    if len(indices) == 0:
        raise DataError("cannot batch an empty split")
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if shuffle:
        indices = indices[np.random.default_rng([seed, epoch]).permutation(len(indices))]
    return [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]


def batch_iterator(
    ds: TableDataset, split: str = "train", batch_size: int = 128, shuffle: bool = True, seed: int = 0, epoch: int = 0
) -> list[np.ndarray]:
    if ds.split is None:
        raise DataError(f"{ds.name}: dataset has no split")
    return iterate_batches(ds.split[split], batch_size, shuffle, seed, epoch)


def batch_stream(indices: np.ndarray, batch_size: int = 128, seed: int = 0) -> Iterator[np.ndarray]:
    """Endless shuffled batches, recycling epochs."""
    epoch = 0
    while True:
        yield from iterate_batches(indices, batch_size, True, seed, epoch)
        epoch += 1


# ---------------------------------------------------------------------------
# synthetic multi-table suites


def generate_synthetic_suite(
    n_tables: int,
    rows: int | tuple[int, int] = 1000,
    cols: int | tuple[int, int] = (4, 12),
    latent_dim: int = 4,
    seed: int = 0,
    categorical_fraction: float = 0.25,
    task_types: Sequence[str] = (BINARY, REGRESSION, MULTICLASS),
    noise: float = 0.3,
) -> list[TableDataset]:
    """Tables drawn from one latent linear-factor model.

    Every row has latent factors ``z ~ N(0, I)``.  Each table observes a random
    number of columns, each a random linear mix of ``z`` plus noise; a share of
    the columns is quantile-binned into categories.  Labels come from a label
    direction shared by all tables (perturbed per table).  With
    ``latent_dim == 0`` columns and labels are independent noise.
    """
    if n_tables <= 0:
        raise ValueError("n_tables must be positive")
    rng = np.random.default_rng([seed, 0x7AB])
    row_lo, row_hi = (rows, rows) if isinstance(rows, int) else rows
    col_lo, col_hi = (cols, cols) if isinstance(cols, int) else cols
    if min(row_lo, col_lo) <= 0 or row_hi < row_lo or col_hi < col_lo:
        raise ValueError("rows/cols must be positive ranges")
    shared_direction = rng.normal(size=latent_dim)
    shared_direction /= max(np.linalg.norm(shared_direction), 1e-12)
    suite = []
    for t in range(n_tables):
        n = int(rng.integers(row_lo, row_hi + 1))
        c = int(rng.integers(col_lo, col_hi + 1))
        task = task_types[t % len(task_types)]
        if latent_dim > 0:
            z = rng.normal(size=(n, latent_dim))
            mix = rng.normal(size=(latent_dim, c)) / math.sqrt(latent_dim)
            x = z @ mix + noise * rng.normal(size=(n, c))
            direction = shared_direction + 0.3 * rng.normal(size=latent_dim) / math.sqrt(latent_dim)
            signal = z @ direction
            signal = signal / max(signal.std(), 1e-12)
        else:
            x = rng.normal(size=(n, c))
            signal = rng.normal(size=n)
        signal_noisy = signal + noise * rng.normal(size=n)
        scale = rng.uniform(0.5, 5.0, size=c)
        shift = rng.uniform(-3.0, 3.0, size=c)
        x = x * scale + shift

        schema: list[ColumnSchema] = []
        columns: dict[str, np.ndarray] = {}
        n_cat = int(round(categorical_fraction * c))
        cat_cols = set(rng.choice(c, size=n_cat, replace=False).tolist()) if n_cat else set()
        for j in range(c):
            name = f"f{j}"
            if j in cat_cols:
                n_bins = int(rng.integers(2, 7))
                edges = np.quantile(x[:, j], np.linspace(0, 1, n_bins + 1)[1:-1])
                bins = np.searchsorted(edges, x[:, j])
                labels = tuple(f"q{b}" for b in range(n_bins))
                schema.append(ColumnSchema(name, CATEGORICAL, FEATURE, labels))
                columns[name] = (bins + N_RESERVED).astype(np.int64)
            else:
                schema.append(ColumnSchema(name, NUMERICAL, FEATURE))
                columns[name] = x[:, j]
        if task == REGRESSION:
            schema.append(ColumnSchema("target", NUMERICAL, LABEL))
            columns["target"] = 10.0 * signal_noisy + 50.0
        elif task == BINARY:
            schema.append(ColumnSchema("target", CATEGORICAL, LABEL, ("0", "1")))
            columns["target"] = (signal_noisy > 0).astype(np.int64)
        else:
            edges = np.quantile(signal_noisy, [1 / 3, 2 / 3])
            schema.append(ColumnSchema("target", CATEGORICAL, LABEL, ("a", "b", "c")))
            columns["target"] = np.searchsorted(edges, signal_noisy).astype(np.int64)
        suite.append(TableDataset(f"synthetic_{t:03d}", schema, columns, task))
    return suite
