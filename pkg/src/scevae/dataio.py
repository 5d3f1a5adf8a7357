"""CSV ingestion with causal role assignment, dataset export, and flat
key-value config files.

CSV contract: UTF-8, comma-separated, header row required, decimal point,
no thousands separators, one row per time step. Row order is never changed;
rows with missing values in any role column are dropped with a logged
count. Numeric output uses 17 significant digits so round-trips are exact
at double precision.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .scm_synth import ScmDataset

logger = logging.getLogger(__name__)

MISSING_TOKENS = {"", "na", "nan", "null", "none"}
PROXY_MODES = ("columns", "uniform_noise")

SCM_COLUMNS = ("t", "z", "x", "w", "y", "w_hat", "y_hat", "ite_true")


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class RoleMap:
    """Causal roles of CSV columns: one effect, one cause, proxy columns.

    ``proxy_mode='uniform_noise'`` replaces the proxy block with a seeded
    U(0,1) series of matching length.
    """

    effect: str
    cause: str
    proxies: list[str] = field(default_factory=list)
    proxy_mode: str = "columns"

    def __post_init__(self):
        if self.proxy_mode not in PROXY_MODES:
            raise DataError(f"proxy_mode must be one of {PROXY_MODES}")
        named = [self.effect, self.cause] + list(self.proxies)
        if len(set(named)) != len(named):
            raise DataError("role columns must be disjoint")
        if self.proxy_mode == "columns" and not self.proxies:
            raise DataError("at least one proxy column is required "
                            "(or use proxy_mode='uniform_noise')")

    def role_columns(self) -> list[str]:
        cols = [self.effect, self.cause]
        if self.proxy_mode == "columns":
            cols += list(self.proxies)
        return cols


@dataclass
class LoadedSeries:
    """Model-ready aligned arrays: proxies x (N, p), cause w, effect y."""

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    proxy_names: list[str]
    rows_in: int
    rows_dropped: int

    @property
    def n_steps(self) -> int:
        return len(self.w)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"x": self.x, "w": self.w, "y": self.y}


def read_csv_columns(path) -> dict[str, list[str]]:
    """Raw string columns keyed by header name, order preserved."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        columns: dict[str, list[str]] = {name: [] for name in header}
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {row_no} has {len(row)} fields, "
                    f"expected {len(header)}"
                )
            for name, cell in zip(header, row):
                columns[name].append(cell.strip())
    return columns


def _parse_cell(cell: str, path, name: str, row_no: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(
            f"{path}: non-numeric cell {cell!r} in column {name!r}, row {row_no}"
        ) from None


def load_csv(path, role_map: RoleMap, seed: int = 0,
             start: int = 0, length: int | None = None) -> LoadedSeries:
    """Ingest one CSV time series per role.

    Rows with a missing value in any role column are dropped (count logged);
    ``start``/``length`` slice the surviving rows. In ``uniform_noise`` mode
    the proxy block is a seeded U(0,1) column.
    """
    columns = read_csv_columns(path)
    for name in role_map.role_columns():
        if name not in columns:
            raise DataError(
                f"{path}: missing column {name!r} "
                f"(available: {', '.join(columns)})"
            )
    role_cols = role_map.role_columns()
    n_rows = len(columns[role_cols[0]])
    keep_rows = []
    for i in range(n_rows):
        if any(columns[c][i].lower() in MISSING_TOKENS for c in role_cols):
            continue
        keep_rows.append(i)
    dropped = n_rows - len(keep_rows)
    if dropped:
        logger.info("%s: dropped %d of %d rows with missing role values",
                    path, dropped, n_rows)
    if not keep_rows:
        raise DataError(f"{path}: no rows left after dropping missing values")

    def numeric(name: str) -> np.ndarray:
        return np.array(
            [_parse_cell(columns[name][i], path, name, i + 2) for i in keep_rows]
        )

    y = numeric(role_map.effect)
    w = numeric(role_map.cause)
    if role_map.proxy_mode == "uniform_noise":
        rng = np.random.default_rng(seed)
        x = rng.random((len(keep_rows), 1))
        proxy_names = ["uniform_noise"]
    else:
        x = np.column_stack([numeric(name) for name in role_map.proxies])
        proxy_names = list(role_map.proxies)
    stop = len(w) if length is None else start + length
    if start < 0 or stop > len(w) or start >= stop:
        raise DataError(
            f"slice [{start}:{stop}] out of range for {len(w)} usable rows"
        )
    return LoadedSeries(
        x=x[start:stop], w=w[start:stop], y=y[start:stop],
        proxy_names=proxy_names, rows_in=n_rows, rows_dropped=dropped,
    )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv_columns(path, columns: dict[str, np.ndarray]) -> None:
    """Write named numeric columns in the given order."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise DataError("columns have differing lengths")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(lengths.pop()):
            writer.writerow([
                str(int(a[i])) if np.issubdtype(a.dtype, np.integer) else _fmt(a[i])
                for a in arrays
            ])


def export_dataset(data, path) -> None:
    """Write a dataset as CSV. ScmDataset uses the documented column order
    ``t, z, x, w, y, w_hat, y_hat, ite_true``; a mapping is written as-is."""
    if isinstance(data, ScmDataset):
        columns = {
            "t": np.arange(data.n_steps),
            "z": data.z, "x": data.x, "w": data.w, "y": data.y,
            "w_hat": data.w_hat, "y_hat": data.y_hat, "ite_true": data.ite_true,
        }
    elif isinstance(data, dict):
        columns = data
    else:
        raise DataError(f"cannot export object of type {type(data).__name__}")
    write_csv_columns(path, columns)


def load_numeric_csv(path) -> dict[str, np.ndarray]:
    """All columns of a numeric CSV as float arrays."""
    columns = read_csv_columns(path)
    out = {}
    for name, cells in columns.items():
        out[name] = np.array(
            [_parse_cell(c, path, name, i + 2) for i, c in enumerate(cells)]
        )
    return out


def write_kv(path, kv: dict[str, str]) -> None:
    """Flat ``key = value`` config file."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in kv.items():
            fh.write(f"{key} = {value}\n")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {line_no} is not 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
