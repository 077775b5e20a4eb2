"""Dataset container and CSV round-trip.

Files carry a header ``x_1..x_P, y_1..y_Q``; missing responses are
empty cells and become False entries of the observation mask.
"""

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError


@dataclass
class Dataset:
    """Covariates, responses, and a per-entry observation mask."""

    x: np.ndarray  # (N, P)
    y: np.ndarray  # (N, Q); unobserved entries hold 0.0
    mask: np.ndarray = None  # (N, Q) bool, True = observed

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.shape[0] == 1 and self.x.shape[1] > 1 and self.y is not None:
            y = np.atleast_2d(np.asarray(self.y, dtype=float))
            if y.shape[0] != 1:
                self.x = self.x.T
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.y.shape[0] != self.x.shape[0] and self.y.shape[1] == self.x.shape[0]:
            self.y = self.y.T
        if self.y.shape[0] != self.x.shape[0]:
            raise ParameterError("covariates and responses disagree in length")
        if self.mask is None:
            self.mask = np.isfinite(self.y)
        else:
            self.mask = np.atleast_2d(np.asarray(self.mask, dtype=bool))
            if self.mask.shape != self.y.shape:
                raise ParameterError("mask shape must match responses")
        if not self.mask.any():
            raise ParameterError("at least one observed response is required")
        self.y = np.where(self.mask, np.nan_to_num(self.y), 0.0)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def n_covariates(self):
        return self.x.shape[1]

    @property
    def n_outputs(self):
        return self.y.shape[1]

    @property
    def fully_observed(self):
        return bool(self.mask.all())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            _write_csv(fh, self)

    def to_csv_string(self):
        buf = _io.StringIO()
        _write_csv(buf, self)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            return _read_csv(fh)


def _write_csv(fh, ds):
    writer = csv.writer(fh)
    p, q = ds.n_covariates, ds.n_outputs
    writer.writerow(
        [f"x_{j + 1}" for j in range(p)] + [f"y_{j + 1}" for j in range(q)]
    )
    for i in range(ds.n):
        row = [repr(float(v)) for v in ds.x[i]]
        row += [
            repr(float(ds.y[i, j])) if ds.mask[i, j] else "" for j in range(q)
        ]
        writer.writerow(row)


def _read_csv(fh):
    reader = csv.reader(fh)
    header = next(reader, None)
    if not header:
        raise ParameterError("empty data file")
    header = [h.strip() for h in header]
    p = sum(1 for h in header if h.startswith("x_"))
    q = sum(1 for h in header if h.startswith("y_"))
    if p == 0 or q == 0:
        raise ParameterError(
            "data header must contain x_1..x_P and y_1..y_Q columns"
        )
    xs, ys, mask = [], [], []
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != p + q:
            raise ParameterError(
                f"ragged data row: expected {p + q} cells, got {len(row)}"
            )
        xs.append([float(c) for c in row[:p]])
        obs = [c.strip() != "" for c in row[p:]]
        ys.append([float(c) if o else 0.0 for c, o in zip(row[p:], obs)])
        mask.append(obs)
    if not xs:
        raise ParameterError("data file holds no rows")
    return Dataset(np.asarray(xs), np.asarray(ys), np.asarray(mask, dtype=bool))
