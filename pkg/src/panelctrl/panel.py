"""Panel ingestion and the treated/control, pre/post block layout.

A panel is a complete N x T outcome matrix with a single treated unit and
a treatment time splitting the columns into T0 pre-treatment periods and
T - T0 post-treatment periods. Long-format CSV with header
``unit,time,outcome`` is the canonical input; extra columns are ignored
here (the covariate loader picks them up separately).
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateCellError,
    MissingCellError,
    PanelFormatError,
    TreatmentTimeError,
    UnknownUnitError,
)

__all__ = [
    "PanelData",
    "PanelBlocks",
    "load_panel",
    "split_and_center",
    "to_long_rows",
    "panel_manifest",
    "write_panel",
    "parse_time_label",
]


def parse_time_label(label):
    """Return a sort key for a period label: numeric when possible, else string.

    All labels in one panel must parse into the same domain so comparisons
    stay total.
    """
    if isinstance(label, (int, float)) and not isinstance(label, bool):
        return float(label)
    try:
        return float(str(label).strip())
    except ValueError:
        return str(label)


def _time_keys(labels):
    keys = [parse_time_label(v) for v in labels]
    kinds = {isinstance(k, str) for k in keys}
    if len(kinds) > 1:
        # mixed numeric / non-numeric labels: fall back to string ordering
        keys = [str(v) for v in labels]
    return keys


def _readonly(a):
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelData:
    """Wide outcome matrix with one treated unit and a treatment time.

    Attributes
    ----------
    outcomes : np.ndarray
        N x T matrix of outcomes, rows in ``unit_ids`` order, columns in
        ``time_ids`` order.
    unit_ids : tuple
        N opaque unit labels.
    time_ids : tuple
        T period labels, strictly increasing under their parsed ordering.
    treated_index : int
        Row index of the single treated unit.
    t0 : int
        Number of pre-treatment periods, 2 <= t0 < T.
    """

    outcomes: np.ndarray
    unit_ids: tuple
    time_ids: tuple
    treated_index: int
    t0: int

    def __post_init__(self):
        object.__setattr__(self, "outcomes", _readonly(self.outcomes))
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "time_ids", tuple(self.time_ids))
        n, t = self.outcomes.shape
        if len(self.unit_ids) != n:
            raise PanelFormatError("unit_ids length does not match outcome rows")
        if len(self.time_ids) != t:
            raise PanelFormatError("time_ids length does not match outcome columns")
        if len(set(self.unit_ids)) != n:
            raise PanelFormatError("unit_ids must be unique")
        if not 0 <= self.treated_index < n:
            raise PanelFormatError("treated_index out of range")
        if not 2 <= self.t0 < t:
            raise TreatmentTimeError(
                f"need 2 <= T0 < T, got T0={self.t0} with T={t}"
            )
        if np.isnan(self.outcomes).any():
            i, j = np.argwhere(np.isnan(self.outcomes))[0]
            raise MissingCellError(self.unit_ids[i], self.time_ids[j])
        keys = _time_keys(self.time_ids)
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise PanelFormatError("time_ids must be strictly increasing")

    @property
    def n_units(self):
        return self.outcomes.shape[0]

    @property
    def n_periods(self):
        return self.outcomes.shape[1]

    @property
    def n_donors(self):
        return self.n_units - 1

    @property
    def donor_indices(self):
        return [i for i in range(self.n_units) if i != self.treated_index]

    @property
    def donor_ids(self):
        return [self.unit_ids[i] for i in self.donor_indices]


@dataclass(frozen=True)
class PanelBlocks:
    """Treated/control pre/post blocks extracted from a panel.

    ``x1`` and ``x0`` hold pre-period outcomes (optionally shifted by the
    control column means recorded in ``centering``); the y blocks hold raw
    post-period outcomes and are never centered.
    """

    x1: np.ndarray
    x0: np.ndarray
    y0_post: np.ndarray
    y1_post: np.ndarray
    centering: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "x1", _readonly(self.x1))
        object.__setattr__(self, "x0", _readonly(self.x0))
        object.__setattr__(self, "y0_post", _readonly(self.y0_post))
        object.__setattr__(self, "y1_post", _readonly(self.y1_post))
        centering = self.centering
        if centering is None:
            centering = np.zeros(self.x1.shape[0])
        object.__setattr__(self, "centering", _readonly(centering))
        n0, t0 = self.x0.shape
        for name in ("x1", "x0", "y0_post", "y1_post"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise PanelFormatError(f"{name} contains non-finite values")
        if self.x1.shape != (t0,):
            raise PanelFormatError("x1 length must match x0 columns")
        if self.centering.shape != (t0,):
            raise PanelFormatError("centering length must match x0 columns")
        if self.y0_post.shape[0] != n0:
            raise PanelFormatError("y0_post rows must match x0 rows")
        if self.y1_post.shape != (self.y0_post.shape[1],):
            raise PanelFormatError("y1_post length must match y0_post columns")
        if np.any(self.centering != 0.0):
            worst = np.abs(self.x0.mean(axis=0)).max()
            if worst >= 1e-12:
                raise PanelFormatError(
                    f"centered x0 has column mean {worst:.3e} above 1e-12"
                )

    @property
    def n_donors(self):
        return self.x0.shape[0]

    @property
    def t0(self):
        return self.x0.shape[1]

    @property
    def n_post(self):
        return self.y0_post.shape[1]

    @property
    def is_centered(self):
        return bool(np.any(self.centering != 0.0))


def load_panel(source, treated_label, treatment_time):
    """Read a long-format stream into a validated :class:`PanelData`.

    Parameters
    ----------
    source : str | os.PathLike | file-like | iterable of dict
        CSV with header containing ``unit``, ``time``, ``outcome`` columns,
        or an iterable of mappings with those keys.
    treated_label
        Unit label of the treated unit.
    treatment_time
        First treated period; T0 counts the periods strictly before it.
    """
    rows = _read_rows(source)
    cells = {}
    units = []
    seen_units = set()
    times = set()
    for unit, time_label, raw in rows:
        if unit not in seen_units:
            seen_units.add(unit)
            units.append(unit)
        times.add(time_label)
        key = (unit, time_label)
        if key in cells:
            raise DuplicateCellError(
                f"duplicate observation for unit {unit!r} at time {time_label!r}"
            )
        if raw is None or str(raw).strip() == "" or str(raw).strip().lower() == "nan":
            raise MissingCellError(unit, time_label)
        try:
            cells[key] = float(raw)
        except ValueError as exc:
            raise PanelFormatError(
                f"non-numeric outcome {raw!r} for unit {unit!r} at time {time_label!r}"
            ) from exc

    if not units:
        raise PanelFormatError("empty input: no observations found")
    if treated_label not in seen_units:
        raise UnknownUnitError(f"treated unit {treated_label!r} not found in data")

    unsorted_labels = list(times)
    unsorted_keys = _time_keys(unsorted_labels)
    order = sorted(range(len(unsorted_labels)), key=lambda i: unsorted_keys[i])
    time_list = [unsorted_labels[i] for i in order]
    keys = [unsorted_keys[i] for i in order]
    n, t = len(units), len(time_list)
    outcomes = np.empty((n, t))
    for i, unit in enumerate(units):
        for j, time_label in enumerate(time_list):
            try:
                outcomes[i, j] = cells[(unit, time_label)]
            except KeyError:
                raise MissingCellError(unit, time_label) from None

    treat_key = parse_time_label(treatment_time)
    if isinstance(keys[0], str) != isinstance(treat_key, str):
        treat_key = str(treatment_time) if isinstance(keys[0], str) else treat_key
    t0 = sum(1 for k in keys if k < treat_key)
    if t0 == 0:
        raise TreatmentTimeError(
            f"treatment time {treatment_time!r} is at or before the first period"
        )
    if t0 >= t:
        raise TreatmentTimeError(
            f"treatment time {treatment_time!r} is after the last observed period"
        )
    if t0 < 2:
        raise TreatmentTimeError(
            f"treatment time {treatment_time!r} leaves only {t0} pre period(s); need at least 2"
        )

    return PanelData(
        outcomes=outcomes,
        unit_ids=tuple(units),
        time_ids=tuple(time_list),
        treated_index=units.index(treated_label),
        t0=t0,
    )


def _read_rows(source):
    """Yield (unit, time, outcome) triples from CSV or record iterables."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", newline="") as fh:
            yield from _read_rows(fh)
        return
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        reader = csv.reader(source)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError("empty input: no header row") from None
        cols = {name.strip().lower(): i for i, name in enumerate(header)}
        for required in ("unit", "time", "outcome"):
            if required not in cols:
                raise PanelFormatError(
                    f"input header must contain {required!r}; got {header}"
                )
        iu, it, iy = cols["unit"], cols["time"], cols["outcome"]
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            yield row[iu].strip(), row[it].strip(), row[iy]
        return
    for record in source:
        yield record["unit"], record["time"], record["outcome"]


def split_and_center(p, center=True):
    """Extract :class:`PanelBlocks`, optionally shifting the pre blocks by
    control column means.

    Centering is required by the ridge paths; the shift is recorded so the
    original scale can be reconstructed. Post-period outcomes are never
    centered.
    """
    donors = p.donor_indices
    x1 = p.outcomes[p.treated_index, : p.t0].copy()
    x0 = p.outcomes[donors, : p.t0].copy()
    y1_post = p.outcomes[p.treated_index, p.t0 :].copy()
    y0_post = p.outcomes[donors, p.t0 :].copy()
    if center:
        shift = x0.mean(axis=0)
        x0 = x0 - shift
        x1 = x1 - shift
        # kill residual round-off so downstream mean checks are exact
        x0 = x0 - x0.mean(axis=0)
    else:
        shift = np.zeros(p.t0)
    return PanelBlocks(x1=x1, x0=x0, y0_post=y0_post, y1_post=y1_post, centering=shift)


def to_long_rows(p):
    """Canonical long-format rows (unit, time, outcome), unit-major order."""
    rows = []
    for i, unit in enumerate(p.unit_ids):
        for j, time_label in enumerate(p.time_ids):
            rows.append((unit, time_label, p.outcomes[i, j]))
    return rows


def panel_manifest(p):
    """JSON-serializable description of the panel layout."""
    return {
        "n_units": p.n_units,
        "n_periods": p.n_periods,
        "t0": p.t0,
        "treated_index": p.treated_index,
        "treated_unit": p.unit_ids[p.treated_index],
        "unit_ids": list(p.unit_ids),
        "time_ids": [str(v) for v in p.time_ids],
    }


def write_panel(p, out_dir):
    """Write the panel as a JSON manifest plus a dense CSV matrix."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "panel_manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(panel_manifest(p), fh, indent=2, sort_keys=True)
        fh.write("\n")
    matrix_path = os.path.join(out_dir, "outcomes.csv")
    with open(matrix_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit"] + [str(v) for v in p.time_ids])
        for i, unit in enumerate(p.unit_ids):
            writer.writerow([unit] + [format(v, ".17g") for v in p.outcomes[i]])
    return manifest_path, matrix_path
