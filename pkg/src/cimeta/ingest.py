"""CSV ingestion and atomic report writing.

Input files are UTF-8, comma-separated, ``.`` decimal.  Columns: ``source``
(integer, 0 = target), ``treatment`` (label, empty for target), ``outcome``
(numeric, empty for target), one column per covariate (empty = missing) and
optionally ``survey_weight``, ``stratum`` and ``psu``.
"""

import csv
import io
import os
import tempfile

import numpy as np

from .data import Dataset, validate
from .errors import ConfigError, DataError

RESERVED = ("source", "treatment", "outcome")
DESIGN = ("survey_weight", "stratum", "psu")


def _number(text, column, row, integer=False):
    try:
        return int(text) if integer else float(text)
    except ValueError:
        kind = "integer" if integer else "numeric"
        raise DataError(f"row {row}, column '{column}': expected a {kind} value, got {text!r}",
                        module="ingest") from None


def _labels(values):
    """Treatment labels become integers when every non-empty label is an integer."""
    present = [v for v in values if v is not None]
    try:
        converted = {v: int(v) for v in present}
    except ValueError:
        return values
    if all(str(converted[v]) == v for v in present):
        return [None if v is None else converted[v] for v in values]
    return values


def read_csv(path, covariates=None, outcome_type="continuous"):
    """Load a composite dataset; ``covariates`` defaults to every non-reserved column."""
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open input {path}: {exc.strerror}", module="ingest") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (no header)", module="ingest") from None
        rows = list(reader)
    for name in RESERVED:
        if name not in header:
            raise DataError(f"{path}: missing required column '{name}'", module="ingest")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header", module="ingest")
    if covariates is None:
        covariates = [h for h in header if h not in RESERVED + DESIGN]
    for name in covariates:
        if name not in header:
            raise DataError(f"{path}: covariate column '{name}' not found", module="ingest")
    if not covariates:
        raise DataError(f"{path}: no covariate columns", module="ingest")
    col = {h: j for j, h in enumerate(header)}

    n = len(rows)
    source = np.zeros(n, dtype=np.int64)
    outcome = np.full(n, np.nan)
    cov = np.full((n, len(covariates)), np.nan)
    weight = np.ones(n)
    treatment = [None] * n
    stratum = [None] * n if "stratum" in col else None
    psu = [None] * n if "psu" in col else None
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise DataError(f"row {line}: {len(row)} fields, header has {len(header)}", module="ingest")
        cell = {h: row[j].strip() for h, j in col.items()}
        if cell["source"] == "":
            raise DataError(f"row {line}, column 'source': empty", module="ingest")
        source[i] = _number(cell["source"], "source", line, integer=True)
        treatment[i] = cell["treatment"] or None
        if cell["outcome"]:
            outcome[i] = _number(cell["outcome"], "outcome", line)
            if outcome_type == "binary" and outcome[i] not in (0.0, 1.0):
                raise DataError(f"row {line}: binary outcome must be 0 or 1", module="ingest")
        for j, name in enumerate(covariates):
            if cell[name]:
                cov[i, j] = _number(cell[name], name, line)
        if "survey_weight" in col and cell["survey_weight"]:
            weight[i] = _number(cell["survey_weight"], "survey_weight", line)
        if stratum is not None:
            stratum[i] = cell["stratum"] or None
        if psu is not None:
            psu[i] = cell["psu"] or None
    if n == 0:
        raise DataError(f"{path}: no data rows", module="ingest")
    dataset = Dataset.from_arrays(source, cov, treatment=_labels(treatment), outcome=outcome,
                                  covariate_names=tuple(covariates), survey_weight=weight,
                                  stratum=stratum, psu=psu)
    report = validate(dataset)
    if not report.ok:
        raise DataError(f"{path}: invalid composite data\n{report}", module="ingest",
                        hint="see the listed violations (record indices are 0-based data rows)")
    return dataset


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset_csv(dataset, path):
    """Serialise a dataset in the ingestion schema (used for fixtures and round trips)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["source", "treatment", "outcome", *dataset.covariate_names, "survey_weight"]
    if dataset.has_design:
        header += ["stratum", "psu"]
    writer.writerow(header)
    for i in range(dataset.n):
        code = dataset.treatment[i]
        row = [int(dataset.source[i]), "" if code < 0 else dataset.treatment_levels[code],
               "" if np.isnan(dataset.outcome[i]) else repr(float(dataset.outcome[i]))]
        row += ["" if np.isnan(v) else repr(float(v)) for v in dataset.covariates[i]]
        row.append(repr(float(dataset.survey_weight[i])))
        if dataset.has_design:
            row += [dataset.stratum[i], dataset.psu[i]]
        writer.writerow(row)
    atomic_write(path, buf.getvalue())
