"""CSV output and run manifests.

CSV files follow RFC 4180 (CRLF line ends, minimal quoting); floats are
written with 17 significant digits so they read back bit-identically.
The manifest is written last and atomically.
"""

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import MicroMacroError

MANIFEST_NAME = "manifest.json"


class OutputError(MicroMacroError, OSError):
    pass


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass
class Table:
    """One CSV file: a header and rows of values."""

    name: str
    header: list
    rows: list = field(default_factory=list)

    def add(self, *values):
        if len(values) != len(self.header):
            raise ValueError(f"{self.name}: row has {len(values)} values, header has {len(self.header)}")
        self.rows.append(values)


def write_csv(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for row in rows:
                w.writerow([format_value(v) for v in row])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc


def read_csv(path):
    """Header and rows (as strings) of a CSV file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path, doc):
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    version: str
    duration_s: float
    outputs: dict  # file name -> sha256

    def to_dict(self):
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "version": self.version,
            "duration_s": self.duration_s,
            "outputs": self.outputs,
        }


def emit_results(tables, out_dir, manifest=None, extra_files=()):
    """Write each :class:`Table` as ``<name>.csv`` in ``out_dir``, then the
    manifest (if given) with checksums of every written file.

    ``extra_files`` lists names of files already written to ``out_dir`` that
    should be checksummed too.  Returns ``{file name: sha256}``.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc
    sums = {}
    for table in tables:
        name = table.name if table.name.endswith(".csv") else f"{table.name}.csv"
        path = os.path.join(out_dir, name)
        write_csv(path, table.header, table.rows)
        sums[name] = sha256_file(path)
    for name in extra_files:
        sums[name] = sha256_file(os.path.join(out_dir, name))
    if manifest is not None:
        manifest.outputs = dict(sorted(sums.items()))
        write_json_atomic(os.path.join(out_dir, MANIFEST_NAME), manifest.to_dict())
    return sums
