"""CSV/JSON serialization helpers.

Floats are written with Python's shortest round-trip repr so files parse back
to bit-identical doubles; CSV follows RFC 4180 quoting; JSON keys are sorted
so reruns produce byte-identical files.
"""

import csv
import hashlib
import json

import numpy as np


def fmt(x):
    return repr(float(x))


def write_csv(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in rows:
            w.writerow(row)


def write_matrix_csv(path, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    write_csv(path, ([fmt(v) for v in row] for row in M))


def read_matrix_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append([float(v) for v in row])
    return np.asarray(rows, dtype=float)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def config_hash(obj):
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
