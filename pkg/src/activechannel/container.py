"""On-disk container: a directory holding ``manifest.json`` plus one raw
little-endian float64 file per named array (row-major, no header).

``manifest.json`` carries ``format``/``format_version``, ``dtype="f8"``,
``byte_order="little"``, ``layout="row-major"``, an ``arrays`` table
(name -> ``{"file", "shape"}``) and whatever kind-specific fields the
writer adds.
"""
import json
import os

import numpy as np

from .errors import IngestionError

MAGIC = "activechannel-container"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def write_container(path, fields, arrays):
    """Write ``arrays`` (name -> ndarray) and the manifest ``fields`` to ``path``.

    Files are named ``<name>.f8`` so array names must be filesystem-safe.
    """
    os.makedirs(path, exist_ok=True)
    table = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fname = f"{name}.f8"
        with open(os.path.join(path, fname), "wb") as f:
            f.write(arr.tobytes(order="C"))
        table[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "format": MAGIC,
        "format_version": FORMAT_VERSION,
        "dtype": "f8",
        "byte_order": "little",
        "layout": "row-major",
        **fields,
        "arrays": table,
    }
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def read_manifest(path):
    mpath = os.path.join(path, MANIFEST)
    if not os.path.isfile(mpath):
        raise IngestionError(f"no {MANIFEST} in {path!r}", field="manifest")
    try:
        with open(mpath, encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(f"unreadable: {exc}", field="manifest") from exc
    if manifest.get("format") != MAGIC:
        raise IngestionError(f"bad magic {manifest.get('format')!r}", field="format")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IngestionError(f"unsupported version {manifest.get('format_version')!r}", field="format_version")
    for key, want in (("dtype", "f8"), ("byte_order", "little"), ("layout", "row-major")):
        if manifest.get(key) != want:
            raise IngestionError(f"expected {want!r}, got {manifest.get(key)!r}", field=key)
    if not isinstance(manifest.get("arrays"), dict):
        raise IngestionError("missing array table", field="arrays")
    return manifest


def read_container(path, expected_shapes=None):
    """Load every array listed in the manifest.

    ``expected_shapes`` (name -> shape) lets the caller check arrays against
    shapes implied by other manifest fields, e.g. image ``m x n``.
    """
    manifest = read_manifest(path)
    arrays = {}
    for name, entry in manifest["arrays"].items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            fname = entry["file"]
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError("malformed array entry", field=name) from exc
        if expected_shapes and name in expected_shapes and tuple(expected_shapes[name]) != shape:
            raise IngestionError(f"declared shape {shape} contradicts manifest dimensions "
                                 f"{tuple(expected_shapes[name])}", field=name)
        fpath = os.path.join(path, fname)
        if not os.path.isfile(fpath):
            raise IngestionError(f"missing file {fname!r}", field=name)
        nbytes = os.path.getsize(fpath)
        want = 8 * int(np.prod(shape, dtype=np.int64))
        if nbytes != want:
            raise IngestionError(f"file holds {nbytes} bytes, shape {shape} needs {want}", field=name)
        arrays[name] = np.fromfile(fpath, dtype="<f8").reshape(shape).astype(float)
    if expected_shapes:
        missing = sorted(set(expected_shapes) - set(arrays))
        if missing:
            raise IngestionError("array listed by manifest fields but absent", field=missing[0])
    return manifest, arrays
