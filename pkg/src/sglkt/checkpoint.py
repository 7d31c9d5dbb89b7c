"""Binary checkpoint files.

Layout::

    8 bytes   magic b"SGLKTCK\\x01"
    8 bytes   little-endian uint64 header length n
    n bytes   UTF-8 JSON header
    rest      little-endian float64 arrays, back to back

The header holds ``version``, ``config``, ``epoch``, ``adam_step``,
``vocab_size``, ``d_v``, ``rng`` and ``arrays``: a list of
``{"name", "shape", "offset"}`` with ``offset`` counted in float64 items.
Array names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ParseError, VersionError

MAGIC = b"SGLKTCK\x01"
VERSION = 1


def save_checkpoint(path, arrays, meta):
    """Write ``arrays`` (name -> ndarray) and ``meta`` atomically (temp file + rename)."""
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = dict(meta, version=VERSION, arrays=entries)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for arr in arrays.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(arrays, header)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        if raw[:7] == MAGIC[:7]:
            raise VersionError(f"{path}: checkpoint format {raw[7]} is not supported (expected {VERSION})")
        raise ParseError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise VersionError(f"{path}: checkpoint version {header.get('version')} is not supported")
    data = np.frombuffer(raw, dtype="<f8", offset=16 + n) if len(raw) > 16 + n else np.zeros(0)
    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > data.size:
            raise ParseError(f"{path}: array {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = data[start : start + size].reshape(entry["shape"]).astype(np.float64)
    return arrays, header
