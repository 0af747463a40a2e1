"""Versioned, atomically replaced manifest for the direct tensor store.

Layout (JSON)::

    {
      "format": "offloadkit.extent-manifest",
      "version": 1,
      "devices": [{"path": str, "capacity_bytes": int, "kind": str}, ...],
      "cursors": [int, ...],               # next free byte per device
      "abandoned_bytes": int,              # extents orphaned by growth rewrites
      "tensors": {
        key: {"logical_length": int,
              "extents": [{"device": int, "offset": int, "length": int}, ...]}
      }
    }

``extents`` lists what was allocated for the key. The manifest is written to
a temporary file in the same directory, fsynced and renamed over the old one,
so a reader sees either the previous or the new state.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from ..errors import InvalidArgument

FORMAT = "offloadkit.extent-manifest"
VERSION = 1


def write_manifest(path: str | os.PathLike, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(doc, format=FORMAT, version=VERSION)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(body, f, indent=1, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path: str | os.PathLike) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise InvalidArgument(f"{path}: not an extent manifest")
    if doc.get("version") != VERSION:
        raise InvalidArgument(f"{path}: unsupported manifest version {doc.get('version')}")
    return doc
