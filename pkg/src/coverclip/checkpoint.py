"""Checkpoint container.

Byte layout::

    8 bytes   magic  b"CCLPCKPT"
    8 bytes   uint64 little-endian length N of the JSON header
    N bytes   UTF-8 JSON header
    ...       float64 little-endian arrays, concatenated in header order

The header carries ``format_version``, ``model_config``, ``step`` and an
``arrays`` table of ``{section, name, shape, offset, count}`` records, where
``offset`` is counted in bytes from the start of the data region. Sections
group arrays so that inference loaders can read ``encoders`` and skip
``heads``, ``aux`` and ``optimizer``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"CCLPCKPT"
FORMAT_VERSION = 1
SECTION_ORDER = ("encoders", "heads", "aux", "optimizer")

LAYOUT_DOC = ("magic(8) | uint64-le header_len | json header | float64-le arrays "
              "concatenated in 'arrays' order; offset is bytes from data start")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, model_config: dict,
                    sections: Mapping[str, Mapping[str, np.ndarray]],
                    step: int = 0, meta: dict | None = None) -> Path:
    path = Path(path)
    records, blobs, offset = [], [], 0
    ordered = [s for s in SECTION_ORDER if s in sections] + \
        [s for s in sections if s not in SECTION_ORDER]
    for section in ordered:
        for name, arr in sections[section].items():
            a = np.asarray(arr, dtype="<f8")
            records.append({"section": section, "name": name, "shape": list(a.shape),
                            "offset": offset, "count": int(a.size)})
            blobs.append(a.tobytes())
            offset += a.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "layout": LAYOUT_DOC,
        "model_config": model_config,
        "step": int(step),
        "meta": meta or {},
        "arrays": records,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def read_header(path: str | os.PathLike) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    return header, 16 + n


def load_checkpoint(path: str | os.PathLike, sections: Iterable[str] | None = None
                    ) -> tuple[dict, dict[str, "OrderedDict[str, np.ndarray]"]]:
    """Return ``(header, {section: {name: array}})``, reading only ``sections``."""
    header, start = read_header(path)
    wanted = None if sections is None else set(sections)
    out: dict[str, OrderedDict] = {}
    with open(path, "rb") as fh:
        for rec in header["arrays"]:
            if wanted is not None and rec["section"] not in wanted:
                continue
            fh.seek(start + rec["offset"])
            a = np.frombuffer(fh.read(8 * rec["count"]), dtype="<f8").astype(np.float64)
            out.setdefault(rec["section"], OrderedDict())[rec["name"]] = a.reshape(rec["shape"])
    return header, out


def strip_sections(src: str | os.PathLike, dst: str | os.PathLike,
                   keep: Iterable[str] = ("encoders",)) -> Path:
    """Copy a checkpoint keeping only the named sections (e.g. drop guidance heads)."""
    header, arrays = load_checkpoint(src, sections=keep)
    return save_checkpoint(dst, header["model_config"], arrays, header["step"], header["meta"])
