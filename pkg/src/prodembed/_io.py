"""Checkpoint container, config hashing and no-overwrite file helpers."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import zipfile

import numpy as np

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


def config_hash(config) -> str:
    """Stable short hash of a dataclass or mapping."""
    payload = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config)
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_container(path, meta: dict, arrays: dict) -> None:
    """Write ``meta`` (JSON) and named arrays into one zip file.

    Entries carry a fixed timestamp so identical contents give identical bytes.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_FIXED_DATE)
        body = dict(meta, format_version=FORMAT_VERSION, arrays=sorted(arrays))
        zf.writestr(info, json.dumps(body, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_FIXED_DATE), buf.getvalue())


def load_container(path) -> tuple[dict, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {
            name: np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            for name in meta["arrays"]
        }
    return meta, arrays


def ensure_fresh(path) -> None:
    """Refuse to overwrite an existing output."""
    if os.path.exists(path):
        raise FileExistsError(f"refusing to overwrite existing output {path}")
