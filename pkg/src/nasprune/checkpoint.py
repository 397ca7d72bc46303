"""Checkpoint directory: a JSON ``manifest`` plus raw little-endian float32 ``tensors.bin``."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CorruptTableError, SchemaVersionError, TruncatedFileError
from .lora import LoraAdapterSet
from .model import SuperNetConfig, SuperNetWeights

SCHEMA_VERSION = 1
MANIFEST = "manifest"
TENSORS = "tensors.bin"
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    weights: SuperNetWeights
    manifest: dict = field(default_factory=dict)

    @property
    def stage(self):
        return self.manifest.get("stage", "init")

    def meta(self, key, default=None):
        return self.manifest.get(key, default)


def _tensor_items(w):
    items = [(k, w.params[k]) for k in sorted(w.params)]
    if w.lora is not None:
        items += [(f"lora.{k}", w.lora.params[k]) for k in sorted(w.lora.params)]
    return items


def save_checkpoint(path, w, **meta):
    """Write ``w`` and JSON-serialisable ``meta`` sections to directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    with open(path / TENSORS, "wb") as fh:
        for name, arr in _tensor_items(w):
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            fh.write(raw)
            table.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
            offset += len(raw)
    manifest = {"schema_version": SCHEMA_VERSION, "supernet": w.cfg.to_dict(),
                "block_scores": None if w.block_scores is None else [float(x) for x in w.block_scores],
                "lora": None if w.lora is None else w.lora.to_dict()}
    manifest.update(meta)
    manifest["tensors"] = table
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise CheckpointError(f"no checkpoint manifest in {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptTableError(f"manifest in {path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise CorruptTableError(f"manifest in {path} is not an object")
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported checkpoint schema version {version!r} "
                                 f"(this build reads {SCHEMA_VERSION})")
    return manifest


def _check_table(table, size):
    if not isinstance(table, list):
        raise CorruptTableError("tensor table is missing or not a list")
    names = set()
    for i, e in enumerate(table):
        try:
            name, shape, off, length = e["name"], e["shape"], int(e["offset"]), int(e["length"])
        except (KeyError, TypeError, ValueError) as err:
            raise CorruptTableError(f"tensor table entry {i} is malformed") from err
        if name in names:
            raise CorruptTableError(f"tensor {name!r} appears twice in the table")
        names.add(name)
        if (not isinstance(shape, list) or any(int(s) != s or s < 0 for s in shape)
                or off < 0 or length != math.prod(shape) * _DTYPE.itemsize):
            raise CorruptTableError(f"tensor {name!r}: shape {shape} disagrees with length {length}")
        if off + length > size:
            raise TruncatedFileError(f"tensor {name!r} needs bytes [{off}, {off + length}) "
                                     f"but {TENSORS} has only {size}")


def load_checkpoint(path):
    """Validate the manifest and tensor table, then read every tensor."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        cfg = SuperNetConfig.from_dict(manifest["supernet"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptTableError(f"manifest has no valid super-network config: {e}") from e
    bin_path = path / TENSORS
    if not bin_path.exists():
        raise TruncatedFileError(f"{bin_path} is missing")
    table = manifest.get("tensors")
    _check_table(table, bin_path.stat().st_size)
    raw = bin_path.read_bytes()
    arrays = {e["name"]: np.frombuffer(raw, dtype=_DTYPE, count=math.prod(e["shape"]),
                                       offset=int(e["offset"])).reshape(e["shape"]).astype(np.float32)
              for e in table}
    params = {k: v for k, v in arrays.items() if not k.startswith("lora.")}
    expected = cfg.param_shapes()
    if set(params) != set(expected) or any(tuple(params[k].shape) != expected[k] for k in expected):
        raise CorruptTableError("tensor table does not match the super-network config")
    lora = None
    if manifest.get("lora"):
        ld = manifest["lora"]
        lora = LoraAdapterSet(int(ld["rank"]), float(ld["alpha"]), float(ld["dropout"]), tuple(ld["sites"]),
                              {k[5:]: v for k, v in arrays.items() if k.startswith("lora.")})
    scores = manifest.get("block_scores")
    w = SuperNetWeights(cfg, params, None if scores is None else np.asarray(scores, dtype=np.float64), lora)
    return Checkpoint(w, manifest)
