"""Single-file container for named arrays: checkpoints and weight archives.

Layout (all integers little-endian):

    bytes 0..7    magic "SINDIFF1"
    bytes 8..15   u64 length of the metadata document
    ...           metadata JSON (UTF-8, sorted keys)
    ...           payload: raw row-major little-endian array bytes

The metadata carries ``format_version``, a config echo, the step counter,
creation info, a sha256 over the payload, and an index of
(name, dtype, shape, offset, nbytes) per array.  Loading verifies the magic,
the version, the payload hash, and (for checkpoints) every array shape
against the embedded configuration.
"""

import hashlib
import json
import struct

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .errors import (
    ArrayShapeError,
    BadMagicError,
    HashMismatchError,
    MissingArrayError,
    VersionMismatchError,
)
from .training import Checkpoint, TrainConfig

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "save_arrays",
    "load_arrays",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_content_hash",
]

MAGIC = b"SINDIFF1"
FORMAT_VERSION = 1
CREATED_BY = "patchdiff 0.1.0"

_DTYPE_TAGS = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "|u1"}
_TAG_FOR_KIND = {("f", 4): "f32", ("f", 8): "f64", ("i", 8): "i64",
                 ("u", 1): "u8"}


def _dtype_tag(arr: np.ndarray) -> str:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _TAG_FOR_KIND:
        raise ValueError(f"unsupported array dtype {arr.dtype}")
    return _TAG_FOR_KIND[key]


def _payload_and_index(arrays: dict):
    index = []
    chunks = []
    offset = 0
    for name in arrays:
        arr = np.asarray(arrays[name])
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag]).tobytes()
        index.append({"name": name, "dtype": tag,
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), index


def save_arrays(path, arrays: dict, metadata: dict) -> None:
    """Write named arrays plus caller metadata; names must be unique."""
    if len(set(arrays)) != len(arrays):
        raise ValueError("array names must be unique")
    payload, index = _payload_and_index(arrays)
    meta = dict(metadata)
    meta.update({
        "format_version": FORMAT_VERSION,
        "created_by": CREATED_BY,
        "content_hash": "sha256:" + hashlib.sha256(payload).hexdigest(),
        "arrays": index,
    })
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_arrays(path):
    """Read back (arrays, metadata); verifies magic, version and payload hash."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head != MAGIC:
            raise BadMagicError(
                f"{path}: expected magic {MAGIC!r}, found {head!r}"
            )
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode())
        payload = fh.read()
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format_version {version} not supported "
            f"(expected {FORMAT_VERSION})"
        )
    expected = sum(e["nbytes"] for e in meta["arrays"])
    if len(payload) != expected:
        raise HashMismatchError(
            f"{path}: payload is {len(payload)} bytes, index says {expected} "
            "(truncated or padded file)"
        )
    digest = "sha256:" + hashlib.sha256(payload).hexdigest()
    if digest != meta["content_hash"]:
        raise HashMismatchError(
            f"{path}: payload hash {digest} != recorded {meta['content_hash']}"
        )
    arrays = {}
    for entry in meta["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPE_TAGS[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, meta


def checkpoint_content_hash(checkpoint: Checkpoint) -> str:
    """Hash of the array payload exactly as `save_checkpoint` would write it."""
    payload, _ = _payload_and_index(_checkpoint_arrays(checkpoint))
    return "sha256:" + hashlib.sha256(payload).hexdigest()


def _checkpoint_arrays(ckpt: Checkpoint) -> dict:
    arrays = {}
    for name, arr in ckpt.raw_params.items():
        arrays[f"raw/{name}"] = arr
    for name, arr in ckpt.ema_params.items():
        arrays[f"ema/{name}"] = arr
    return arrays


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    save_arrays(path, _checkpoint_arrays(checkpoint), {
        "kind": "checkpoint",
        "step": checkpoint.step,
        "denoiser_config": checkpoint.denoiser_config.to_dict(),
        "schedule_params": list(checkpoint.schedule_params),
        "train_config": checkpoint.train_config.to_dict(),
    })


def load_checkpoint(path) -> Checkpoint:
    """Load and validate a checkpoint archive.

    Every parameter array must match the shape the embedded config dictates;
    mismatches name the offending array.
    """
    arrays, meta = load_arrays(path)
    config = DenoiserConfig.from_dict(meta["denoiser_config"])
    expected = {name: tuple(p.shape)
                for name, p in Denoiser(config).named_parameters()}
    raw, ema = {}, {}
    for prefix, store in (("raw/", raw), ("ema/", ema)):
        for name, shape in expected.items():
            key = prefix + name
            if key not in arrays:
                raise MissingArrayError(key)
            arr = arrays[key]
            if tuple(arr.shape) != shape:
                raise ArrayShapeError(key, shape, arr.shape)
            store[name] = arr.astype(np.float32)
    t, beta_start, beta_end = meta["schedule_params"]
    return Checkpoint(
        denoiser_config=config,
        schedule_params=(int(t), float(beta_start), float(beta_end)),
        raw_params=raw,
        ema_params=ema,
        step=int(meta["step"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
    )
