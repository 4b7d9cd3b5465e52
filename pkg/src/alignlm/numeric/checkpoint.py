"""Checkpoint container and its on-disk format.

Layout (all integers little-endian)::

    b"ALCK"            magic
    uint32             format version
    uint64             header length H
    H bytes            UTF-8 JSON header (sorted keys, no whitespace)
    payload            raw little-endian tensor bytes, concatenated

The header holds ``version``, ``stage``, ``config_hash``, ``model_config``
and a ``tensors`` list with ``name, shape, dtype, trainable, offset,
nbytes`` for each entry; offsets are relative to the start of the payload.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError
from .params import ParamSet

MAGIC = b"ALCK"
FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


@dataclass
class Checkpoint:
    stage: str
    params: ParamSet
    config_hash: str = ""
    model_config: dict = field(default_factory=dict)
    # in-memory training history; not serialised
    log: list = field(default_factory=list, compare=False, repr=False)

    def to_bytes(self):
        entries = []
        chunks = []
        offset = 0
        for name, value in self.params.items():
            code = "f8" if value.dtype == np.float64 else "f4"
            raw = np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes()
            entries.append({
                "name": name,
                "shape": list(value.shape),
                "dtype": code,
                "trainable": self.params.is_trainable(name),
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
        header = {
            "version": FORMAT_VERSION,
            "stage": self.stage,
            "config_hash": self.config_hash,
            "model_config": self.model_config,
            "tensors": entries,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<IQ", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = 4 + struct.calcsize("<IQ")
        try:
            header = json.loads(blob[start:start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        if header.get("version") != version:
            raise CheckpointError("header/preamble version mismatch")
        payload = memoryview(blob)[start + hlen:]
        params = ParamSet()
        for e in header["tensors"]:
            dtype = _DTYPES.get(e["dtype"])
            if dtype is None:
                raise CheckpointError(f"unknown dtype {e['dtype']!r} for {e['name']}")
            end = e["offset"] + e["nbytes"]
            if end > len(payload):
                raise CheckpointError(f"truncated payload for {e['name']}")
            arr = np.frombuffer(payload[e["offset"]:end], dtype=dtype).reshape(e["shape"])
            params.add(e["name"], arr.astype(dtype.newbyteorder("="), copy=True), e["trainable"])
        return cls(
            stage=header["stage"],
            params=params,
            config_hash=header["config_hash"],
            model_config=header["model_config"],
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self):
        """Short content id of the serialised checkpoint."""
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]
