"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MVA1"
    config_len, config_len bytes of UTF-8 ``key=value`` lines
    tensor_count
    per tensor: name_len, name, rank, rank extents, prod(extents) float32 LE
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedFileError
from .layers import MambaVA, configs_from_items
from .tensor import Tensor

MAGIC = b"MVA1"
_U32 = struct.Struct("<I")


def _config_bytes(config: dict[str, str]) -> bytes:
    lines = []
    for key, value in config.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise FormatError(f"config entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def save_checkpoint(path, config: dict[str, str], tensors: dict[str, np.ndarray]):
    parts = [MAGIC]
    blob = _config_bytes(config)
    parts += [_U32.pack(len(blob)), blob, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: file ends inside {what} at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    r = _Reader(raw, path)
    r.pos = 4
    blob = r.take(r.u32("config length"), "config block")
    config = {}
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: config block is not UTF-8") from None
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed config line {line!r}")
        config[key] = value
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return config, tensors


def save_model(path, model: MambaVA, extra_config=None, extra_tensors=None):
    config = model.config_items()
    config.update({k: str(v) for k, v in (extra_config or {}).items()})
    tensors = {name: t.data for name, t in model.params.items()}
    tensors.update(extra_tensors or {})
    save_checkpoint(path, config, tensors)


def load_model(path, expect=None):
    """Load a model checkpoint.

    Returns ``(model, config, extra_tensors)``, where ``extra_tensors``
    holds anything that is not a model parameter (e.g. optimizer state).
    ``expect = (TcnConfig, MambaConfig)`` checks the stored tensors against
    a caller's configuration instead of the one in the file.
    """
    config, tensors = load_checkpoint(path)
    tcn, mamba = expect if expect is not None else configs_from_items(config)
    params = {k: Tensor(v) for k, v in tensors.items() if not k.startswith(("adam.", "best."))}
    extras = {k: v for k, v in tensors.items() if k.startswith(("adam.", "best."))}
    return MambaVA(tcn, mamba, params), config, extras
